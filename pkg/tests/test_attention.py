import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure tale package importable
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from tale import autodiff as ad  # noqa: E402
from tale.attention import (  # noqa: E402
    ProjectionHeads,
    SequenceContext,
    aggregate,
    embedding_tensor,
    encode_events,
    encode_history,
)
from tale.errors import EmptyHistoryError  # noqa: E402
from tale.events import EventSequence, to_model_time  # noqa: E402
from tale.schemas import TimeWeightConfig  # noqa: E402
from tale.temporal import PIECEWISE_EDGES_DAYS, ConstantWeight, build_weight_fn  # noqa: E402
from tale.vocab import random_vocabulary  # noqa: E402

D = 8


def reference_attention(q, k, v, w=None):
    scores = (q @ k.T) * (1.0 / np.sqrt(q.shape[1]))
    if w is not None:
        scores = scores * w
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)) @ v


def random_case(seed, variant="constant", n_codes=6):
    rng = np.random.default_rng(seed)
    vocab = random_vocabulary(n_codes, D, seed)
    heads = ProjectionHeads(vocab.d_emb, D, rng)
    wfn = build_weight_fn(TimeWeightConfig(variant=variant, order=2), rng)
    if variant == "polynomial":
        wfn.coefficients.data = rng.normal(size=wfn.coefficients.shape)
    m = int(rng.integers(1, 13))
    times = np.sort(rng.uniform(0, 3, size=m))
    seq = EventSequence(f"p{seed}", times, rng.integers(n_codes, size=m), [], 3.0)
    return vocab, heads, wfn, seq


def context(vocab, heads, wfn, seq, window=1024):
    return SequenceContext(seq, embedding_tensor(vocab), heads, wfn, window)


def test_constant_weight_matches_reference_bitwise():
    for seed in range(100):
        vocab, heads, wfn, seq = random_case(seed)
        ctx = context(vocab, heads, wfn, seq)
        got = ctx.per_event(0, len(seq)).data
        expected = reference_attention(ctx.queries.data, ctx.keys.data, ctx.values.data)
        assert np.array_equal(got, expected), f"seed {seed}"


def test_time_weighted_attention_matches_reference():
    for seed in range(100):
        vocab, heads, wfn, seq = random_case(seed, "polynomial")
        ctx = context(vocab, heads, wfn, seq)
        w = wfn.weights(np.abs(seq.times[:, None] - seq.times[None, :])).data
        expected = reference_attention(ctx.queries.data, ctx.keys.data, ctx.values.data, w)
        np.testing.assert_allclose(ctx.per_event(0, len(seq)).data, expected, rtol=1e-12, atol=1e-14)


def test_piecewise_attention_bins_calendar_gaps_far_from_origin():
    vocab, heads, _, _ = random_case(11)
    wfn = build_weight_fn(TimeWeightConfig(variant="piecewise"), np.random.default_rng(0))
    wfn.logits.data = np.linspace(-3.0, 3.0, 7)
    days = np.array([700.0, 704.0, 710.0, 760.0, 1500.0])
    seq = EventSequence("late", to_model_time(days), [0, 1, 2, 3, 4], [], float(to_model_time(1600.0)))
    ctx = context(vocab, heads, wfn, seq)
    bins = np.searchsorted(PIECEWISE_EDGES_DAYS, np.abs(days[:, None] - days[None, :]), side="right") - 1
    assert bins[2, 0] == 1 and bins[3, 0] == 2
    w = 1.0 / (1.0 + np.exp(-wfn.logits.data[bins]))
    expected = reference_attention(ctx.queries.data, ctx.keys.data, ctx.values.data, w)
    np.testing.assert_allclose(ctx.per_event(0, len(seq)).data, expected, rtol=1e-12, atol=1e-14)


def test_untrained_heads_attend_most_to_own_code():
    diagonal = []
    for seed in range(20):
        vocab = random_vocabulary(6, D, seed)
        heads = ProjectionHeads(vocab.d_emb, D, np.random.default_rng(seed))
        for q_layer, k_layer in zip(heads.q.layers, heads.k.layers):
            np.testing.assert_array_equal(q_layer.weight.data, k_layer.weight.data)
        seq = EventSequence("codes", np.zeros(6), np.arange(6), [], 1.0)
        logits = context(vocab, heads, ConstantWeight(), seq).logits.data
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        diagonal.append(np.mean(np.diag(weights)))
    assert np.mean(diagonal) > 2.0 / 6


def test_single_event_encodes_its_value():
    vocab, heads, wfn, _ = random_case(0)
    seq = EventSequence("one", [0.5], [2], [], 1.0)
    ctx = context(vocab, heads, wfn, seq)
    encoding = encode_history(ctx, 1.0, ad.parameter(np.ones((D, 1))))
    np.testing.assert_array_equal(encoding.per_event.data, ctx.values.data)
    np.testing.assert_array_equal(encoding.attention_weights.data, [[1.0]])
    np.testing.assert_array_equal(encoding.unified.data, ctx.values.data)


def test_identical_events_get_identical_encodings():
    vocab, heads, wfn, _ = random_case(1, "polynomial")
    seq = EventSequence("same", [0.2, 0.2, 0.2], [4, 4, 4], [], 1.0)
    per_event = encode_events(seq, 1.0, vocab, heads, wfn)
    assert per_event.shape == (3, D)
    np.testing.assert_allclose(per_event.data[0], per_event.data[1], rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(per_event.data[1], per_event.data[2], rtol=1e-14, atol=1e-15)


def test_zero_base_query_gives_uniform_weights():
    vocab, heads, wfn, seq = random_case(3, "polynomial")
    seq = seq.with_events([0.0, 0.5, 1.0, 2.0], [0, 1, 2, 3])
    ctx = context(vocab, heads, wfn, seq)
    encoding = encode_history(ctx, 2.5, ad.constant(np.zeros((D, 1))))
    np.testing.assert_allclose(encoding.attention_weights.data, np.full((1, 4), 0.25), atol=1e-15)


def test_decaying_weight_prefers_recent_event():
    vocab, heads, wfn, _ = random_case(4, "polynomial")
    wfn.coefficients.data = np.array([[2.0], [-1.0], [0.0]])
    seq = EventSequence("decay", [0.0, 1.0], [5, 5], [], 3.0)
    ctx = context(vocab, heads, wfn, seq)
    per_event = ctx.per_event(0, 2)
    q_base = ad.constant(per_event.data[0].reshape(D, 1))
    _, alpha = aggregate(per_event, seq.times, 3.0, q_base, wfn)
    assert alpha.data[0, 1] > alpha.data[0, 0]


def test_window_keeps_most_recent_events():
    vocab, heads, wfn, _ = random_case(5)
    seq = EventSequence("long", np.linspace(0, 2, 6), [0, 1, 2, 3, 4, 5], [], 2.0)
    ctx = context(vocab, heads, wfn, seq, window=4)
    encoding = encode_history(ctx, 2.0, ad.constant(np.ones((D, 1))))
    assert encoding.bounds == (2, 6)
    assert encoding.attention_weights.shape == (1, 4)


def test_strict_history_excludes_events_at_query_time():
    vocab, heads, wfn, _ = random_case(6)
    seq = EventSequence("s", [0.0, 1.0, 1.0], [0, 1, 2], [], 2.0)
    ctx = context(vocab, heads, wfn, seq)
    assert ctx.bounds(1.0) == (0, 3)
    assert ctx.bounds(1.0, strict=True) == (0, 1)
    with pytest.raises(EmptyHistoryError):
        ctx.bounds(0.0, strict=True)
    with pytest.raises(EmptyHistoryError):
        ctx.bounds(-0.5)


def test_time_shift_invariance():
    vocab, heads, wfn, seq = random_case(7, "polynomial")
    q_base = ad.constant(np.random.default_rng(0).normal(size=(D, 1)))
    shifted = seq.with_events(seq.times + 1.7, seq.codes, horizon=seq.horizon + 1.7)
    h = encode_history(context(vocab, heads, wfn, seq), 3.0, q_base).unified.data
    h_shifted = encode_history(context(vocab, heads, wfn, shifted), 4.7, q_base).unified.data
    np.testing.assert_allclose(h, h_shifted, atol=1e-9)


def test_storage_order_at_equal_times_does_not_matter():
    vocab, heads, wfn, _ = random_case(8, "polynomial")
    q_base = ad.constant(np.random.default_rng(1).normal(size=(D, 1)))
    a = EventSequence("a", [0.0, 1.0, 1.0, 2.0], [0, 1, 2, 3], [], 3.0)
    b = EventSequence("b", [0.0, 1.0, 1.0, 2.0], [0, 2, 1, 3], [], 3.0)
    h_a = encode_history(context(vocab, heads, wfn, a), 2.5, q_base).unified.data
    h_b = encode_history(context(vocab, heads, wfn, b), 2.5, q_base).unified.data
    np.testing.assert_allclose(h_a, h_b, atol=1e-12)


def test_gradients_reach_projections_weights_and_base_query():
    vocab, heads, wfn, seq = random_case(9, "polynomial")
    seq = seq.with_events([0.0, 0.4, 0.9, 1.5], [0, 1, 0, 3])
    q_base = ad.parameter(np.random.default_rng(2).normal(size=(D, 1)) / np.sqrt(D))
    params = [*heads.named_parameters().values(), *wfn.named_parameters().values(), q_base]

    def f():
        h = encode_history(context(vocab, heads, wfn, seq), 2.0, q_base).unified
        return ad.sum(ad.mul(h, h))

    assert ad.grad_check(f, params) < 1e-4


def test_constant_weight_has_no_time_dependence():
    vocab, heads, _, seq = random_case(10)
    wfn = ConstantWeight()
    q_base = ad.constant(np.ones((D, 1)))
    seq = seq.with_events([0.0, 0.1, 0.2], [0, 1, 2])
    spread = seq.with_events([0.0, 1.5, 2.9], [0, 1, 2])
    h = encode_history(context(vocab, heads, wfn, seq), 3.0, q_base).unified.data
    h_spread = encode_history(context(vocab, heads, wfn, spread), 3.0, q_base).unified.data
    np.testing.assert_array_equal(h, h_spread)
