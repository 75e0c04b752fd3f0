import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure tale package importable
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from tale import autodiff as ad  # noqa: E402
from tale.errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    EmptyHistoryError,
    EventIndexError,
    StateError,
    WeightError,
)
from tale.events import EventSequence  # noqa: E402
from tale.model import (  # noqa: E402
    CORE_GROUPS,
    ModelState,
    add_task_head,
    auto_task_weight,
    code_probs,
    code_query_indices,
    focal_code_loss,
    intensities,
    intensity,
    loss_code,
    loss_components,
    loss_joint,
    loss_task,
    loss_time,
    next_code_target,
    parameter_groups,
    set_trainable,
    task_logits,
    task_prob,
    trainable_groups,
    weighted_bce,
)
from tale.schemas import LossConfig, RunConfig  # noqa: E402
from tale.tasks import TaskExample  # noqa: E402
from tale.vocab import random_vocabulary  # noqa: E402


def small_model(n_codes=5, variant="polynomial", n_demographics=2, seed=0, **loss):
    config = RunConfig.model_validate({
        "time_weight": {"variant": variant, "order": 2},
        "model": {"d": 8, "d_z": 4, "g_hidden": [8], "f_hidden": [8]},
        "loss": {"n_mc": 8, **loss},
        "train": {"seed": seed},
    })
    return ModelState(random_vocabulary(n_codes, 8, seed), config, n_demographics)


def constant_intensity(model, c):
    output = model.g_head.mlp.output_layer
    output.weight.data = np.zeros_like(output.weight.data)
    output.bias.data = np.full_like(output.bias.data, math.log(math.expm1(c)) if c > 0 else 0.0)


SEQ = EventSequence("p", [0.0, 0.4, 0.9, 0.9, 1.5, 2.2], [0, 1, 2, 3, 4, 1], [1.0, 0.5], 3.0)


def test_intensity_is_non_negative():
    model = small_model()
    for seed in range(5):
        rng = np.random.default_rng(seed)
        times = np.sort(rng.uniform(0, 3, size=8))
        seq = EventSequence("r", times, rng.integers(5, size=8), [0.0, 0.4], 3.0)
        lam = intensities(model, seq, np.linspace(times[0], 3.0, 10)).data
        assert np.all(lam >= 0)


def test_zeroed_intensity_head_gives_log_two():
    model = small_model()
    output = model.g_head.mlp.output_layer
    output.weight.data[:] = 0.0
    output.bias.data[:] = 0.0
    assert math.isclose(intensity(model, SEQ, 2.0).item(), math.log(2.0), rel_tol=1e-15)


def test_zeroed_code_head_gives_one_half():
    model = small_model()
    output = model.f_head.mlp.output_layer
    output.weight.data[:] = 0.0
    output.bias.data[:] = 0.0
    probs = code_probs(model, SEQ, 1.0)
    assert probs.shape == (5,)
    np.testing.assert_allclose(probs.data, 0.5)


def test_time_loss_closed_form_for_constant_intensity():
    model = small_model()
    constant_intensity(model, 0.5)
    # five events after the first, window [0, 10]: c^2 - 2 c * 5 / 10
    seq = EventSequence("c", [0.0, 1.0, 3.0, 5.0, 7.0, 9.0], [0, 1, 2, 3, 4, 0], [1.0, 0.5], 10.0)
    grid = loss_time(model, seq, n_mc=16, integration="grid")
    assert abs(grid.item() - (0.25 - 0.5)) < 1e-9
    mc = loss_time(model, seq, n_mc=2000, integration="mc", seed=3)
    assert abs(mc.item() - (0.25 - 0.5)) < 0.01


def test_time_loss_rejects_non_positive_samples():
    model = small_model()
    with pytest.raises(ConfigError):
        loss_time(model, SEQ, n_mc=0)


def test_focal_loss_worked_examples():
    cfg = LossConfig()
    x = math.log(0.95 / 0.05)
    confident = focal_code_loss(ad.constant([[x]]), np.array([[1.0]]), cfg).item()
    expected = 0.25 * 0.95 * 0.05**2 * -math.log(0.95)
    assert math.isclose(confident, expected, rel_tol=1e-9)
    assert math.isclose(confident, 3.05e-5, rel_tol=0.01)

    undecided = focal_code_loss(ad.constant([[0.0, 0.0]]), np.array([[1.0, 0.0]]), cfg).item()
    per_code = 0.25 * 0.95 * 0.25 * math.log(2.0)
    assert math.isclose(undecided, 2 * per_code, rel_tol=1e-12)
    assert math.isclose(per_code, 0.04116, rel_tol=1e-3)


def test_focal_positive_term_decreases_with_probability():
    cfg = LossConfig()
    probs = np.linspace(0.05, 0.95, 19)
    losses = [focal_code_loss(ad.constant([[math.log(p / (1 - p))]]), np.array([[1.0]]), cfg).item() for p in probs]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_code_targets_bundle_simultaneous_codes():
    seq = EventSequence("q", [0.0, 1.0, 1.0, 2.0, 3.0], [0, 1, 2, 3, 4], [1.0, 0.5], 3.0)
    assert code_query_indices(seq) == [1, 3]
    np.testing.assert_array_equal(next_code_target(seq, 1, 5), [0, 0, 0, 1, 0])
    np.testing.assert_array_equal(next_code_target(seq, 2, 5), [0, 0, 0, 1, 0])
    np.testing.assert_array_equal(next_code_target(seq, 3, 5), [0, 0, 0, 0, 1])
    tied = EventSequence("t", [0.0, 1.0, 2.0, 2.0], [0, 1, 2, 4], [1.0, 0.5], 2.0)
    np.testing.assert_array_equal(next_code_target(tied, 1, 5), [0, 0, 1, 0, 1])


def test_code_loss_index_errors():
    model = small_model()
    for j in (0, len(SEQ) - 1, 99, -1):
        with pytest.raises(EventIndexError):
            loss_code(model, SEQ, j)
    assert loss_code(model, SEQ, 1).item() > 0


def test_joint_loss_is_additive():
    model = small_model()
    time_part, code_part, joint = loss_components(model, SEQ, seed=2, gamma_mix=0.7)
    assert math.isclose(joint.item(), time_part.item() + 0.7 * code_part.item(), rel_tol=1e-12, abs_tol=1e-12)
    assert loss_joint(model, SEQ, gamma_mix=0.0, seed=2).item() == time_part.item()


def test_joint_loss_without_query_points_is_time_loss():
    model = small_model()
    short = EventSequence("s", [0.0, 1.0], [0, 1], [1.0, 0.5], 2.0)
    time_part, code_part, joint = loss_components(model, short)
    assert code_part.item() == 0.0
    assert joint.item() == time_part.item()


def test_joint_loss_is_deterministic():
    model = small_model()
    assert loss_joint(model, SEQ, seed=5).item() == loss_joint(model, SEQ, seed=5).item()


def test_joint_loss_gradients_match_finite_differences():
    model = small_model(n_codes=6)
    params = list(model.named_parameters().values())
    assert ad.grad_check(lambda: loss_joint(model, SEQ, seed=1), params, max_coords=8) < 1e-4


def test_untrained_attention_gradients_are_not_vanishing():
    model = small_model(n_codes=6)
    params = model.named_parameters()
    with ad.Tape() as tape:
        loss = loss_joint(model, SEQ, seed=1)
    grads = tape.backward(loss, accumulate=False)
    for name in ("proj_q.0.weight", "proj_k.0.weight", "proj_v.1.weight", "wfn.coefficients", "q_base"):
        assert np.abs(grads[params[name].node_id]).max() > 1e-5, name


def test_weighted_bce_values():
    assert math.isclose(weighted_bce(ad.constant([[0.0]]), [1], 1.0).item(), math.log(2.0))
    assert weighted_bce(ad.constant([[20.0], [-20.0]]), [1, 0], 1.0).item() < 1e-5
    assert math.isclose(weighted_bce(ad.constant([[0.0], [0.0]]), [1, 0], 3.0).item(), 2 * math.log(2.0))


def test_auto_task_weight():
    assert auto_task_weight([1, 0, 0, 0]) == 3.0
    with pytest.raises(WeightError):
        auto_task_weight([1, 1])


def test_task_head_and_probabilities():
    model = small_model()
    with pytest.raises(StateError):
        task_prob(model, SEQ, 2.0, "readmit")
    add_task_head(model, "readmit")
    examples = [TaskExample(SEQ, 2.0, 1), TaskExample(SEQ, 3.0, 0)]
    assert task_logits(model, examples, "readmit").shape == (2, 1)
    assert 0.0 < task_prob(model, SEQ, 2.0, "readmit") < 1.0
    assert loss_task(model, examples, "readmit").item() > 0
    with pytest.raises(WeightError):
        loss_task(model, examples[:1], "readmit")
    with pytest.raises(EmptyHistoryError):
        task_prob(model, SEQ, 0.0, "readmit")


def test_task_head_initialization_is_seeded():
    a, b = small_model(seed=4), small_model(seed=4)
    head_a, head_b = add_task_head(a, "x"), add_task_head(b, "x")
    for (name, p), q in zip(head_a.named_parameters("t").items(), head_b.named_parameters("t").values()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)


def test_parameter_groups_and_freezing():
    model = small_model()
    assert set(parameter_groups(model)) == set(CORE_GROUPS)
    assert set(parameter_groups(small_model(variant="constant"))) == set(CORE_GROUPS) - {"wfn"}
    set_trainable(model, ["wfn", "q_base"])
    assert trainable_groups(model) == ["wfn", "q_base"]
    with pytest.raises(ConfigError):
        set_trainable(model, ["decoder"])


def test_snapshot_restore_round_trip():
    model = small_model()
    saved = model.snapshot()
    for p in model.named_parameters().values():
        p.data = p.data + 1.0
    model.restore(saved)
    for name, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.data, saved[name])


def test_copy_is_independent():
    model = small_model()
    clone = model.copy()
    clone.q_base.data[:] = 0.0
    assert np.any(model.q_base.data != 0.0)
    assert clone.vocab is model.vocab


def test_demographics_dimension_checked():
    model = small_model(n_demographics=3)
    with pytest.raises(DimensionError):
        intensity(model, SEQ, 1.0)
