"""Time-aware attention over a patient history and aggregation into h_t.

Per-event encodings: for events j, k inside the history window,

    E_j = sum_k softmax_k( (Q_j . K_k / sqrt(d)) * w(|t_j - t_k|) ) V_k

and the unified representation uses a learnable base query,

    alpha_j = softmax_j( (Q_base . E_j) * w(|t - t_j|) ),   h_t = sum_j alpha_j E_j.

The piecewise variant reads |t_j - t_k| as a gap in calendar days rather than in model time.

Attention is bidirectional inside the window; causality comes from restricting the window to
events at (or strictly before) the query time.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyHistoryError
from .events import EventSequence
from .layers import MLP
from .temporal import TemporalWeightFn
from .vocab import CodeVocabulary

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 1024


class ProjectionHeads:
    """Separate two-layer GELU MLPs mapping fixed code embeddings to Q, K and V.

    The first layer is scaled by the embedding norm so its pre-activations are roughly unit
    Gaussian, the second layer is He-initialized and biases start at zero. K starts as a copy of Q,
    so an untrained model already attends most to events that share a code and the encodings of
    different codes stay apart.
    """

    def __init__(self, d_emb: int, d: int, rng: np.random.Generator, input_scale: float = 1.0):
        self.d = d
        self.q = _projection(d_emb, d, input_scale, rng)
        self.k = _projection(d_emb, d, input_scale, rng)
        for source, target in zip(self.q.layers, self.k.layers):
            target.weight.data = source.weight.data.copy()
            target.bias.data = source.bias.data.copy()
        self.v = _projection(d_emb, d, input_scale, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.q.named_parameters("proj_q"))
        params.update(self.k.named_parameters("proj_k"))
        params.update(self.v.named_parameters("proj_v"))
        return params


def _projection(d_emb: int, d: int, input_scale: float, rng: np.random.Generator) -> MLP:
    net = MLP([d_emb, d, d], rng)
    first, second = net.layers
    first.weight.data = rng.normal(0.0, 1.0 / input_scale, size=(d_emb, d))
    second.weight.data = rng.normal(0.0, math.sqrt(2.0 / d), size=(d, d))
    for layer in net.layers:
        layer.bias.data = np.zeros_like(layer.bias.data)
    return net


def embedding_scale(vocab: CodeVocabulary) -> float:
    """Root-mean-square norm of the embedding rows (1.0 for an all-zero table)."""

    rows = vocab.embeddings.astype(np.float64)
    scale = float(np.sqrt(np.mean(np.sum(rows**2, axis=1)))) if rows.size else 0.0
    return scale if scale > 0 else 1.0


@dataclass
class HistoryEncoding:
    per_event: Tensor
    unified: Tensor
    attention_weights: Tensor
    bounds: tuple[int, int]


def embedding_tensor(vocab: CodeVocabulary) -> Tensor:
    return ad.constant(vocab.embeddings.astype(np.float64), name="embeddings")


class SequenceContext:
    """Forward-pass cache for one sequence on one tape.

    Q/K/V are projected once per distinct code of the sequence, the full pairwise logit matrix
    is built once, and per-event encodings are memoized per history window.
    """

    def __init__(self, seq: EventSequence, embeddings: Tensor, heads: ProjectionHeads,
                 wfn: TemporalWeightFn, window: int = DEFAULT_WINDOW):
        self.seq = seq
        self.wfn = wfn
        self.window = window
        self._per_event: dict[tuple[int, int], Tensor] = {}
        if len(seq) == 0:
            self.queries = self.keys = self.values = None
            self.logits = None
            return
        distinct, inverse = np.unique(seq.codes, return_inverse=True)
        base = ad.getitem(embeddings, distinct)
        self.queries = ad.getitem(heads.q(base), inverse)
        self.keys = ad.getitem(heads.k(base), inverse)
        self.values = ad.getitem(heads.v(base), inverse)
        scores = ad.scale(ad.matmul(self.queries, ad.transpose(self.keys)), 1.0 / math.sqrt(heads.d))
        self.logits = ad.mul(scores, wfn.between(seq.times[:, None], seq.times[None, :]))

    def bounds(self, t: float, strict: bool = False) -> tuple[int, int]:
        lo, hi = self.seq.history_bounds(t, self.window, strict)
        if hi <= lo:
            raise EmptyHistoryError(f"no events {'before' if strict else 'at or before'} t={t} "
                                    f"for patient {self.seq.patient_id!r}")
        return lo, hi

    def per_event(self, lo: int, hi: int) -> Tensor:
        key = (lo, hi)
        cached = self._per_event.get(key)
        if cached is None:
            window = (slice(lo, hi), slice(lo, hi))
            attention = ad.softmax(ad.getitem(self.logits, window))
            cached = ad.matmul(attention, ad.getitem(self.values, (slice(lo, hi),)))
            self._per_event[key] = cached
        return cached


def encode_events(seq: EventSequence, t: float, vocab: CodeVocabulary, heads: ProjectionHeads,
                  wfn: TemporalWeightFn, window: int = DEFAULT_WINDOW) -> Tensor:
    """Per-event encodings E_{c_j}(t) for the events at or before ``t`` (``m x d``)."""

    ctx = SequenceContext(seq, embedding_tensor(vocab), heads, wfn, window)
    return ctx.per_event(*ctx.bounds(t))


def aggregate(per_event: Tensor, times: np.ndarray, t: float, q_base: Tensor,
              wfn: TemporalWeightFn) -> tuple[Tensor, Tensor]:
    """Return ``(h_t, alpha)`` with shapes ``(1, d)`` and ``(1, m)``."""

    relevance = ad.matmul(per_event, q_base)
    proximity = wfn.between(np.asarray(times, dtype=np.float64).reshape(-1, 1), t)
    alpha = ad.softmax(ad.transpose(ad.mul(relevance, proximity)))
    return ad.matmul(alpha, per_event), alpha


def encode_history(ctx: SequenceContext, t: float, q_base: Tensor, strict: bool = False) -> HistoryEncoding:
    lo, hi = ctx.bounds(t, strict)
    per_event = ctx.per_event(lo, hi)
    unified, alpha = aggregate(per_event, ctx.seq.times[lo:hi], t, q_base, ctx.wfn)
    return HistoryEncoding(per_event, unified, alpha, (lo, hi))
