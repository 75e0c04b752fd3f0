"""Intensity head g, code head f, task heads and the loss functions.

All parameters live on one :class:`ModelState` and are addressed by dotted names whose first
component is the parameter group (``proj_q``, ``proj_k``, ``proj_v``, ``wfn``, ``q_base``,
``g_head``, ``f_head``, ``task:<name>``). Freezing a group turns off ``requires_grad`` on its
tensors, so frozen parts are neither recorded on the tape nor touched by the optimizer.
"""

import copy
import logging
import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import ProjectionHeads, SequenceContext, embedding_scale, embedding_tensor, encode_history
from .autodiff import Tensor
from .errors import (
    ConfigError,
    DimensionError,
    EmptySequenceError,
    EventIndexError,
    InputError,
    StateError,
    WeightError,
)
from .events import EventSequence
from .layers import MLP, Linear
from .schemas import LossConfig, RunConfig
from .tasks import TaskExample
from .temporal import build_weight_fn
from .vocab import CodeVocabulary

logger = logging.getLogger(__name__)

STAGES = ("init", "pretrained", "finetuned")
CORE_GROUPS = ("proj_q", "proj_k", "proj_v", "wfn", "q_base", "g_head", "f_head")


class _ProjectedHead:
    """Demographics and history projected to ``d_z`` each, concatenated, then an MLP."""

    def __init__(self, n_demographics: int, d: int, d_z: int, widths: list[int], rng: np.random.Generator):
        self.demo = Linear(n_demographics, d_z, rng)
        self.hist = Linear(d, d_z, rng)
        self.mlp = MLP([2 * d_z, *widths], rng)

    def __call__(self, demographics: Tensor, history: Tensor) -> Tensor:
        joined = ad.concat([ad.gelu(self.demo(demographics)), ad.gelu(self.hist(history))], axis=1)
        return self.mlp(joined)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        params.update(self.demo.named_parameters(f"{prefix}.demo"))
        params.update(self.hist.named_parameters(f"{prefix}.hist"))
        params.update(self.mlp.named_parameters(f"{prefix}.mlp"))
        return params


class ModelState:
    def __init__(self, vocab: CodeVocabulary, config: RunConfig, n_demographics: int, seed: int | None = None):
        if n_demographics < 0:
            raise DimensionError(f"n_demographics must be >= 0, got {n_demographics}")
        self.vocab = vocab
        self.config = config
        self.n_demographics = n_demographics
        self.stage = "init"
        self.embeddings = embedding_tensor(vocab)

        seed = config.train.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        d, d_z = config.model.d, config.model.d_z
        self.heads = ProjectionHeads(vocab.d_emb, d, rng, embedding_scale(vocab))
        self.q_base = ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, 1)))
        self.wfn = build_weight_fn(config.time_weight, rng)
        self.g_head = _ProjectedHead(n_demographics, d, d_z, [*config.model.g_hidden, 1], rng)
        self.f_head = _ProjectedHead(n_demographics, d, d_z, [*config.model.f_hidden, vocab.size], rng)
        self.task_heads: dict[str, MLP] = {}
        self.seed = seed

    @property
    def d(self) -> int:
        return self.config.model.d

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.heads.named_parameters())
        params.update(self.wfn.named_parameters())
        params["q_base"] = self.q_base
        params.update(self.g_head.named_parameters("g_head"))
        params.update(self.f_head.named_parameters("f_head"))
        for task, head in self.task_heads.items():
            params.update(head.named_parameters(f"task:{task}"))
        return params

    def context(self, seq: EventSequence) -> SequenceContext:
        if len(seq.demographics) != self.n_demographics:
            raise DimensionError(
                f"patient {seq.patient_id!r} has {len(seq.demographics)} demographics, "
                f"model expects {self.n_demographics}"
            )
        return SequenceContext(seq, self.embeddings, self.heads, self.wfn, self.config.model.window)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(snapshot)
        if missing:
            raise StateError(f"snapshot lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            if snapshot[name].shape != p.shape:
                raise StateError(f"{name}: snapshot shape {snapshot[name].shape} vs {p.shape}")
            p.data = snapshot[name].copy()
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def copy(self) -> "ModelState":
        """Independent deep copy sharing the (immutable) vocabulary."""

        return copy.deepcopy(self, memo={id(self.vocab): self.vocab})


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def parameter_groups(model: ModelState) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in model.named_parameters():
        groups.setdefault(group_of(name), []).append(name)
    return groups


def set_trainable(model: ModelState, groups: Sequence[str]) -> None:
    """Make exactly ``groups`` trainable and freeze every other parameter."""

    known = set(CORE_GROUPS) | {f"task:{t}" for t in model.task_heads}
    unknown = set(groups) - known
    if unknown:
        raise ConfigError(f"unknown parameter groups: {sorted(unknown)}")
    wanted = set(groups)
    for name, p in model.named_parameters().items():
        p.requires_grad = group_of(name) in wanted


def trainable_groups(model: ModelState) -> list[str]:
    seen: list[str] = []
    for name, p in model.named_parameters().items():
        group = group_of(name)
        if p.requires_grad and group not in seen:
            seen.append(group)
    return seen


# Heads


def _stack_history(model: ModelState, ctx: SequenceContext, times: Sequence[float], strict: bool) -> tuple[Tensor, Tensor]:
    unified = [encode_history(ctx, float(t), model.q_base, strict).unified for t in times]
    history = unified[0] if len(unified) == 1 else ad.concat(unified, axis=0)
    covariates = np.stack([ctx.seq.covariates(float(t)) for t in times]).reshape(len(times), model.n_demographics)
    return ad.constant(covariates), history


def intensities(model: ModelState, seq: EventSequence, times: Sequence[float], *, strict: bool = False,
                ctx: SequenceContext | None = None) -> Tensor:
    """lambda(t) for each query time as an ``n x 1`` tensor."""

    ctx = ctx or model.context(seq)
    demographics, history = _stack_history(model, ctx, times, strict)
    return ad.softplus(model.g_head(demographics, history))


def intensity(model: ModelState, seq: EventSequence, t: float, ctx: SequenceContext | None = None) -> Tensor:
    return ad.reshape(intensities(model, seq, [t], ctx=ctx), ())


def code_logits(model: ModelState, seq: EventSequence, t: float | Sequence[float],
                ctx: SequenceContext | None = None) -> Tensor:
    times = [t] if np.isscalar(t) else list(t)
    ctx = ctx or model.context(seq)
    demographics, history = _stack_history(model, ctx, times, strict=False)
    return model.f_head(demographics, history)


def code_probs(model: ModelState, seq: EventSequence, t: float) -> Tensor:
    """Per-code probabilities of the next event at ``t`` (independent sigmoids)."""

    return ad.reshape(ad.sigmoid(code_logits(model, seq, t)), (model.vocab.size,))


# Losses


def _integration_points(seq: EventSequence, n: int, integration: str, seed: int) -> np.ndarray:
    start, span = float(seq.times[0]), seq.horizon - float(seq.times[0])
    if integration == "grid":
        return start + span * (np.arange(n) + 0.5) / n
    return start + span * np.random.default_rng(seed).uniform(size=n)


def time_window(seq: EventSequence) -> tuple[float, float]:
    if len(seq) == 0:
        raise EmptySequenceError(f"patient {seq.patient_id!r} has no events")
    start = float(seq.times[0])
    if seq.horizon <= start:
        raise InputError(f"patient {seq.patient_id!r}: horizon {seq.horizon} leaves an empty loss window")
    return start, seq.horizon


def loss_time(model: ModelState, seq: EventSequence, n_mc: int | None = None, seed: int = 0, *,
              integration: str | None = None, ctx: SequenceContext | None = None) -> Tensor:
    """Least-squares point-process loss over ``[t_first, T]``.

    ``mean(lambda(u)^2) - (2 / span) * sum_j lambda(t_j)``; the event sum conditions each event on
    the strictly earlier history and skips events that have none.
    """

    start, end = time_window(seq)
    span = end - start
    n = max(64, len(seq)) if n_mc is None else n_mc
    if n <= 0:
        raise ConfigError(f"n_mc must be positive, got {n_mc}")
    integration = integration or model.config.loss.integration
    ctx = ctx or model.context(seq)

    samples = _integration_points(seq, n, integration, seed)
    squared = ad.mean(ad.power(intensities(model, seq, samples, ctx=ctx), 2))
    with_history = seq.times[seq.times > start]
    if with_history.size == 0:
        return squared
    at_events = intensities(model, seq, with_history, strict=True, ctx=ctx)
    return ad.sub(squared, ad.scale(ad.sum(at_events), 2.0 / span))


def code_query_indices(seq: EventSequence) -> list[int]:
    """Index of the first event at each timestamp that can serve as a code-loss query point."""

    distinct = seq.distinct_times
    if distinct.size < 3:
        return []
    return [int(np.searchsorted(seq.times, t, side="left")) for t in distinct[1:-1]]


def next_code_target(seq: EventSequence, j: int, n_codes: int) -> np.ndarray:
    """Multi-hot vector of the codes at the next distinct timestamp after event ``j``."""

    if not 0 <= j < len(seq):
        raise EventIndexError(f"event index {j} outside 0..{len(seq) - 1}")
    t_j = seq.times[j]
    if t_j <= seq.times[0]:
        raise EventIndexError(f"event {j} shares the first timestamp and has no prior history")
    later = seq.times > t_j
    if not np.any(later):
        raise EventIndexError(f"event {j} has no later timestamp to predict")
    t_next = seq.times[later][0]
    target = np.zeros(n_codes)
    target[seq.codes[seq.times == t_next]] = 1.0
    return target


def focal_code_loss(logits: Tensor, targets: np.ndarray, cfg: LossConfig) -> Tensor:
    """Two-sided focal loss summed over codes (and rows).

    Written on logits: ``sigma(-x)^gamma = exp(-gamma * softplus(x))`` and
    ``-ln sigma(x) = softplus(-x)``.
    """

    targets = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    pos_scale = ad.constant(cfg.focal_alpha * cfg.smooth_pos * targets)
    neg_scale = ad.constant(cfg.focal_alpha * (1.0 - cfg.smooth_neg) * (1.0 - targets))
    sp_pos = ad.softplus(logits)
    sp_neg = ad.softplus(ad.scale(logits, -1.0))
    positive = ad.mul(ad.exp(ad.scale(sp_pos, -cfg.focal_gamma)), sp_neg)
    negative = ad.mul(ad.exp(ad.scale(sp_neg, -cfg.focal_gamma)), sp_pos)
    return ad.sum(ad.add(ad.mul(pos_scale, positive), ad.mul(neg_scale, negative)))


def loss_code(model: ModelState, seq: EventSequence, j: int, ctx: SequenceContext | None = None) -> Tensor:
    target = next_code_target(seq, j, model.vocab.size)
    return focal_code_loss(code_logits(model, seq, float(seq.times[j]), ctx), target, model.config.loss)


def mean_code_loss(model: ModelState, seq: EventSequence, ctx: SequenceContext | None = None) -> Tensor | None:
    """Mean focal loss over all query points, or None when the sequence has none."""

    queries = code_query_indices(seq)
    if not queries:
        return None
    ctx = ctx or model.context(seq)
    targets = np.stack([next_code_target(seq, j, model.vocab.size) for j in queries])
    logits = code_logits(model, seq, [float(seq.times[j]) for j in queries], ctx)
    return ad.scale(focal_code_loss(logits, targets, model.config.loss), 1.0 / len(queries))


def loss_components(model: ModelState, seq: EventSequence, seed: int = 0,
                    gamma_mix: float | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """``(loss_time, mean loss_code, loss_joint)`` sharing one forward cache."""

    cfg = model.config.loss
    gamma_mix = cfg.gamma_mix if gamma_mix is None else gamma_mix
    ctx = model.context(seq)
    time_part = loss_time(model, seq, cfg.n_mc, seed, ctx=ctx)
    code_part = mean_code_loss(model, seq, ctx)
    if code_part is None:
        code_part = ad.constant(0.0)
        return time_part, code_part, time_part
    if gamma_mix == 0:
        return time_part, code_part, time_part
    return time_part, code_part, ad.add(time_part, ad.scale(code_part, gamma_mix))


def loss_joint(model: ModelState, seq: EventSequence, gamma_mix: float | None = None, seed: int = 0) -> Tensor:
    return loss_components(model, seq, seed, gamma_mix)[2]


# Downstream tasks


def add_task_head(model: ModelState, task: str) -> MLP:
    if not task or "." in task:
        raise ConfigError(f"invalid task name {task!r}")
    if task in model.task_heads:
        return model.task_heads[task]
    entropy = [model.seed, *task.encode("utf-8")]
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    head = MLP([model.d, max(1, model.d // 2), 1], rng)
    model.task_heads[task] = head
    logger.info("Added task head %r (%s -> %s -> 1)", task, model.d, max(1, model.d // 2))
    return head


def _task_head(model: ModelState, task: str) -> MLP:
    head = model.task_heads.get(task)
    if head is None:
        raise StateError(f"model has no head for task {task!r}")
    return head


def task_logits(model: ModelState, examples: Sequence[TaskExample], task: str) -> Tensor:
    head = _task_head(model, task)
    rows = []
    for example in examples:
        ctx = model.context(example.seq)
        rows.append(encode_history(ctx, example.t_cut, model.q_base, strict=True).unified)
    history = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
    return head(history)


def task_prob(model: ModelState, seq: EventSequence, t_cut: float, task: str) -> float:
    """P(label = 1) from the history strictly before ``t_cut``."""

    with ad.no_grad():
        logit = task_logits(model, [TaskExample(seq, t_cut, 0)], task)
    return float(ad.sigmoid(logit).item())


def auto_task_weight(labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    positives = int(np.sum(labels == 1))
    negatives = int(np.sum(labels == 0))
    if positives == 0 or negatives == 0:
        raise WeightError(
            f"cannot derive a class weight from {positives} positives and {negatives} negatives; "
            "set train.task_weight explicitly"
        )
    return negatives / positives


def weighted_bce(logits: Tensor, labels: Sequence[int], w_k: float) -> Tensor:
    """Mean of ``w_k * y * softplus(-x) + (1 - y) * softplus(x)``."""

    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    if not np.all((y == 0) | (y == 1)):
        raise InputError("task labels must be 0 or 1")
    positive = ad.mul(ad.constant(w_k * y), ad.softplus(ad.scale(logits, -1.0)))
    negative = ad.mul(ad.constant(1.0 - y), ad.softplus(logits))
    return ad.mean(ad.add(positive, negative))


def loss_task(model: ModelState, examples: Sequence[TaskExample], task: str, w_k: float | None = None) -> Tensor:
    if not examples:
        raise InputError("loss_task needs at least one example")
    labels = [example.label for example in examples]
    weight = auto_task_weight(labels) if w_k is None else w_k
    if weight <= 0:
        raise WeightError(f"task weight must be positive, got {weight}")
    return weighted_bce(task_logits(model, examples, task), labels, weight)
