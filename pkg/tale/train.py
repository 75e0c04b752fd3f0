"""Adam, the batch trainer and the two-stage schedule (pre-train, then per-task fine-tune).

A batch is a list of items (sequences or task examples). Each item gets its own tape, possibly on
a worker thread; per-item gradients are reduced in item order, averaged, clipped to a global norm
and applied in one serialized Adam update.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import settings
from .errors import InputError, NonFiniteError, StateError, TrainingError
from .events import EventSequence
from .model import (
    CORE_GROUPS,
    ModelState,
    add_task_head,
    auto_task_weight,
    group_of,
    loss_components,
    loss_task,
    set_trainable,
    task_prob,
)
from .schemas import TrainConfig
from .storage import LossLog, save_checkpoint
from .tasks import TaskExample, labels_of

logger = logging.getLogger(__name__)

# item, seed -> (objective, reported loss values)
ItemLoss = Callable[[Any, int], tuple[Tensor, tuple[float, ...]]]


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    @classmethod
    def from_dict(cls, payload: dict[str, Any] | None) -> "AdamState":
        if not payload:
            return cls()
        return cls(int(payload["t"]), {k: np.array(v) for k, v in payload["m"].items()},
                   {k: np.array(v) for k, v in payload["v"].items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float], betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of every parameter with ``requires_grad``; frozen ones are skipped."""

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", group=group_of(name))
    state.t += 1
    b1, b2 = betas
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        rate = lr.get(name) if isinstance(lr, dict) else float(lr)
        if rate is None:
            continue
        if rate <= 0:
            raise InputError(f"learning rate for {name} must be positive, got {rate}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - rate * (m / correction1) / (np.sqrt(v / correction2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place to a global L2 norm of at most ``max_norm``; returns the original norm."""

    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def item_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


class Trainer:
    """Owns the Adam state for one set of trainable groups."""

    def __init__(self, model: ModelState, cfg: TrainConfig, learning_rates: dict[str, float],
                 threads: int | None = None, optimizer_state: dict[str, Any] | None = None):
        self.model = model
        self.cfg = cfg
        set_trainable(model, list(learning_rates))
        self.lr = {
            name: learning_rates[group_of(name)]
            for name in model.named_parameters()
            if group_of(name) in learning_rates
        }
        self.state = AdamState.from_dict(optimizer_state)
        self.threads = max(1, settings.threads if threads is None else threads)
        self._pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self) -> "Trainer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def optimizer_state(self) -> dict[str, Any]:
        return self.state.to_dict()

    def _run_item(self, loss_fn: ItemLoss, item: Any, seed: int) -> tuple[dict[int, np.ndarray], tuple[float, ...]]:
        with ad.Tape() as tape:
            objective, reported = loss_fn(item, seed)
        if not math.isfinite(objective.item()):
            raise TrainingError(f"non-finite loss {objective.item()}")
        return tape.backward(objective, accumulate=False), reported

    def step(self, batch: Sequence[Any], loss_fn: ItemLoss) -> tuple[float, ...]:
        """One optimizer step on the mean objective of ``batch``; returns the mean reported losses."""

        if not batch:
            raise InputError("cannot step on an empty batch")
        step_id = self.state.t
        seeds = [item_seed(self.cfg.seed, step_id, i) for i in range(len(batch))]
        if self._pool is None:
            results = [self._run_item(loss_fn, item, s) for item, s in zip(batch, seeds)]
        else:
            results = list(self._pool.map(lambda pair: self._run_item(loss_fn, *pair), zip(batch, seeds)))

        params = self.model.named_parameters()
        by_id = {p.node_id: name for name, p in params.items() if p.requires_grad}
        grads: dict[str, np.ndarray] = {}
        for item_grads, _ in results:
            for node_id, g in item_grads.items():
                name = by_id.get(node_id)
                if name is not None:
                    grads[name] = grads[name] + g if name in grads else g.copy()
        for name in grads:
            grads[name] = grads[name] / len(batch)
        clip_gradients(grads, self.cfg.grad_clip)
        adam_step(params, grads, self.state, self.lr, self.cfg.adam_betas, self.cfg.adam_eps)

        reported = np.array([r for _, r in results], dtype=np.float64)
        return tuple(float(x) for x in reported.mean(axis=0))


def batches(items: Sequence[Any], batch_size: int, seed: int, epoch: int) -> list[list[Any]]:
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(len(items))
    shuffled = [items[i] for i in order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def pretrainable(sequences: Sequence[EventSequence]) -> list[EventSequence]:
    usable = [s for s in sequences if len(s) > 0 and s.horizon > s.times[0]]
    if len(usable) < len(sequences):
        logger.warning("Skipping %s sequences without events or with an empty loss window",
                       len(sequences) - len(usable))
    return usable


def _joint_item(model: ModelState) -> ItemLoss:
    def loss_fn(seq: EventSequence, seed: int) -> tuple[Tensor, tuple[float, ...]]:
        time_part, code_part, joint = loss_components(model, seq, seed)
        return joint, (time_part.item(), code_part.item(), joint.item())

    return loss_fn


def evaluate_losses(model: ModelState, sequences: Sequence[EventSequence], seed: int = 0,
                    threads: int | None = None) -> tuple[float, float, float]:
    """Mean ``(loss_time, loss_code, loss_joint)`` without recording gradients."""

    sequences = pretrainable(sequences)
    if not sequences:
        raise InputError("no usable sequences to evaluate")

    def one(pair: tuple[int, EventSequence]) -> tuple[float, float, float]:
        i, seq = pair
        with ad.no_grad():
            parts = loss_components(model, seq, item_seed(seed, i))
        return tuple(p.item() for p in parts)

    threads = max(1, settings.threads if threads is None else threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(one, enumerate(sequences)))
    else:
        values = [one(pair) for pair in enumerate(sequences)]
    means = np.mean(np.array(values, dtype=np.float64), axis=0)
    return float(means[0]), float(means[1]), float(means[2])


@dataclass
class TrainingResult:
    history: list[dict[str, Any]]
    steps: int
    optimizer_state: dict[str, Any]


def _diverged(model: ModelState, last_good: dict[str, np.ndarray], out_dir: str | Path | None,
              exc: Exception) -> TrainingError:
    model.restore(last_good)
    if out_dir is not None:
        save_checkpoint(model, out_dir)
    group = getattr(exc, "group", None)
    logger.exception("Training diverged; restored the last good parameters")
    return TrainingError(f"training diverged ({exc}); last good parameters restored", group=group)


def pretrain(model: ModelState, train: Sequence[EventSequence], val: Sequence[EventSequence] = (), *,
             out_dir: str | Path | None = None, threads: int | None = None) -> TrainingResult:
    """Joint-loss training of every core group at ``train.pretrain_lr``."""

    cfg = model.config.train
    train = pretrainable(train)
    if not train:
        raise InputError("pre-training needs a non-empty training split")
    val = pretrainable(val) if val else []
    log = LossLog(Path(out_dir) / "losses.csv") if out_dir is not None else None
    history: list[dict[str, Any]] = []
    val_seed = item_seed(cfg.seed, 1 << 20)

    def record(epoch: int, split: str, values: tuple[float, ...]) -> None:
        history.append({"epoch": epoch, "split": split, "loss_time": values[0], "loss_code": values[1],
                        "loss_joint": values[2]})
        if log is not None:
            log.append(epoch, split, *values)
        logger.info("Epoch %s %s: time=%.6f code=%.6f joint=%.6f", epoch, split, *values)

    if val:
        record(0, "val", evaluate_losses(model, val, val_seed, threads))

    loss_fn = _joint_item(model)
    with Trainer(model, cfg, {g: cfg.pretrain_lr for g in CORE_GROUPS}, threads) as trainer:
        for epoch in range(1, cfg.pretrain_epochs + 1):
            epoch_values = []
            for batch in batches(train, cfg.batch_size, cfg.seed, epoch):
                last_good = model.snapshot()
                try:
                    epoch_values.append(trainer.step(batch, loss_fn))
                except (TrainingError, NonFiniteError) as exc:
                    raise _diverged(model, last_good, out_dir, exc) from exc
            record(epoch, "train", tuple(np.mean(np.array(epoch_values), axis=0)))
            if val:
                record(epoch, "val", evaluate_losses(model, val, val_seed, threads))
        model.stage = "pretrained"
        result = TrainingResult(history, trainer.state.t, trainer.optimizer_state())

    if out_dir is not None:
        save_checkpoint(model, out_dir, result.optimizer_state)
    return result


def _task_item(model: ModelState, task: str, w_k: float) -> ItemLoss:
    def loss_fn(example: TaskExample, seed: int) -> tuple[Tensor, tuple[float, ...]]:
        loss = loss_task(model, [example], task, w_k)
        return loss, (loss.item(),)

    return loss_fn


def finetune(model: ModelState, train: Sequence[TaskExample], val: Sequence[TaskExample], task: str, *,
             out_dir: str | Path | None = None, threads: int | None = None) -> tuple[ModelState, TrainingResult]:
    """Fine-tune a copy of ``model`` for ``task``.

    Only the temporal weight function and the base query (at ``finetune_lr_pretrained``) and the
    new task head (at ``finetune_lr_new``) are trainable.
    """

    if model.stage not in ("pretrained", "finetuned"):
        raise StateError(f"fine-tuning needs a pre-trained model, got stage {model.stage!r}")
    if not train:
        raise InputError("fine-tuning needs labeled training examples")
    cfg = model.config.train
    w_k = cfg.task_weight if cfg.task_weight is not None else auto_task_weight(labels_of(train))

    tuned = model.copy()
    add_task_head(tuned, task)
    rates = {"wfn": cfg.finetune_lr_pretrained, "q_base": cfg.finetune_lr_pretrained,
             f"task:{task}": cfg.finetune_lr_new}
    history: list[dict[str, Any]] = []
    loss_fn = _task_item(tuned, task, w_k)
    with Trainer(tuned, cfg, rates, threads) as trainer:
        for epoch in range(1, cfg.finetune_epochs + 1):
            values = []
            for batch in batches(list(train), cfg.batch_size, cfg.seed, epoch):
                last_good = tuned.snapshot()
                try:
                    values.append(trainer.step(batch, loss_fn)[0])
                except (TrainingError, NonFiniteError) as exc:
                    raise _diverged(tuned, last_good, out_dir, exc) from exc
            entry: dict[str, Any] = {"epoch": epoch, "split": "train", "loss_task": float(np.mean(values))}
            if val:
                with ad.no_grad():
                    entry["val_loss_task"] = loss_task(tuned, list(val), task, w_k).item()
            history.append(entry)
            logger.info("Fine-tune %s epoch %s: %s", task, epoch, entry)
        tuned.stage = "finetuned"
        result = TrainingResult(history, trainer.state.t, trainer.optimizer_state())

    if out_dir is not None:
        save_checkpoint(tuned, out_dir)
    return tuned, result


def task_scores(model: ModelState, examples: Sequence[TaskExample], task: str) -> list[float]:
    return [task_prob(model, example.seq, example.t_cut, task) for example in examples]
