"""Synthetic experiments with known answers.

Each function is deterministic in ``seed`` and returns a plain dict of measured values; the slow
test suite asserts the expected outcomes. Models are smaller and learning rates larger than the
library defaults so a run fits in minutes on a CPU.
"""

import logging
from typing import Any

import numpy as np

from . import autodiff as ad
from .events import DAYS_PER_YEAR, EventSequence, split, to_days, to_model_time
from .metrics import acc_at_k, auroc, code_predictions
from .model import ModelState, intensities, loss_time, set_trainable
from .schemas import RunConfig, SyntheticTruth, merge_config
from .simulation import simulate, simulate_dataset
from .tasks import TaskExample, labels_of, make_window_task
from .temporal import evaluate
from .train import finetune, pretrain, task_scores
from .vocab import random_vocabulary

logger = logging.getLogger(__name__)

SMALL_MODEL = {
    "model": {"d": 16, "d_z": 8, "g_hidden": [16, 16, 8], "f_hidden": [16, 16]},
    "train": {"pretrain_lr": 3e-3, "batch_size": 16},
}

WINDOW_CODES = 8
# initial a_1 of the polynomial in the window experiments
WINDOW_INIT_SLOPE = -2.0


def small_config(**sections: dict[str, Any]) -> RunConfig:
    return RunConfig.model_validate(merge_config(SMALL_MODEL, sections))


def constant_intensity_recovery(seed: int = 0, rate: float = 2.0, T: float = 20.0, steps: int = 300,
                                lr: float = 0.2) -> dict[str, float]:
    """Fit a constant-output intensity head to one homogeneous sequence by gradient descent.

    The final layer of g is zeroed so lambda = softplus(bias); only that bias is optimized, with
    grid integration (exact for a constant intensity). The loss minimizer is n / span where n
    counts events after the first one and span = T - t_first.
    """

    vocab = random_vocabulary(4, 8, seed)
    seq, _ = simulate(SyntheticTruth(process_kind="const_poisson", rate=rate), T, vocab.size, seed)
    config = small_config(loss={"integration": "grid", "n_mc": 16}, train={"seed": seed})
    model = ModelState(vocab, config, len(seq.demographics))
    output = model.g_head.mlp.output_layer
    output.weight.data = np.zeros_like(output.weight.data)
    set_trainable(model, [])
    bias = output.bias
    bias.requires_grad = True

    for _ in range(steps):
        bias.grad = None
        with ad.Tape() as tape:
            loss = loss_time(model, seq)
        tape.backward(loss)
        bias.data = bias.data - lr * bias.grad

    start = float(seq.times[0])
    n_after = int(np.sum(seq.times > start))
    target = n_after / (seq.horizon - start)
    with ad.no_grad():
        recovered = intensities(model, seq, [seq.horizon]).item()
    return {"recovered": recovered, "target": target, "rel_error": abs(recovered - target) / target,
            "n_events": float(len(seq))}


def _half_means(model: ModelState, sequences: list[EventSequence], T: float, n_grid: int = 20) -> tuple[float, float]:
    first, second = [], []
    grid = (np.arange(n_grid) + 0.5) * T / n_grid
    with ad.no_grad():
        for seq in sequences:
            times = grid[grid >= seq.times[0]]
            if times.size == 0:
                continue
            lam = intensities(model, seq, times).data.reshape(-1)
            first.extend(lam[times < T / 2])
            second.extend(lam[times >= T / 2])
    return float(np.mean(first)), float(np.mean(second))


def piecewise_recovery(seed: int = 0, n_seq: int = 500, T: float = 4.0, epochs: int = 10,
                       rates: tuple[float, float] = (0.5, 2.0)) -> dict[str, float]:
    """Train on a two-segment Poisson process; the age covariate carries the absolute time.

    Age starts at zero and is scaled to read 0.5 at the change point, saturating at 1 soon after
    it, so the intensity head sees the switch as a step in Z over a wide input range.
    """

    truth = SyntheticTruth(process_kind="piecewise_poisson", rates=list(rates))
    vocab = random_vocabulary(4, 8, seed)
    raw = simulate_dataset(truth, T, vocab.size, n_seq, seed)
    max_age_years = 2.0 * float(to_days(T / 2)) / DAYS_PER_YEAR
    sequences = [
        EventSequence(s.patient_id, s.times, s.codes, [s.demographics[0], 0.0], s.horizon, 1, max_age_years)
        for s in raw
        if len(s) > 0
    ]
    train, val, test = split(sequences, (0.8, 0.1, 0.1), seed)
    config = small_config(
        loss={"gamma_mix": 0.0, "n_mc": 16},
        train={"pretrain_epochs": epochs, "pretrain_lr": 1e-2, "batch_size": 4, "seed": seed},
    )
    model = ModelState(vocab, config, 2)
    pretrain(model, train, val)
    first, second = _half_means(model, test, T)
    logger.info("Piecewise recovery (seed %s): first=%.4f second=%.4f", seed, first, second)
    return {
        "first_half": first,
        "second_half": second,
        "first_rel_error": abs(first - rates[0]) / rates[0],
        "second_rel_error": abs(second - rates[1]) / rates[1],
    }


def code_learnability(seed: int = 0, n_codes: int = 20, n_seq: int = 500, epochs: int = 10,
                      T: float = 5.0, rate: float = 1.0) -> dict[str, float]:
    """Next-code accuracy on a cyclic code sequence, where the last event alone decides the answer."""

    truth = SyntheticTruth(process_kind="deterministic_code", rate=rate)
    vocab = random_vocabulary(n_codes, 16, seed)
    sequences = simulate_dataset(truth, T, n_codes, n_seq, seed)
    train, val, test = split(sequences, (0.8, 0.1, 0.1), seed)
    config = small_config(
        model={"d": 32, "d_z": 16, "f_hidden": [64, 32]},
        loss={"gamma_mix": 10.0, "n_mc": 16},
        train={"pretrain_epochs": epochs, "pretrain_lr": 5e-3, "batch_size": 4, "seed": seed},
    )
    model = ModelState(vocab, config, 2)
    pretrain(model, train, val)
    preds = [p for _, _, p in code_predictions(model, test)]
    return {"acc@1": acc_at_k(preds, 1), "acc@5": acc_at_k(preds, 5), "n_instances": float(len(preds))}


def window_config(variant: str, seed: int, finetune_epochs: int) -> RunConfig:
    """Small model for the marker-window tasks.

    The polynomial starts from ``sigmoid(2 - 2 dt)`` rather than a flat curve. The encoder gets a
    single pre-training epoch at the library's default rate.
    """

    time_weight: dict[str, Any] = {"variant": variant}
    if variant == "polynomial":
        time_weight["init_slope"] = WINDOW_INIT_SLOPE
    return small_config(
        time_weight=time_weight,
        loss={"n_mc": 16},
        train={
            "pretrain_epochs": 1,
            "pretrain_lr": 1e-4,
            "batch_size": 8,
            "finetune_epochs": finetune_epochs,
            "finetune_lr_pretrained": 2e-3,
            "finetune_lr_new": 1e-2,
            "seed": seed,
        },
    )


def _pretrained(variant: str, seed: int, finetune_epochs: int, sequences: list[EventSequence]) -> ModelState:
    model = ModelState(random_vocabulary(WINDOW_CODES, 16, seed), window_config(variant, seed, finetune_epochs), 2)
    pretrain(model, sequences)
    return model


def _finetuned(model: ModelState, train: list[TaskExample], val: list[TaskExample],
               test: list[TaskExample]) -> tuple[ModelState, float]:
    tuned, _ = finetune(model, train, val, "window")
    return tuned, auroc(task_scores(tuned, test, "window"), labels_of(test))


def ablation_auroc(seed: int = 0, n_seq: int = 500, window_days: float = 30.0, finetune_epochs: int = 15,
                   mean_gap_days: float = 60.0) -> dict[str, float]:
    """Fine-tuned AUROC of the polynomial time weight against attention without time."""

    examples = make_window_task(n_seq, WINDOW_CODES, 0, window_days, seed, mean_gap_days=mean_gap_days)
    train, val, test = split(examples, (0.6, 0.2, 0.2), seed)
    pretrain_seqs = [e.seq for e in train]
    _, poly = _finetuned(_pretrained("polynomial", seed, finetune_epochs, pretrain_seqs), train, val, test)
    _, constant = _finetuned(_pretrained("constant", seed, finetune_epochs, pretrain_seqs), train, val, test)
    logger.info("Window task AUROC (seed %s): polynomial=%.4f constant=%.4f", seed, poly, constant)
    return {"polynomial": poly, "constant": constant, "gap": poly - constant}


def curve_contrast(seed: int = 0, n_seq: int = 300, finetune_epochs: int = 15, dt_days: float = 90.0,
                   history_days: float = 120.0, mean_gap_days: float = 60.0) -> dict[str, float]:
    """w at ``dt_days`` after fine-tuning one pre-trained model on an acute and a chronic task.

    Both tasks cut their histories at the same length. The acute label is a marker within 7 days,
    with older markers in the negatives; the chronic label is a marker within 365 days, which
    covers the whole history, so chronic negatives carry none.
    """

    tasks = {
        "acute": make_window_task(n_seq, WINDOW_CODES, 0, 7.0, seed, history_days=history_days,
                                  mean_gap_days=mean_gap_days),
        "chronic": make_window_task(n_seq, WINDOW_CODES, 0, 365.0, seed + 1, history_days=history_days,
                                    mean_gap_days=mean_gap_days, negative_marker=False),
    }
    splits = {name: split(examples, (0.6, 0.2, 0.2), seed) for name, examples in tasks.items()}
    model = _pretrained("polynomial", seed, finetune_epochs, [e.seq for s in splits.values() for e in s[0]])
    dt = float(to_model_time(dt_days))

    result = {}
    for name, (train, val, test) in splits.items():
        tuned, score = _finetuned(model, train, val, test)
        with ad.no_grad():
            result[f"{name}_w"] = evaluate(tuned.wfn, dt).item()
        result[f"{name}_auroc"] = score
    logger.info("Curve contrast (seed %s): %s", seed, result)
    return result
