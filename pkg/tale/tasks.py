"""Labeled downstream prediction data: ``(sequence, cut time, label)`` examples.

``make_window_task`` builds a synthetic task whose label is whether a marker code occurred within
``window_days`` before the cut. By default every sequence carries the marker and negatives have it
further in the past, so only a model that uses timing can separate the classes. With
``negative_marker=False`` negatives carry no marker at all, which suits windows as long as the
history itself.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, ParseError
from .events import (
    EventSequence,
    read_records,
    record_to_sequence,
    sequence_to_record,
    to_days,
    to_model_time,
    write_records,
)
from .vocab import CodeVocabulary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskExample:
    seq: EventSequence
    t_cut: float
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise InputError(f"label must be 0 or 1, got {self.label!r}")


def default_history_days(window_days: float) -> float:
    return 2.0 * window_days + max(window_days, 90.0) + 30.0


def make_window_task(n_seq: int, n_codes: int, marker_code: int = 0, window_days: float = 30.0,
                     seed: int = 0, *, positive_share: float = 0.5, history_days: float | None = None,
                     mean_gap_days: float = 30.0, negative_marker: bool = True) -> list[TaskExample]:
    """Sequences cut at ``history_days`` after their first record.

    Positives place the marker ``U(0, W]`` days before the cut, negatives ``U(2W, 2W + max(W, 90))``
    days before it. Background events use the other codes at exponential gaps.

    Without ``negative_marker`` negatives hold background codes only and the positive offset is
    capped at the history length, so ``W`` may exceed ``history_days``.
    """

    if n_seq < 1:
        raise InputError(f"n_seq must be >= 1, got {n_seq}")
    if n_codes < 2:
        raise InputError("a window task needs the marker plus at least one background code")
    if not 0 <= marker_code < n_codes:
        raise InputError(f"marker code {marker_code} outside 0..{n_codes - 1}")
    if window_days <= 0 or not 0 < positive_share < 1:
        raise InputError("window_days must be positive and positive_share inside (0, 1)")
    far_gap = max(window_days, 90.0)
    history_days = default_history_days(window_days) if history_days is None else history_days
    if not history_days > 0:
        raise InputError(f"history_days must be positive, got {history_days}")
    if negative_marker and history_days <= 2.0 * window_days + far_gap:
        raise InputError(f"history_days={history_days} cannot hold negatives up to {2 * window_days + far_gap} days back")
    reach = min(window_days, history_days)

    rng = np.random.default_rng(seed)
    n_pos = min(max(1, int(round(n_seq * positive_share))), n_seq - 1) if n_seq > 1 else 1
    labels = rng.permutation(np.r_[np.ones(n_pos, dtype=int), np.zeros(n_seq - n_pos, dtype=int)])
    background = np.array([c for c in range(n_codes) if c != marker_code])
    t_cut = float(to_model_time(history_days))

    examples = []
    for i, (label, child) in enumerate(zip(labels, np.random.SeedSequence(seed).spawn(n_seq))):
        r = np.random.default_rng(child)
        days = [0.0]
        day = r.exponential(mean_gap_days)
        while day < history_days:
            days.append(day)
            day += r.exponential(mean_gap_days)
        codes = r.choice(background, size=len(days)).tolist()
        if label:
            days.append(history_days - reach * (1.0 - r.uniform()))
            codes.append(marker_code)
        elif negative_marker:
            days.append(history_days - 2.0 * window_days - far_gap * r.uniform())
            codes.append(marker_code)
        order = np.argsort(days, kind="stable")
        times = to_model_time(np.asarray(days)[order])
        demographics = [float(r.integers(2)), float(r.uniform(0.2, 0.8))]
        seq = EventSequence(f"task-{seed}-{i}", times, np.asarray(codes)[order], demographics, t_cut)
        examples.append(TaskExample(seq, t_cut, int(label)))
    logger.info("Built window task: %s sequences, %s positive, window %s days", n_seq, n_pos, window_days)
    return examples


def save_task_data(examples: Iterable[TaskExample], vocab: CodeVocabulary, path: str | Path) -> int:
    records = []
    for example in examples:
        record = sequence_to_record(example.seq, vocab)
        record.extra = {"t_cut_days": float(to_days(example.t_cut)), "label": int(example.label)}
        records.append(record)
    return write_records(records, path)


def load_task_data(path: str | Path, vocab: CodeVocabulary, *, age_index: int | None = None,
                   max_age_years: float = 100.0) -> list[TaskExample]:
    examples = []
    for line_no, record in read_records(path):
        if "t_cut_days" not in record.extra or "label" not in record.extra:
            raise ParseError("task records need 't_cut_days' and 'label'", line_no)
        try:
            t_cut_days = float(record.extra["t_cut_days"]) - (record.origin_days or 0.0)
            label = int(record.extra["label"])
        except (TypeError, ValueError) as exc:
            raise ParseError(f"malformed t_cut_days or label ({exc})", line_no) from exc
        if record.origin_days is None and record.events:
            t_cut_days -= record.events[0].timestamp
        if t_cut_days < 0:
            raise ParseError("t_cut_days precedes the patient's initial record", line_no)
        if not record.events:
            raise ParseError("task records need at least one event before the cut", line_no)
        seq = record_to_sequence(record, vocab, line_no, age_index, max_age_years)
        t_cut = float(to_model_time(t_cut_days))
        if seq.horizon < t_cut:
            seq = seq.with_events(seq.times, seq.codes, horizon=t_cut)
        examples.append(TaskExample(seq, t_cut, label))
    logger.info("Loaded %s task examples from %s", len(examples), path)
    return examples


def labels_of(examples: Sequence[TaskExample]) -> list[int]:
    return [example.label for example in examples]
