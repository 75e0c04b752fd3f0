"""Patient event sequences: temporal preprocessing, roll-up maps, JSONL ingestion and splits.

Preprocessed time is ``ln(1 + days / 7)`` where ``days`` is measured from the patient's initial
record (the first event unless the record carries an explicit ``origin_days``).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
from pydantic import ValidationError

from .errors import (
    EmptySequenceError,
    InputError,
    MappingError,
    OrderingError,
    ParseError,
    SplitSizeError,
    UnknownCodeError,
)
from .schemas import RawEvent
from .vocab import CodeVocabulary

logger = logging.getLogger(__name__)

DAYS_PER_WEEK = 7.0
DAYS_PER_YEAR = 365.25


def to_model_time(days):
    """Raw days since the initial record -> log-week model time."""

    return np.log1p(np.asarray(days, dtype=np.float64) / DAYS_PER_WEEK)


def to_days(t):
    """Inverse of :func:`to_model_time`."""

    return DAYS_PER_WEEK * np.expm1(np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class EventSequence:
    patient_id: str
    times: np.ndarray
    codes: np.ndarray
    demographics: np.ndarray
    horizon: float
    age_index: int | None = None
    max_age_years: float = 100.0
    _distinct: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        times = np.array(self.times, dtype=np.float64).reshape(-1)
        codes = np.array(self.codes, dtype=np.int64).reshape(-1)
        demographics = np.array(self.demographics, dtype=np.float64).reshape(-1)
        if times.shape != codes.shape:
            raise InputError(f"{len(times)} times but {len(codes)} codes for {self.patient_id}")
        if not np.all(np.isfinite(times)):
            raise InputError(f"non-finite event time for {self.patient_id}")
        if np.any(np.diff(times) < 0):
            raise OrderingError(f"events of {self.patient_id} are not sorted by time")
        if len(times) and times[-1] > self.horizon:
            raise InputError(f"event after horizon {self.horizon} for {self.patient_id}")
        if self.age_index is not None and self.age_index >= len(demographics):
            raise InputError(f"age_index {self.age_index} outside {len(demographics)} demographics")
        for arr in (times, codes, demographics):
            arr.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "demographics", demographics)
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "_distinct", np.unique(times))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def events(self) -> list[tuple[float, int]]:
        return [(float(t), int(c)) for t, c in zip(self.times, self.codes)]

    @property
    def distinct_times(self) -> np.ndarray:
        return self._distinct

    def history_bounds(self, t: float, window: int, strict: bool = False) -> tuple[int, int]:
        """Index range ``[lo, hi)`` of the (at most ``window``) most recent events at or before ``t``.

        With ``strict`` only events strictly before ``t`` count.
        """

        hi = int(np.searchsorted(self.times, t, side="left" if strict else "right"))
        return max(0, hi - window), hi

    def covariates(self, t: float) -> np.ndarray:
        """Z(t): the demographics with the age entry advanced to time ``t``."""

        z = self.demographics.copy()
        if self.age_index is not None:
            age_years = z[self.age_index] + float(to_days(max(t, 0.0))) / DAYS_PER_YEAR
            z[self.age_index] = min(age_years / self.max_age_years, 1.0)
        return z

    def with_events(self, times: Sequence[float], codes: Sequence[int], horizon: float | None = None) -> "EventSequence":
        return EventSequence(
            self.patient_id,
            np.asarray(times, dtype=np.float64),
            np.asarray(codes, dtype=np.int64),
            self.demographics,
            self.horizon if horizon is None else horizon,
            self.age_index,
            self.max_age_years,
        )


def preprocess_times(
    raw: Sequence[RawEvent],
    vocab: CodeVocabulary,
    unit: str = "weeks",
    *,
    patient_id: str = "",
    demographics: Sequence[float] = (),
    origin_days: float | None = None,
    horizon_days: float | None = None,
    age_index: int | None = None,
    max_age_years: float = 100.0,
) -> EventSequence:
    if unit != "weeks":
        raise InputError(f"unsupported time unit {unit!r}; only 'weeks' is implemented")
    if not raw:
        raise EmptySequenceError(f"no events for patient {patient_id!r}")
    stamps = np.array([event.timestamp for event in raw], dtype=np.float64)
    if np.any(np.diff(stamps) < 0):
        position = int(np.argmax(np.diff(stamps) < 0)) + 1
        raise OrderingError(f"event {position} of patient {patient_id!r} precedes its predecessor")
    origin = stamps[0] if origin_days is None else float(origin_days)
    relative = stamps - origin
    if np.any(relative < 0):
        raise OrderingError(f"patient {patient_id!r} has events before the origin {origin}")
    times = to_model_time(relative)
    horizon = float(times[-1])
    if horizon_days is not None:
        horizon = max(horizon, float(to_model_time(float(horizon_days) - origin)))
    codes = vocab.indices(event.code for event in raw)
    return EventSequence(patient_id, times, codes, np.asarray(demographics, dtype=np.float64),
                         horizon, age_index, max_age_years)


def validate_rollup(mapping: dict[str, str]) -> None:
    """A roll-up map must send codes to final codes: no target may itself be rewritten."""

    for source, target in mapping.items():
        if target != source and target in mapping and mapping[target] != target:
            chain = [source, target]
            seen = {source}
            node = target
            while node in mapping and mapping[node] != node and node not in seen:
                seen.add(node)
                node = mapping[node]
                chain.append(node)
            kind = "cyclic" if node in seen else "chained"
            raise MappingError(f"{kind} roll-up mapping: {' -> '.join(chain)}")


def apply_rollup(raw: Sequence[RawEvent], mapping: dict[str, str]) -> list[RawEvent]:
    validate_rollup(mapping)
    return [
        event if event.code not in mapping else RawEvent(timestamp=event.timestamp, code=mapping[event.code])
        for event in raw
    ]


def load_rollup(path: str | Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError("expected 'source<TAB>target'", line_no)
            source, target = parts[0].strip(), parts[1].strip()
            if mapping.get(source, target) != target:
                raise MappingError(f"line {line_no}: {source} mapped to both {mapping[source]} and {target}")
            mapping[source] = target
    validate_rollup(mapping)
    return mapping


# JSONL records


@dataclass
class RawRecord:
    patient_id: str
    demographics: list[float]
    events: list[RawEvent]
    origin_days: float | None = None
    horizon_days: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        payload: dict[str, Any] = {
            "patient_id": self.patient_id,
            "demographics": self.demographics,
            "events": [[event.timestamp, event.code] for event in self.events],
        }
        if self.origin_days is not None:
            payload["origin_days"] = self.origin_days
        if self.horizon_days is not None:
            payload["horizon_days"] = self.horizon_days
        payload.update(self.extra)
        return json.dumps(payload)


_RECORD_KEYS = {"patient_id", "demographics", "events", "origin_days", "horizon_days"}


def _parse_record(line: str, line_no: int) -> RawRecord:
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line_no) from exc
    if not isinstance(payload, dict):
        raise ParseError("expected a JSON object", line_no)
    try:
        events = [RawEvent(timestamp=float(t), code=str(c)) for t, c in payload.get("events", [])]
        demographics = [float(x) for x in payload.get("demographics", [])]
    except (TypeError, ValueError, ValidationError) as exc:
        raise ParseError(f"malformed events or demographics ({exc})", line_no) from exc
    origin = payload.get("origin_days")
    horizon = payload.get("horizon_days")
    return RawRecord(
        patient_id=str(payload.get("patient_id", f"line-{line_no}")),
        demographics=demographics,
        events=events,
        origin_days=None if origin is None else float(origin),
        horizon_days=None if horizon is None else float(horizon),
        extra={k: v for k, v in payload.items() if k not in _RECORD_KEYS},
    )


def read_records(path: str | Path) -> Iterator[tuple[int, RawRecord]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if line.strip():
                yield line_no, _parse_record(line, line_no)


def write_records(records: Iterable[RawRecord], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.to_json() + "\n")
            count += 1
    return count


def record_to_sequence(record: RawRecord, vocab: CodeVocabulary, line_no: int | None = None,
                       age_index: int | None = None, max_age_years: float = 100.0) -> EventSequence:
    try:
        return preprocess_times(
            record.events,
            vocab,
            patient_id=record.patient_id,
            demographics=record.demographics,
            origin_days=record.origin_days,
            horizon_days=record.horizon_days,
            age_index=age_index,
            max_age_years=max_age_years,
        )
    except UnknownCodeError as exc:
        raise UnknownCodeError(f"line {line_no}: {exc}") from exc


def load_dataset(path: str | Path, vocab: CodeVocabulary, *, require_events: bool = True,
                 age_index: int | None = None, max_age_years: float = 100.0) -> list[EventSequence]:
    """Read a JSONL dataset; sequences without events are skipped when ``require_events``."""

    sequences: list[EventSequence] = []
    skipped = 0
    for line_no, record in read_records(path):
        if not record.events:
            if require_events:
                skipped += 1
                continue
            horizon = 0.0 if record.horizon_days is None else float(
                to_model_time(record.horizon_days - (record.origin_days or 0.0)))
            sequences.append(EventSequence(record.patient_id, [], [], record.demographics, horizon,
                                           age_index, max_age_years))
            continue
        sequences.append(record_to_sequence(record, vocab, line_no, age_index, max_age_years))
    if skipped:
        logger.warning("Skipped %s sequences without events in %s", skipped, path)
    logger.info("Loaded %s sequences from %s", len(sequences), path)
    return sequences


def sequence_to_record(seq: EventSequence, vocab: CodeVocabulary) -> RawRecord:
    days = to_days(seq.times)
    events = [RawEvent(timestamp=float(d), code=vocab.codes[int(c)]) for d, c in zip(days, seq.codes)]
    return RawRecord(
        patient_id=seq.patient_id,
        demographics=[float(x) for x in seq.demographics],
        events=events,
        origin_days=0.0,
        horizon_days=float(to_days(seq.horizon)),
    )


def save_dataset(sequences: Iterable[EventSequence], vocab: CodeVocabulary, path: str | Path) -> int:
    return write_records((sequence_to_record(seq, vocab) for seq in sequences), path)


def split(dataset: Sequence, fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
          seed: int = 0) -> tuple[list, list, list]:
    """Deterministic shuffled train/validation/test partition."""

    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise InputError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n = len(dataset)
    required = sum(1 for f in fractions if f > 0)
    if n < max(required, 1):
        raise SplitSizeError(f"cannot split {n} sequences into {required} non-empty parts")
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    if fractions[1] > 0:
        n_val = max(n_val, 1)
    if fractions[2] > 0:
        n_test = max(n_test, 1)
    n_train = n - n_val - n_test
    if fractions[0] > 0 and n_train < 1:
        raise SplitSizeError(f"cannot split {n} sequences into {required} non-empty parts")
    order = np.random.default_rng(seed).permutation(n)
    items = [dataset[i] for i in order]
    return items[:n_train], items[n_train : n_train + n_val], items[n_train + n_val :]
