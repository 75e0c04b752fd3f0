"""On-disk artifacts: model checkpoints, the loss log and evaluation reports.

Checkpoint layout (``TCK1``): magic, u32 little-endian header length, UTF-8 JSON header, then the
arrays listed in the header as little-endian float64, row-major, in header order.
"""

import csv
import json
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from pydantic import ValidationError

from .errors import ConfigError, ParseError
from .model import ModelState, add_task_head
from .schemas import RunConfig
from .vocab import CodeVocabulary

logger = logging.getLogger(__name__)

MAGIC = b"TCK1"
CHECKPOINT_NAME = "model.tck"
LOSS_LOG_FIELDS = ("epoch", "split", "loss_time", "loss_code", "loss_joint")


def checkpoint_file(path: str | Path) -> Path:
    """A directory (existing, or spelled with a trailing slash, or without suffix) holds ``model.tck``."""

    p = Path(path)
    if p.is_dir() or str(path).endswith(("/", os.sep)) or not p.suffix:
        return p / CHECKPOINT_NAME
    return p


def _to_json(value: Any) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _from_json(raw: bytes) -> Any:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header ({exc})") from exc


def save_checkpoint(model: ModelState, path: str | Path, optimizer: dict[str, Any] | None = None) -> Path:
    """Write the model (and optional Adam state ``{"t", "m", "v"}``) to ``path``."""

    target = checkpoint_file(path)
    target.parent.mkdir(parents=True, exist_ok=True)

    arrays: list[tuple[str, np.ndarray]] = [("embeddings", model.vocab.embeddings.astype(np.float64))]
    arrays += [(f"param/{name}", p.data) for name, p in model.named_parameters().items()]
    if optimizer is not None:
        arrays += [(f"adam.m/{name}", value) for name, value in optimizer["m"].items()]
        arrays += [(f"adam.v/{name}", value) for name, value in optimizer["v"].items()]

    header = {
        "stage": model.stage,
        "config": model.config.model_dump(mode="json"),
        "n_demographics": model.n_demographics,
        "seed": model.seed,
        "tasks": list(model.task_heads),
        "vocab": {"codes": list(model.vocab.codes), "descriptions": model.vocab.descriptions},
        "arrays": [{"name": name, "shape": list(np.shape(value))} for name, value in arrays],
        "adam_t": None if optimizer is None else int(optimizer["t"]),
    }
    encoded = _to_json(header)
    with open(target, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        for _, value in arrays:
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    logger.info("Saved %s checkpoint to %s", model.stage, target)
    return target


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict[str, Any] | None]:
    """Return ``(model, optimizer_state_or_None)``."""

    source = checkpoint_file(path)
    with open(source, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ParseError(f"{source} is not a model checkpoint (bad magic)")
    if len(blob) < 8:
        raise ParseError(f"{source} is truncated")
    (header_len,) = struct.unpack("<I", blob[4:8])
    header = _from_json(blob[8 : 8 + header_len])

    offset = 8 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise ParseError(f"{source} is truncated inside array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise ParseError(f"{source} has {len(blob) - offset} trailing bytes")

    try:
        config = RunConfig.model_validate(header["config"])
    except ValidationError as exc:
        raise ConfigError(f"checkpoint config is invalid: {exc}") from exc
    vocab = CodeVocabulary(
        tuple(header["vocab"]["codes"]),
        dict(header["vocab"]["descriptions"]),
        arrays["embeddings"].astype(np.float32),
    )
    model = ModelState(vocab, config, int(header["n_demographics"]), seed=int(header["seed"]))
    for task in header["tasks"]:
        add_task_head(model, task)
    model.restore({name[len("param/"):]: value for name, value in arrays.items() if name.startswith("param/")})
    model.stage = header["stage"]

    optimizer = None
    if header.get("adam_t") is not None:
        optimizer = {
            "t": int(header["adam_t"]),
            "m": {name[len("adam.m/"):]: v for name, v in arrays.items() if name.startswith("adam.m/")},
            "v": {name[len("adam.v/"):]: v for name, v in arrays.items() if name.startswith("adam.v/")},
        }
    logger.info("Loaded %s checkpoint from %s", model.stage, source)
    return model, optimizer


class LossLog:
    """Append-only CSV of per-epoch losses."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, epoch: int, split: str, loss_time: float, loss_code: float, loss_joint: float) -> None:
        with self._lock:
            fresh = not self.path.exists() or self.path.stat().st_size == 0
            with open(self.path, "a", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                if fresh:
                    writer.writerow(LOSS_LOG_FIELDS)
                writer.writerow([epoch, split, repr(float(loss_time)), repr(float(loss_code)), repr(float(loss_joint))])

    def rows(self) -> list[dict[str, str]]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))


def write_report(metrics: dict[str, float], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = {key: float(value) for key, value in metrics.items()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def write_instances(rows: Iterable[dict[str, Any]], fieldnames: list[str], path: str | Path) -> int:
    count = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            count += 1
    return count
