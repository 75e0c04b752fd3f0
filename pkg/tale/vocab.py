"""Medical-code vocabulary with fixed per-code embedding vectors.

Two on-disk formats are supported:

* ``tsv``: ``code<TAB>description<TAB>f1 f2 ... fd`` per line.
* ``binary``: ``TEV1`` magic, u32 count, u32 dim, a code-string table and a description table
  (u32 length + UTF-8 bytes per entry), then little-endian float32 embeddings row-major.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError, DuplicateCodeError, InputError, ParseError, UnknownCodeError

logger = logging.getLogger(__name__)

MAGIC = b"TEV1"
SUPPORTED_FORMATS = {"tsv", "binary"}


@dataclass(frozen=True)
class CodeVocabulary:
    codes: tuple[str, ...]
    descriptions: dict[str, str]
    embeddings: np.ndarray
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        matrix = np.array(self.embeddings, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(self.codes):
            raise DimensionError(
                f"embedding matrix shape {matrix.shape} does not match {len(self.codes)} codes"
            )
        if matrix.shape[1] < 1:
            raise DimensionError("embedding dimension must be positive")
        if not np.all(np.isfinite(matrix)):
            raise DimensionError("embedding rows must be finite")
        index: dict[str, int] = {}
        for position, code in enumerate(self.codes):
            if code in index:
                raise DuplicateCodeError(f"duplicate code {code!r}")
            index[code] = position
        matrix.flags.writeable = False
        object.__setattr__(self, "embeddings", matrix)
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.codes)

    @property
    def d_emb(self) -> int:
        return int(self.embeddings.shape[1])

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def index_of(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise UnknownCodeError(f"code {code!r} is not in the vocabulary") from None

    def indices(self, codes: Iterable[str]) -> list[int]:
        return [self.index_of(code) for code in codes]


def random_vocabulary(n_codes: int, d_emb: int = 64, seed: int = 0) -> CodeVocabulary:
    """Gaussian embeddings with standard deviation 1/sqrt(d_emb); codes are ``C0..C{n-1}``."""

    if n_codes < 1 or d_emb < 1:
        raise DimensionError(f"n_codes and d_emb must be >= 1, got {n_codes} and {d_emb}")
    rng = np.random.default_rng(seed)
    matrix = rng.normal(0.0, 1.0 / math.sqrt(d_emb), size=(n_codes, d_emb))
    codes = tuple(f"C{i}" for i in range(n_codes))
    descriptions = {code: f"synthetic code {i}" for i, code in enumerate(codes)}
    return CodeVocabulary(codes, descriptions, matrix)


def load_vocabulary(path: str | Path, format: str = "tsv") -> CodeVocabulary:
    path = Path(path)
    if format not in SUPPORTED_FORMATS:
        raise InputError(f"format must be one of {sorted(SUPPORTED_FORMATS)}")
    if format == "binary":
        vocab = _read_binary(path)
    else:
        vocab = _read_tsv(path)
    logger.info("Loaded %s codes (d_emb=%s) from %s", vocab.size, vocab.d_emb, path)
    return vocab


def save_vocabulary(vocab: CodeVocabulary, path: str | Path, format: str = "tsv") -> None:
    path = Path(path)
    if format not in SUPPORTED_FORMATS:
        raise InputError(f"format must be one of {sorted(SUPPORTED_FORMATS)}")
    if format == "binary":
        path.write_bytes(_encode_binary(vocab))
        return
    lines = []
    for code, row in zip(vocab.codes, vocab.embeddings):
        floats = " ".join(format_float(x) for x in row)
        description = vocab.descriptions.get(code, "").replace("\t", " ").replace("\n", " ")
        lines.append(f"{code}\t{description}\t{floats}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_float(value: float) -> str:
    # 9 significant digits reproduce a float32 exactly
    return format(float(value), ".9g")


def guess_format(path: str | Path) -> str:
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
    return "binary" if head == MAGIC else "tsv"


def _read_tsv(path: Path) -> CodeVocabulary:
    codes: list[str] = []
    descriptions: dict[str, str] = {}
    rows: list[list[float]] = []
    seen: set[str] = set()
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(parts)}", line_no)
            code, description, vector = parts
            code = code.strip()
            if not code:
                raise ParseError("empty code", line_no)
            try:
                values = [float(x) for x in vector.split()]
            except ValueError as exc:
                raise ParseError(f"invalid embedding value ({exc})", line_no) from exc
            if not values:
                raise ParseError("empty embedding", line_no)
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DimensionError(f"line {line_no}: embedding has {len(values)} values, expected {dim}")
            if code in seen:
                raise DuplicateCodeError(f"line {line_no}: duplicate code {code!r}")
            seen.add(code)
            codes.append(code)
            descriptions[code] = description
            rows.append(values)
    if not codes:
        raise ParseError(f"no vocabulary rows in {path}")
    return CodeVocabulary(tuple(codes), descriptions, np.array(rows, dtype=np.float32))


def _encode_binary(vocab: CodeVocabulary) -> bytes:
    chunks = [MAGIC, struct.pack("<II", vocab.size, vocab.d_emb)]
    for code in vocab.codes:
        encoded = code.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
    for code in vocab.codes:
        encoded = vocab.descriptions.get(code, "").encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
    chunks.append(np.ascontiguousarray(vocab.embeddings, dtype="<f4").tobytes())
    return b"".join(chunks)


def _read_binary(path: Path) -> CodeVocabulary:
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ParseError(f"{path} is not a TEV1 vocabulary file")
    try:
        count, dim = struct.unpack_from("<II", blob, 4)
        offset = 12
        strings: list[str] = []
        for _ in range(2 * count):
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            strings.append(blob[offset : offset + length].decode("utf-8"))
            offset += length
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"truncated or corrupt string table in {path}") from exc
    expected = count * dim * 4
    if len(blob) - offset != expected:
        raise DimensionError(f"{path}: expected {expected} embedding bytes, found {len(blob) - offset}")
    matrix = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    codes = tuple(strings[:count])
    descriptions = dict(zip(codes, strings[count:]))
    return CodeVocabulary(codes, descriptions, matrix.astype(np.float32))
