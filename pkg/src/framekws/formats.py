"""Binary and tab-separated file formats.

Binary layouts (all integers little-endian uint32, all reals little-endian
float32):

* feature archive: ``b"KWSF"``, version, rows, cols, row-major payload.
* tensor file: ``b"KWSP"``, version, 64-byte hex fingerprint, header length,
  UTF-8 JSON header, tensor count, then per tensor (sorted by name) name
  length, name, ndim, dims, payload.
* index file: ``b"KWSI"``, version, 64-byte config fingerprint, 64-byte
  parameter digest, record count, then per utterance (sorted by id) id
  length, id, rows, cols, payload.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .records import Hypothesis, Reference, WordSpan

FEATURE_MAGIC = b"KWSF"
TENSOR_MAGIC = b"KWSP"
INDEX_MAGIC = b"KWSI"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class FormatError(Exception):
    """A file is not in the expected format (bad magic, version or header)."""


class FingerprintMismatch(FormatError):
    """A file was produced for a different model configuration."""


class TruncatedFile(FormatError):
    """A file ends before its declared payload does."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def atomic_write(path, mode: str = "wb") -> Iterator:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _f32le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"{self.path}: file ends inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(what)
        return self.take(n, what).decode("utf-8")

    def f32(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def _check_magic(reader: _Reader, magic: bytes) -> None:
    got = reader.data[:4]
    if got != magic:
        raise FormatError(f"{reader.path}: bad magic {got!r}, expected {magic!r}")
    reader.pos = 4
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{reader.path}: unsupported format version {version}")


# ---------------------------------------------------------------------------
# feature archive
# ---------------------------------------------------------------------------

def feature_bytes(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
    return FEATURE_MAGIC + _U32.pack(FORMAT_VERSION) + _U32.pack(m.shape[0]) + _U32.pack(m.shape[1]) + _f32le(m)


def write_features(path, matrix: np.ndarray) -> None:
    with atomic_write(path) as fh:
        fh.write(feature_bytes(matrix))


def read_features(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), path)
    _check_magic(r, FEATURE_MAGIC)
    rows, cols = r.u32("row count"), r.u32("column count")
    m = r.f32((rows, cols), "feature payload")
    if not r.at_end():
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after declared payload")
    return m


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------

def tensor_file_bytes(fingerprint: str, header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    if len(fingerprint) != 64:
        raise ValueError("fingerprint must be 64 hex characters")
    head = canonical_json(header).encode("utf-8")
    parts = [TENSOR_MAGIC, _U32.pack(FORMAT_VERSION), fingerprint.encode("ascii"),
             _U32.pack(len(head)), head, _U32.pack(len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        nb = name.encode("utf-8")
        parts += [_U32.pack(len(nb)), nb, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(_f32le(arr))
    return b"".join(parts)


def read_tensor_file(path, expected_names: "callable | None" = None):
    """Return ``(fingerprint, header, tensors)``.

    ``expected_names(header)`` may supply the ordered tensor names the file
    should hold; it is used to name the missing tensor on truncation.
    """
    r = _Reader(Path(path).read_bytes(), path)
    _check_magic(r, TENSOR_MAGIC)
    fingerprint = r.take(64, "fingerprint").decode("ascii", errors="replace")
    try:
        header = json.loads(r.text("header"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    expected = sorted(expected_names(header)) if expected_names else None
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name = expected[i] if expected and i < len(expected) else f"#{i}"
        try:
            name = r.text(f"tensor {name}")
            ndim = r.u32(f"tensor {name}")
            shape = tuple(r.u32(f"tensor {name}") for _ in range(ndim))
            tensors[name] = r.f32(shape, f"tensor {name}")
        except TruncatedFile:
            raise TruncatedFile(f"{path}: truncated, missing tensor {name!r}") from None
    if not r.at_end():
        raise FormatError(f"{path}: trailing bytes after {count} tensors")
    return fingerprint, header, tensors


# ---------------------------------------------------------------------------
# index files
# ---------------------------------------------------------------------------

def index_file_bytes(fingerprint: str, param_digest: str, records: Mapping[str, np.ndarray]) -> bytes:
    parts = [INDEX_MAGIC, _U32.pack(FORMAT_VERSION), fingerprint.encode("ascii"),
             param_digest.encode("ascii"), _U32.pack(len(records))]
    for uid in sorted(records):
        H = np.asarray(records[uid])
        ub = uid.encode("utf-8")
        parts += [_U32.pack(len(ub)), ub, _U32.pack(H.shape[0]), _U32.pack(H.shape[1]), _f32le(H)]
    return b"".join(parts)


def read_index_file(path):
    """Return ``(fingerprint, param_digest, {utt_id: matrix})``."""
    r = _Reader(Path(path).read_bytes(), path)
    _check_magic(r, INDEX_MAGIC)
    fingerprint = r.take(64, "fingerprint").decode("ascii", errors="replace")
    digest = r.take(64, "parameter digest").decode("ascii", errors="replace")
    count = r.u32("record count")
    records = {}
    for i in range(count):
        uid = r.text(f"record {i}")
        rows, cols = r.u32(f"record {uid}"), r.u32(f"record {uid}")
        records[uid] = r.f32((rows, cols), f"record {uid}")
    if not r.at_end():
        raise FormatError(f"{path}: trailing bytes after {count} records")
    return fingerprint, digest, records


# ---------------------------------------------------------------------------
# tab-separated text
# ---------------------------------------------------------------------------

def read_rows(path, n_fields: int, what: str):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != n_fields:
                raise FormatError(f"{path}:{lineno}: expected {n_fields} fields for {what}, got {len(fields)}")
            yield lineno, fields


def write_rows(path, rows: Iterable[Iterable]) -> None:
    with atomic_write(path, "w") as fh:
        for row in rows:
            fh.write("\t".join(str(f) for f in row) + "\n")


def fmt_score(x: float) -> str:
    return repr(float(x))


def fmt_ms(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def write_hypotheses(path, hyps: Iterable[Hypothesis]) -> None:
    write_rows(path, ((h.query_id, h.utt_id, fmt_ms(h.start_ms), fmt_ms(h.end_ms), fmt_score(h.score))
                       for h in hyps))


def read_hypotheses(path) -> list[Hypothesis]:
    out = []
    for lineno, (q, u, s, e, sc) in read_rows(path, 5, "hypothesis"):
        try:
            out.append(Hypothesis(q, u, float(s), float(e), float(sc)))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_references(path, refs: Iterable[Reference]) -> None:
    write_rows(path, ((r.query_id, r.utt_id, fmt_ms(r.start_ms), fmt_ms(r.end_ms)) for r in refs))


def read_references(path) -> list[Reference]:
    out = []
    for lineno, (q, u, s, e) in read_rows(path, 4, "reference"):
        try:
            out.append(Reference(q, u, float(s), float(e)))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_alignments(path, alignments: Mapping[str, list[WordSpan]]) -> None:
    write_rows(path, ((uid, w.word, w.start_ms, w.end_ms) for uid in sorted(alignments) for w in alignments[uid]))


def read_alignments(path) -> dict[str, list[WordSpan]]:
    out: dict[str, list[WordSpan]] = {}
    for lineno, (uid, word, s, e) in read_rows(path, 4, "alignment"):
        try:
            out.setdefault(uid, []).append(WordSpan(word, int(s), int(e)))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_pairs(path, pairs: Iterable[tuple]) -> None:
    write_rows(path, pairs)


def read_pairs(path) -> list[tuple[str, str]]:
    return [tuple(f) for _, f in read_rows(path, 2, "key/value pair")]


def write_lines(path, lines: Iterable[str]) -> None:
    with atomic_write(path, "w") as fh:
        for line in lines:
            fh.write(f"{line}\n")


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]
