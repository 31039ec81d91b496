"""Expert bundles, low-rank adapters and their binary file formats.

Both formats are little-endian and self-describing.

``FMW1`` (bundle, ``.fmw``)::

    b"FMW1" | u32 version | u32 len + utf8 name | u32 count
    per matrix: u32 len + utf8 target | u64 rows | u64 cols | u8 dtype (0=f64)
                | rows*cols f64, row-major

``FMA1`` (adapter, ``.fma``)::

    b"FMA1" | u32 version | u32 len + utf8 name | u32 len + utf8 base name
    | u32 count
    per entry: u32 len + utf8 target | u64 rank | B matrix | A matrix
    where each matrix is u64 rows | u64 cols | u8 dtype | payload as above.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import (
    BadMagicError,
    InvariantError,
    NonFiniteError,
    TruncatedFileError,
    VersionMismatchError,
)

BUNDLE_MAGIC = b"FMW1"
ADAPTER_MAGIC = b"FMA1"
FORMAT_VERSION = 1
DTYPE_F64 = 0


@dataclass
class ExpertBundle:
    """A named, ordered set of full-size weight matrices."""

    name: str
    matrices: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.matrices = {
            str(k): np.ascontiguousarray(v, dtype=np.float64) for k, v in self.matrices.items()
        }
        for target, m in self.matrices.items():
            if m.ndim != 2:
                raise InvariantError(f"target {target!r} is not 2-D: shape {m.shape}")

    @property
    def targets(self) -> list[str]:
        return list(self.matrices)

    @property
    def dims_signature(self) -> list[tuple[int, int]]:
        return [tuple(m.shape) for m in self.matrices.values()]

    def composable_with(self, other: "ExpertBundle") -> bool:
        return self.targets == other.targets and self.dims_signature == other.dims_signature

    def __getitem__(self, target: str) -> np.ndarray:
        return self.matrices[target]

    def __eq__(self, other):
        if not isinstance(other, ExpertBundle):
            return NotImplemented
        return (
            self.name == other.name
            and self.targets == other.targets
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.matrices.values(), other.matrices.values())
            )
        )


@dataclass
class AdapterEntry:
    target: str
    rank: int
    b: np.ndarray  # d_out x rank
    a: np.ndarray  # rank x d_in

    def __post_init__(self):
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.rank = int(self.rank)
        if self.b.ndim != 2 or self.a.ndim != 2:
            raise InvariantError(f"target {self.target!r}: B and A must be 2-D")
        if self.rank < 1:
            raise InvariantError(f"target {self.target!r}: rank must be positive, got {self.rank}")
        if self.b.shape[1] != self.rank or self.a.shape[0] != self.rank:
            raise InvariantError(
                f"target {self.target!r}: B is {self.b.shape}, A is {self.a.shape}, "
                f"rank is {self.rank}"
            )
        if self.rank > min(self.b.shape[0], self.a.shape[1]):
            raise InvariantError(
                f"target {self.target!r}: rank {self.rank} exceeds "
                f"min({self.b.shape[0]}, {self.a.shape[1]})"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.b.shape[0], self.a.shape[1])

    def product(self) -> np.ndarray:
        return self.b @ self.a


@dataclass
class LowRankAdapter:
    """Per-target ``B @ A`` factors anchored to the bundle called *base_name*."""

    name: str
    base_name: str
    entries: list[AdapterEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.target in seen:
                raise InvariantError(f"duplicate adapter target {e.target!r}")
            seen.add(e.target)

    def __iter__(self) -> Iterator[AdapterEntry]:
        return iter(self.entries)

    def entry(self, target: str) -> AdapterEntry | None:
        for e in self.entries:
            if e.target == target:
                return e
        return None

    @property
    def ranks(self) -> dict[str, int]:
        return {e.target: e.rank for e in self.entries}

    def __eq__(self, other):
        if not isinstance(other, LowRankAdapter):
            return NotImplemented
        if (self.name, self.base_name, len(self.entries)) != (
            other.name,
            other.base_name,
            len(other.entries),
        ):
            return False
        for x, y in zip(self.entries, other.entries):
            if (x.target, x.rank, x.b.shape, x.a.shape) != (y.target, y.rank, y.b.shape, y.a.shape):
                return False
            if x.b.tobytes() != y.b.tobytes() or x.a.tobytes() != y.a.tobytes():
                return False
        return True


# --- encoding -------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_matrix(m: np.ndarray, what: str) -> bytes:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} contains non-finite values")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f8").tobytes()
    return struct.pack("<QQB", rows, cols, DTYPE_F64) + payload


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: truncated at byte {self.pos} (wanted {n} more, "
                f"have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def matrix(self, what: str) -> np.ndarray:
        rows, cols, dtype = self.unpack("<QQB")
        if dtype != DTYPE_F64:
            raise VersionMismatchError(f"{self.path}: {what} has unsupported dtype tag {dtype}")
        raw = self.take(8 * rows * cols)
        m = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
        if not np.all(np.isfinite(m)):
            raise NonFiniteError(f"{self.path}: {what} contains non-finite values")
        return m

    def header(self, magic: bytes):
        got = self.take(len(magic)) if len(self.data) >= len(magic) else self.data
        if got != magic:
            raise BadMagicError(f"{self.path}: expected magic {magic!r}, found {bytes(got)!r}")
        (version,) = self.unpack("<I")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{self.path}: format version {version}, this reader supports {FORMAT_VERSION}"
            )

    def finish(self):
        if self.pos != len(self.data):
            raise TruncatedFileError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes after payload"
            )


def encode_bundle(b: ExpertBundle) -> bytes:
    if not b.matrices:
        raise InvariantError(f"bundle {b.name!r} has no matrices")
    parts = [BUNDLE_MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(b.name)]
    parts.append(struct.pack("<I", len(b.matrices)))
    for target, m in b.matrices.items():
        parts.append(_pack_str(target))
        parts.append(_pack_matrix(m, f"target {target!r}"))
    return b"".join(parts)


def decode_bundle(data: bytes, path="<bytes>") -> ExpertBundle:
    r = _Reader(data, path)
    r.header(BUNDLE_MAGIC)
    name = r.string()
    (count,) = r.unpack("<I")
    if count == 0:
        raise InvariantError(f"{path}: bundle has no matrices")
    matrices: dict[str, np.ndarray] = {}
    for _ in range(count):
        target = r.string()
        if target in matrices:
            raise InvariantError(f"{path}: duplicate target {target!r}")
        matrices[target] = r.matrix(f"target {target!r}")
    r.finish()
    return ExpertBundle(name, matrices)


def encode_adapter(a: LowRankAdapter) -> bytes:
    if not a.entries:
        raise InvariantError(f"adapter {a.name!r} has no entries")
    parts = [
        ADAPTER_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _pack_str(a.name),
        _pack_str(a.base_name),
        struct.pack("<I", len(a.entries)),
    ]
    for e in a.entries:
        parts.append(_pack_str(e.target))
        parts.append(struct.pack("<Q", e.rank))
        parts.append(_pack_matrix(e.b, f"B of {e.target!r}"))
        parts.append(_pack_matrix(e.a, f"A of {e.target!r}"))
    return b"".join(parts)


def decode_adapter(data: bytes, path="<bytes>") -> LowRankAdapter:
    r = _Reader(data, path)
    r.header(ADAPTER_MAGIC)
    name = r.string()
    base_name = r.string()
    (count,) = r.unpack("<I")
    if count == 0:
        raise InvariantError(f"{path}: adapter has no entries")
    entries = []
    for _ in range(count):
        target = r.string()
        (rank,) = r.unpack("<Q")
        b = r.matrix(f"B of {target!r}")
        a = r.matrix(f"A of {target!r}")
        entries.append(AdapterEntry(target, rank, b, a))
    r.finish()
    return LowRankAdapter(name, base_name, entries)


def save_bundle(b: ExpertBundle, path: str | os.PathLike) -> None:
    data = encode_bundle(b)
    with open(path, "wb") as f:
        f.write(data)


def load_bundle(path: str | os.PathLike) -> ExpertBundle:
    with open(path, "rb") as f:
        return decode_bundle(f.read(), path)


def save_adapter(a: LowRankAdapter, path: str | os.PathLike) -> None:
    data = encode_adapter(a)
    with open(path, "wb") as f:
        f.write(data)


def load_adapter(path: str | os.PathLike) -> LowRankAdapter:
    with open(path, "rb") as f:
        return decode_adapter(f.read(), path)
