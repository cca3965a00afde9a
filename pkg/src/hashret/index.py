"""Immutable packed-bit index with radius expansion and asymmetric re-ranking.

Codes are stored bit-packed (8 columns per byte, most significant bit
first) and additionally viewed as 64-bit words for fast XOR + popcount
scans.  Candidate generation runs one linear scan, buckets distances, and
keeps everything within the smallest radius that covers the requested
candidate count — including all ties at the boundary.  Re-ranking scores
the real-valued query vector against the +-1 candidate codes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyResultError
from .trainer import CodeMatrix, pack_signs, unpack_signs

_HAS_BITWISE_COUNT = hasattr(np, "bitwise_count")
_POPCOUNT_U8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _popcount_rows(words: np.ndarray) -> np.ndarray:
    """Per-row popcount of a 2-d uint64 array."""
    if _HAS_BITWISE_COUNT:
        return np.bitwise_count(words).sum(axis=1, dtype=np.int64)
    as_bytes = words.view(np.uint8)
    return _POPCOUNT_U8[as_bytes].sum(axis=1, dtype=np.int64)


@dataclass(frozen=True)
class HammingIndex:
    """Read-only packed codes plus the id table aligned to rows."""

    packed: np.ndarray  # (n, l//8) uint8, canonical byte layout
    prop_ids: tuple[str, ...]
    l: int
    words: np.ndarray = field(repr=False, default=None)  # (n, l//64) uint64 view

    def __post_init__(self) -> None:
        packed = np.ascontiguousarray(self.packed, dtype=np.uint8)
        if packed.ndim != 2 or packed.shape[1] * 8 != self.l:
            raise ValueError(f"packed shape {packed.shape} incompatible with l={self.l}")
        if self.l <= 0 or self.l % 64 != 0:
            raise ValueError(f"code length {self.l} must be a positive multiple of 64")
        if packed.shape[0] != len(self.prop_ids):
            raise ValueError("row count disagrees with prop_ids")
        packed.flags.writeable = False
        object.__setattr__(self, "packed", packed)
        object.__setattr__(self, "words", packed.view(np.uint64))

    @property
    def n(self) -> int:
        return int(self.packed.shape[0])

    def size_bytes(self) -> int:
        """Exact storage footprint: packed bits plus the serialized id table."""
        id_bytes = sum(2 + len(p.encode("utf-8")) for p in self.prop_ids)
        return self.n * self.l // 8 + id_bytes

    def codes_of(self, rows: np.ndarray) -> np.ndarray:
        """+-1 int8 codes for the given row indices."""
        return unpack_signs(self.packed[rows], self.l)


@dataclass(frozen=True)
class QueryCode:
    """Packed query bits, optionally with the pre-binarization projection."""

    bits: np.ndarray  # (l//8,) uint8
    l: int
    real: np.ndarray | None = None  # (l,) float64

    def __post_init__(self) -> None:
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.shape != (self.l // 8,) or self.l % 64 != 0:
            raise ValueError(f"bits shape {bits.shape} incompatible with l={self.l}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        if self.real is not None:
            real = np.asarray(self.real, dtype=np.float64)
            if real.shape != (self.l,):
                raise ValueError(f"real vector shape {real.shape} != ({self.l},)")
            signs = np.where(real >= 0, 1, -1).astype(np.int8)
            if not np.array_equal(pack_signs(signs[None, :])[0], bits):
                raise ValueError("bits must equal the binarized real vector")
            real.flags.writeable = False
            object.__setattr__(self, "real", real)

    @classmethod
    def from_real(cls, real: np.ndarray) -> "QueryCode":
        real = np.asarray(real, dtype=np.float64)
        signs = np.where(real >= 0, 1, -1).astype(np.int8)
        return cls(bits=pack_signs(signs[None, :])[0], l=real.shape[0], real=real)

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "QueryCode":
        signs = np.asarray(signs)
        return cls(bits=pack_signs(signs[None, :])[0], l=signs.shape[0])


@dataclass
class Candidate:
    """One scored index row; ``score`` is filled by re-ranking."""

    prop_id: str
    row: int
    distance: int
    bits: np.ndarray
    score: float | None = None


@dataclass(frozen=True)
class QueryStats:
    nanos: int
    candidates_examined: int


def build_index(codes: CodeMatrix | np.ndarray, prop_ids: Sequence[str]) -> HammingIndex:
    """Pack a +-1 code matrix; packing is bit-exact per the code file layout."""
    matrix = codes.codes if isinstance(codes, CodeMatrix) else np.asarray(codes)
    if matrix.shape[0] != len(prop_ids):
        raise ValueError(
            f"code rows {matrix.shape[0]} != prop id count {len(prop_ids)}"
        )
    return HammingIndex(
        packed=pack_signs(matrix), prop_ids=tuple(prop_ids), l=int(matrix.shape[1])
    )


def hamming_distance(a: np.ndarray, b: np.ndarray, l: int) -> int:
    """Number of differing bit positions between two packed codes."""
    a = np.ascontiguousarray(a, dtype=np.uint8)
    b = np.ascontiguousarray(b, dtype=np.uint8)
    if a.shape != b.shape or a.shape != (l // 8,) or l % 8 != 0:
        raise ValueError(f"packed shapes {a.shape}/{b.shape} incompatible with l={l}")
    if _HAS_BITWISE_COUNT:
        return int(np.bitwise_count(a ^ b).sum())
    return int(_POPCOUNT_U8[a ^ b].sum(dtype=np.int64))


def _all_distances(index: HammingIndex, qbits: np.ndarray) -> np.ndarray:
    qwords = np.ascontiguousarray(qbits, dtype=np.uint8).view(np.uint64)
    return _popcount_rows(index.words ^ qwords)


def radius_expand(index: HammingIndex, q: QueryCode, alpha: int) -> list[Candidate]:
    """All rows within the smallest radius that collects at least alpha.

    Ties at the boundary radius are all included, so the result may hold
    more than alpha entries.  Sorted by distance, then row order.
    """
    if not 1 <= alpha <= index.n:
        raise ValueError(f"alpha={alpha} out of range [1, {index.n}]")
    if q.l != index.l:
        raise ValueError(f"query width {q.l} != index width {index.l}")
    dist = _all_distances(index, q.bits)
    counts = np.bincount(dist, minlength=index.l + 1)
    cumulative = np.cumsum(counts)
    radius = int(np.searchsorted(cumulative, alpha))
    rows = np.flatnonzero(dist <= radius)
    rows = rows[np.argsort(dist[rows], kind="stable")]
    return [
        Candidate(
            prop_id=index.prop_ids[r],
            row=int(r),
            distance=int(dist[r]),
            bits=index.packed[r],
        )
        for r in rows
    ]


def full_scan_topk(index: HammingIndex, q: QueryCode, k: int) -> list[Candidate]:
    """Exact k nearest rows by Hamming distance; ties break by row order."""
    if not 1 <= k <= index.n:
        raise ValueError(f"k={k} out of range [1, {index.n}]")
    if q.l != index.l:
        raise ValueError(f"query width {q.l} != index width {index.l}")
    dist = _all_distances(index, q.bits)
    rows = np.argsort(dist, kind="stable")[:k]
    return [
        Candidate(
            prop_id=index.prop_ids[r],
            row=int(r),
            distance=int(dist[r]),
            bits=index.packed[r],
        )
        for r in rows
    ]


def _asymmetric_scores(candidates: Sequence[Candidate], real: np.ndarray) -> np.ndarray:
    """Inner products <real, code> computed from packed bits.

    For +-1 codes, <v, h> = 2 * (sum of v where the bit is set) - sum(v).
    """
    packed = np.stack([c.bits for c in candidates])
    ones = np.unpackbits(packed, axis=1).astype(np.float64)
    return 2.0 * (ones @ real) - real.sum()


def rerank_candidates(
    candidates: Sequence[Candidate], q: QueryCode, j: int
) -> list[Candidate]:
    """Top-j candidates by descending <real query, +-1 code>, scores filled.

    Ties break by ascending Hamming distance, then row order.
    """
    if q.real is None:
        raise ValueError("re-ranking requires the real-valued query vector")
    if j > len(candidates):
        raise ValueError(f"j={j} exceeds candidate count {len(candidates)}")
    if j < 0:
        raise ValueError("j must be non-negative")
    if not candidates or j == 0:
        return []
    scores = _asymmetric_scores(candidates, q.real)
    dists = np.array([c.distance for c in candidates])
    rows = np.array([c.row for c in candidates])
    order = np.lexsort((rows, dists, -scores))[:j]
    out = []
    for i in order:
        c = candidates[int(i)]
        out.append(
            Candidate(
                prop_id=c.prop_id,
                row=c.row,
                distance=c.distance,
                bits=c.bits,
                score=float(scores[int(i)]),
            )
        )
    return out


def rerank_top(candidates: Sequence[Candidate], q: QueryCode, j: int) -> list[str]:
    """Ids of the top-j candidates under asymmetric re-ranking."""
    return [c.prop_id for c in rerank_candidates(candidates, q, j)]


def search(
    index: HammingIndex, q: QueryCode, alpha: int, j: int
) -> tuple[list[Candidate], QueryStats]:
    """Radius expansion followed by re-ranking, with latency counters.

    Falls back to plain Hamming order when the query has no real vector
    (equivalent to ranking by the binarized inner product).
    """
    t0 = time.perf_counter_ns()
    candidates = radius_expand(index, q, alpha)
    j = min(j, len(candidates))
    if q.real is not None:
        ranked = rerank_candidates(candidates, q, j)
    else:
        ranked = candidates[:j]
    nanos = time.perf_counter_ns() - t0
    if not ranked:
        raise EmptyResultError("retrieval produced no candidates")
    return ranked, QueryStats(nanos=nanos, candidates_examined=len(candidates))
