"""Dense-vector interchange format and the trainable projection head.

Upstream text encoders are out of scope: embeddings arrive precomputed in
a binary file ("HRE1").  The trainable surface is an affine head mapping a
d-dimensional embedding to an l-dimensional pre-binarization activation;
the head is what the alternating optimizer updates.

File formats (little-endian):

* Embeddings "HRE1": magic, u32 count, u32 dim, count*dim float32
  row-major, then count ids, each u16 length + UTF-8 bytes.
* Head "HRH1": magic, u32 l, u32 d, l*d float32 weights row-major,
  l float32 bias.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

EMBEDDINGS_MAGIC = b"HRE1"
HEAD_MAGIC = b"HRH1"


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-per-id matrix of float32 vectors, ids aligned positionally."""

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise FormatError("embedding data must be a 2-d matrix")
        if data.shape[0] != len(self.ids):
            raise FormatError(
                f"row count {data.shape[0]} != id count {len(self.ids)}"
            )
        if data.shape[1] < 1:
            raise FormatError("embedding dim must be positive")
        bad = ~np.isfinite(data)
        if bad.any():
            r, c = map(int, np.argwhere(bad)[0])
            raise FormatError(f"non-finite value at row {r}, column {c}")
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("duplicate ids in embedding matrix")
        object.__setattr__(self, "data", data)
        data.flags.writeable = False
        object.__setattr__(self, "_row", {i: r for r, i in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, id_: str) -> bool:
        return id_ in self._row  # type: ignore[attr-defined]

    def row_of(self, id_: str) -> int:
        try:
            return self._row[id_]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"no embedding for id {id_!r}") from None

    def vector(self, id_: str) -> np.ndarray:
        return self.data[self.row_of(id_)]

    def rows(self, ids: list[str] | tuple[str, ...]) -> np.ndarray:
        return self.data[[self.row_of(i) for i in ids]]


@dataclass(frozen=True)
class ProjectionHead:
    """Affine map from embedding space (d) to code space (l bits).

    Parameters are float64 in memory for exact gradient work and are
    stored as float32 on disk.  Code lengths must be multiples of 64
    before packing; that constraint is enforced where packing happens
    (training config, index build), not here, so that small analytic
    heads remain constructible in tests.
    """

    weights: np.ndarray  # (l, d)
    bias: np.ndarray  # (l,)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be a 2-d matrix")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
        if w.shape[0] < 1:
            raise ValueError("code length l must be positive")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("head parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        w.flags.writeable = False
        b.flags.writeable = False

    @property
    def l(self) -> int:
        return int(self.weights.shape[0])

    @property
    def d(self) -> int:
        return int(self.weights.shape[1])


def init_head(l: int, d: int, seed: int) -> ProjectionHead:
    """Seeded head: weights uniform in [-1/sqrt(d), +1/sqrt(d)], zero bias."""
    if l < 1 or d < 1:
        raise ValueError("l and d must be positive")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    weights = rng.uniform(-bound, bound, size=(l, d))
    return ProjectionHead(weights=weights, bias=np.zeros(l))


def project(head: ProjectionHead, v: np.ndarray) -> np.ndarray:
    """Affine projection ``weights @ v + bias`` of a single vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (head.d,):
        raise ValueError(f"vector length {v.shape} != ({head.d},)")
    return head.weights @ v + head.bias


def project_rows(head: ProjectionHead, matrix: np.ndarray) -> np.ndarray:
    """Batched projection: one output row per input row."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != head.d:
        raise ValueError(f"matrix shape {matrix.shape} incompatible with d={head.d}")
    return matrix @ head.weights.T + head.bias


def relaxed_code(head: ProjectionHead, v: np.ndarray, beta: float) -> np.ndarray:
    """Smooth surrogate code tanh(beta * projection), inside (-1, 1).

    Large beta drives components toward +-1; in float64 the open interval
    is only guaranteed up to machine rounding once tanh saturates.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    return np.tanh(beta * project(head, v))


def beta_schedule(step: int, sigma: float) -> float:
    """Sharpness schedule sqrt(sigma * step + 1); step counts completed updates."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(np.sqrt(sigma * step + 1.0))


def binarize(v: np.ndarray) -> np.ndarray:
    """Componentwise sign with sign(0) := +1, as int8 in {-1, +1}."""
    v = np.asarray(v)
    return np.where(v >= 0, 1, -1).astype(np.int8)


def save_embeddings(emb: EmbeddingMatrix, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<II", len(emb.ids), emb.dim))
        fh.write(np.ascontiguousarray(emb.data, dtype="<f4").tobytes())
        for id_ in emb.ids:
            raw = id_.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"id too long to serialize: {id_[:32]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Read an "HRE1" file; validates magic, size, and finiteness."""
    blob = Path(path).read_bytes()
    if blob[:4] != EMBEDDINGS_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {EMBEDDINGS_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError("truncated header")
    count, dim = struct.unpack_from("<II", blob, 4)
    if dim < 1:
        raise FormatError("embedding dim must be positive")
    offset = 12
    need = count * dim * 4
    if len(blob) < offset + need:
        raise FormatError(
            f"truncated payload: need {offset + need} bytes, file has {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset)
    data = data.reshape(count, dim).astype(np.float32)
    offset += need
    ids: list[str] = []
    for _ in range(count):
        if len(blob) < offset + 2:
            raise FormatError("truncated id table")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if len(blob) < offset + id_len:
            raise FormatError("truncated id table")
        ids.append(blob[offset : offset + id_len].decode("utf-8"))
        offset += id_len
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after id table")
    bad = ~np.isfinite(data)
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        raise FormatError(f"non-finite value at row {r}, column {c}")
    return EmbeddingMatrix(ids=tuple(ids), data=data)


def save_head(head: ProjectionHead, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<II", head.l, head.d))
        fh.write(np.ascontiguousarray(head.weights, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(head.bias, dtype="<f4").tobytes())


def load_head(path: str | Path) -> ProjectionHead:
    blob = Path(path).read_bytes()
    if blob[:4] != HEAD_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {HEAD_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError("truncated header")
    l, d = struct.unpack_from("<II", blob, 4)
    expect = 12 + (l * d + l) * 4
    if len(blob) != expect:
        raise FormatError(f"bad file size {len(blob)}, expected {expect}")
    weights = np.frombuffer(blob, dtype="<f4", count=l * d, offset=12).reshape(l, d)
    bias = np.frombuffer(blob, dtype="<f4", count=l, offset=12 + l * d * 4)
    try:
        return ProjectionHead(weights=weights, bias=bias)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
