"""Alternating optimization of query-side head and database-side codes.

The database codes H (one +-1 row per proposition) are free variables, not
the output of any encoder.  Training alternates two phases:

* theta-step: with H fixed, stochastic gradient descent on the affine
  head through the smooth tanh relaxation, whose sharpness beta grows as
  sqrt(sigma * step + 1) over completed minibatch updates.
* H-step: with the head fixed, a closed-form sign update of H, one column
  at a time in ascending order, each column using the most recent values
  of all other columns.

Supervision comes either from labeled triples (query, positives,
negatives) or, absent labels, from sampling m propositions to act as
their own queries, each matching only itself.  The +-1 matrix S holds one
row per training instance and one column per corpus proposition; the
anchor term weighted by gamma ties a sampled proposition's free code to
its own relaxed code and is only active in sampled mode.

Code file "HRC1" (little-endian): magic, u32 n, u32 l, then n rows of
l/8 bytes; bit 1 means +1, most significant bit first within each byte.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus
from .embeddings import (
    EmbeddingMatrix,
    ProjectionHead,
    beta_schedule,
    binarize,
    init_head,
)
from .errors import CorpusError, FormatError, NumericError

CODES_MAGIC = b"HRC1"


def derive_seed(seed: int, label: str) -> int:
    """Deterministic per-purpose seed derived from one root seed."""
    return (int(seed) & 0xFFFFFFFF) ^ zlib.crc32(label.encode("utf-8"))


@dataclass(frozen=True)
class Triple:
    """One labeled training instance: a query with graded propositions."""

    query_id: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]


def load_triples(path: str | Path) -> list[Triple]:
    """Read JSONL lines {"query_id":…, "positive":[…], "negative":[…]}."""
    out: list[Triple] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            try:
                out.append(
                    Triple(
                        query_id=str(obj["query_id"]),
                        positives=tuple(obj["positive"]),
                        negatives=tuple(obj.get("negative", ())),
                    )
                )
            except KeyError as exc:
                raise FormatError(f"line {line_no}: missing field {exc}") from None
    return out


def save_triples(triples: Sequence[Triple], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(
                json.dumps(
                    {
                        "query_id": t.query_id,
                        "positive": list(t.positives),
                        "negative": list(t.negatives),
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


@dataclass(frozen=True)
class SupervisionSet:
    """Dense +-1 supervision over (training row, proposition) pairs.

    ``omega`` holds the corpus row of each training instance when the
    instances are sampled propositions; it is None in labeled mode, where
    rows are external queries with no corpus row of their own.
    """

    S: np.ndarray  # (m, n) int8
    row_ids: tuple[str, ...]
    omega: np.ndarray | None = None  # (m,) int64 rows into the corpus
    positives: tuple[tuple[int, ...], ...] = ()
    negatives: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self) -> None:
        S = np.asarray(self.S, dtype=np.int8)
        if S.ndim != 2 or S.shape[0] != len(self.row_ids):
            raise ValueError("supervision matrix shape disagrees with row ids")
        if not np.isin(S, (-1, 1)).all():
            raise ValueError("supervision entries must be exactly +-1")
        if self.omega is not None:
            om = np.asarray(self.omega, dtype=np.int64)
            if om.shape != (S.shape[0],):
                raise ValueError("omega length disagrees with supervision rows")
            if len(np.unique(om)) != len(om):
                raise ValueError("omega indices must be distinct")
            if om.min() < 0 or om.max() >= S.shape[1]:
                raise ValueError("omega index out of range")
            object.__setattr__(self, "omega", om)
        object.__setattr__(self, "S", S)

    @property
    def m(self) -> int:
        return int(self.S.shape[0])

    @property
    def n(self) -> int:
        return int(self.S.shape[1])


@dataclass(frozen=True)
class CodeMatrix:
    """Learned +-1 codes, one row per corpus proposition in file order."""

    codes: np.ndarray  # (n, l) int8

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes, dtype=np.int8)
        if codes.ndim != 2:
            raise ValueError("codes must be a 2-d matrix")
        if not np.isin(codes, (-1, 1)).all():
            raise ValueError("code entries must be exactly +-1")
        object.__setattr__(self, "codes", codes)
        codes.flags.writeable = False

    @property
    def n(self) -> int:
        return int(self.codes.shape[0])

    @property
    def l(self) -> int:
        return int(self.codes.shape[1])


@dataclass(frozen=True)
class TrainConfig:
    l: int
    gamma: float = 200.0
    sigma: float = 0.1
    epochs: int = 40
    batch_size: int = 128
    learning_rate: float = 1e-3
    m: int | None = None  # default: all propositions (or all triples)
    seed: int = 0
    resample_omega: bool = False

    def __post_init__(self) -> None:
        if self.l <= 0 or self.l % 64 != 0:
            raise ValueError("l must be a positive multiple of 64")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.m is not None and self.m <= 0:
            raise ValueError("m must be positive when given")


@dataclass
class TrainReport:
    """Per-epoch trace of the alternating optimization."""

    objectives: list[float] = field(default_factory=list)
    flips: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    betas: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "objectives": self.objectives,
            "flips": self.flips,
            "seconds": self.seconds,
            "betas": self.betas,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def build_supervision(
    corpus: Corpus,
    triples: Sequence[Triple] | None,
    m: int | None,
    seed: int,
) -> SupervisionSet:
    """Construct S (and omega in sampled mode), deterministic per seed.

    Labeled mode: one row per triple (subsampled to m when m is smaller),
    +1 at listed positives, -1 everywhere else.  Sampled mode: m distinct
    propositions are drawn without replacement; each matches only itself.
    """
    n = corpus.n_props
    rng = np.random.default_rng(seed)
    if triples is None:
        m = n if m is None else m
        if m > n:
            raise ValueError(f"m={m} exceeds corpus size n={n}")
        omega = rng.permutation(n)[:m].astype(np.int64)
        S = np.full((m, n), -1, dtype=np.int8)
        S[np.arange(m), omega] = 1
        return SupervisionSet(
            S=S,
            row_ids=tuple(corpus.propositions[i].prop_id for i in omega),
            omega=omega,
            positives=tuple((int(i),) for i in omega),
            negatives=tuple(() for _ in range(m)),
        )

    rows = list(triples)
    if m is not None and m < len(rows):
        keep = rng.permutation(len(rows))[:m]
        rows = [rows[i] for i in keep]
    if not rows:
        raise ValueError("no training triples")
    S = np.full((len(rows), n), -1, dtype=np.int8)
    positives: list[tuple[int, ...]] = []
    negatives: list[tuple[int, ...]] = []
    for i, t in enumerate(rows):
        if not t.positives:
            raise ValueError(f"triple {t.query_id!r} has no positive")
        pos = tuple(corpus.row_of(p) for p in t.positives)
        neg = tuple(corpus.row_of(p) for p in t.negatives)
        S[i, list(pos)] = 1
        positives.append(pos)
        negatives.append(neg)
    return SupervisionSet(
        S=S,
        row_ids=tuple(t.query_id for t in rows),
        omega=None,
        positives=tuple(positives),
        negatives=tuple(negatives),
    )


def _check_pair_shapes(
    relaxed: np.ndarray, H: np.ndarray, S: np.ndarray, omega: np.ndarray | None
) -> None:
    if relaxed.ndim != 2 or H.ndim != 2 or S.ndim != 2:
        raise ValueError("relaxed, H, and S must be 2-d")
    m, l = relaxed.shape
    if H.shape[1] != l:
        raise ValueError(f"code width {H.shape[1]} != relaxed width {l}")
    if S.shape != (m, H.shape[0]):
        raise ValueError(f"supervision shape {S.shape} != ({m}, {H.shape[0]})")
    if omega is not None and np.asarray(omega).shape != (m,):
        raise ValueError("omega length must equal the number of relaxed rows")


def pairwise_loss(
    relaxed: np.ndarray,
    H: np.ndarray,
    S: np.ndarray,
    l: int,
    gamma: float,
    omega: np.ndarray | None = None,
) -> float:
    """Squared error between code inner products and scaled supervision.

    sum_{i,j} (relaxed_i . H_j - l*S_ij)^2, plus the anchor term
    gamma * sum_i |H[omega_i] - relaxed_i|^2 when omega is given.
    """
    R = np.asarray(relaxed, dtype=np.float64)
    Hf = np.asarray(H, dtype=np.float64)
    Sf = np.asarray(S, dtype=np.float64)
    _check_pair_shapes(R, Hf, Sf, omega)
    loss = float(((R @ Hf.T - l * Sf) ** 2).sum())
    if omega is not None and gamma != 0.0:
        loss += float(gamma) * float(((Hf[np.asarray(omega)] - R) ** 2).sum())
    return loss


def theta_step_gradient(
    head: ProjectionHead,
    v: np.ndarray,
    H: np.ndarray,
    S_row: np.ndarray,
    beta: float,
    gamma: float,
    self_row: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of one row's pairwise loss w.r.t. head weights and bias.

    ``self_row`` is the row of this sample's own code in H (sampled mode);
    None disables the anchor term.  The chain rule through tanh(beta * z)
    contributes the factor beta * (1 - relaxed^2).
    """
    v = np.asarray(v, dtype=np.float64)
    Hf = np.asarray(H, dtype=np.float64)
    S_row = np.asarray(S_row, dtype=np.float64)
    if v.shape != (head.d,):
        raise ValueError(f"vector length {v.shape} != ({head.d},)")
    if Hf.ndim != 2 or Hf.shape[1] != head.l:
        raise ValueError(f"code width {Hf.shape} incompatible with l={head.l}")
    if S_row.shape != (Hf.shape[0],):
        raise ValueError(f"supervision row length {S_row.shape} != ({Hf.shape[0]},)")
    z = head.weights @ v + head.bias
    r = np.tanh(beta * z)
    g = 2.0 * ((r @ Hf.T - head.l * S_row) @ Hf)
    if self_row is not None and gamma != 0.0:
        g += 2.0 * gamma * (r - Hf[self_row])
    dz = g * (1.0 - r * r) * beta
    return np.outer(dz, v), dz


def h_step(
    Vt: np.ndarray,
    S: np.ndarray,
    H: np.ndarray,
    l: int,
    gamma: float,
    omega: np.ndarray | None = None,
) -> np.ndarray:
    """One closed-form sweep over code columns, ascending, in place logically.

    Column k is set to the sign minimizer given every other column's most
    recent value; a zero coefficient resolves to +1 so sweeps are
    deterministic.  Returns a fresh +-1 int8 matrix.
    """
    R = np.asarray(Vt, dtype=np.float64)
    Hf = np.asarray(H, dtype=np.float64).copy()
    Sf = np.asarray(S, dtype=np.float64)
    _check_pair_shapes(R, Hf, Sf, omega)
    if not np.isin(np.asarray(H), (-1, 1)).all():
        raise ValueError("H entries must be exactly +-1")
    n = Hf.shape[0]
    Vbar = np.zeros((n, l), dtype=np.float64)
    if omega is not None:
        Vbar[np.asarray(omega)] = R
    Q = -2.0 * l * (Sf.T @ R) - 2.0 * gamma * Vbar
    G = R.T @ R  # fixed during the sweep; only H changes
    for k in range(l):
        coupled = Hf @ G[:, k] - Hf[:, k] * G[k, k]
        arg = 2.0 * coupled + Q[:, k]
        Hf[:, k] = np.where(arg > 0.0, -1.0, 1.0)
    return Hf.astype(np.int8)


def _batch_gradient(
    W: np.ndarray,
    b: np.ndarray,
    vrows: np.ndarray,
    Hf: np.ndarray,
    S_rows: np.ndarray,
    beta: float,
    gamma: float,
    anchor: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean per-pair gradient over a minibatch (normalized by batch * n)."""
    l = W.shape[0]
    Z = vrows @ W.T + b
    R = np.tanh(beta * Z)
    G = 2.0 * ((R @ Hf.T) - l * S_rows) @ Hf
    if anchor is not None and gamma != 0.0:
        G += 2.0 * gamma * (R - Hf[anchor])
    dZ = G * (1.0 - R * R) * beta
    scale = 1.0 / (vrows.shape[0] * Hf.shape[0])
    return scale * (dZ.T @ vrows), scale * dZ.sum(axis=0)


def train(
    corpus: Corpus,
    embeddings: EmbeddingMatrix,
    config: TrainConfig,
    triples: Sequence[Triple] | None = None,
) -> tuple[ProjectionHead, CodeMatrix, TrainReport]:
    """Run the full alternating optimization; deterministic given the seed.

    Each epoch runs the theta-step over shuffled minibatches (beta
    advancing once per completed update, learning rate linearly warmed up
    over the first tenth of all steps) and then one H-step sweep.
    """
    prop_ids = corpus.prop_ids
    missing = [p for p in prop_ids if p not in embeddings]
    if missing:
        raise CorpusError(f"no embedding for prop_id {missing[0]!r}")
    V_props = embeddings.rows(list(prop_ids)).astype(np.float64)
    n = corpus.n_props

    sup = build_supervision(corpus, triples, config.m, derive_seed(config.seed, "supervision"))
    labeled = triples is not None
    if labeled:
        missing_q = [q for q in sup.row_ids if q not in embeddings]
        if missing_q:
            raise CorpusError(f"no embedding for query_id {missing_q[0]!r}")
        vrows_all = embeddings.rows(list(sup.row_ids)).astype(np.float64)
    else:
        vrows_all = V_props[sup.omega]

    head0 = init_head(config.l, embeddings.dim, derive_seed(config.seed, "head"))
    W = head0.weights.copy()
    b = head0.bias.copy()
    H = binarize(V_props @ W.T + b)

    m = sup.m
    batches_per_epoch = math.ceil(m / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    warmup = max(1, total_steps // 10)
    gamma = config.gamma if not labeled else 0.0

    report = TrainReport()
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.resample_omega and not labeled and epoch > 0:
            sup = build_supervision(
                corpus, None, config.m, derive_seed(config.seed, f"supervision-{epoch}")
            )
            vrows_all = V_props[sup.omega]
        order = np.random.default_rng(
            derive_seed(config.seed, f"shuffle-{epoch}")
        ).permutation(m)
        Hf = H.astype(np.float64)
        for start in range(0, m, config.batch_size):
            rows = order[start : start + config.batch_size]
            beta = beta_schedule(step, config.sigma)
            lr = config.learning_rate * min(1.0, (step + 1) / warmup)
            anchor = sup.omega[rows] if sup.omega is not None else None
            gW, gb = _batch_gradient(
                W, b, vrows_all[rows], Hf, sup.S[rows].astype(np.float64), beta, gamma, anchor
            )
            if not (np.isfinite(gW).all() and np.isfinite(gb).all()):
                raise NumericError(f"non-finite gradient at epoch {epoch}, step {step}")
            W -= lr * gW
            b -= lr * gb
            step += 1

        beta = beta_schedule(step, config.sigma)
        R = np.tanh(beta * (vrows_all @ W.T + b))
        H_new = h_step(R, sup.S, H, config.l, gamma, sup.omega)
        flips = int((H_new != H).sum())
        H = H_new
        objective = pairwise_loss(R, H, sup.S, config.l, gamma, sup.omega)
        if not np.isfinite(objective):
            raise NumericError(f"non-finite objective at epoch {epoch}")
        report.objectives.append(objective)
        report.flips.append(flips)
        report.betas.append(beta)
        report.seconds.append(time.perf_counter() - t0)

    return ProjectionHead(weights=W, bias=b), CodeMatrix(H), report


def pack_signs(codes: np.ndarray) -> np.ndarray:
    """Pack +-1 rows to bytes: bit 1 means +1, most significant bit first."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("codes must be a 2-d matrix")
    if codes.shape[1] % 64 != 0:
        raise ValueError(f"code length {codes.shape[1]} not a multiple of 64")
    if not np.isin(codes, (-1, 1)).all():
        raise ValueError("code entries must be exactly +-1")
    return np.packbits(codes > 0, axis=1)


def unpack_signs(packed: np.ndarray, l: int) -> np.ndarray:
    """Inverse of :func:`pack_signs`; returns int8 entries in {-1, +1}."""
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim != 2 or packed.shape[1] * 8 != l:
        raise ValueError(f"packed shape {packed.shape} incompatible with l={l}")
    bits = np.unpackbits(packed, axis=1)
    return (bits.astype(np.int8) * 2 - 1).astype(np.int8)


def save_codes(matrix: CodeMatrix, path: str | Path) -> None:
    import struct

    with Path(path).open("wb") as fh:
        fh.write(CODES_MAGIC)
        fh.write(struct.pack("<II", matrix.n, matrix.l))
        fh.write(np.ascontiguousarray(pack_signs(matrix.codes)).tobytes())


def load_codes(path: str | Path) -> CodeMatrix:
    import struct

    blob = Path(path).read_bytes()
    if blob[:4] != CODES_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {CODES_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError("truncated header")
    n, l = struct.unpack_from("<II", blob, 4)
    if l % 64 != 0:
        raise FormatError(f"code length {l} not a multiple of 64")
    expect = 12 + n * (l // 8)
    if len(blob) != expect:
        raise FormatError(f"bad file size {len(blob)}, expected {expect}")
    packed = np.frombuffer(blob, dtype=np.uint8, offset=12).reshape(n, l // 8)
    return CodeMatrix(unpack_signs(packed, l))
