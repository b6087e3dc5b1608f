"""Modulation-format detection of the interfering stream.

Three per-sample metrics are available for the per-format probability
metric ``mu(X)``:

``literal``
    ``-sum_k sum_{x in X} (|x_hat_k - x|^2 + N_k ln|X|)``, the double sum taken
    exactly as written. For zero-mean unit-energy constellations the inner
    sum equals ``|X| (1 + |x_hat_k|^2)``, so this metric only ever prefers the
    smallest format. Kept for fidelity checks.
``log_sum_exp`` (default)
    ``sum_k N_k [ln sum_{x in X} exp(-|x_hat_k - x|^2 / N_k) - ln|X|]``, the
    penalised Gaussian log-likelihood scaled by the effective noise.
``lut``
    ``-sum_k (min_x |x_hat_k - x|^2 + f(N_k, X))`` with the correction ``f``
    read from a Monte Carlo table.

For square QAM the log-sum-exp and the minimum both split over the I and Q
rails, which keeps 256QAM cheap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .linkchan import NOISE_FLOOR, crandn
from .modem import ALL_FORMATS, Constellation, ModFormat, build_constellation

VARIANTS = ("literal", "log_sum_exp", "lut")
LUT_MAGIC = b"IRXLUT1"
FULL_ML_LIMIT = 2 ** 20


@dataclass(frozen=True)
class DetectorConfig:
    formats: tuple = ALL_FORMATS
    metric_variant: str = "log_sum_exp"
    k_tilde: int = 24

    def __post_init__(self):
        fmts = tuple(ModFormat.parse(f) for f in self.formats)
        object.__setattr__(self, "formats", fmts)
        if len(fmts) < 1 or len(set(fmts)) != len(fmts):
            raise ValueError("formats must be non-empty and distinct")
        if self.metric_variant not in VARIANTS:
            raise ValueError(f"unknown metric variant {self.metric_variant!r}")
        if self.k_tilde < 1:
            raise ValueError("k_tilde must be >= 1")

    @property
    def constellations(self) -> list[Constellation]:
        return [build_constellation(f) for f in self.formats]

    def index_of(self, fmt) -> int:
        return self.formats.index(ModFormat.parse(fmt))


@dataclass
class MetricVector:
    """Raw metrics and their softmax along the last axis (may be batched)."""

    raw: np.ndarray
    probs: np.ndarray
    orders: tuple | None = None

    @property
    def detected(self) -> np.ndarray:
        return argmax_ties(self.raw, self.orders)


def argmax_ties(raw, orders=None):
    """Argmax over the last axis; ties go to the smallest constellation order."""
    raw = np.asarray(raw, dtype=float)
    if orders is None:
        return np.argmax(raw, axis=-1)
    perm = np.argsort(np.asarray(orders), kind="stable")
    return perm[np.argmax(raw[..., perm], axis=-1)]


def softmax_metrics(raw, orders=None) -> MetricVector:
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("metrics must be finite")
    z = raw - raw.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return MetricVector(raw, e / e.sum(axis=-1, keepdims=True), orders)


# ---------------------------------------------------------------- per-sample terms

def rail_logsumexp(x_hat, n_tilde, c: Constellation):
    """``ln sum_x exp(-|x_hat - x|^2 / n_tilde)`` via the I/Q factorisation."""
    lv = c.rail_levels
    li = -((x_hat.real[..., None] - lv) ** 2) / n_tilde[..., None]
    lq = -((x_hat.imag[..., None] - lv) ** 2) / n_tilde[..., None]
    return logsumexp(li, axis=-1) + logsumexp(lq, axis=-1)


def min_sq_distance(x_hat, c: Constellation):
    lv = c.rail_levels
    return (np.min((x_hat.real[..., None] - lv) ** 2, axis=-1)
            + np.min((x_hat.imag[..., None] - lv) ** 2, axis=-1))


def literal_term(x_hat, n_tilde, c: Constellation):
    d2 = np.abs(x_hat[..., None] - c.points) ** 2
    return -(d2 + n_tilde[..., None] * np.log(c.order)).sum(axis=-1)


def lse_term(x_hat, n_tilde, c: Constellation):
    return n_tilde * (rail_logsumexp(x_hat, n_tilde, c) - np.log(c.order))


def lut_term(x_hat, n_tilde, c: Constellation, lut: "PenaltyLut", index: int):
    return -(min_sq_distance(x_hat, c) + lut.penalty(n_tilde, index))


def metric_per_format(cfg: DetectorConfig, x_hat, n_tilde, lut: "PenaltyLut | None" = None
                      ) -> MetricVector:
    """Probability metric of every candidate format from interference estimates.

    ``x_hat`` and ``n_tilde`` are ``(..., K~)``; leading axes are batched.
    """
    x_hat = np.asarray(x_hat, dtype=np.complex128)
    n_tilde = np.broadcast_to(np.asarray(n_tilde, dtype=float), x_hat.shape)
    if x_hat.shape[-1] == 0:
        raise ValueError("at least one estimate required")
    if np.any(n_tilde <= 0):
        raise ValueError("effective noise variances must be positive")
    if cfg.metric_variant == "lut" and lut is None:
        raise ValueError("lut variant needs a PenaltyLut")
    raw = []
    for i, c in enumerate(cfg.constellations):
        if cfg.metric_variant == "literal":
            t = literal_term(x_hat, n_tilde, c)
        elif cfg.metric_variant == "log_sum_exp":
            t = lse_term(x_hat, n_tilde, c)
        else:
            t = lut_term(x_hat, n_tilde, c, lut, lut.row_for(c.format, i))
        raw.append(t.sum(axis=-1))
    return softmax_metrics(np.stack(raw, axis=-1), tuple(f.order for f in cfg.formats))


# ---------------------------------------------------------------- exact ML oracle

def _all_vectors(c: Constellation, layers: int) -> np.ndarray:
    grids = np.meshgrid(*([c.points] * layers), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=0)  # (layers, |X|^layers)


def metric_full_ml(cfg: DetectorConfig, y, h, g, n0: float, desired_format,
                   variant: str = "log_sum_exp") -> MetricVector:
    """Brute-force format metric over every candidate symbol pair.

    ``y`` is ``(K, n)``, one received vector per row; ``h`` and ``g`` are
    either shared ``(n, K1)``/``(n, K2)`` matrices or per-sample stacks.
    ``variant='literal'`` sums squared distances over all candidate pairs plus
    ``K N0 (K1 ln|X1| + K2 ln|X2|)``; ``'log_sum_exp'`` marginalises the
    candidates instead. ``raw`` is the negated cost, so argmax decides.
    """
    if variant not in ("literal", "log_sum_exp"):
        raise ValueError(f"unknown variant {variant!r}")
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    h = np.asarray(h, dtype=np.complex128)
    g = np.asarray(g, dtype=np.complex128)
    k = y.shape[0]
    h = np.broadcast_to(h, (k,) + h.shape[-2:])
    g = np.broadcast_to(g, (k,) + g.shape[-2:])
    k1, k2 = h.shape[-1], g.shape[-1]
    cs = build_constellation(desired_format)
    s_all = _all_vectors(cs, k1)
    raw = []
    for c in cfg.constellations:
        size = cs.order ** k1 * c.order ** k2
        if size > FULL_ML_LIMIT:
            raise ValueError(f"full ML over {size} candidates exceeds the {FULL_ML_LIMIT} guard")
        x_all = _all_vectors(c, k2)
        # residual for every (sample, s-candidate, x-candidate)
        hs = h @ s_all  # (K, n, |S|)
        gx = g @ x_all  # (K, n, |X|)
        r = y[:, :, None, None] - hs[:, :, :, None] - gx[:, :, None, :]
        d2 = np.sum(np.abs(r) ** 2, axis=1).reshape(k, -1)
        penalty = k1 * np.log(cs.order) + k2 * np.log(c.order)
        if variant == "literal":
            cost = d2.sum() + k * n0 * penalty
        else:
            nv = max(n0, NOISE_FLOOR)
            cost = -nv * np.sum(logsumexp(-d2 / nv, axis=1) - penalty)
        raw.append(-cost)
    return softmax_metrics(np.array(raw), tuple(f.order for f in cfg.formats))


# ---------------------------------------------------------------- penalty LUT

@dataclass
class PenaltyLut:
    """Tabulated ``f(N, X)`` on an increasing grid of noise variances."""

    grid: np.ndarray  # noise variances, strictly increasing
    table: np.ndarray  # (n_formats, len(grid))
    formats: tuple = ALL_FORMATS
    std_err: np.ndarray | None = None
    build_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.table = np.asarray(self.table, dtype=float)
        self.formats = tuple(ModFormat.parse(f) for f in self.formats)
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("LUT grid must be strictly increasing")
        if self.table.shape != (len(self.formats), self.grid.size):
            raise ValueError("LUT table shape does not match formats x grid")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("LUT table must be finite")

    def row_for(self, fmt, fallback_index: int) -> int:
        fmt = ModFormat.parse(fmt)
        return self.formats.index(fmt) if fmt in self.formats else fallback_index

    def penalty(self, n_tilde, index: int):
        """Linear interpolation in dB of the noise variance, clamped at the ends."""
        x = 10.0 * np.log10(np.maximum(n_tilde, NOISE_FLOOR))
        return np.interp(x, 10.0 * np.log10(self.grid), self.table[index])

    def to_bytes(self) -> bytes:
        head = LUT_MAGIC + struct.pack("<II", len(self.formats), self.grid.size)
        return head + self.grid.astype("<f8").tobytes() + self.table.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, formats=ALL_FORMATS) -> "PenaltyLut":
        if data[:len(LUT_MAGIC)] != LUT_MAGIC:
            raise ValueError("not a penalty LUT file (bad magic)")
        off = len(LUT_MAGIC)
        n_fmt, n_grid = struct.unpack_from("<II", data, off)
        off += 8
        if len(data) != off + 8 * n_grid * (n_fmt + 1):
            raise ValueError("truncated or oversized LUT file")
        if n_fmt != len(formats):
            raise ValueError(f"LUT holds {n_fmt} formats, expected {len(formats)}")
        grid = np.frombuffer(data, "<f8", n_grid, off)
        table = np.frombuffer(data, "<f8", n_grid * n_fmt, off + 8 * n_grid)
        return cls(grid.copy(), table.reshape(n_fmt, n_grid).copy(), formats)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, formats=ALL_FORMATS) -> "PenaltyLut":
        return cls.from_bytes(Path(path).read_bytes(), formats)


def default_grid_db(start: float = -10.0, stop: float = 30.0, step: float = 1.0) -> np.ndarray:
    return np.arange(start, stop + step / 2, step)


def penalty_samples(c: Constellation, n_tilde: float, count: int, rng) -> np.ndarray:
    """Per-draw values whose mean is ``f(n_tilde, X)``."""
    x = c.points[rng.integers(0, c.order, count)]
    x_hat = x + crandn(rng, count) * np.sqrt(n_tilde)
    nt = np.full(count, n_tilde)
    return (-n_tilde * rail_logsumexp(x_hat, nt, c) + n_tilde * np.log(c.order)
            - min_sq_distance(x_hat, c))


def build_penalty_lut(formats=ALL_FORMATS, grid_db=None, samples_per_cell: int = 10_000,
                      seed: int = 0) -> PenaltyLut:
    """Monte Carlo table of the min-distance correction.

    ``grid_db`` lists SNR-style levels; the cell noise variance is
    ``10^(-grid_db/10)``, so the default -10..30 dB spans ``N`` from 10 to 1e-3.
    """
    if samples_per_cell < 10_000:
        raise ValueError("samples_per_cell must be >= 1e4")
    formats = tuple(ModFormat.parse(f) for f in formats)
    grid_db = default_grid_db() if grid_db is None else np.asarray(grid_db, dtype=float)
    grid = np.sort(10.0 ** (-np.asarray(grid_db) / 10.0))
    rng = np.random.default_rng(seed)
    table = np.empty((len(formats), grid.size))
    se = np.empty_like(table)
    for i, f in enumerate(formats):
        c = build_constellation(f)
        for j, nt in enumerate(grid):
            v = penalty_samples(c, nt, samples_per_cell, rng)
            table[i, j] = v.mean()
            se[i, j] = v.std(ddof=1) / np.sqrt(samples_per_cell)
    meta = {"samples_per_cell": samples_per_cell, "seed": seed}
    return PenaltyLut(grid, table, formats, se, meta)
