"""Square Gray-mapped QAM constellations and soft-symbol statistics.

Each rail (I and Q) carries an independent Gray code; a symbol label is the
I-rail bits (MSB first) followed by the Q-rail bits. Point ``i`` of a
constellation is the point whose label, read as an integer, equals ``i``.
A rail bit of 0 maps to the positive half, so QPSK ``00`` sits in the first
quadrant.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


class ModFormat(enum.Enum):
    QPSK = 4
    QAM16 = 16
    QAM64 = 64
    QAM256 = 256

    @property
    def order(self) -> int:
        return self.value

    @property
    def bits_per_symbol(self) -> int:
        return self.value.bit_length() - 1

    @property
    def tag(self) -> str:
        return self.name

    @classmethod
    def parse(cls, name: "str | ModFormat") -> "ModFormat":
        if isinstance(name, cls):
            return name
        key = str(name).upper().replace("-", "")
        aliases = {"4QAM": "QPSK", "16QAM": "QAM16", "64QAM": "QAM64", "256QAM": "QAM256"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown modulation format {name!r}") from None


ALL_FORMATS = (ModFormat.QPSK, ModFormat.QAM16, ModFormat.QAM64, ModFormat.QAM256)


@dataclass(frozen=True, eq=False)
class Constellation:
    format: ModFormat
    points: np.ndarray  # indexed by integer label
    labels: np.ndarray  # (order, bits_per_symbol) bit patterns, MSB first
    rail_levels: np.ndarray  # per-rail amplitude indexed by rail label

    @property
    def order(self) -> int:
        return self.format.order

    @property
    def bits_per_symbol(self) -> int:
        return self.format.bits_per_symbol

    @property
    def rail_bits(self) -> int:
        return self.bits_per_symbol // 2

    @property
    def peak_power(self) -> float:
        return float(np.max(np.abs(self.points) ** 2))


def _gray_decode(g: int) -> int:
    n = 0
    while g:
        n ^= g
        g >>= 1
    return n


@functools.lru_cache(maxsize=None)
def build_constellation(fmt: ModFormat) -> Constellation:
    fmt = ModFormat.parse(fmt)
    rb = fmt.bits_per_symbol // 2
    side = 1 << rb
    norm = np.sqrt(2.0 * (fmt.order - 1) / 3.0)
    # rail label g -> amplitude of Gray index n: +(side-1), ..., -(side-1)
    levels = np.array([side - 1 - 2 * _gray_decode(g) for g in range(side)], dtype=float) / norm
    idx = np.arange(fmt.order)
    points = levels[idx >> rb] + 1j * levels[idx & (side - 1)]
    shifts = np.arange(fmt.bits_per_symbol)[::-1]
    labels = ((idx[:, None] >> shifts) & 1).astype(np.uint8)
    for arr in (points, labels, levels):
        arr.setflags(write=False)
    return Constellation(fmt, points, labels, levels)


def modulate(bits, c: Constellation) -> np.ndarray:
    """Map a flat bit sequence onto symbols through the Gray labelling."""
    bits = np.asarray(bits, dtype=np.int64).ravel()
    k = c.bits_per_symbol
    if bits.size % k:
        raise ValueError(f"bit count {bits.size} not divisible by {k}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    ints = bits.reshape(-1, k) @ (1 << np.arange(k)[::-1])
    return c.points[ints]


def _rail_nearest(v: np.ndarray, levels: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. the lowest rail label on ties
    return np.argmin(np.abs(v[..., None] - levels) ** 2, axis=-1)


def hard_indices(symbols, c: Constellation) -> np.ndarray:
    """Index of the nearest point; ties go to the lowest index."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    gi = _rail_nearest(symbols.real, c.rail_levels)
    gq = _rail_nearest(symbols.imag, c.rail_levels)
    return (gi << c.rail_bits) | gq


def hard_demod(symbols, c: Constellation) -> np.ndarray:
    """Nearest-point bit decisions, flattened in symbol order."""
    return c.labels[hard_indices(symbols, c)].reshape(-1)


@dataclass(frozen=True)
class SoftSymbol:
    mean: np.ndarray
    variance: np.ndarray


def _rail_moments(v, noise_var, levels):
    # per-rail posterior is exact because the prior factorises over I and Q
    logits = -((v[..., None] - levels) ** 2) / noise_var[..., None]
    p = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    m1 = p @ levels
    m2 = p @ (levels ** 2)
    return m1, m2


def posterior_stats(obs, noise_var, c: Constellation) -> SoftSymbol:
    """Posterior mean and variance of a symbol seen through complex AWGN.

    ``p(x | obs)`` is proportional to ``exp(-|obs - x|^2 / noise_var)`` under a
    uniform prior over the constellation. Broadcasts over array inputs.
    """
    obs = np.asarray(obs, dtype=np.complex128)
    noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), obs.shape)
    if np.any(noise_var <= 0):
        raise ValueError("noise_var must be positive")
    mi, qi = _rail_moments(obs.real, noise_var, c.rail_levels)
    mq, qq = _rail_moments(obs.imag, noise_var, c.rail_levels)
    mean = mi + 1j * mq
    var = np.clip((qi - mi ** 2) + (qq - mq ** 2), 0.0, c.peak_power)
    return SoftSymbol(mean, var)
