"""Block-fading link model ``y_k = H s_k + G x_k + n_k`` with explicit seeds.

The noise level is anchored at ``n0 = 1``; SNR and INR are realised by
scaling the desired and interfering channels. Channels are i.i.d. Rayleigh,
constant over a block and independent across blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .modem import ModFormat, build_constellation, modulate

NOISE_FLOOR = 1e-12


def db_to_lin(db: float) -> float:
    if np.isposinf(db):
        return np.inf
    if np.isneginf(db):
        return 0.0
    return float(10.0 ** (db / 10.0))


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-variance circularly-symmetric complex Gaussian samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


@dataclass(frozen=True)
class LinkConfig:
    n_rx: int = 2
    k1_layers: int = 1
    k2_layers: int = 1
    block_len: int = 24
    snr_db: float = 10.0
    inr_db: float = 10.0
    desired_format: ModFormat = ModFormat.QPSK
    interference_format: ModFormat = ModFormat.QAM16

    def __post_init__(self):
        object.__setattr__(self, "desired_format", ModFormat.parse(self.desired_format))
        object.__setattr__(self, "interference_format", ModFormat.parse(self.interference_format))
        if min(self.n_rx, self.k1_layers, self.k2_layers) < 1:
            raise ValueError("n_rx and layer counts must be >= 1")
        if self.block_len < 0:
            raise ValueError("block_len must be >= 0")


@dataclass
class ChannelRealization:
    """Channels of one block, or of a stack of blocks along leading axes."""

    h: np.ndarray  # (..., n_rx, K1)
    g: np.ndarray  # (..., n_rx, K2)
    n0: float | np.ndarray = 1.0

    @property
    def n_rx(self) -> int:
        return self.h.shape[-2]

    @property
    def noise(self) -> np.ndarray:
        """``n0`` shaped to broadcast against ``(..., n, n)`` matrices."""
        return np.asarray(self.n0, dtype=float)[..., None, None]


@dataclass
class TxBlock:
    s_symbols: np.ndarray  # (K1, K)
    x_symbols: np.ndarray  # (K2, K)
    s_bits: np.ndarray
    x_bits: np.ndarray
    extra: dict = field(default_factory=dict)


def draw_channel(cfg: LinkConfig, rng_seed) -> ChannelRealization:
    rng = np.random.default_rng(rng_seed)
    h = crandn(rng, (cfg.n_rx, cfg.k1_layers))
    g = crandn(rng, (cfg.n_rx, cfg.k2_layers))
    snr = db_to_lin(cfg.snr_db)
    inr = db_to_lin(cfg.inr_db)
    h = h * np.sqrt(snr / cfg.k1_layers) if snr else np.zeros_like(h)
    g = g * np.sqrt(inr / cfg.k2_layers) if inr else np.zeros_like(g)
    return ChannelRealization(h, g, 1.0)


def transmit(cfg: LinkConfig, chan: ChannelRealization, rng_seed, s_bits=None):
    """Draw a block of symbols and noise and return ``(TxBlock, y)``.

    ``s_bits`` optionally supplies the desired stream's (e.g. coded) bits; it
    must fill exactly ``K1 * block_len`` symbols.
    """
    rng = np.random.default_rng(rng_seed)
    cs = build_constellation(cfg.desired_format)
    cx = build_constellation(cfg.interference_format)
    k = cfg.block_len
    if s_bits is None:
        s_bits = rng.integers(0, 2, cfg.k1_layers * k * cs.bits_per_symbol, dtype=np.uint8)
    s_bits = np.asarray(s_bits, dtype=np.uint8)
    if s_bits.size != cfg.k1_layers * k * cs.bits_per_symbol:
        raise ValueError("s_bits does not fill the block")
    x_bits = rng.integers(0, 2, cfg.k2_layers * k * cx.bits_per_symbol, dtype=np.uint8)
    # symbols run layer-fastest: sample k carries symbols k*K1 .. k*K1+K1-1
    s = modulate(s_bits, cs).reshape(k, cfg.k1_layers).T
    x = modulate(x_bits, cx).reshape(k, cfg.k2_layers).T
    n = crandn(rng, (chan.n_rx, k)) * np.sqrt(float(chan.n0))
    y = chan.h @ s + chan.g @ x + n
    return TxBlock(s, x, s_bits, x_bits), y


def awgn_estimates(symbols: np.ndarray, noise_var, rng: np.random.Generator):
    """Model interference estimates as true symbols plus complex AWGN."""
    noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), symbols.shape)
    x_hat = symbols + crandn(rng, symbols.shape) * np.sqrt(noise_var)
    return x_hat, np.maximum(noise_var, NOISE_FLOOR)


def make_training_observation(fmt: ModFormat, snr_db: float, k_tilde: int, rng_seed):
    """``k_tilde`` noisy observations of random symbols of one format.

    Returns ``(x_hat, n_tilde)`` arrays of length ``k_tilde``; ``n_tilde`` is
    the injected per-sample noise variance ``10^(-snr_db/10)``, floored at
    ``1e-12``.
    """
    if k_tilde < 1:
        raise ValueError("k_tilde must be >= 1")
    rng = np.random.default_rng(rng_seed)
    c = build_constellation(fmt)
    x = c.points[rng.integers(0, c.order, k_tilde)]
    nv = 1.0 / db_to_lin(snr_db) if db_to_lin(snr_db) else np.inf
    return awgn_estimates(x, nv, rng)
