"""Linear interference-aware receivers.

All filters share one LMMSE kernel ``A^H C^{-1} v``. The covariance ``C`` is
either constant over a block, shape ``(..., n, n)``, or varies per sample,
shape ``(..., K, n, n)``, which happens whenever a diagonal soft-symbol
covariance (``C_s`` or ``C_x``) is folded in. Outputs are laid out
``(..., layers, K)`` with per-sample error variances of the same shape.

Error variances are the diagonal of the LMMSE error covariance
``I - A^H C^{-1} A`` for unit-power symbols. ``gain`` is the diagonal of
``A^H C^{-1} A``, i.e. the bias of the estimate: ``E[est | sym] = gain * sym``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cxla import default_loading, hermitian, solve_hpd
from .linkchan import NOISE_FLOOR, ChannelRealization
from .modem import Constellation, posterior_stats

_BIG_VAR = 1e12


def _unbias(est, gain):
    ok = gain > NOISE_FLOOR
    safe = np.where(ok, gain, 1.0)
    obs = np.where(ok, est / safe, 0.0)
    var = np.where(ok, (1.0 - gain) / safe, _BIG_VAR)
    return obs, np.maximum(var, NOISE_FLOOR)


@dataclass
class EqualizedBlock:
    s_tilde: np.ndarray
    per_layer_noise: np.ndarray
    gain: np.ndarray

    def unbiased(self):
        """``(s_tilde / gain, (1 - gain) / gain)``: symbol plus AWGN view."""
        return _unbias(self.s_tilde, self.gain)


@dataclass
class InterferenceEstimate:
    x_hat: np.ndarray
    n_tilde: np.ndarray
    gain: np.ndarray
    c_x: np.ndarray | None = None  # diagonal of C_x per sample, (..., K2, K)

    def unbiased(self):
        return _unbias(self.x_hat, self.gain)


def _loading(cov, n0):
    zero = np.broadcast_to(np.asarray(n0, dtype=float) <= 0, cov.shape[:-2])
    if not np.any(zero):
        return 0.0
    return np.where(zero, default_loading(cov), 0.0)


def lmmse(target, cov, v, n0=1.0):
    """Return ``(estimate, error_variance, gain)`` for ``target^H cov^{-1} v``."""
    target = np.asarray(target, dtype=np.complex128)
    v = np.asarray(v, dtype=np.complex128)
    n_lay = target.shape[-1]
    per_sample = cov.ndim == v.ndim + 1
    if per_sample:
        # move samples into the batch: v -> (..., K, n, 1)
        vk = np.swapaxes(v, -1, -2)[..., None]
        tk = np.broadcast_to(target[..., None, :, :], vk.shape[:-1] + (n_lay,))
        rhs = np.concatenate([tk, vk], axis=-1)
        n0k = np.asarray(n0, dtype=float)[..., None]
        x = solve_hpd(cov, rhs, _loading(cov, n0k))
        th = hermitian(tk)
        est = (th @ x[..., n_lay:])[..., 0]  # (..., K, L)
        gain = np.real(np.einsum("...ij,...ji->...i", th, x[..., :n_lay]))
        est, gain = np.swapaxes(est, -1, -2), np.swapaxes(gain, -1, -2)
    else:
        batch = np.broadcast_shapes(target.shape[:-2], v.shape[:-2], cov.shape[:-2])
        rhs = np.concatenate([np.broadcast_to(target, batch + target.shape[-2:]),
                              np.broadcast_to(v, batch + v.shape[-2:])], axis=-1)
        x = solve_hpd(cov, rhs, _loading(cov, n0))
        th = hermitian(target)
        est = th @ x[..., n_lay:]
        gain = np.real(np.einsum("...ij,...ji->...i", th, x[..., :n_lay]))
        gain = np.broadcast_to(gain[..., None], est.shape)
    gain = np.clip(gain, 0.0, 1.0)
    return est, 1.0 - gain, gain


def _eye(n):
    return np.eye(n, dtype=np.complex128)


def _outer(m):
    return m @ hermitian(m)


def _weighted_outer(m, var):
    """``m diag(var_k) m^H`` for every sample ``k``; ``var`` is (..., L, K)."""
    return np.einsum("...il,...lk,...jl->...kij", m, var, np.conj(m))


def _base_cov(chan: ChannelRealization):
    return _outer(chan.h) + _outer(chan.g) + chan.noise * _eye(chan.n_rx)


def eirc(chan: ChannelRealization, y) -> EqualizedBlock:
    """``H^H (H H^H + G G^H + N0 I)^{-1} y``."""
    return EqualizedBlock(*lmmse(chan.h, _base_cov(chan), y, chan.n0))


def irc(h, r, y) -> EqualizedBlock:
    """``H^H (H H^H + R)^{-1} y`` with an estimated interference-plus-noise covariance."""
    h = np.asarray(h, dtype=np.complex128)
    return EqualizedBlock(*lmmse(h, _outer(h) + r, y))


def estimate_r(v) -> np.ndarray:
    """Sample covariance of residual samples (columns) plus light loading."""
    v = np.asarray(v, dtype=np.complex128)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[-1] < 1:
        raise ValueError("at least one sample required")
    n = v.shape[-2]
    r = _outer(v) / v.shape[-1]
    eps = np.maximum(1e-9 * np.real(np.trace(r, axis1=-2, axis2=-1)) / n, NOISE_FLOOR)
    return r + eps[..., None, None] * _eye(n)


def _with_soft_cov(est, err, gain, c: Constellation | None):
    xi = InterferenceEstimate(est, err, gain)
    if c is not None:
        obs, var = xi.unbiased()
        xi.c_x = posterior_stats(obs, var, c).variance
    return xi


def estimate_interference_joint(chan: ChannelRealization, y, c: Constellation | None = None):
    """``G^H (H H^H + G G^H + N0 I)^{-1} y``.

    With a hypothesised constellation ``c`` the soft residual variances
    ``c_x`` are filled in from the posterior statistics.
    """
    est, err, gain = lmmse(chan.g, _base_cov(chan), y, chan.n0)
    return _with_soft_cov(est, err, gain, c)


def estimate_interference_purified(chan: ChannelRealization, y, s_hat, c_s,
                                   c: Constellation | None = None):
    """``G^H (H C_s H^H + G G^H + N0 I)^{-1} (y - H s_hat)``.

    ``c_s`` holds the diagonal of ``C_s``: shape ``(..., K1, K)`` for
    per-sample variances or ``(..., K1, 1)`` for a block-constant one.
    """
    y = np.asarray(y, dtype=np.complex128)
    c_s = np.asarray(c_s, dtype=float)
    resid = y - chan.h @ s_hat
    rest = _outer(chan.g) + chan.noise * _eye(chan.n_rx)
    if c_s.shape[-1] == 1:
        cov = chan.h @ (c_s * hermitian(chan.h)) + rest
    else:
        cov = _weighted_outer(chan.h, c_s) + rest[..., None, :, :]
    est, err, gain = lmmse(chan.g, cov, resid, chan.n0)
    return _with_soft_cov(est, err, gain, c)


def soft_interference(xi: InterferenceEstimate, c: Constellation) -> InterferenceEstimate:
    """Replace ``x_hat`` by the posterior mean under ``c``; ``c_x`` by its variance."""
    obs, var = xi.unbiased()
    soft = posterior_stats(obs, var, c)
    return InterferenceEstimate(soft.mean, xi.n_tilde, xi.gain, soft.variance)


def slic(chan: ChannelRealization, y, xi: InterferenceEstimate) -> EqualizedBlock:
    """Cancel ``G x_hat`` and equalise with ``H^H (H H^H + G C_x G^H + N0 I)^{-1}``.

    ``xi.x_hat`` is taken as the (soft) reconstruction of the interference and
    ``xi.c_x`` as the diagonal of its residual covariance.
    """
    y = np.asarray(y, dtype=np.complex128)
    y_pure = y - chan.g @ xi.x_hat
    c_x = np.asarray(xi.c_x, dtype=float)
    rest = _outer(chan.h) + chan.noise * _eye(chan.n_rx)
    if c_x.shape[-1] == 1:
        cov = chan.g @ (c_x * hermitian(chan.g)) + rest
    else:
        cov = _weighted_outer(chan.g, c_x) + rest[..., None, :, :]
    return EqualizedBlock(*lmmse(chan.h, cov, y_pure, chan.n0))
