"""Rate-1/2, constraint-length-7 convolutional code (generators 133, 171 octal)
with zero-tail termination and a soft-input Viterbi decoder.

LLR sign convention: positive favours bit 1.
"""

from __future__ import annotations

import numpy as np

from .modem import Constellation

CONSTRAINT_LENGTH = 7
GENERATORS = (0o133, 0o171)
MEMORY = CONSTRAINT_LENGTH - 1
N_STATES = 1 << MEMORY
INFO_BITS = 288


def _parity(v: np.ndarray) -> np.ndarray:
    v = v.copy()
    out = np.zeros_like(v)
    while np.any(v):
        out ^= v & 1
        v >>= 1
    return out


# register = (input << 6) | state, where state holds the previous six inputs
# with the most recent one in bit 5; the next state is register >> 1.
_REG = np.arange(2 * N_STATES)
_OUT = np.stack([_parity(_REG & g) for g in GENERATORS], axis=-1).astype(np.int8)
_NEXT = _REG >> 1


def coded_length(n_info: int) -> int:
    return 2 * (n_info + MEMORY)


def encode(bits) -> np.ndarray:
    """Encode one message or a batch ``(B, L)``; output ``2 (L + 6)`` bits per message."""
    bits = np.asarray(bits, dtype=np.int64)
    single = bits.ndim == 1
    b = np.atleast_2d(bits)
    b = np.concatenate([b, np.zeros((b.shape[0], MEMORY), dtype=np.int64)], axis=1)
    state = np.zeros(b.shape[0], dtype=np.int64)
    out = np.empty((b.shape[0], b.shape[1], 2), dtype=np.uint8)
    for t in range(b.shape[1]):
        reg = (b[:, t] << MEMORY) | state
        out[:, t] = _OUT[reg]
        state = _NEXT[reg]
    out = out.reshape(b.shape[0], -1)
    return out[0] if single else out


def bit_llrs(symbols, noise_var, c: Constellation) -> np.ndarray:
    """Max-log bit LLRs ``(min_{b=0} d^2 - min_{b=1} d^2) / var``, flattened per symbol."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), symbols.shape)
    if np.any(noise_var <= 0):
        raise ValueError("noise variance must be positive")
    d2 = np.abs(symbols[..., None] - c.points) ** 2  # (..., |X|)
    lab = c.labels.T.astype(bool)  # (bits, |X|)
    big = np.inf
    d0 = np.min(np.where(~lab, d2[..., None, :], big), axis=-1)
    d1 = np.min(np.where(lab, d2[..., None, :], big), axis=-1)
    llr = (d0 - d1) / noise_var[..., None]
    return llr.reshape(symbols.shape[:-1] + (-1,)) if symbols.ndim > 1 else llr.reshape(-1)


# predecessor table: state s' is reached from states p0, p1 (input bit = s' >> 5)
_PRED = np.stack([((np.arange(N_STATES) << 1) & (N_STATES - 1)) | j for j in (0, 1)], axis=1)
_PRED_IN = (np.arange(N_STATES) >> (MEMORY - 1)) & 1
_PRED_REG = (_PRED_IN[:, None] << MEMORY) | _PRED  # (64, 2) registers
_PRED_SIGN = 2.0 * _OUT[_PRED_REG] - 1.0  # (64, 2, 2) in {-1, +1}


def viterbi_decode(llrs) -> np.ndarray:
    """Max-log ML path through the terminated trellis.

    Accepts ``(2 (L + 6),)`` or a batch ``(B, 2 (L + 6))``; returns the ``L``
    information bits. The path metric is the correlation ``sum (2c - 1) llr``;
    ties go to the lower predecessor state.
    """
    llrs = np.asarray(llrs, dtype=float)
    single = llrs.ndim == 1
    llr = np.atleast_2d(llrs)
    n = llr.shape[1]
    if n % 2 or n < 2 * MEMORY:
        raise ValueError(f"LLR length {n} is not a terminated rate-1/2 codeword")
    steps = n // 2
    llr = llr.reshape(llr.shape[0], steps, 2)
    bsz = llr.shape[0]
    metric = np.full((bsz, N_STATES), -np.inf)
    metric[:, 0] = 0.0
    choice = np.empty((steps, bsz, N_STATES), dtype=np.uint8)
    for t in range(steps):
        # branch metric for each (next state, predecessor slot)
        bm = np.einsum("sjk,bk->bsj", _PRED_SIGN, llr[:, t])
        cand = metric[:, _PRED] + bm
        pick = (cand[..., 1] > cand[..., 0]).astype(np.uint8)
        choice[t] = pick
        metric = np.where(pick, cand[..., 1], cand[..., 0])
    state = np.zeros(bsz, dtype=np.int64)
    bits = np.empty((bsz, steps), dtype=np.uint8)
    rows = np.arange(bsz)
    for t in range(steps - 1, -1, -1):
        bits[:, t] = _PRED_IN[state]
        state = _PRED[state, choice[t, rows, state]]
    out = bits[:, : steps - MEMORY]
    return out[0] if single else out
