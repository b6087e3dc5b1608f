"""Small fully-connected ReLU network for the fall-back decision, in numpy.

Layer ``n`` computes ``z_{n+1} = A_n z_n + b_n``; every layer but the last is
followed by a ReLU. The two outputs score "keep SLIC" (index 0) and
"fall back" (index 1). Training is plain mini-batch SGD on the softmax loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MLP_MAGIC = b"IRXMLP1"
HIDDEN = (8, 8, 4, 2)


@dataclass
class MlpParams:
    layers: list  # [(A, b)], A is (out, in)

    @property
    def layer_dims(self) -> tuple:
        return (self.layers[0][0].shape[1],) + tuple(a.shape[0] for a, _ in self.layers)

    def copy(self) -> "MlpParams":
        return MlpParams([(a.copy(), b.copy()) for a, b in self.layers])

    def to_bytes(self) -> bytes:
        dims = self.layer_dims
        out = [MLP_MAGIC, struct.pack(f"<I{len(dims)}I", len(self.layers), *dims)]
        for a, b in self.layers:
            out += [a.astype("<f8").tobytes(order="C"), b.astype("<f8").tobytes()]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MlpParams":
        if data[:len(MLP_MAGIC)] != MLP_MAGIC:
            raise ValueError("not an MLP weight file (bad magic)")
        off = len(MLP_MAGIC)
        (n_layers,) = struct.unpack_from("<I", data, off)
        dims = struct.unpack_from(f"<{n_layers + 1}I", data, off + 4)
        off += 4 * (n_layers + 2)
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            a = np.frombuffer(data, "<f8", fan_in * fan_out, off).reshape(fan_out, fan_in)
            off += 8 * fan_in * fan_out
            b = np.frombuffer(data, "<f8", fan_out, off)
            off += 8 * fan_out
            layers.append((a.astype(float), b.astype(float)))
        if off != len(data):
            raise ValueError("trailing bytes in MLP weight file")
        return cls(layers)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MlpParams":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    total_samples: int = 640_000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_samples < self.batch_size:
            raise ValueError("total_samples must cover at least one batch")

    @property
    def iterations(self) -> int:
        return self.total_samples // self.batch_size


def init_params(dims, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-lim, lim, (fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers)


def forward(p: MlpParams, mu):
    """Return ``(eta, cache)``; ``mu`` is ``(M,)`` or a batch ``(B, M)``."""
    z = np.asarray(mu, dtype=float)
    if z.shape[-1] != p.layer_dims[0]:
        raise ValueError(f"input dim {z.shape[-1]} != {p.layer_dims[0]}")
    acts, pre = [z], []
    last = len(p.layers) - 1
    for i, (a, b) in enumerate(p.layers):
        u = z @ a.T + b
        pre.append(u)
        z = u if i == last else np.maximum(u, 0.0)
        acts.append(z)
    return z, (acts, pre)


def _log_softmax(eta):
    eta = np.asarray(eta, dtype=float)
    m = eta.max(axis=-1, keepdims=True)
    return eta - m - np.log(np.exp(eta - m).sum(axis=-1, keepdims=True))


def loss(eta, label):
    """``-eta_l + ln(exp(eta_0) + exp(eta_1))``, elementwise over a batch."""
    label = np.asarray(label)
    if np.any((label != 0) & (label != 1)):
        raise ValueError("labels must be 0 or 1")
    ls = _log_softmax(eta)
    return -np.take_along_axis(ls, label[..., None].astype(int), axis=-1)[..., 0]


def backward(p: MlpParams, cache, label):
    """Gradients ``[(dA, db)]`` of the batch-mean loss."""
    acts, pre = cache
    eta = acts[-1]
    single = eta.ndim == 1
    label = np.atleast_1d(np.asarray(label)).astype(int)
    if single:
        acts = [a[None] for a in acts]
        pre = [u[None] for u in pre]
        eta = eta[None]
    bsz = eta.shape[0]
    delta = np.exp(_log_softmax(eta))
    delta[np.arange(bsz), label] -= 1.0
    delta /= bsz
    grads = [None] * len(p.layers)
    for i in range(len(p.layers) - 1, -1, -1):
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i:
            delta = (delta @ p.layers[i][0]) * (pre[i - 1] > 0)
    return grads


def sgd_step(p: MlpParams, grads, lr: float) -> MlpParams:
    if len(grads) != len(p.layers):
        raise ValueError("gradient list does not match layers")
    out = []
    for (a, b), (ga, gb) in zip(p.layers, grads):
        if ga.shape != a.shape or gb.shape != b.shape:
            raise ValueError("gradient shape mismatch")
        out.append((a - lr * ga, b - lr * gb))
    return MlpParams(out)


def moving_average(x, window: int = 1000) -> np.ndarray:
    """Trailing mean over up to ``window`` previous entries."""
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class LossTrace:
    batch_loss: np.ndarray
    smoothed: np.ndarray

    @property
    def final(self) -> float:
        return float(self.smoothed[-1])


def train(cfg: TrainConfig, mu, labels, dims=None, params: MlpParams | None = None,
          window: int = 1000):
    """Sequential mini-batch SGD over the first ``total_samples`` rows.

    Returns ``(params, LossTrace)`` with one trace entry per iteration.
    """
    mu = np.asarray(mu, dtype=float)
    labels = np.asarray(labels).astype(int)
    if len(mu) < cfg.total_samples or len(labels) < cfg.total_samples:
        raise ValueError(f"sample stream exhausted: need {cfg.total_samples}, got {len(mu)}")
    if params is None:
        dims = dims or (mu.shape[1],) + HIDDEN
        params = init_params(dims, cfg.seed)
    p = params.copy()
    bs = cfg.batch_size
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        sl = slice(it * bs, (it + 1) * bs)
        eta, cache = forward(p, mu[sl])
        trace[it] = loss(eta, labels[sl]).mean()
        p = sgd_step(p, backward(p, cache, labels[sl]), cfg.learning_rate)
    return p, LossTrace(trace, moving_average(trace, window))


def fold_input_affine(p: MlpParams, scale: float, shift: float) -> MlpParams:
    """Absorb an input map ``z = scale * mu + shift`` into the first layer."""
    q = p.copy()
    a, b = q.layers[0]
    q.layers[0] = (a * scale, b + shift * a.sum(axis=1))
    return q


def fit(cfg: TrainConfig, mu, labels, restarts: int = 3, dims=None):
    """Train on the standardised input ``M * mu - 1`` from several initialisations.

    Small ReLU nets trained by plain SGD on simplex-valued inputs can sit on a
    flat plateau for the whole run; centring the input and keeping the
    restart with the lowest final smoothed loss avoids that. The returned
    parameters act on raw ``mu``.
    """
    mu = np.asarray(mu, dtype=float)
    m = mu.shape[1]
    z = m * mu - 1.0
    best = None
    for r in range(restarts):
        p0 = init_params(dims or (m,) + HIDDEN, [cfg.seed, r])
        p, trace = train(cfg, z, labels, params=p0)
        if best is None or trace.final < best[1].final:
            best = (p, trace)
    return fold_input_affine(best[0], float(m), -1.0), best[1]
