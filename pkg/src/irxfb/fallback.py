"""Fall-back decisions: Bayes risk over M formats plus a fall-back hypothesis,
and thresholding of the trained network's two scores.

Both deciders accept batched metric vectors and return batched decisions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mfdet import MetricVector
from .mlp import MlpParams, forward

THETA_BRACKET = (0.0, 2.0)


@dataclass
class CostMatrix:
    """``c[m, n]``: cost of deciding ``n`` under true format ``m``; column M is fall-back."""

    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        m = self.c.shape[0]
        if self.c.shape != (m, m + 1):
            raise ValueError(f"cost matrix must be M x (M+1), got {self.c.shape}")
        if np.any(self.c < 0):
            raise ValueError("costs must be non-negative")
        if np.any(np.diag(self.c[:, :m]) != 0):
            raise ValueError("diagonal costs must be zero")

    @property
    def n_formats(self) -> int:
        return self.c.shape[0]

    @classmethod
    def from_theta(cls, theta: float, n_formats: int) -> "CostMatrix":
        """Unit misclassification costs and a shared fall-back cost ``theta``."""
        c = np.ones((n_formats, n_formats + 1)) - np.eye(n_formats, n_formats + 1)
        c[:, n_formats] = theta
        return cls(c)

    def to_text(self) -> str:
        return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in self.c) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CostMatrix":
        rows = [line.split() for line in text.splitlines()
                if line.strip() and not line.lstrip().startswith("#")]
        return cls(np.array(rows, dtype=float))

    def save(self, path, header: str = "") -> None:
        Path(path).write_text(header + self.to_text())

    @classmethod
    def load(cls, path) -> "CostMatrix":
        return cls.from_text(Path(path).read_text())


@dataclass
class FallbackDecision:
    fall_back: np.ndarray
    chosen_hypothesis: np.ndarray
    scores: np.ndarray


def _probs(mu) -> np.ndarray:
    return np.asarray(mu.probs if isinstance(mu, MetricVector) else mu, dtype=float)


def bayes_decide(costs: CostMatrix, mu) -> FallbackDecision:
    """``argmin_n sum_m c[m, n] p_m`` with ties to the smallest ``n``."""
    p = _probs(mu)
    eps = p @ costs.c
    chosen = np.argmin(eps, axis=-1)
    return FallbackDecision(chosen == costs.n_formats, chosen, eps)


def dnn_decide(p: MlpParams, mu) -> FallbackDecision:
    """Fall back when the second score exceeds the first; ties keep SLIC."""
    probs = _probs(mu)
    eta, _ = forward(p, probs)
    fb = eta[..., 1] > eta[..., 0]
    chosen = np.where(fb, probs.shape[-1], np.argmax(probs, axis=-1))
    return FallbackDecision(fb, chosen, eta)


def fallback_error_rate(fall_back, wrong) -> float:
    """Empirical ``P(fall back, MF right) + P(keep, MF wrong)``."""
    fall_back = np.asarray(fall_back, dtype=bool)
    wrong = np.asarray(wrong, dtype=bool)
    return float(np.mean(fall_back != wrong))


def optimize_costs(probs, labels, n_formats: int | None = None,
                   bracket=THETA_BRACKET) -> CostMatrix:
    """Fit the shared fall-back cost by exhaustive search over decision cut points.

    With unit misclassification costs the Bayes rule falls back exactly when
    ``theta < 1 - max(p)``, so the empirical error rate is piecewise constant
    in ``theta`` with breaks at the observed ``1 - max(p)``. Every piece is
    scored; the midpoint of the first best piece is returned.
    """
    probs = _probs(probs)
    wrong = np.asarray(labels).astype(bool)
    if probs.ndim != 2 or len(probs) == 0 or len(probs) != len(wrong):
        raise ValueError("need a non-empty (N, M) probability array with N labels")
    m = probs.shape[1] if n_formats is None else n_formats
    lo, hi = bracket
    t = np.clip(1.0 - probs.max(axis=1), lo, hi)
    cuts = np.unique(np.concatenate([[lo], t, [hi]]))
    # piece j is [cuts[j], cuts[j+1]); fall back iff theta < t
    order = np.argsort(t, kind="stable")
    ts, ws = t[order], wrong[order]
    n = len(t)
    # samples with t <= cuts[j] keep SLIC, the rest fall back
    kept = np.searchsorted(ts, cuts[:-1], side="right")
    wrong_cum = np.concatenate([[0], np.cumsum(ws)])
    right_cum = np.concatenate([[0], np.cumsum(~ws)])
    kept_wrong = wrong_cum[kept]
    fb_right = right_cum[n] - right_cum[kept]
    errors = kept_wrong + fb_right
    j = int(np.argmin(errors))
    theta = 0.5 * (cuts[j] + cuts[j + 1])
    return CostMatrix.from_theta(theta, m)


def empirical_bayes_risk(costs: CostMatrix, true_index, decided_index) -> float:
    """Mean of ``c[true, decided]`` over labelled decisions."""
    true_index = np.asarray(true_index, dtype=int)
    decided_index = np.asarray(decided_index, dtype=int)
    if true_index.size == 0:
        raise ValueError("no decisions to score")
    return float(np.mean(costs.c[true_index, decided_index]))
