"""Coordinate-wise confidence intervals, standardized max statistics, and
FDR-controlled thresholding, all built on a debiased fit.

The multiple-testing threshold follows the Gaussian-tail calibration

    t_hat = inf{ 0 <= t <= b_p :  p G(t) / max(#{j: T_j >= t}, 1) <= alpha/2 },

G(t) = 2 - 2 Phi(t), b_p = sqrt(2 log p - 2 log log p), with the fallback
t_hat = sqrt(2 log p) when the set is empty. The infimum is computed
exactly: the criterion decreases continuously (through G) between order
statistics and jumps up just past each of them, so the first order
statistic satisfying the bound pins down the interval and inverting G
inside it recovers the exact crossing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import ndtr, ndtri

from .debias import DebiasedFit
from .exceptions import InvalidInputError

__all__ = [
    "IntervalSet",
    "TestOutcome",
    "normal_cdf",
    "normal_quantile",
    "gaussian_tail",
    "confidence_intervals",
    "z_statistics",
    "fdr_threshold",
    "reject",
    "by_adjust",
    "multi_test",
]


def normal_cdf(t):
    """Standard normal CDF (machine accurate)."""
    return ndtr(t)


def normal_quantile(q):
    """Standard normal quantile function."""
    return ndtri(q)


def gaussian_tail(t):
    """Two-sided tail mass G(t) = 2 - 2 Phi(t) = 2 Phi(-t)."""
    return 2.0 * ndtr(-np.asarray(t, dtype=float))


@dataclass
class IntervalSet:
    """Per-coordinate two-sided intervals for both components and for the
    component difference, all at one confidence level."""

    alpha: float
    center1: np.ndarray
    half_width1: np.ndarray
    center2: np.ndarray
    half_width2: np.ndarray
    center_diff: np.ndarray
    half_width_diff: np.ndarray

    def bounds(self, which: str) -> Tuple[np.ndarray, np.ndarray]:
        """(lower, upper) arrays for 'beta1', 'beta2' or 'diff'."""
        c, h = {
            "beta1": (self.center1, self.half_width1),
            "beta2": (self.center2, self.half_width2),
            "diff": (self.center_diff, self.half_width_diff),
        }[which]
        return c - h, c + h


@dataclass
class TestOutcome:
    t1: np.ndarray
    t2: np.ndarray
    t_max: np.ndarray
    t_hat: float
    b_p: float
    rejected: np.ndarray  # sorted indices
    threshold_existed: bool
    floored: np.ndarray  # statistics standing on a floored variance


def confidence_intervals(fit: DebiasedFit, alpha: float) -> IntervalSet:
    """Two-sided intervals centered at the debiased coordinates.

    Half-widths are z_{alpha/2} sqrt(v / n_eff) with the per-coordinate
    variance estimates of the fit; the difference interval uses the
    difference variance the same way.
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError("alpha must lie in (0,1)")
    z = float(ndtri(1.0 - alpha / 2.0))
    n = fit.n_eff
    return IntervalSet(
        alpha=alpha,
        center1=fit.beta1_u,
        half_width1=z * np.sqrt(fit.v1 / n),
        center2=fit.beta2_u,
        half_width2=z * np.sqrt(fit.v2 / n),
        center_diff=fit.beta1_u - fit.beta2_u,
        half_width_diff=z * np.sqrt(fit.v_diff / n),
    )


def z_statistics(fit: DebiasedFit) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Studentized statistics T^(l)_j = sqrt(n_eff) beta_u / sqrt(v), and
    their coordinate-wise max statistic T_j = max(|T^(1)_j|, |T^(2)_j|)."""
    if (fit.v1 <= 0).any() or (fit.v2 <= 0).any():
        raise InvalidInputError("variance estimates must be positive")
    root_n = np.sqrt(fit.n_eff)
    t1 = root_n * fit.beta1_u / np.sqrt(fit.v1)
    t2 = root_n * fit.beta2_u / np.sqrt(fit.v2)
    return t1, t2, np.maximum(np.abs(t1), np.abs(t2))


def fdr_threshold(t_max: np.ndarray, alpha: float) -> Tuple[float, bool]:
    """Exact threshold of the Gaussian-calibrated step-down scan.

    Candidates are the order statistics at most b_p together with {0, b_p};
    the criterion's interval structure makes the first satisfying candidate
    the right endpoint of the interval containing the true infimum, which
    inverting G recovers. Returns (t_hat, threshold_existed).
    """
    t = np.asarray(t_max, dtype=float)
    p = t.shape[0]
    if p < 3:
        raise InvalidInputError("need at least 3 statistics (log log p)")
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError("alpha must lie in (0,1)")
    b_p = float(np.sqrt(2.0 * np.log(p) - 2.0 * np.log(np.log(p))))
    half_alpha = alpha / 2.0

    cands = np.unique(np.concatenate([[0.0, b_p], t[(t >= 0) & (t <= b_p)]]))
    counts = p - np.searchsorted(np.sort(t), cands, side="left")  # #{T_j >= c}
    crit = p * gaussian_tail(cands) / np.maximum(counts, 1)
    hits = np.nonzero(crit <= half_alpha)[0]
    if hits.size == 0:
        return float(np.sqrt(2.0 * np.log(p))), False
    i = int(hits[0])
    # invert G within the interval ending at cands[i]; the count is constant
    # just below the candidate, so the crossing solves p G(t) = half_alpha * N
    n_at = max(int(counts[i]), 1)
    t_cross = float(ndtri(1.0 - half_alpha * n_at / (2.0 * p)))
    lo = 0.0 if i == 0 else float(cands[i - 1])
    t_hat = min(float(cands[i]), max(t_cross, lo))
    return t_hat, True


def reject(t_max: np.ndarray, t_hat: float) -> np.ndarray:
    """Indices with T_j >= t_hat, sorted."""
    return np.flatnonzero(np.asarray(t_max, dtype=float) >= t_hat)


def by_adjust(p_values: np.ndarray, alpha: float) -> np.ndarray:
    """Benjamini-Yekutieli step-up at level alpha (harmonic correction).

    Rejects the k* smallest p-values where k* is the largest k with
    p_(k) <= k * alpha / (p * sum_{i<=p} 1/i). Returns sorted indices.
    """
    pv = np.asarray(p_values, dtype=float)
    if (pv < 0).any() or (pv > 1).any() or not np.isfinite(pv).all():
        raise InvalidInputError("p-values must lie in [0,1]")
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError("alpha must lie in (0,1)")
    p = pv.shape[0]
    harm = np.sum(1.0 / np.arange(1, p + 1))
    order = np.argsort(pv, kind="stable")
    thresholds = alpha * np.arange(1, p + 1) / (p * harm)
    ok = np.nonzero(pv[order] <= thresholds)[0]
    if ok.size == 0:
        return np.empty(0, dtype=int)
    k_star = int(ok[-1]) + 1
    return np.sort(order[:k_star])


def multi_test(fit: DebiasedFit, alpha: float) -> TestOutcome:
    """Standardized statistics plus the calibrated rejection set."""
    t1, t2, t_max = z_statistics(fit)
    t_hat, existed = fdr_threshold(t_max, alpha)
    return TestOutcome(
        t1=t1,
        t2=t2,
        t_max=t_max,
        t_hat=t_hat,
        b_p=float(np.sqrt(2.0 * np.log(t_max.size) - 2.0 * np.log(np.log(t_max.size)))),
        rejected=reject(t_max, t_hat),
        threshold_existed=existed,
        floored=fit.floored.copy(),
    )
