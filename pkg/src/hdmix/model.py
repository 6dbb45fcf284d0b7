"""Two-component mixed linear regression: data/parameter containers,
mixture log-likelihood, posterior responsibilities, and the EM surrogate
objective.

All operations are pure functions of immutable inputs and are safe to call
concurrently. Arithmetic involving the two mixture exponentials is done in
the log domain throughout, so well-separated components never overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import InvalidInputError

__all__ = [
    "MlrDataset",
    "ThetaParams",
    "Responsibilities",
    "log_likelihood",
    "responsibilities",
    "q_function",
]


@dataclass(frozen=True)
class MlrDataset:
    """Design matrix ``x`` (n rows, p columns) and response vector ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or y.ndim != 1:
            raise InvalidInputError("x must be 2-d and y 1-d")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise InvalidInputError("need at least one sample and one covariate")
        if y.shape[0] != x.shape[0]:
            raise InvalidInputError(
                f"y has length {y.shape[0]} but x has {x.shape[0]} rows"
            )
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise InvalidInputError("non-finite entries in dataset")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> "MlrDataset":
        return MlrDataset(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class ThetaParams:
    """Mixture parameter triple (omega, beta1, beta2) plus the working noise
    variance sigma2.

    sigma2 lives here even in known-variance mode so that a single container
    serves both the fixed-variance and the per-iteration-estimated drivers.
    """

    omega: float
    beta1: np.ndarray
    beta2: np.ndarray
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "beta1", np.asarray(self.beta1, dtype=float))
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float))
        object.__setattr__(self, "omega", float(self.omega))
        object.__setattr__(self, "sigma2", float(self.sigma2))

    def validate(self, open_omega: bool = True) -> None:
        """Check the container invariants.

        ``open_omega=False`` admits the closed boundary omega in {0, 1},
        which q_function tolerates (returning -inf on a mismatching gamma)
        while the likelihood operations do not.
        """
        ok = 0.0 < self.omega < 1.0 if open_omega else 0.0 <= self.omega <= 1.0
        if not ok or not np.isfinite(self.omega):
            raise InvalidInputError(f"omega={self.omega} outside the admissible range")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InvalidInputError("sigma2 must be a positive finite real")
        if not (np.isfinite(self.beta1).all() and np.isfinite(self.beta2).all()):
            raise InvalidInputError("non-finite coefficient entries")
        if self.beta1.shape != self.beta2.shape or self.beta1.ndim != 1:
            raise InvalidInputError("beta1 and beta2 must be 1-d of equal length")

    def swapped(self) -> "ThetaParams":
        """Label-swapped copy (1-omega, beta2, beta1)."""
        return ThetaParams(1.0 - self.omega, self.beta2, self.beta1, self.sigma2)


@dataclass(frozen=True)
class Responsibilities:
    """Posterior membership probabilities of component 1, one per sample."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 1 or not np.isfinite(g).all() or (g < 0).any() or (g > 1).any():
            raise InvalidInputError("gamma must be a 1-d vector with entries in [0,1]")
        object.__setattr__(self, "gamma", g)


def _check_pair(theta: ThetaParams, data: MlrDataset, open_omega: bool = True) -> None:
    theta.validate(open_omega=open_omega)
    if theta.beta1.shape[0] != data.p:
        raise InvalidInputError(
            f"coefficient length {theta.beta1.shape[0]} != number of covariates {data.p}"
        )


def _residuals(theta: ThetaParams, data: MlrDataset):
    r1 = data.y - data.x @ theta.beta1
    r2 = data.y - data.x @ theta.beta2
    return r1, r2


def responsibility_logits(theta: ThetaParams, data: MlrDataset) -> np.ndarray:
    """Log-odds of component-1 membership per sample.

    gamma_i = expit(d_i) with
    d_i = log(omega) - log(1-omega) + (r2_i^2 - r1_i^2) / (2 sigma2).

    The logits are the numerically exact object: both gamma and its
    complement come from symmetric expit calls, so the label-swap identity
    holds to machine precision no matter how separated the components are.
    """
    _check_pair(theta, data)
    r1, r2 = _residuals(theta, data)
    # fl(a - b) = -fl(b - a), so a swapped theta yields bit-exact negated logits
    return (np.log(theta.omega) - np.log(1.0 - theta.omega)) + (r2 * r2 - r1 * r1) / (
        2.0 * theta.sigma2
    )


def responsibilities(theta: ThetaParams, data: MlrDataset) -> Responsibilities:
    """Posterior probability that each observation came from component 1."""
    return Responsibilities(expit(responsibility_logits(theta, data)))


def log_likelihood(theta: ThetaParams, data: MlrDataset) -> float:
    """Average mixture log-likelihood of the sample.

    Evaluated as a log-sum-exp of the two component log-densities, so no
    intermediate quantity overflows or underflows even for residuals of
    hundreds of standard deviations.
    """
    _check_pair(theta, data)
    r1, r2 = _residuals(theta, data)
    inv2s = 1.0 / (2.0 * theta.sigma2)
    a = np.log(theta.omega) - r1 * r1 * inv2s
    b = np.log(1.0 - theta.omega) - r2 * r2 * inv2s
    const = -0.5 * np.log(2.0 * np.pi * theta.sigma2)
    return float(np.mean(np.logaddexp(a, b)) + const)


def q_function(theta: ThetaParams, gamma: Responsibilities, data: MlrDataset) -> float:
    """EM surrogate objective for ``theta`` given fixed responsibilities.

    Matches the estimating-equation convention used by the M-step: the
    residual quadratic is not divided by sigma2 and the Gaussian normalizing
    constant is dropped (both are constants for the maximization over the
    coefficients). Used by tests and diagnostics only.

    omega at the closed boundary is admitted: a boundary omega with a
    mismatching gamma (some gamma_i > 0 while omega = 0, or gamma_i < 1
    while omega = 1) yields -inf rather than an error.
    """
    _check_pair(theta, data, open_omega=False)
    g = gamma.gamma
    if g.shape[0] != data.n:
        raise InvalidInputError("gamma length does not match the dataset")
    r1, r2 = _residuals(theta, data)
    quad = -0.5 * np.mean(g * r1 * r1 + (1.0 - g) * r2 * r2)
    # xlogy-style convention: 0 * log 0 = 0, c * log 0 = -inf for c > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(g > 0, g * np.log(theta.omega), 0.0)
        t2 = np.where(g < 1, (1.0 - g) * np.log(1.0 - theta.omega), 0.0)
    mix = np.mean(t1 + t2)
    return float(quad + mix)
