"""Iterative penalized-EM estimation for the two-component mixed linear
regression.

Each iteration recomputes the posterior responsibilities, solves two
responsibility-weighted lasso problems (one per component, warm-started at
the incoming coefficients), refreshes the mixing proportion by the mean
responsibility, and optionally re-estimates the noise variance. The l1
penalty follows the geometric-decay-plus-floor recursion

    lam_{t+1} = kappa * lam_t + c_lambda * sqrt(log(p) / n).

Sample splitting (iteration t touching only the t-th block of a seeded
partition) is available but off by default; reusing the full sample each
iteration is what works in practice.

Internally the complement responsibilities are evaluated as expit(-logit)
rather than 1 - gamma, and the complement mixing proportion is tracked
alongside omega. With that discipline the whole trajectory is bit-exact
under the label swap (omega, beta1, beta2) -> (1-omega, beta2, beta1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import InvalidInputError
from .lasso import PenalizedLsProblem, solve_weighted_lasso
from .model import MlrDataset, Responsibilities, ThetaParams

__all__ = [
    "EmConfig",
    "EmFit",
    "FitWarning",
    "lambda_next",
    "estimate_sigma2_step",
    "em_step",
    "em_fit",
    "working_sample",
]

OMEGA_CLIP = 1e-3  # mixing proportion is pinched away from {0,1} by this much


class FitWarning(UserWarning):
    """Non-fatal trouble during an EM fit (solver cap hit, degenerate
    weights, clamped mixing proportion)."""


@dataclass(frozen=True)
class EmConfig:
    """Knobs of the EM driver.

    Exactly one of ``estimate_sigma`` / ``sigma2_known`` must be active:
    either the noise variance is re-estimated every iteration or it is held
    at a known value.
    """

    t_max: int = 30
    kappa: float = 0.3
    c_lambda: float = 0.8
    lambda0: float = 0.5
    split: bool = False
    estimate_sigma: bool = True
    sigma2_known: Optional[float] = None
    mix: float = 1.0
    solver_tol: float = 1e-7
    solver_max_iter: int = 10000
    sigma2_floor: float = 1e-6
    track_path: bool = False

    def __post_init__(self):
        if not (0.0 <= self.kappa < 1.0):
            raise InvalidInputError("kappa must lie in [0, 1)")
        if self.c_lambda <= 0 or self.lambda0 <= 0:
            raise InvalidInputError("c_lambda and lambda0 must be positive")
        if self.t_max < 1:
            raise InvalidInputError("t_max must be at least 1")
        if not (0.0 <= self.mix <= 1.0):
            raise InvalidInputError("mix must lie in [0, 1]")
        if self.estimate_sigma and self.sigma2_known is not None:
            raise InvalidInputError("choose one of estimate_sigma or sigma2_known")
        if not self.estimate_sigma:
            if self.sigma2_known is None or self.sigma2_known <= 0:
                raise InvalidInputError("sigma2_known must be a positive real")


@dataclass
class EmFit:
    """Everything the inference stages need from a finished fit."""

    theta: ThetaParams
    gamma: Responsibilities  # weights used in the final M-step
    lambda_path: np.ndarray  # penalty used at steps 1..T
    n_t: int  # effective per-iteration sample size
    omega_complement: float  # mean complement responsibility, tracked exactly
    subset_indices: Optional[List[np.ndarray]] = None
    theta_path: Optional[List[ThetaParams]] = None
    warnings: List[str] = field(default_factory=list)


def lambda_next(lambda_t: float, kappa: float, c_lambda: float, n: int, p: int) -> float:
    """One step of the penalty recursion kappa*lam + c_lambda*sqrt(log p/n)."""
    if p < 2 or n < 1:
        raise InvalidInputError("need p >= 2 and n >= 1")
    if lambda_t < 0 or c_lambda <= 0 or not (0.0 <= kappa < 1.0):
        raise InvalidInputError("invalid recursion constants")
    return kappa * lambda_t + c_lambda * np.sqrt(np.log(p) / n)


def _sigma2_core(r1, r2, g, gc, floor):
    s1 = float(np.mean(g * r1 * r1))
    s2 = float(np.mean(gc * r2 * r2))
    return max(0.5 * (s1 + s2), floor)


def estimate_sigma2_step(
    data: MlrDataset,
    theta: ThetaParams,
    gamma: Responsibilities,
    floor: float = 1e-6,
) -> float:
    """Per-iteration noise-variance refresh.

    Returns the average of the two responsibility-weighted mean squared
    residuals, (sigma1^2 + sigma2^2)/2 with sigma_l^2 = (1/n) sum of the
    l-th component's weighted squared residuals, floored at ``floor``.
    """
    g = gamma.gamma
    if g.shape[0] != data.n:
        raise InvalidInputError("gamma length does not match the dataset")
    r1 = data.y - data.x @ theta.beta1
    r2 = data.y - data.x @ theta.beta2
    return _sigma2_core(r1, r2, g, 1.0 - g, floor)


@dataclass
class _State:
    """Internal EM state carrying the exact complement quantities."""

    omega: float
    omega_c: float
    beta1: np.ndarray
    beta2: np.ndarray
    sigma2: float

    def theta(self) -> ThetaParams:
        return ThetaParams(self.omega, self.beta1, self.beta2, self.sigma2)


def _clip_omega(value: float, notes: List[str]) -> float:
    if value < OMEGA_CLIP:
        notes.append(f"omega clamped at {OMEGA_CLIP}")
        return OMEGA_CLIP
    if value > 1.0 - OMEGA_CLIP:
        notes.append(f"omega clamped at {1.0 - OMEGA_CLIP}")
        return 1.0 - OMEGA_CLIP
    return value


def _step_core(
    x: np.ndarray,
    y: np.ndarray,
    state: _State,
    lam: float,
    config: EmConfig,
    notes: List[str],
):
    """One E+M step on (x, y). Returns (new state, gamma, gamma_c)."""
    r1 = y - x @ state.beta1
    r2 = y - x @ state.beta2
    logits = (np.log(state.omega) - np.log(state.omega_c)) + (r2 * r2 - r1 * r1) / (
        2.0 * state.sigma2
    )
    g = expit(logits)
    gc = expit(-logits)

    sol1 = solve_weighted_lasso(
        PenalizedLsProblem(x, y, g, lam, config.mix, warm_start=state.beta1),
        tol=config.solver_tol,
        max_iter=config.solver_max_iter,
    )
    sol2 = solve_weighted_lasso(
        PenalizedLsProblem(x, y, gc, lam, config.mix, warm_start=state.beta2),
        tol=config.solver_tol,
        max_iter=config.solver_max_iter,
    )
    for name, sol in (("component 1", sol1), ("component 2", sol2)):
        if sol.degenerate_weights:
            notes.append(f"{name}: all-zero responsibilities, coefficients held")
        elif not sol.converged:
            notes.append(
                f"{name}: solver cap hit with KKT gap {sol.kkt_gap:.3e}"
            )

    omega = _clip_omega(float(np.mean(g)), notes)
    omega_c = _clip_omega(float(np.mean(gc)), notes)
    if config.estimate_sigma:
        sigma2 = _sigma2_core(
            y - x @ sol1.beta, y - x @ sol2.beta, g, gc, config.sigma2_floor
        )
    else:
        sigma2 = float(config.sigma2_known)
    return _State(omega, omega_c, sol1.beta, sol2.beta, sigma2), g, gc


def em_step(
    data_subset: MlrDataset,
    theta: ThetaParams,
    lam: float,
    config: EmConfig,
):
    """One EM iteration on the given sample at penalty ``lam``.

    Returns the updated parameters and the responsibilities that weighted
    this step's M-step. Solver trouble is reported through ``FitWarning``,
    never raised.
    """
    theta.validate()
    if theta.beta1.shape[0] != data_subset.p:
        raise InvalidInputError("theta dimension does not match the data")
    notes: List[str] = []
    state = _State(theta.omega, 1.0 - theta.omega, theta.beta1, theta.beta2, theta.sigma2)
    new_state, g, _ = _step_core(data_subset.x, data_subset.y, state, lam, config, notes)
    for msg in notes:
        warnings.warn(msg, FitWarning, stacklevel=2)
    return new_state.theta(), Responsibilities(g)


def em_fit(
    data: MlrDataset,
    init: ThetaParams,
    config: EmConfig,
    seed: int,
) -> EmFit:
    """Run the full iterative estimator.

    Iteration t (0-based) uses the t-th block of a seeded partition when
    ``config.split`` is on (blocks of exactly floor(n/T) samples from a
    shuffled index vector; the remainder is unused), and the full sample
    otherwise. The penalty recursion is driven by the effective
    per-iteration sample size.
    """
    try:
        init.validate()
    except InvalidInputError:
        raise
    if init.beta1.shape[0] != data.p:
        raise InvalidInputError("init dimension does not match the data")
    T = config.t_max
    if config.split and data.n < T:
        raise InvalidInputError("split mode needs n >= t_max")

    subsets: Optional[List[np.ndarray]] = None
    if config.split:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(data.n)
        m = data.n // T
        subsets = [perm[t * m : (t + 1) * m] for t in range(T)]
        n_t = m
    else:
        n_t = data.n

    notes: List[str] = []
    sigma2_0 = init.sigma2 if config.estimate_sigma else float(config.sigma2_known)
    state = _State(init.omega, 1.0 - init.omega, init.beta1, init.beta2, sigma2_0)
    lam = config.lambda0
    lambda_path = np.empty(T)
    theta_path: Optional[List[ThetaParams]] = [] if config.track_path else None
    gamma_last = np.full(data.n if not config.split else n_t, init.omega)
    for t in range(T):
        block = data if subsets is None else data.subset(subsets[t])
        lam = lambda_next(lam, config.kappa, config.c_lambda, n_t, data.p)
        lambda_path[t] = lam
        state, gamma_last, _ = _step_core(block.x, block.y, state, lam, config, notes)
        if theta_path is not None:
            theta_path.append(state.theta())

    for msg in notes:
        warnings.warn(msg, FitWarning, stacklevel=2)
    return EmFit(
        theta=state.theta(),
        gamma=Responsibilities(gamma_last),
        lambda_path=lambda_path,
        n_t=n_t,
        omega_complement=state.omega_c,
        subset_indices=subsets,
        theta_path=theta_path,
        warnings=notes,
    )


def working_sample(data: MlrDataset, fit: EmFit) -> MlrDataset:
    """The sample the final M-step saw: the last split block, or all of
    ``data`` when splitting was off."""
    if fit.subset_indices is None:
        return data
    return data.subset(fit.subset_indices[-1])
