"""Starting values for the EM driver: pooled-lasso screening, two-group
clustering of (response, screened covariates), and per-cluster elastic-net
fits.

The clustering stage is a full-covariance two-component Gaussian mixture
with k-means++ starts (sklearn); it only needs to produce a coarse but
consistent split of the samples, which the elastic-net refits then turn
into coefficient estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from sklearn.mixture import GaussianMixture

from .exceptions import InvalidInputError
from .lasso import PenalizedLsProblem, solve_weighted_lasso
from .model import MlrDataset, ThetaParams

__all__ = ["InitConfig", "initialize"]


@dataclass(frozen=True)
class InitConfig:
    """Hyperparameters of the initialization pipeline.

    "auto" penalties use the universal-threshold scale sqrt(2 log p / n)
    with the relevant sample size.
    """

    screen_lambda: Union[float, str] = "auto"
    cluster_method: str = "gmm"
    enet_mix: float = 0.5
    enet_lambda: Union[float, str] = "auto"
    kmeans_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.enet_mix <= 1.0):
            raise InvalidInputError("enet_mix must lie in [0, 1]")
        if self.cluster_method != "gmm":
            raise InvalidInputError(f"unknown cluster_method {self.cluster_method!r}")
        for name in ("screen_lambda", "enet_lambda"):
            value = getattr(self, name)
            if value != "auto" and not (np.isreal(value) and value > 0):
                raise InvalidInputError(f"{name} must be 'auto' or a positive real")
        if self.kmeans_restarts < 1:
            raise InvalidInputError("kmeans_restarts must be at least 1")


def _auto_lambda(p: int, n: int) -> float:
    return float(np.sqrt(2.0 * np.log(p) / n))


def _enet_fit(x: np.ndarray, y: np.ndarray, config: InitConfig) -> np.ndarray:
    n, p = x.shape
    lam = (
        _auto_lambda(p, n)
        if config.enet_lambda == "auto"
        else float(config.enet_lambda)
    )
    problem = PenalizedLsProblem(x, y, np.ones(n), lam, mix=config.enet_mix)
    return solve_weighted_lasso(problem).beta


def _cluster_labels(features: np.ndarray, config: InitConfig) -> np.ndarray:
    """Two-group hard assignment; retries reseeded on an empty group."""
    for attempt in range(config.kmeans_restarts):
        gmm = GaussianMixture(
            n_components=2,
            covariance_type="full",
            init_params="k-means++",
            n_init=config.kmeans_restarts,
            reg_covar=1e-4,
            random_state=config.seed + attempt,
        )
        labels = gmm.fit_predict(features)
        if 0 < labels.sum() < labels.shape[0]:
            return labels
    return np.empty(0)  # every retry collapsed to one group


def initialize(data: MlrDataset, config: InitConfig) -> ThetaParams:
    """Produce (omega0, beta1_0, beta2_0, sigma2_0) for the EM driver.

    Pipeline: pooled lasso of y on the full design gives a screening support
    S; a 2-component Gaussian-mixture clustering of the vectors (y_i, x_iS)
    hard-assigns the samples; an elastic net on the full design is fit
    inside each group. Component 1 is the larger group, so omega0 >= 1/2.
    Falls back to a median-residual split if the clustering keeps collapsing.
    """
    if data.n < 20:
        raise InvalidInputError("initialization needs at least 20 samples")
    x, y = data.x, data.y
    n, p = x.shape

    screen_lam = (
        _auto_lambda(p, n)
        if config.screen_lambda == "auto"
        else float(config.screen_lambda)
    )
    pooled = solve_weighted_lasso(
        PenalizedLsProblem(x, y, np.ones(n), screen_lam, mix=1.0)
    )
    support = np.flatnonzero(pooled.beta)

    features = np.column_stack([y, x[:, support]]) if support.size else y[:, None]
    labels = _cluster_labels(features, config)
    if labels.size == 0:
        # median split on pooled-lasso residuals
        resid = y - x @ pooled.beta
        labels = (resid > np.median(resid)).astype(int)

    counts = np.bincount(labels, minlength=2)
    big = int(np.argmax(counts))  # ties go to group 0, deterministically
    idx1 = labels == big
    idx2 = ~idx1

    beta1 = _enet_fit(x[idx1], y[idx1], config)
    beta2 = _enet_fit(x[idx2], y[idx2], config)
    omega = min(float(counts[big]) / n, 0.999)

    rss = float(np.sum((y[idx1] - x[idx1] @ beta1) ** 2)) + float(
        np.sum((y[idx2] - x[idx2] @ beta2) ** 2)
    )
    sigma2 = max(rss / n, 1e-6)
    return ThetaParams(omega, beta1, beta2, sigma2)
