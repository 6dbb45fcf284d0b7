"""One-step debiasing of the EM coefficient estimates and plug-in variance
estimation for the debiased coordinates.

The precision surrogate for coordinate j solves

    minimize    m' S m
    subject to  || S m - e_j ||_inf <= mu,   || m ||_1 <= budget

with S the unweighted second-moment matrix of the working sample. The fast
path runs cyclic coordinate descent on the equivalent penalized program
(1/2) m'Sm - m_j + mu ||m||_1, whose stationary points are exactly the
KKT points of the constrained program when the budget is slack; an ADMM
solver that carries both constraints backs it up whenever the budget binds
or the fast path stalls. Constraints are always re-checked on the output,
never trusted from the solver, and an infeasible slack mu is doubled up to
ten times.

The debiasing correction itself is computed in residual form through the
M-step KKT identity, which sidesteps the subgradient-selection ambiguity of
the penalty term at zero coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Union

import numpy as np
from numba import njit

from .em import EmFit
from .exceptions import DegenerateDesignError, InvalidInputError
from .model import MlrDataset

__all__ = [
    "SurrogateRow",
    "VarianceBlocks",
    "DebiasedFit",
    "solve_m",
    "build_surrogates",
    "variance_blocks",
    "debias_fit",
]

MAX_MU_DOUBLINGS = 10
V_DIFF_FLOOR = 1e-12


@dataclass
class SurrogateRow:
    """Solution of one precision-surrogate program.

    ``m`` is the component-1 rescaled row m_tilde / omega_hat; solve_m
    itself returns it unrescaled (equivalent to omega_hat = 1), the
    rescaling happens in build_surrogates.
    """

    m: np.ndarray
    m_tilde: np.ndarray
    mu_used: float
    feasible_first_try: bool


@dataclass
class VarianceBlocks:
    """Plug-in curvature/variance matrices for the debiased coordinates.

    ``t12`` doubles as t21: the formula is symmetric, one matrix carries
    both blocks. ``eta`` is the per-observation mixture-overlap factor,
    evaluated in log space so extreme separation saturates instead of
    overflowing mid-formula.
    """

    t11: np.ndarray
    t22: np.ndarray
    t12: np.ndarray
    eta: np.ndarray
    omega_hat: float

    @property
    def t21(self) -> np.ndarray:
        return self.t12


@dataclass
class DebiasedFit:
    beta1_u: np.ndarray
    beta2_u: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v_diff: np.ndarray
    n_eff: int
    rows: List[SurrogateRow]
    floored: np.ndarray  # coordinates where a variance hit its floor


@njit(cache=True)
def _qp_cd_one(S, j, mu, m, kkt_tol, max_sweep, l1_cap):  # pragma: no cover - jit
    """CD on (1/2) m'Sm - m_j + mu||m||_1, warm-started at the passed m.

    Returns 1 on KKT convergence, 0 on sweep cap or divergence. Maintains
    g = S m incrementally; the KKT residual of this program bounds the box
    violation of the constrained program directly.
    """
    p = S.shape[0]
    g = np.zeros(p)
    for k in range(p):
        if m[k] != 0.0:
            for a in range(p):
                g[a] += S[k, a] * m[k]
    full = True
    sweeps = 0
    while sweeps < max_sweep:
        max_step = 0.0
        l1 = 0.0
        for k in range(p):
            if not full and m[k] == 0.0:
                continue
            skk = S[k, k]
            ek = 1.0 if k == j else 0.0
            if skk <= 0.0:
                if abs(g[k] - ek) > mu:
                    return 0  # flat direction with active gradient: no CD fix
                continue
            z = skk * m[k] - g[k] + ek
            if z > mu:
                m_new = (z - mu) / skk
            elif z < -mu:
                m_new = (z + mu) / skk
            else:
                m_new = 0.0
            if m_new != m[k]:
                d = m_new - m[k]
                m[k] = m_new
                for a in range(p):
                    g[a] += S[k, a] * d
                step = abs(d) * skk
                if step > max_step:
                    max_step = step
            l1 += abs(m[k])
        sweeps += 1
        if l1 > l1_cap:
            return 0
        if full:
            gap = 0.0
            for k in range(p):
                ek = 1.0 if k == j else 0.0
                if m[k] == 0.0:
                    v = abs(g[k] - ek) - mu
                    if v < 0.0:
                        v = 0.0
                elif m[k] > 0.0:
                    v = abs(g[k] - ek + mu)
                else:
                    v = abs(g[k] - ek - mu)
                if v > gap:
                    gap = v
            if gap <= kkt_tol:
                return 1
            full = False
        elif max_step <= 0.5 * kkt_tol:
            full = True
    return 0


def _project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, a.size + 1)
    rho = np.max(np.nonzero(u * k > css - radius)[0]) + 1
    tau = (css[rho - 1] - radius) / rho
    return np.sign(v) * np.maximum(a - tau, 0.0)


def _admm_qp(S, j, mu, budget, max_iter, eps):
    """ADMM with both constraint sets split out; returns the m iterate."""
    p = S.shape[0]
    scale = max(float(np.mean(np.diag(S))), 1e-12)
    rho = scale
    K = 2.0 * S + rho * (S @ S) + rho * np.eye(p)
    try:
        from scipy.linalg import cho_factor, cho_solve

        factor = cho_factor(K)
        solve = lambda rhs: cho_solve(factor, rhs)
    except np.linalg.LinAlgError:  # K is SPD by construction; belt and braces
        solve = lambda rhs: np.linalg.solve(K, rhs)
    e = np.zeros(p)
    e[j] = 1.0
    m = np.zeros(p)
    z = np.zeros(p)
    w = np.zeros(p)
    u = np.zeros(p)
    v = np.zeros(p)
    for it in range(max_iter):
        m = solve(rho * (S @ (e + z - u)) + rho * (w - v))
        sm = S @ m
        z_new = np.clip(sm - e + u, -mu, mu)
        w_new = _project_l1_ball(m + v, budget)
        u += sm - e - z_new
        v += m - w_new
        if it % 25 == 24:
            r_prim = max(
                float(np.max(np.abs(sm - e - z_new))), float(np.max(np.abs(m - w_new)))
            )
            r_dual = rho * max(
                float(np.max(np.abs(S @ (z_new - z)))),
                float(np.max(np.abs(w_new - w))),
            )
            if r_prim < eps and r_dual < eps:
                z, w = z_new, w_new
                break
        z, w = z_new, w_new
    return m


def _feasible(S, m, j, mu, budget, slack):
    e = np.zeros(S.shape[0])
    e[j] = 1.0
    box = float(np.max(np.abs(S @ m - e))) <= mu + slack
    return box and float(np.sum(np.abs(m))) <= budget + slack


def solve_m(
    sigma_tilde: np.ndarray,
    j: int,
    mu: float,
    budget: float,
    tol: float = 1e-6,
) -> SurrogateRow:
    """Solve the coordinate-j precision-surrogate program.

    Returns the unrescaled solution (``m`` set equal to ``m_tilde``). If no
    feasible point is found at ``mu``, the slack is doubled (at most ten
    times) and ``mu_used``/``feasible_first_try`` record what happened;
    exhaustion raises DegenerateDesignError naming the coordinate.
    """
    S = np.ascontiguousarray(sigma_tilde, dtype=float)
    p = S.shape[0]
    if S.ndim != 2 or S.shape[1] != p:
        raise InvalidInputError("sigma_tilde must be square")
    if not np.allclose(S, S.T, atol=1e-10 * max(1.0, float(np.abs(S).max()))):
        raise InvalidInputError("sigma_tilde must be symmetric")
    if not (0 <= j < p):
        raise InvalidInputError("coordinate out of range")
    if mu <= 0 or budget <= 0 or tol <= 0:
        raise InvalidInputError("mu, budget, tol must be positive")

    mu_try = float(mu)
    for attempt in range(MAX_MU_DOUBLINGS + 1):
        m = _solve_one(S, j, mu_try, budget, tol)
        if m is not None:
            return SurrogateRow(
                m=m.copy(),
                m_tilde=m,
                mu_used=mu_try,
                feasible_first_try=(attempt == 0),
            )
        mu_try *= 2.0
    raise DegenerateDesignError(j)


def _solve_one(S, j, mu, budget, tol):
    """One feasibility attempt at a fixed mu; None when it fails."""
    p = S.shape[0]
    slack = max(1e-7, 1e-6 * mu)
    kkt_tol = max(1e-12, 1e-2 * tol)
    m = np.zeros(p)
    ok = _qp_cd_one(S, j, mu, m, kkt_tol, 50 * p + 200, 50.0 * budget)
    if ok and _feasible(S, m, j, mu, budget, slack):
        return m
    # budget binding, flat directions, or stall: ADMM with both constraints
    admm_iter = 200000 if p <= 16 else 4000
    m = _admm_qp(S, j, mu, budget, admm_iter, eps=min(1e-9, kkt_tol))
    if _feasible(S, m, j, mu, budget, slack):
        return m
    return None


def auto_mu(p: int, n_t: int) -> float:
    """Default feasibility slack for the surrogate programs."""
    return float(np.sqrt(np.log(p) / n_t))


def auto_budget(n_t: int) -> float:
    """Default l1 budget for the surrogate programs."""
    return 4.0 * float(np.sqrt(np.log(n_t)))


def build_surrogates(
    data_working: MlrDataset,
    emfit: EmFit,
    mu: Union[float, str] = "auto",
    budget: Union[float, str] = "auto",
    tol: float = 1e-6,
) -> List[SurrogateRow]:
    """Solve all p surrogate programs against the working-sample
    second-moment matrix and rescale by the estimated mixing proportion.

    The fast CD path is batched over coordinates; coordinates it cannot
    certify fall back to solve_m's doubling/ADMM path individually.
    """
    omega_hat = emfit.theta.omega
    if not (0.0 < omega_hat < 1.0):
        raise InvalidInputError("final omega must lie strictly inside (0,1)")
    X = data_working.x
    n_t, p = X.shape
    S = np.ascontiguousarray(X.T @ X / n_t)
    mu_val = auto_mu(p, n_t) if mu == "auto" else float(mu)
    budget_val = auto_budget(n_t) if budget == "auto" else float(budget)
    if mu_val <= 0 or budget_val <= 0:
        raise InvalidInputError("mu and budget must be positive")

    kkt_tol = max(1e-12, 1e-2 * tol)
    slack = max(1e-7, 1e-6 * mu_val)
    M, status = _qp_cd_batch(S, mu_val, kkt_tol, 50 * p + 200, 50.0 * budget_val)
    rows: List[SurrogateRow] = []
    for j in range(p):
        m = M[j]
        if status[j] and _feasible(S, m, j, mu_val, budget_val, slack):
            rows.append(
                SurrogateRow(
                    m=m / omega_hat,
                    m_tilde=m,
                    mu_used=mu_val,
                    feasible_first_try=True,
                )
            )
        else:
            row = solve_m(S, j, mu_val, budget_val, tol)
            row.m = row.m_tilde / omega_hat
            rows.append(row)
    return rows


@njit(cache=True)
def _qp_cd_batch(S, mu, kkt_tol, max_sweep, l1_cap):  # pragma: no cover - jit
    p = S.shape[0]
    M = np.zeros((p, p))
    status = np.zeros(p, np.int8)
    for j in range(p):
        status[j] = _qp_cd_one(S, j, mu, M[j], kkt_tol, max_sweep, l1_cap)
    return M, status


def _log_eta_terms(data: MlrDataset, emfit: EmFit):
    theta = emfit.theta
    X, y = data.x, data.y
    r1 = y - X @ theta.beta1
    r2 = y - X @ theta.beta2
    a = (2.0 * y - X @ (theta.beta1 + theta.beta2)) * (X @ (theta.beta2 - theta.beta1))
    a /= 2.0 * theta.sigma2
    omega = theta.omega
    omega_c = emfit.omega_complement
    log_eta = (
        np.log(theta.sigma2)
        + np.logaddexp(np.log(omega), np.log(omega_c) + a)
        + np.logaddexp(np.log(omega_c), np.log(omega) - a)
    )
    return r1, r2, a, log_eta


def variance_blocks(
    data_working: MlrDataset,
    emfit: EmFit,
    form: str = "outer",
) -> VarianceBlocks:
    """Assemble the three p-by-p variance blocks on the working sample.

    form="outer" (the default) uses the empirical second moments of the
    per-observation score terms, t11 = (1/n_T) sum (gamma_i r_1i)^2 x_i x_i'
    and so on; it is the form whose quadratic forms consistently estimate
    the variance of the debiasing correction and it is nonnegative by
    construction. form="curvature" assembles the eta-weighted curvature
    blocks t11 = (1/n_T) sum (gamma_i + 2 r_1i^2/eta_i) x_i x_i',
    t22 analogously with 1-gamma_i and the second residuals, and
    t12 = t21 = -(2/n_T) sum (r_1i r_2i / eta_i) x_i x_i', kept for
    comparison studies.
    """
    X = data_working.x
    n_t = X.shape[0]
    g = emfit.gamma.gamma
    if g.shape[0] != n_t:
        raise InvalidInputError("fit responsibilities do not match the working sample")
    r1, r2, _, log_eta = _log_eta_terms(data_working, emfit)
    eta = np.exp(log_eta)

    if form == "outer":
        u1 = g * r1
        u2 = (1.0 - g) * r2
        t11 = (X.T * (u1 * u1)) @ X / n_t
        t22 = (X.T * (u2 * u2)) @ X / n_t
        t12 = (X.T * (u1 * u2)) @ X / n_t
    elif form == "curvature":
        with np.errstate(divide="ignore"):
            q1 = np.where(r1 != 0.0, np.exp(2.0 * np.log(np.abs(r1)) - log_eta), 0.0)
            q2 = np.where(r2 != 0.0, np.exp(2.0 * np.log(np.abs(r2)) - log_eta), 0.0)
            cross = np.where(
                r1 * r2 != 0.0,
                np.sign(r1 * r2) * np.exp(np.log(np.abs(r1 * r2)) - log_eta),
                0.0,
            )
        t11 = (X.T * (g + 2.0 * q1)) @ X / n_t
        t22 = (X.T * ((1.0 - g) + 2.0 * q2)) @ X / n_t
        t12 = (X.T * (-2.0 * cross)) @ X / n_t
    else:
        raise InvalidInputError(f"unknown variance form {form!r}")

    t12 = 0.5 * (t12 + t12.T)  # symmetric by construction; enforce exactly
    return VarianceBlocks(
        t11=t11, t22=t22, t12=t12, eta=eta, omega_hat=emfit.theta.omega
    )


def _fit_response_psi(X, y, emfit: EmFit, M1, M2):
    """Per-sample influence contributions of both debiased components,
    augmented with the fitted parameters' own sampling response.

    The EM output solves a set of estimating equations on its active
    coordinates (score restricted to the supports pinned at the penalty
    subgradient, the mixing-proportion update, and the per-iteration
    variance update). Because the responsibilities entering the debiasing
    correction are functions of those fitted parameters, the correction
    inherits part of their sampling noise; linearizing the correction
    through the estimating equations and propagating each observation's
    increment yields an influence whose empirical second moment is a consistent
    variance even in the overlap regime. Returns centered (psi1, psi2),
    both n-by-p, or None when the linearization is unavailable.
    """
    n, p = X.shape
    theta = emfit.theta
    lam = float(emfit.lambda_path[-1])
    omega, omega_c, s2 = theta.omega, emfit.omega_complement, theta.sigma2
    g = emfit.gamma.gamma
    gc = 1.0 - g
    u = g * gc
    r1 = y - X @ theta.beta1
    r2 = y - X @ theta.beta2

    s_idx1 = np.flatnonzero(theta.beta1)
    s_idx2 = np.flatnonzero(theta.beta2)
    d1, d2 = s_idx1.size, s_idx2.size
    d = d1 + d2 + 2
    if d1 + d2 == 0 or d >= n:
        return None

    x1 = X[:, s_idx1]
    x2 = X[:, s_idx2]
    a1 = u * r1 / s2
    a2 = -u * r2 / s2
    a_om = u / (omega * omega_c)
    a_s2 = u * (r1 * r1 - r2 * r2) / (2.0 * s2 * s2)
    q = r1 * r1 - r2 * r2

    i_om, i_s2 = d1 + d2, d1 + d2 + 1
    J = np.zeros((d, d))
    J[:d1, :d1] = x1.T @ ((g - a1 * r1)[:, None] * x1) / n
    J[:d1, d1:i_om] = -(x1.T @ ((a2 * r1)[:, None] * x2)) / n
    J[:d1, i_om] = -(x1.T @ (a_om * r1)) / n
    J[:d1, i_s2] = -(x1.T @ (a_s2 * r1)) / n
    J[d1:i_om, d1:i_om] = x2.T @ ((gc + a2 * r2)[:, None] * x2) / n
    J[d1:i_om, :d1] = (x2.T @ ((a1 * r2)[:, None] * x1)) / n
    J[d1:i_om, i_om] = (x2.T @ (a_om * r2)) / n
    J[d1:i_om, i_s2] = (x2.T @ (a_s2 * r2)) / n
    J[i_om, :d1] = -(x1.T @ a1) / n
    J[i_om, d1:i_om] = -(x2.T @ a2) / n
    J[i_om, i_om] = 1.0 - float(np.mean(a_om))
    J[i_om, i_s2] = -float(np.mean(a_s2))
    J[i_s2, :d1] = -0.5 * (x1.T @ (a1 * q - 2.0 * g * r1)) / n
    J[i_s2, d1:i_om] = -0.5 * (x2.T @ (a2 * q - 2.0 * gc * r2)) / n
    J[i_s2, i_om] = -0.5 * float(np.mean(a_om * q))
    J[i_s2, i_s2] = 1.0 - 0.5 * float(np.mean(a_s2 * q))

    # per-sample increments of the estimating equations, centered
    F = np.empty((n, d))
    F[:, :d1] = (g * r1)[:, None] * x1
    F[:, d1:i_om] = (gc * r2)[:, None] * x2
    F[:, i_om] = g
    F[:, i_s2] = 0.5 * (g * r1 * r1 + gc * r2 * r2)
    F -= F.mean(axis=0)

    # gradients of the two corrections with respect to the active params
    mx1 = X @ M1.T  # column j holds m1_j' x_i
    mx2 = X @ M2.T
    G1 = np.zeros((d, p))
    G2 = np.zeros((d, p))
    G1[:d1, :] = -(x1.T @ (g[:, None] * mx1)) / n
    G1[np.arange(d1), s_idx1] += 1.0
    G1[:d1, :] += x1.T @ ((a1 * r1)[:, None] * mx1) / n
    G1[d1:i_om, :] = x2.T @ ((a2 * r1)[:, None] * mx1) / n
    G1[i_om, :] = (a_om * r1) @ mx1 / n
    G1[i_s2, :] = (a_s2 * r1) @ mx1 / n
    G2[d1:i_om, :] = -(x2.T @ (gc[:, None] * mx2)) / n
    G2[np.arange(d1, i_om), s_idx2] += 1.0
    G2[d1:i_om, :] += x2.T @ ((-a2 * r2)[:, None] * mx2) / n
    G2[:d1, :] = x1.T @ ((-a1 * r2)[:, None] * mx2) / n
    G2[i_om, :] = -(a_om * r2) @ mx2 / n
    G2[i_s2, :] = -(a_s2 * r2) @ mx2 / n

    # response q_j' = g_j' J^{-1}; equilibrate, then cut weakly identified
    # directions (their linearization is unreliable and their response
    # otherwise dominates every variance)
    scale = np.sqrt(np.abs(np.diag(J)) + 1e-12)
    Jt = J.T / scale[:, None] / scale[None, :]
    try:
        q1, *_ = np.linalg.lstsq(Jt, G1 / scale[:, None], rcond=0.05)
        q2, *_ = np.linalg.lstsq(Jt, G2 / scale[:, None], rcond=0.05)
    except np.linalg.LinAlgError:
        return None
    Q1 = q1 / scale[:, None]
    Q2 = q2 / scale[:, None]

    base1 = (g * r1)[:, None] * mx1
    base2 = (gc * r2)[:, None] * mx2
    psi1 = base1 - base1.mean(axis=0) + F @ Q1
    psi2 = base2 - base2.mean(axis=0) + F @ Q2
    if not (np.isfinite(psi1).all() and np.isfinite(psi2).all()):
        return None

    # deterministic first-order tilt of each debiased coordinate: the
    # penalty pins the active score means at lam * sign, and that offset
    # propagates through the same response operator
    lam_sign = np.zeros(d)
    lam_sign[:d1] = lam * np.sign(theta.beta1[s_idx1])
    lam_sign[d1:i_om] = lam * np.sign(theta.beta2[s_idx2])
    tilt1 = -Q1.T @ lam_sign
    tilt2 = -Q2.T @ lam_sign
    return psi1, psi2, tilt1, tilt2


def debias_fit(
    data_working: MlrDataset,
    emfit: EmFit,
    surrogates: List[SurrogateRow],
    blocks: VarianceBlocks,
    fit_response: bool = True,
) -> DebiasedFit:
    """Debiased coordinates and their variance estimates.

    The correction is applied in residual form via the M-step KKT identity:
    beta1_u[j] = beta1[j] + m1_j' (1/n_T) sum gamma_i (y_i - <x_i, beta1>) x_i
    with m1_j = m_tilde_j / omega_hat, and component 2 analogously with
    complement weights and m2_j = m_tilde_j / (1 - omega_hat).

    With ``fit_response`` off, the variances are the plain quadratic forms
    v1_j = m1_j' t11 m1_j, v2_j = m2_j' t22 m2_j and the mixed difference
    form v~_j = m1't11 m1 + m2't22 m2 - 2 m1't12 m2. With it on (default),
    each variance additionally carries the fitted parameters' sampling
    response through the responsibilities (see _fit_response_psi), which is
    what keeps support coordinates calibrated when the two components
    overlap; the plain forms are the fallback whenever that linearization
    is unavailable. Variances are floored at 1e-12 with a per-coordinate
    flag.
    """
    X, y = data_working.x, data_working.y
    n_t = X.shape[0]
    theta = emfit.theta
    g = emfit.gamma.gamma
    if g.shape[0] != n_t:
        raise InvalidInputError("fit responsibilities do not match the working sample")
    if len(surrogates) != X.shape[1]:
        raise InvalidInputError("need one surrogate row per coordinate")

    M_tilde = np.vstack([row.m_tilde for row in surrogates])
    M1 = M_tilde / theta.omega
    M2 = M_tilde / emfit.omega_complement

    r1 = y - X @ theta.beta1
    r2 = y - X @ theta.beta2
    score1 = X.T @ (g * r1) / n_t
    score2 = X.T @ ((1.0 - g) * r2) / n_t
    beta1_u = theta.beta1 + M1 @ score1
    beta2_u = theta.beta2 + M2 @ score2

    psi = _fit_response_psi(X, y, emfit, M1, M2) if fit_response else None
    if psi is not None:
        psi1, psi2, tilt1, tilt2 = psi
        v1 = np.mean(psi1 * psi1, axis=0)
        v2 = np.mean(psi2 * psi2, axis=0)
        diff = psi1 - psi2
        # the difference alone carries a first-order deterministic tilt from
        # the penalty (each component's leakage at the other's support);
        # its estimate enters the width on the variance scale
        tilt_d = tilt1 - tilt2
        v_diff = np.mean(diff * diff, axis=0) + n_t * tilt_d * tilt_d
    else:
        v1 = np.einsum("ja,ja->j", M1 @ blocks.t11, M1)
        v2 = np.einsum("ja,ja->j", M2 @ blocks.t22, M2)
        cross = np.einsum("ja,ja->j", M1 @ blocks.t12, M2)
        v_diff = v1 + v2 - 2.0 * cross

    floored = (v1 < V_DIFF_FLOOR) | (v2 < V_DIFF_FLOOR) | (v_diff < V_DIFF_FLOOR)
    v1 = np.maximum(v1, V_DIFF_FLOOR)
    v2 = np.maximum(v2, V_DIFF_FLOOR)
    v_diff = np.maximum(v_diff, V_DIFF_FLOOR)

    return DebiasedFit(
        beta1_u=beta1_u,
        beta2_u=beta2_u,
        v1=v1,
        v2=v2,
        v_diff=v_diff,
        n_eff=emfit.n_t,
        rows=surrogates,
        floored=floored,
    )
