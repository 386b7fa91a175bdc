"""Plug-in negative hierarchical log-likelihood and its analytic derivatives.

The objective decomposes into three terms: the conditional likelihood of the
mediator observations given the random intercepts, the conditional likelihood
of the outcome given the projected log-variances, and the likelihood of the
random intercepts. Infeasibility (a non-positive projected variance or
variance parameter) is encoded as +inf so that line searches can compare
states without exception handling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, ModelParameters
from .exceptions import InfeasibleState

# Floor for quadratic forms entering a logarithm or a denominator.
QUAD_FLOOR = 1e-12


@dataclass(frozen=True)
class LikelihoodContext:
    """Per-unit quantities shared by the optimizer blocks at a fixed state.

    ``xi`` is the projected plug-in variance at the reference theta; the
    theta-update freezes it while candidate projections vary.
    """

    quad_model: np.ndarray  # theta' S_i theta
    quad_plugin: np.ndarray  # theta' Sigma_i theta
    u: np.ndarray  # exp(-alpha0i - x_i' alpha)
    v: np.ndarray  # y_i - gamma0 - x_i' gamma
    feasible: bool

    @property
    def xi(self) -> np.ndarray:
        return self.quad_plugin

    @classmethod
    def from_state(cls, params: ModelParameters, data: Dataset) -> "LikelihoodContext":
        quad_model = data.quad_model(params.theta)
        quad_plugin = data.quad_plugin(params.theta)
        with np.errstate(over="ignore"):
            u = np.exp(-params.alpha0i - data.x_aug @ params.alpha_block)
        v = data.y - params.gamma0 - data.x_aug @ params.gamma_block
        feasible = bool(
            quad_model.min(initial=np.inf) > QUAD_FLOOR
            and quad_plugin.min(initial=np.inf) > QUAD_FLOOR
            and params.pi2 > 0
            and params.sigma2 > 0
            and np.isfinite(u).all()
        )
        return cls(quad_model=quad_model, quad_plugin=quad_plugin, u=u, v=v, feasible=feasible)


def _terms_from_quads(
    quad_model: np.ndarray,
    quad_plugin: np.ndarray,
    x_aug: np.ndarray,
    y: np.ndarray,
    t: np.ndarray,
    alpha0i: np.ndarray,
    alpha0: float,
    alpha_block: np.ndarray,
    gamma0: float,
    gamma_block: np.ndarray,
    beta: float,
    pi2: float,
    sigma2: float,
) -> tuple[float, float, float]:
    a = alpha0i + x_aug @ alpha_block
    with np.errstate(over="ignore"):
        term1 = 0.5 * float(np.sum(t * (a + quad_model * np.exp(-a))))
    resid = y - gamma0 - x_aug @ gamma_block - beta * np.log(quad_plugin)
    term2 = 0.5 * float(np.sum(np.log(sigma2) + resid * resid / sigma2))
    dev = alpha0i - alpha0
    term3 = 0.5 * float(np.sum(np.log(pi2) + dev * dev / pi2))
    return term1, term2, term3


def neg_hier_loglik_terms(params: ModelParameters, data: Dataset) -> tuple[float, float, float]:
    """The three auditable terms of the objective; requires a feasible state."""
    ctx = LikelihoodContext.from_state(params, data)
    if not ctx.feasible:
        raise InfeasibleState("cannot decompose the objective at an infeasible state")
    return _terms_from_quads(
        ctx.quad_model,
        ctx.quad_plugin,
        data.x_aug,
        data.y,
        data.t,
        params.alpha0i,
        params.alpha0,
        params.alpha_block,
        params.gamma0,
        params.gamma_block,
        params.beta,
        params.pi2,
        params.sigma2,
    )


def neg_hier_loglik(params: ModelParameters, data: Dataset) -> float:
    """Negative hierarchical log-likelihood; +inf when infeasible."""
    ctx = LikelihoodContext.from_state(params, data)
    if not ctx.feasible:
        return math.inf
    t1, t2, t3 = _terms_from_quads(
        ctx.quad_model,
        ctx.quad_plugin,
        data.x_aug,
        data.y,
        data.t,
        params.alpha0i,
        params.alpha0,
        params.alpha_block,
        params.gamma0,
        params.gamma_block,
        params.beta,
        params.pi2,
        params.sigma2,
    )
    total = t1 + t2 + t3
    return total if np.isfinite(total) else math.inf


def grad_hess_alpha(params: ModelParameters, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of the objective in the exposure/confounder slopes.

    Each Hessian contribution is a positive scalar times x_i x_i', so the
    Hessian is symmetric positive semidefinite.
    """
    ctx = LikelihoodContext.from_state(params, data)
    w = data.t * ctx.quad_model * ctx.u
    grad = 0.5 * ((data.t - w) @ data.x_aug)
    hess = 0.5 * (data.x_aug.T * w) @ data.x_aug
    return grad, hess


def grad_hess_alpha0_all(params: ModelParameters, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit gradients and Hessians in the random intercepts, vectorized."""
    ctx = LikelihoodContext.from_state(params, data)
    su = ctx.quad_model * ctx.u
    grad = 0.5 * (data.t * (1.0 - su) + 2.0 / params.pi2 * (params.alpha0i - params.alpha0))
    hess = 0.5 * (data.t * su + 2.0 / params.pi2)
    return grad, hess


def grad_hess_alpha0i(params: ModelParameters, data: Dataset, i: int) -> tuple[float, float]:
    """Gradient and Hessian in the i-th random intercept.

    The Hessian is a sum of positive terms (at least 1/pi2), so Newton steps
    are well-defined.
    """
    grad, hess = grad_hess_alpha0_all(params, data)
    return float(grad[i]), float(hess[i])


def build_A_matrix(params: ModelParameters, data: Dataset) -> np.ndarray:
    """Matrix of the linearized theta-stationarity system at the current state.

    Combines the T_i U_i S_i variance-model part with the outcome-model part
    scaled by the frozen projected variances. Symmetrized to absorb
    floating-point rounding; may be indefinite.
    """
    ctx = LikelihoodContext.from_state(params, data)
    if not ctx.feasible:
        raise InfeasibleState("theta update requires a feasible state")
    xi = ctx.xi
    coef = 2.0 * params.beta * (ctx.v - params.beta * np.log(xi)) / (params.sigma2 * xi)
    a = np.einsum("i,ijk->jk", data.t * ctx.u, data.cov_model)
    a -= np.einsum("i,ijk->jk", coef, data.cov_plugin)
    return 0.5 * (a + a.T)


def candidate_quads(data: Dataset, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projected variances for candidate projections stacked as columns.

    Returns (n, m) arrays of theta_c' S_i theta_c and theta_c' Sigma_i theta_c.
    """
    n, p, _ = data.cov_model.shape
    m = thetas.shape[1]
    tmp = (data.cov_model.reshape(n * p, p) @ thetas).reshape(n, p, m)
    quad_model = np.einsum("ipm,pm->im", tmp, thetas)
    tmp = (data.cov_plugin.reshape(n * p, p) @ thetas).reshape(n, p, m)
    quad_plugin = np.einsum("ipm,pm->im", tmp, thetas)
    return quad_model, quad_plugin


def _lagrangian_candidates(
    thetas: np.ndarray,
    lams: np.ndarray,
    params: ModelParameters,
    data: Dataset,
    h: np.ndarray,
    quads: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Constrained-objective values for candidate projections (columns).

    Returns +inf for candidates whose projected plug-in variance hits the
    floor for some unit.
    """
    m = thetas.shape[1]
    ctx = LikelihoodContext.from_state(params, data)
    quad_model, quad_plugin = candidate_quads(data, thetas) if quads is None else quads

    values = np.full(m, np.inf)
    tu = data.t * ctx.u
    constraint = np.einsum("pm,pq,qm->m", thetas, h, thetas) - 1.0
    for c in range(m):
        if quad_plugin[:, c].min() <= QUAD_FLOOR:
            continue
        resid = ctx.v - params.beta * np.log(quad_plugin[:, c])
        val = 0.5 * float(np.sum(tu * quad_model[:, c] + resid * resid / params.sigma2))
        values[c] = val - lams[c] * constraint[c]
    return values


def lagrangian_value(
    theta: np.ndarray,
    lam: float,
    params: ModelParameters,
    data: Dataset,
    h: np.ndarray,
) -> float:
    """Constrained objective for the theta subproblem at multiplier ``lam``."""
    return float(
        _lagrangian_candidates(
            np.asarray(theta, dtype=np.float64).reshape(-1, 1),
            np.array([lam]),
            params,
            data,
            h,
        )[0]
    )
