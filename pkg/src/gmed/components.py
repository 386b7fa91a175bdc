"""Sequential extraction of mediation components.

After a component is fit, its span is removed from the mediator data and its
fitted mediation effect is removed from the outcome; the next component is
fit on the residual data. The number of components kept is controlled by the
average deviation from diagonality of the projected covariances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import (
    ConstraintMatrix,
    Dataset,
    ModelParameters,
    ProjectionVector,
    SampleCovariance,
    UnitRecord,
    _sign_fix,
    sample_covariances,
)
from .exceptions import (
    GmedDataError,
    InfeasibleLogTerm,
    SingularProjectedCovariance,
)
from .likelihood import QUAD_FLOOR
from .optimizer import ComponentFit, FitTrace, OptimizerConfig, fit_component

DFD_DEFAULT_THRESHOLD = 2.0


@dataclass(frozen=True)
class ComponentSet:
    """Ordered mediation components with their selection trace.

    ``dfd_trace`` holds the deviation-from-diagonality value after each
    candidate component, including a final rejected candidate when the
    selection loop stopped at the threshold.
    """

    fits: tuple[ComponentFit, ...]
    traces: tuple[FitTrace, ...]
    dfd_trace: tuple[float, ...]

    def __post_init__(self):
        if len(self.fits) != len(self.traces):
            raise GmedDataError("component fits and traces must align")

    @property
    def n_components(self) -> int:
        return len(self.fits)

    @property
    def thetas(self) -> np.ndarray:
        """Projections as columns of a p x k matrix."""
        return np.column_stack([f.theta.theta for f in self.fits])

    @property
    def betas(self) -> np.ndarray:
        return np.array([f.beta for f in self.fits])


def _span_basis(thetas: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the column span of the projections."""
    q, r = np.linalg.qr(thetas)
    keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
    return q[:, keep]


def deflate(
    units: Sequence[UnitRecord],
    thetas: np.ndarray,
    betas: np.ndarray,
    covariances: Sequence[SampleCovariance],
) -> list[UnitRecord]:
    """Remove identified components from the mediators and the outcome.

    Mediator rows are projected onto the orthogonal complement of the span of
    the identified projections; outcomes drop each component's fitted effect
    computed against the original (undeflated) covariances. The inputs are
    left untouched.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[0] == 1:
        thetas = thetas.T
    betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
    if thetas.shape[1] != betas.shape[0]:
        raise GmedDataError("one beta per projection is required")
    basis = _span_basis(thetas)
    out = []
    for u, cov in zip(units, covariances):
        mediator = u.mediator - (u.mediator @ basis) @ basis.T
        quads = (cov.matrix @ thetas * thetas).sum(axis=0)
        if quads.min(initial=np.inf) <= QUAD_FLOOR:
            raise InfeasibleLogTerm(
                f"unit {u.unit_id!r}: non-positive projected variance in a deflation log term"
            )
        outcome = u.outcome - float(betas @ np.log(quads))
        out.append(
            UnitRecord(
                unit_id=u.unit_id,
                exposure=u.exposure,
                confounders=u.confounders,
                outcome=outcome,
                mediator=mediator,
            )
        )
    return out


def dfd(thetas: np.ndarray, covariances: Sequence[SampleCovariance]) -> float:
    """Average deviation from diagonality of the projected covariances.

    A weighted geometric mean (weights proportional to observation counts) of
    det(diag(Theta' Sigma_i Theta)) / det(Theta' Sigma_i Theta), computed in
    log space. Equals one exactly when the projections commonly diagonalize
    every covariance; always at least one for positive-definite blocks.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[0] == 1:
        thetas = thetas.T
    weights = np.array([c.weight for c in covariances], dtype=np.float64)
    weights /= weights.sum()
    log_dfd = 0.0
    for w, cov in zip(weights, covariances):
        block = thetas.T @ cov.matrix @ thetas
        diag = np.diag(block)
        if diag.min(initial=np.inf) <= 0.0:
            raise SingularProjectedCovariance("non-positive diagonal in projected covariance")
        sign, logdet = np.linalg.slogdet(block)
        if sign <= 0:
            raise SingularProjectedCovariance("projected covariance block is singular")
        log_dfd += w * (float(np.sum(np.log(diag))) - logdet)
    return float(np.exp(log_dfd))


def _complement_basis(thetas: np.ndarray, p: int) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of the kept projections."""
    q, _ = np.linalg.qr(thetas, mode="complete")
    k = thetas.shape[1]
    return q[:, k:]


def _rescaled_fit(fit: ComponentFit, theta_full: np.ndarray, h: ConstraintMatrix) -> ComponentFit:
    """Map a reduced-space fit onto the ambient coordinates.

    The projection is renormalized against the study constraint; the
    log-variance shift 2*log(c) this induces is absorbed exactly by the
    intercepts, leaving slopes, loadings, variances, and estimands unchanged.
    """
    c2 = float(theta_full @ h.matrix @ theta_full)
    theta_scaled = _sign_fix(theta_full / np.sqrt(c2))
    shift = -np.log(c2)  # 2*log(1/sqrt(c2))
    params = fit.params
    new_params = ModelParameters(
        theta=theta_scaled,
        alpha0i=params.alpha0i + shift,
        alpha0=params.alpha0 + shift,
        alpha_block=params.alpha_block,
        gamma0=params.gamma0 - params.beta * shift,
        gamma_block=params.gamma_block,
        beta=params.beta,
        pi2=params.pi2,
        sigma2=params.sigma2,
    )
    return ComponentFit(
        theta=ProjectionVector(theta_scaled, h),
        params=new_params,
        estimands=fit.estimands,
        loglik=fit.loglik,
        converged=fit.converged,
        n_iter=fit.n_iter,
        start_index=fit.start_index,
    )


def select_components(
    units: Sequence[UnitRecord],
    h: ConstraintMatrix,
    config: OptimizerConfig | None = None,
    max_k: int | None = None,
    dfd_threshold: float = DFD_DEFAULT_THRESHOLD,
    include_confounders: bool = True,
    threads: int = 1,
) -> ComponentSet:
    """Extract components by deflation until the diagonality budget is spent.

    Each round reruns the component fit on the deflated data, expressed in an
    orthonormal basis of the complement of the kept projections with the
    round's own constraint matrix (pooled covariance of the current data, or
    the identity). Working in the complement is what removing the identified
    span means; rebuilding the constraint prevents directions whose variance
    was already removed from masquerading as low-variance structure. The
    candidate's deviation from diagonality is evaluated against the original
    covariances together with the kept components; a candidate pushing it
    above the threshold is rejected and the loop stops (its value still
    appears at the end of the trace).
    """
    cfg = config or OptimizerConfig()
    p = units[0].n_coords
    if max_k is None:
        max_k = p
    if not (1 <= max_k <= p):
        raise GmedDataError(f"max_k must be in [1, {p}]")
    original_cov = sample_covariances(units)
    x_aug = np.stack(
        [u.design_vector if include_confounders else np.array([u.exposure]) for u in units]
    )
    t = np.array([float(u.n_obs) for u in units])

    kept_fits: list[ComponentFit] = []
    kept_traces: list[FitTrace] = []
    dfd_trace: list[float] = []
    current = list(units)
    basis = np.eye(p)
    for _ in range(max_k):
        reduced = [u.mediator @ basis for u in current]
        cov_model = np.stack([m.T @ m / m.shape[0] for m in reduced])
        data = Dataset(
            x_aug=x_aug,
            y=np.array([u.outcome for u in current]),
            t=t,
            cov_model=cov_model,
        )
        if h.kind == "identity":
            h_round = ConstraintMatrix(np.eye(basis.shape[1]), "identity")
        else:
            pooled = np.einsum("i,ijk->jk", t / t.sum(), cov_model)
            h_round = ConstraintMatrix(0.5 * (pooled + pooled.T), "pooled")
        fit, trace = fit_component(data, h_round, cfg, threads=threads)
        fit = _rescaled_fit(fit, basis @ fit.theta.theta, h)
        candidate_thetas = np.column_stack(
            [f.theta.theta for f in kept_fits] + [fit.theta.theta]
        )
        value = dfd(candidate_thetas, original_cov)
        dfd_trace.append(value)
        if value > dfd_threshold:
            break
        kept_fits.append(fit)
        kept_traces.append(trace)
        if len(kept_fits) == max_k:
            break
        thetas = np.column_stack([f.theta.theta for f in kept_fits])
        current = deflate(units, thetas, np.array([f.beta for f in kept_fits]), original_cov)
        basis = _complement_basis(thetas, p)
    return ComponentSet(
        fits=tuple(kept_fits), traces=tuple(kept_traces), dfd_trace=tuple(dfd_trace)
    )
