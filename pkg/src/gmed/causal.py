"""Causal estimands and unit-level bootstrap inference.

The bootstrap resamples whole units with replacement (all mediator
observations of a sampled unit move together) and refits coefficients for
each component holding its projection fixed, replaying the outcome deflation
with the replicate's own coefficient estimates. Inference on the projections
themselves is out of scope.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .components import ComponentSet
from .data import CausalEstimates, UnitRecord, sample_covariances
from .exceptions import (
    DegenerateResample,
    InfeasibleStart,
    RankDeficientDesign,
    TooFewDraws,
)
from .optimizer import OptimizerConfig, _fit_coefficients

FAILURE_WARN_FRACTION = 0.01


def estimands(alpha: float, beta: float, gamma: float) -> CausalEstimates:
    """Map fitted coefficients to causal effects: aie = alpha*beta, ade = gamma."""
    return CausalEstimates.from_coefficients(alpha, beta, gamma)


def percentile_ci(draws: Sequence[float], level: float) -> tuple[float, float]:
    """Equal-tail percentile interval with linear interpolation."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.size < 2:
        raise TooFewDraws("at least two draws are required for an interval")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(draws, [tail, 100.0 - tail])
    return float(lo), float(hi)


def bootstrap_p_value(draws: Sequence[float]) -> float:
    """Two-sided percentile sign test of the draws against zero."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.size < 2:
        raise TooFewDraws("at least two draws are required for a p-value")
    below = int(np.sum(draws <= 0.0))
    above = int(np.sum(draws >= 0.0))
    return min(1.0, 2.0 * min(below, above) / draws.size)


@dataclass(frozen=True)
class EstimandInference:
    """Point estimate with bootstrap draws, SE, interval, and p-value."""

    estimate: float
    se: float
    p_value: float
    ci: tuple[float, float]
    draws: np.ndarray


@dataclass(frozen=True)
class ComponentInference:
    component: int
    alpha: EstimandInference
    beta: EstimandInference
    gamma: EstimandInference
    aie: EstimandInference
    ade: EstimandInference
    ate: EstimandInference


@dataclass(frozen=True)
class BootstrapResult:
    components: tuple[ComponentInference, ...]
    n_replicates: int
    ci_level: float
    n_failed: int
    seed: int


@dataclass(frozen=True)
class _RefitCache:
    """Per-original-unit quantities sufficient for fixed-projection refits.

    ``quad_deflated[:, j]`` holds projection j against the second moment of
    the mediators deflated by the earlier projections (the data its fit saw);
    ``quad_original[:, j]`` holds it against the undeflated covariance and
    feeds the outcome-deflation log terms.
    """

    x_aug: np.ndarray  # (n, q+1)
    y: np.ndarray  # (n,)
    t: np.ndarray  # (n,)
    quad_deflated: np.ndarray  # (n, k)
    quad_original: np.ndarray  # (n, k)
    config: OptimizerConfig


def _build_cache(
    units: Sequence[UnitRecord],
    components: ComponentSet,
    config: OptimizerConfig,
    include_confounders: bool,
) -> _RefitCache:
    n = len(units)
    k = components.n_components
    thetas = components.thetas
    if include_confounders:
        x_aug = np.stack([u.design_vector for u in units])
    else:
        x_aug = np.array([[u.exposure] for u in units])
    y = np.array([u.outcome for u in units])
    t = np.array([float(u.n_obs) for u in units])
    covs = np.stack([c.matrix for c in sample_covariances(units)])
    quad_original = np.einsum("ijk,jm,km->im", covs, thetas, thetas)

    quad_deflated = np.empty((n, k))
    for j in range(k):
        theta = thetas[:, j]
        if j == 0:
            proj = theta
        else:
            q, _ = np.linalg.qr(thetas[:, :j])
            proj = theta - q @ (q.T @ theta)
        for i, u in enumerate(units):
            v = u.mediator @ proj
            quad_deflated[i, j] = float(v @ v) / u.n_obs
    return _RefitCache(
        x_aug=x_aug,
        y=y,
        t=t,
        quad_deflated=quad_deflated,
        quad_original=quad_original,
        config=config,
    )


def _refit_replicate(cache: _RefitCache, idx: np.ndarray) -> list[tuple[float, float, float]]:
    """Sequential fixed-projection refits on one resample.

    Raises DegenerateResample when any component cannot be fit or fails to
    converge.
    """
    xs = cache.x_aug[idx]
    ys = cache.y[idx]
    ts = cache.t[idx]
    qd = cache.quad_deflated[idx]
    log_orig = np.log(cache.quad_original[idx])
    k = qd.shape[1]
    coefs: list[tuple[float, float, float]] = []
    y_adj = ys
    for j in range(k):
        try:
            state, _, converged = _fit_coefficients(
                qd[:, j], qd[:, j], xs, y_adj, ts, cache.config
            )
        except (RankDeficientDesign, InfeasibleStart) as exc:
            raise DegenerateResample(str(exc)) from exc
        if not converged:
            raise DegenerateResample(f"component {j + 1} refit did not converge")
        coefs.append((float(state.alpha_block[0]), state.beta, float(state.gamma_block[0])))
        y_adj = y_adj - state.beta * log_orig[:, j]
    return coefs


_WORKER_CACHE: _RefitCache | None = None


def _worker_init(cache: _RefitCache) -> None:
    global _WORKER_CACHE
    _WORKER_CACHE = cache


def _worker_run(args: tuple[int, int]) -> tuple[int, list[tuple[float, float, float]] | None]:
    seed, b = args
    cache = _WORKER_CACHE
    idx = np.random.default_rng([seed, b]).integers(0, cache.y.size, cache.y.size)
    try:
        return b, _refit_replicate(cache, idx)
    except DegenerateResample:
        return b, None


def refit_fixed(
    units: Sequence[UnitRecord],
    components: ComponentSet,
    config: OptimizerConfig | None = None,
    include_confounders: bool = True,
) -> list[tuple[float, float, float]]:
    """Fixed-projection refit of every component on the full (unresampled) data.

    Returns (alpha, beta, gamma) per component; at the fitted components this
    reproduces the full-fit coefficients. Also serves as the refitting hook
    for fixed-projection sensitivity analyses.
    """
    cache = _build_cache(units, components, config or OptimizerConfig(), include_confounders)
    return _refit_replicate(cache, np.arange(len(units)))


def bootstrap(
    units: Sequence[UnitRecord],
    components: ComponentSet,
    n_replicates: int = 500,
    ci_level: float = 0.95,
    seed: int = 0,
    config: OptimizerConfig | None = None,
    include_confounders: bool = True,
    threads: int = 1,
) -> BootstrapResult:
    """Unit-level bootstrap of the causal estimands with fixed projections.

    Each replicate draws n units with replacement, refits coefficients per
    component, and records (alpha, beta, gamma) and the implied effects.
    Replicates with degenerate designs or non-converged refits are excluded
    and counted in ``n_failed``. Replicate streams derive from (seed, index),
    so results do not depend on scheduling.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    if components.n_components == 0:
        raise ValueError("bootstrap requires at least one fitted component")
    cache = _build_cache(units, components, config or OptimizerConfig(), include_confounders)
    k = components.n_components

    results: dict[int, list[tuple[float, float, float]] | None] = {}
    if threads > 1:
        with ProcessPoolExecutor(
            max_workers=threads, initializer=_worker_init, initargs=(cache,)
        ) as pool:
            for b, coefs in pool.map(
                _worker_run, [(seed, b) for b in range(n_replicates)], chunksize=8
            ):
                results[b] = coefs
    else:
        n = len(units)
        for b in range(n_replicates):
            idx = np.random.default_rng([seed, b]).integers(0, n, n)
            try:
                results[b] = _refit_replicate(cache, idx)
            except DegenerateResample:
                results[b] = None

    kept = [results[b] for b in range(n_replicates) if results[b] is not None]
    n_failed = n_replicates - len(kept)
    if n_failed > FAILURE_WARN_FRACTION * n_replicates:
        warnings.warn(
            f"{n_failed}/{n_replicates} bootstrap replicates failed and were excluded",
            RuntimeWarning,
            stacklevel=2,
        )
    if len(kept) < 2:
        raise DegenerateResample("fewer than two bootstrap replicates converged")

    out = []
    for j, fit in enumerate(components.fits):
        alpha = np.array([r[j][0] for r in kept])
        beta = np.array([r[j][1] for r in kept])
        gamma = np.array([r[j][2] for r in kept])
        aie = alpha * beta
        ade = gamma
        ate = ade + aie
        point = {
            "alpha": fit.alpha,
            "beta": fit.beta,
            "gamma": fit.gamma,
            "aie": fit.estimands.aie,
            "ade": fit.estimands.ade,
            "ate": fit.estimands.ate,
        }
        draws = {"alpha": alpha, "beta": beta, "gamma": gamma, "aie": aie, "ade": ade, "ate": ate}
        inferences = {
            name: EstimandInference(
                estimate=point[name],
                se=float(np.std(d, ddof=1)),
                p_value=bootstrap_p_value(d),
                ci=percentile_ci(d, ci_level),
                draws=d,
            )
            for name, d in draws.items()
        }
        out.append(ComponentInference(component=j + 1, **inferences))
    return BootstrapResult(
        components=tuple(out),
        n_replicates=n_replicates,
        ci_level=ci_level,
        n_failed=n_failed,
        seed=seed,
    )
