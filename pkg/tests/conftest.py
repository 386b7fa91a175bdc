import numpy as np
import pytest

from gmed.data import Dataset, ModelParameters, UnitRecord


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_units(rng, n=6, t=8, p=3, q=0, scale=1.0):
    """Small random units with well-conditioned covariances."""
    units = []
    for i in range(n):
        mediator = scale * rng.standard_normal((t, p))
        units.append(
            UnitRecord(
                unit_id=f"u{i}",
                exposure=float(rng.integers(0, 2)),
                confounders=rng.standard_normal(q),
                outcome=float(rng.standard_normal()),
                mediator=mediator,
            )
        )
    return units


def random_feasible_params(rng, data: Dataset, scale=0.5) -> ModelParameters:
    """Random parameters with a feasible projection for the given dataset."""
    p = data.n_coords
    n = data.n_units
    d = data.x_aug.shape[1]
    theta = rng.standard_normal(p)
    theta /= np.linalg.norm(theta)
    return ModelParameters(
        theta=theta,
        alpha0i=scale * rng.standard_normal(n),
        alpha0=scale * float(rng.standard_normal()),
        alpha_block=scale * rng.standard_normal(d),
        gamma0=scale * float(rng.standard_normal()),
        gamma_block=scale * rng.standard_normal(d),
        beta=scale * float(rng.standard_normal()),
        pi2=float(np.exp(scale * rng.standard_normal())),
        sigma2=float(np.exp(scale * rng.standard_normal())),
    )
