"""Domain types, dataset ingestion, and covariance pre-computation.

One experimental unit contributes a scalar exposure, an optional confounder
vector, a scalar outcome, and a T_i x p matrix of mediator observations.
Second moments are taken about zero (mediator means are assumed zero); pass
``center=True`` at ingestion to subtract per-unit column means instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (
    DimensionMismatch,
    GmedDataError,
    MissingMediator,
    NonFiniteValue,
    SingularPooledCovariance,
)

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-8
NORM_TOL = 1e-8


@dataclass(frozen=True)
class UnitRecord:
    """One experimental unit.

    Attributes
    ----------
    unit_id : str
        Stable identifier, used to resolve mediator files.
    exposure : float
        Exposure value (binary 0/1 in the estimand theory, stored as real).
    confounders : np.ndarray
        Confounder vector of length q (q may be 0).
    outcome : float
        Scalar outcome.
    mediator : np.ndarray
        T_i x p matrix; row t is one observation of the p mediator coordinates.
    """

    unit_id: str
    exposure: float
    confounders: np.ndarray
    outcome: float
    mediator: np.ndarray

    def __post_init__(self):
        med = np.asarray(self.mediator, dtype=np.float64)
        if med.ndim != 2 or med.shape[0] < 1:
            raise GmedDataError(
                f"unit {self.unit_id!r}: mediator must be a T x p matrix with T >= 1"
            )
        conf = np.atleast_1d(np.asarray(self.confounders, dtype=np.float64))
        object.__setattr__(self, "mediator", med)
        object.__setattr__(self, "confounders", conf)
        object.__setattr__(self, "exposure", float(self.exposure))
        object.__setattr__(self, "outcome", float(self.outcome))
        if not np.isfinite(med).all():
            t, j = np.argwhere(~np.isfinite(med))[0]
            raise NonFiniteValue(f"unit {self.unit_id!r}, mediator row {t}, column {j}")
        if not (np.isfinite(conf).all() and np.isfinite(self.exposure) and np.isfinite(self.outcome)):
            raise NonFiniteValue(f"unit {self.unit_id!r} subject row")

    @property
    def n_obs(self) -> int:
        return self.mediator.shape[0]

    @property
    def n_coords(self) -> int:
        return self.mediator.shape[1]

    @property
    def design_vector(self) -> np.ndarray:
        """Stacked (exposure, confounders), length q+1."""
        return np.concatenate(([self.exposure], self.confounders))


@dataclass(frozen=True)
class SampleCovariance:
    """Per-unit second-moment matrix S_i = M_i' M_i / T_i with weight T_i."""

    matrix: np.ndarray
    weight: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "weight", int(self.weight))
        if self.weight < 1:
            raise GmedDataError("covariance weight must be a positive integer")
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GmedDataError("covariance must be square")
        if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
            raise GmedDataError("covariance is not symmetric to 1e-10")
        eigvals = np.linalg.eigvalsh(m)
        if eigvals[0] < -PSD_TOL * max(eigvals[-1], 0.0):
            raise GmedDataError("covariance is not positive semidefinite")


@dataclass(frozen=True)
class ConstraintMatrix:
    """Positive-definite matrix H defining the projection norm theta' H theta = 1."""

    matrix: np.ndarray
    kind: str  # "identity" or "pooled"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if self.kind not in ("identity", "pooled"):
            raise GmedDataError(f"unknown constraint kind {self.kind!r}")
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise SingularPooledCovariance(
                "constraint matrix is not positive definite"
            ) from None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def identity_constraint(p: int) -> ConstraintMatrix:
    return ConstraintMatrix(np.eye(p), "identity")


def _sign_fix(theta: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry positive (first such entry on ties)."""
    j = int(np.argmax(np.abs(theta)))
    return -theta if theta[j] < 0 else theta


@dataclass(frozen=True)
class ProjectionVector:
    """A p-vector theta with theta' H theta = 1 and a fixed sign convention."""

    theta: np.ndarray
    norm_constraint: ConstraintMatrix

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", t)
        q = float(t @ self.norm_constraint.matrix @ t)
        if abs(q - 1.0) > NORM_TOL:
            raise GmedDataError(f"projection norm constraint violated: theta'H theta = {q}")
        j = int(np.argmax(np.abs(t)))
        if t[j] < 0:
            raise GmedDataError("projection sign convention violated")

    @classmethod
    def normalized(cls, vec: np.ndarray, constraint: ConstraintMatrix) -> "ProjectionVector":
        """Scale and sign-fix an arbitrary nonzero vector into a valid projection."""
        v = np.asarray(vec, dtype=np.float64)
        q = float(v @ constraint.matrix @ v)
        if q <= 0.0:
            raise GmedDataError("cannot normalize a vector with non-positive H-norm")
        return cls(_sign_fix(v / np.sqrt(q)), constraint)


@dataclass(frozen=True)
class ModelParameters:
    """Full parameter set for one mediation component.

    ``alpha_block`` stacks the exposure slope and confounder slopes of the
    log-variance model; ``gamma_block`` does the same for the outcome model.
    ``alpha0i`` holds the per-unit random intercepts.
    """

    theta: np.ndarray
    alpha0i: np.ndarray
    alpha0: float
    alpha_block: np.ndarray
    gamma0: float
    gamma_block: np.ndarray
    beta: float
    pi2: float
    sigma2: float

    def __post_init__(self):
        if not (self.pi2 > 0 and self.sigma2 > 0):
            raise GmedDataError("variances pi2 and sigma2 must be positive")

    @property
    def alpha(self) -> float:
        """Exposure slope in the log-variance model."""
        return float(self.alpha_block[0])

    @property
    def gamma(self) -> float:
        """Exposure slope in the outcome model."""
        return float(self.gamma_block[0])


@dataclass(frozen=True)
class CausalEstimates:
    """Average total, indirect, and direct effects with ate = aie + ade."""

    ate: float
    aie: float
    ade: float

    @classmethod
    def from_coefficients(cls, alpha: float, beta: float, gamma: float) -> "CausalEstimates":
        aie = alpha * beta
        ade = gamma
        return cls(ate=ade + aie, aie=aie, ade=ade)


# ---------------------------------------------------------------------------
# Ingestion


def _parse_real(text: str, location: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise NonFiniteValue(location) from None
    if not np.isfinite(value):
        raise NonFiniteValue(location)
    return value


def _read_subject_table(path: Path) -> tuple[list[dict], int]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GmedDataError(f"{path}: empty subject table") from None
        header = [h.strip() for h in header]
        expected_prefix = ["unit_id", "exposure", "outcome"]
        if header[:3] != expected_prefix:
            raise GmedDataError(
                f"{path}: subject table must start with columns {expected_prefix}, got {header[:3]}"
            )
        w_cols = header[3:]
        for k, name in enumerate(w_cols, start=1):
            if name != f"w{k}":
                raise GmedDataError(f"{path}: confounder columns must be named w1..wq, got {name!r}")
        q = len(w_cols)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + q:
                raise GmedDataError(f"{path}:{lineno}: expected {3 + q} fields, got {len(row)}")
            loc = f"{path}:{lineno}"
            rows.append(
                {
                    "unit_id": row[0].strip(),
                    "exposure": _parse_real(row[1], loc + " (exposure)"),
                    "outcome": _parse_real(row[2], loc + " (outcome)"),
                    "confounders": np.array(
                        [_parse_real(v, f"{loc} (w{k + 1})") for k, v in enumerate(row[3:])]
                    ),
                }
            )
    if not rows:
        raise GmedDataError(f"{path}: subject table has no data rows")
    return rows, q


def _read_mediator_file(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            rows.append([_parse_real(v, f"{path}:{lineno}") for v in row])
    if not rows:
        raise GmedDataError(f"{path}: empty mediator file")
    width = len(rows[0])
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DimensionMismatch(width, len(row), f"{path}:{lineno}")
    return np.asarray(rows, dtype=np.float64)


def _read_long_mediators(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["unit_id", "t"]:
            raise GmedDataError(f"{path}: long mediator file must have header unit_id,t,v1..vp")
        p = len(header) - 2
        per_unit: dict[str, list[tuple[int, list[float]]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 2:
                raise DimensionMismatch(p, len(row) - 2, f"{path}:{lineno}")
            t_index = int(row[1])
            values = [_parse_real(v, f"{path}:{lineno}") for v in row[2:]]
            per_unit.setdefault(row[0].strip(), []).append((t_index, values))
    out = {}
    for unit_id, entries in per_unit.items():
        entries.sort(key=lambda e: e[0])
        out[unit_id] = np.asarray([v for _, v in entries], dtype=np.float64)
    return out


def load_dataset(
    subject_table: str | Path,
    mediator_source: str | Path,
    center: bool = False,
) -> list[UnitRecord]:
    """Load and validate units from a subject CSV plus a mediator source.

    The mediator source is either a directory with one ``<unit_id>.csv`` per
    unit (T_i rows of p comma-separated reals) or a single long CSV with
    header ``unit_id,t,v1..vp``. Units come back in subject-table order.
    """
    subject_path = Path(subject_table)
    mediator_path = Path(mediator_source)
    if not subject_path.exists():
        raise GmedDataError(f"subject table not found: {subject_path}")
    if not mediator_path.exists():
        raise GmedDataError(f"mediator source not found: {mediator_path}")
    rows, _ = _read_subject_table(subject_path)

    long_map: dict[str, np.ndarray] | None = None
    if mediator_path.is_file():
        long_map = _read_long_mediators(mediator_path)

    units = []
    p: int | None = None
    for row in rows:
        unit_id = row["unit_id"]
        if long_map is not None:
            if unit_id not in long_map:
                raise MissingMediator(unit_id)
            mediator = long_map[unit_id]
        else:
            f = mediator_path / f"{unit_id}.csv"
            if not f.exists():
                raise MissingMediator(unit_id)
            mediator = _read_mediator_file(f)
        if p is None:
            p = mediator.shape[1]
        elif mediator.shape[1] != p:
            raise DimensionMismatch(p, mediator.shape[1], f"unit {unit_id!r}")
        if center:
            mediator = mediator - mediator.mean(axis=0, keepdims=True)
        units.append(
            UnitRecord(
                unit_id=unit_id,
                exposure=row["exposure"],
                confounders=row["confounders"],
                outcome=row["outcome"],
                mediator=mediator,
            )
        )
    return units


def save_dataset(units: Sequence[UnitRecord], outdir: str | Path) -> tuple[Path, Path]:
    """Write units as ``subjects.csv`` plus ``mediators/<unit_id>.csv``.

    Floats are written with ``repr`` so a reload reproduces bit-identical
    matrices.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    mediator_dir = outdir / "mediators"
    mediator_dir.mkdir(exist_ok=True)
    q = units[0].confounders.shape[0]
    subjects = outdir / "subjects.csv"
    with open(subjects, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "exposure", "outcome"] + [f"w{k}" for k in range(1, q + 1)])
        for u in units:
            writer.writerow(
                [u.unit_id, repr(u.exposure), repr(u.outcome)] + [repr(float(w)) for w in u.confounders]
            )
        for u in units:
            with open(mediator_dir / f"{u.unit_id}.csv", "w", newline="") as mf:
                mwriter = csv.writer(mf)
                for row in u.mediator:
                    mwriter.writerow([repr(float(v)) for v in row])
    return subjects, mediator_dir


# ---------------------------------------------------------------------------
# Covariance pre-computation


def sample_covariances(units: Sequence[UnitRecord]) -> list[SampleCovariance]:
    """Per-unit second moment about zero: S_i = M_i' M_i / T_i."""
    return [
        SampleCovariance(u.mediator.T @ u.mediator / u.n_obs, u.n_obs) for u in units
    ]


def pooled_covariance(units: Sequence[UnitRecord]) -> ConstraintMatrix:
    """T-weighted average of the per-unit second moments (strictly PD required)."""
    if not units:
        raise GmedDataError("pooled covariance requires at least one unit")
    p = units[0].n_coords
    total = np.zeros((p, p))
    total_obs = 0
    for u in units:
        total += u.mediator.T @ u.mediator
        total_obs += u.n_obs
    pooled = total / total_obs
    pooled = 0.5 * (pooled + pooled.T)
    try:
        np.linalg.cholesky(pooled)
    except np.linalg.LinAlgError:
        raise SingularPooledCovariance(
            f"pooled covariance is singular (p={p}, total observations={total_obs})"
        ) from None
    return ConstraintMatrix(pooled, "pooled")


# ---------------------------------------------------------------------------
# Vectorized fitting view


@dataclass(frozen=True)
class Dataset:
    """Stacked arrays consumed by the likelihood and optimizer.

    ``cov_model`` holds the second-moment matrices entering the variance-model
    term (recomputed after deflation); ``cov_plugin`` holds the plug-in
    covariances entering the outcome-model log terms (kept at their original
    values across deflation rounds).
    """

    x_aug: np.ndarray  # (n, q+1)
    y: np.ndarray  # (n,)
    t: np.ndarray  # (n,) observation counts as float
    cov_model: np.ndarray  # (n, p, p)
    cov_plugin: np.ndarray = field(default=None)  # (n, p, p)

    def __post_init__(self):
        if self.cov_plugin is None:
            object.__setattr__(self, "cov_plugin", self.cov_model)

    @classmethod
    def from_units(
        cls,
        units: Sequence[UnitRecord],
        plugin_covariances: Iterable[SampleCovariance] | None = None,
        include_confounders: bool = True,
    ) -> "Dataset":
        n = len(units)
        if n == 0:
            raise GmedDataError("dataset requires at least one unit")
        if include_confounders:
            x_aug = np.stack([u.design_vector for u in units])
        else:
            x_aug = np.array([[u.exposure] for u in units])
        y = np.array([u.outcome for u in units])
        t = np.array([float(u.n_obs) for u in units])
        cov_model = np.stack([u.mediator.T @ u.mediator / u.n_obs for u in units])
        if plugin_covariances is None:
            cov_plugin = cov_model
        else:
            cov_plugin = np.stack([c.matrix for c in plugin_covariances])
        return cls(x_aug=x_aug, y=y, t=t, cov_model=cov_model, cov_plugin=cov_plugin)

    @property
    def n_units(self) -> int:
        return self.x_aug.shape[0]

    @property
    def n_coords(self) -> int:
        return self.cov_model.shape[1]

    def quad_model(self, theta: np.ndarray) -> np.ndarray:
        """theta' S_i theta for every unit."""
        return (self.cov_model @ theta) @ theta

    def quad_plugin(self, theta: np.ndarray) -> np.ndarray:
        """theta' Sigma_i theta for every unit."""
        return (self.cov_plugin @ theta) @ theta

    def pooled_model_cov(self) -> np.ndarray:
        """T-weighted average of the current second-moment matrices."""
        w = self.t / self.t.sum()
        return np.einsum("i,ijk->jk", w, self.cov_model)
