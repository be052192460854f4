"""Ensemble statistics and baseline Gaussian models over internal coordinates."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .constraint import VARIANCE_FLOOR, PrecisionError, sample_deviations
from .geometry import BackboneChain, InternalCoords, KappaLayout, build_positions, wrap_angle

log = logging.getLogger(__name__)

BASELINE_KINDS = ("empirical", "oas", "diagonal")
EMPIRICAL_RIDGE = 1e-10


class SingularCovarianceError(ValueError):
    pass


def circular_mean(angles, axis: int = 0, min_resultant: float = 1e-9):
    """Mean direction ``atan2(mean sin, mean cos)`` along ``axis``.

    Where the mean resultant length falls below ``min_resultant`` the
    direction is undefined and the first sample's value is returned instead.
    """
    angles = np.asarray(angles, dtype=float)
    if angles.shape[axis] == 0:
        raise ValueError("circular mean of an empty ensemble")
    s = np.mean(np.sin(angles), axis=axis)
    c = np.mean(np.cos(angles), axis=axis)
    mean = np.arctan2(s, c)
    undefined = np.hypot(s, c) < min_resultant
    if np.any(undefined):
        warnings.warn(
            f"{int(np.sum(undefined))} coordinates have no defined circular mean; "
            "using the first conformation's value", stacklevel=2,
        )
        first = np.take(angles, 0, axis=axis)
        mean = np.where(undefined, first, mean)
    return wrap_angle(mean)


@dataclass
class EnsembleDataset:
    """Conformations of one chain, stored as flat kappa vectors plus bond lengths.

    ``kappa`` is ``(N, D)``; ``bond_lengths`` is ``(N, M - 1)``.
    """

    kappa: np.ndarray
    bond_lengths: np.ndarray
    residue_names: list[str] | None = None
    circular_mean: np.ndarray = field(init=False)
    deviations: np.ndarray = field(init=False)

    def __post_init__(self):
        self.kappa = np.atleast_2d(np.asarray(self.kappa, dtype=float))
        self.bond_lengths = np.atleast_2d(np.asarray(self.bond_lengths, dtype=float))
        if len(self.kappa) == 0:
            raise ValueError("empty ensemble")
        if len(self.kappa) != len(self.bond_lengths):
            raise ValueError("kappa and bond_lengths disagree on the number of conformations")
        layout = KappaLayout(self.bond_lengths.shape[1] + 1)
        if self.kappa.shape[1] != layout.size:
            raise ValueError(f"expected {layout.size} angular coordinates, got {self.kappa.shape[1]}")
        if self.residue_names is not None and len(self.residue_names) != layout.n_atoms // 3:
            raise ValueError("residue_names length does not match the chain")
        # raw angles may carry arbitrary multiples of 2 pi
        self.kappa = wrap_angle(self.kappa)
        if np.any(self.kappa[:, layout.angle_slice] <= 0):
            raise ValueError("bond angles must lie in (0, pi) modulo 2 pi")
        self.circular_mean = circular_mean(self.kappa, axis=0)
        self.deviations = wrap_angle(self.kappa - self.circular_mean)

    @classmethod
    def from_internal(cls, conformations: list[InternalCoords], residue_names=None) -> "EnsembleDataset":
        if not conformations:
            raise ValueError("empty ensemble")
        m = {ic.n_atoms for ic in conformations}
        if len(m) != 1:
            raise ValueError(f"conformations have different atom counts: {sorted(m)}")
        return cls(
            np.stack([ic.kappa for ic in conformations]),
            np.stack([ic.bond_lengths for ic in conformations]),
            residue_names,
        )

    @property
    def layout(self) -> KappaLayout:
        return KappaLayout(self.bond_lengths.shape[1] + 1)

    @property
    def n_conformations(self) -> int:
        return len(self.kappa)

    @property
    def n_atoms(self) -> int:
        return self.layout.n_atoms

    @property
    def mean_bond_lengths(self) -> np.ndarray:
        return self.bond_lengths.mean(axis=0)

    def conformation(self, n: int) -> InternalCoords:
        return InternalCoords.from_kappa(self.kappa[n], self.bond_lengths[n])

    def mean_internal(self) -> InternalCoords:
        return InternalCoords.from_kappa(self.circular_mean, self.mean_bond_lengths)

    def mean_chain(self) -> BackboneChain:
        ic = self.mean_internal()
        return BackboneChain(build_positions(ic.dihedrals, ic.bond_angles, ic.bond_lengths))

    def positions(self) -> np.ndarray:
        """Canonical-frame coordinates of every conformation, ``(N, M, 3)``."""
        dih, ang = self.layout.split(self.kappa)
        return build_positions(dih, ang, self.bond_lengths)

    def data_variances(self, floor: float = VARIANCE_FLOOR) -> np.ndarray:
        if self.n_conformations < 2:
            raise ValueError("need at least two conformations for variances")
        return np.maximum(np.var(self.deviations, axis=0, ddof=1), floor)


# ---------------------------------------------------------------------------
# baselines


@dataclass
class BaselineModel:
    kind: str
    mean: np.ndarray
    precision: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    shrinkage: float | None = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        try:
            self.chol = linalg.cholesky(self.precision, lower=True)
        except linalg.LinAlgError as err:
            raise PrecisionError(f"{self.kind} baseline precision is not positive definite") from err


def sample_covariance(x, ddof: int = 1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    centred = x - x.mean(axis=0)
    return centred.T @ centred / (len(x) - ddof)


def oas_shrinkage(emp_cov, n_samples: int) -> float:
    """Closed-form Oracle Approximating Shrinkage coefficient (Chen et al., 2010).

    ``emp_cov`` is the maximum-likelihood (1/N) covariance.
    """
    p = emp_cov.shape[0]
    tr = np.trace(emp_cov)
    tr2 = np.sum(emp_cov * emp_cov)  # tr(S^2) for symmetric S
    num = (1.0 - 2.0 / p) * tr2 + tr * tr
    den = (n_samples + 1.0 - 2.0 / p) * (tr2 - tr * tr / p)
    if den <= 0:
        return 1.0
    return float(min(max(num / den, 0.0), 1.0))


def oas_covariance(x) -> tuple[np.ndarray, float]:
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    emp = sample_covariance(x, ddof=0)
    rho = oas_shrinkage(emp, n)
    mu = np.trace(emp) / p
    shrunk = (1.0 - rho) * emp
    shrunk[np.diag_indices(p)] += rho * mu
    return shrunk, rho


def fit_baseline(ds: EnsembleDataset, kind: str, a: float = 1.0) -> BaselineModel:
    """Gaussian baseline over kappa deviations around the circular mean.

    * ``empirical``: inverse sample covariance (needs N > D)
    * ``oas``: inverse OAS-shrunk covariance
    * ``diagonal``: ``a / var`` on the diagonal (the fixed kappa-prior)
    """
    n, d = ds.deviations.shape
    if n < 2:
        raise ValueError("baselines need at least two conformations")
    if kind == "empirical":
        if n <= d:
            raise SingularCovarianceError(
                f"empirical covariance is singular with N={n} <= D={d}; use the 'oas' baseline"
            )
        cov = sample_covariance(ds.deviations) + EMPIRICAL_RIDGE * np.eye(d)
        prec = linalg.cho_solve((linalg.cholesky(cov, lower=True), True), np.eye(d))
        return BaselineModel(kind, ds.circular_mean.copy(), 0.5 * (prec + prec.T))
    if kind == "oas":
        cov, rho = oas_covariance(ds.deviations)
        cov[np.diag_indices(d)] = np.maximum(np.diag(cov), VARIANCE_FLOOR)
        prec = linalg.cho_solve((linalg.cholesky(cov, lower=True), True), np.eye(d))
        return BaselineModel(kind, ds.circular_mean.copy(), 0.5 * (prec + prec.T), shrinkage=rho)
    if kind == "diagonal":
        if not a > 0:
            raise ValueError("prior strength must be positive")
        return BaselineModel(kind, ds.circular_mean.copy(), np.diag(a / ds.data_variances()))
    raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")


def sample_baseline(model: BaselineModel, n: int, seed) -> np.ndarray:
    """Kappa samples ``(n, D)``, wrapped like :func:`constraint.sample`."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layout = KappaLayout((len(model.mean) + 5) // 2)
    return layout.wrap(model.mean + sample_deviations(model.chol, n, rng))
