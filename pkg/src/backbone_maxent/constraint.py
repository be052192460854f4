"""Constraint-induced Gaussians over internal coordinates.

A diagonal prior over angular deviations is combined with one multiplier per
atom that penalises its expected squared displacement.  With the displacement
linearised through the Gram matrices, the maximum-entropy solution is again
Gaussian, with precision

    P(lambda) = prior + 2 * sum_m lambda_m G_m

and the expected squared displacement of atom m is ``tr(P^-1 G_m)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .geometry import KappaLayout
from .jacobian import GramSet

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6  # rad^2
TARGET_FLOOR = 1e-4  # Angstrom^2


class PrecisionError(RuntimeError):
    """The assembled precision matrix could not be factorised."""


class ConvergenceError(RuntimeError):
    """``fit_lambda`` ran out of iterations.

    The last iterate is kept on ``model``; ``residuals`` are per atom.
    """

    def __init__(self, message: str, model: "PrecisionModel", residuals: np.ndarray):
        super().__init__(message)
        self.model = model
        self.residuals = residuals


@dataclass(frozen=True)
class KappaPrior:
    strength: float
    data_variances: np.ndarray

    def __post_init__(self):
        if not self.strength > 0:
            raise ValueError(f"prior strength must be positive, got {self.strength}")
        if np.any(~(np.asarray(self.data_variances) > 0)):
            raise ValueError("data variances must be positive")

    @property
    def diagonal(self) -> np.ndarray:
        return self.strength / np.asarray(self.data_variances)

    @property
    def precision(self) -> np.ndarray:
        return np.diag(self.diagonal)

    @property
    def size(self) -> int:
        return len(self.data_variances)


def build_prior(deviations, a: float, floor: float = VARIANCE_FLOOR) -> KappaPrior:
    """Diagonal prior with precision ``a / var`` from wrapped deviations ``(N, D)``."""
    dev = np.asarray(deviations, dtype=float)
    if dev.ndim != 2 or dev.shape[0] < 2:
        raise ValueError("need at least two conformations to estimate prior variances")
    var = np.maximum(np.var(dev, axis=0, ddof=1), floor)
    return KappaPrior(float(a), var)


def floor_targets(targets, floor: float = TARGET_FLOOR) -> np.ndarray:
    return np.maximum(np.asarray(targets, dtype=float), floor)


def targets_from_axis_variances(per_axis_variance, floor: float = TARGET_FLOOR) -> np.ndarray:
    """Convert mean per-axis variances (Angstrom^2) to 3D squared-displacement targets."""
    return floor_targets(3.0 * np.asarray(per_axis_variance, dtype=float), floor)


@dataclass
class PrecisionModel:
    prior: KappaPrior
    lam: np.ndarray
    precision: np.ndarray
    chol: np.ndarray
    # filled in by fit_lambda
    info: dict = field(default_factory=dict, compare=False)

    @property
    def size(self) -> int:
        return self.precision.shape[0]

    def covariance(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.size))

    def log_det_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def log_prob(self, dk) -> np.ndarray:
        """Normalised Gaussian log-density of deviations ``dk`` (..., D)."""
        dk = np.asarray(dk, dtype=float)
        y = dk @ self.chol  # (L^T dk)^T
        quad = np.sum(y * y, axis=-1)
        return -0.5 * (quad + self.size * np.log(2 * np.pi) - self.log_det_precision())


def _factorise(precision: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(precision, lower=True, check_finite=True)
    except linalg.LinAlgError as err:
        eig = np.linalg.eigvalsh(precision)
        raise PrecisionError(
            f"precision not positive definite (min eigenvalue {eig[0]:.3e}, "
            f"max {eig[-1]:.3e}, asymmetry {np.abs(precision - precision.T).max():.3e})"
        ) from err


def assemble_precision(prior: KappaPrior, lam, grams: GramSet) -> PrecisionModel:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (grams.n_atoms,):
        raise ValueError(f"expected {grams.n_atoms} multipliers, got shape {lam.shape}")
    if np.any(lam < 0):
        raise ValueError("multipliers must be non-negative")
    if prior.size != grams.n_coords:
        raise ValueError(f"prior has {prior.size} coordinates, grams have {grams.n_coords}")
    precision = grams.weighted_sum(2.0 * lam)
    precision = 0.5 * (precision + precision.T)
    precision[np.diag_indices_from(precision)] += prior.diagonal
    return PrecisionModel(prior, lam.copy(), precision, _factorise(precision))


def induced_fluctuations(model: PrecisionModel, grams: GramSet) -> np.ndarray:
    """Expected squared displacement per atom, ``tr(P^-1 G_m)``.

    Uses ``tr(P^-1 J_m J_m^T) = ||L^-1 J_m||_F^2`` with ``P = L L^T``.
    """
    y = linalg.solve_triangular(model.chol, grams.factor, lower=True)
    return np.sum((y * y).reshape(grams.n_coords, grams.n_atoms, 3), axis=(0, 2))


def fluctuation_sensitivity(model: PrecisionModel, grams: GramSet) -> np.ndarray:
    """``dC_m / dlambda_k = -2 ||J_k^T P^-1 J_m||_F^2`` as an ``(M, M)`` array."""
    y = linalg.solve_triangular(model.chol, grams.factor, lower=True)
    cross = y.T @ y  # J^T P^-1 J, (3M, 3M)
    blocks = cross.reshape(grams.n_atoms, 3, grams.n_atoms, 3)
    return -2.0 * np.einsum("manb,manb->mn", blocks, blocks)


def constraint_residuals(achieved, targets, lam) -> np.ndarray:
    """Relative residuals respecting complementary slackness.

    Active atoms (lambda > 0) must hit the target; inactive atoms only need to
    stay at or below it.
    """
    ratio = np.asarray(achieved) / np.asarray(targets) - 1.0
    return np.where(np.asarray(lam) > 0, np.abs(ratio), np.maximum(ratio, 0.0))


@dataclass
class FitOptions:
    tol: float = 1e-2
    max_iters: int = 500
    damping: float = 0.5
    method: str = "newton"  # or "fixed_point"
    stall_window: int = 25

    def __post_init__(self):
        if not self.tol > 0 or self.max_iters < 1 or not 0 < self.damping <= 1:
            raise ValueError(f"invalid solver options {self}")
        if self.method not in ("newton", "fixed_point"):
            raise ValueError(f"unknown solver method {self.method!r}")


def dual_objective(model: PrecisionModel, targets) -> float:
    """Convex dual ``lambda . C* - 1/2 log det P(lambda)``.

    Its gradient is ``C* - C(lambda)``, so minimisers over ``lambda >= 0`` are
    exactly the constraint solutions.
    """
    return float(model.lam @ targets) - 0.5 * model.log_det_precision()


def _rescale_by_bisection(prior, lam, grams, targets, active, lo=1e-3, hi=1e3, steps=40):
    """Global scale ``s`` so that active atoms are satisfied on average in log space."""
    def excess(s):
        c = induced_fluctuations(assemble_precision(prior, s * lam, grams), grams)
        return np.mean(np.log(c[active] / targets[active]))

    if not active.any() or excess(lo) < 0 or excess(hi) > 0:
        return lam
    for _ in range(steps):
        mid = np.sqrt(lo * hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return np.sqrt(lo * hi) * lam


def _fixed_point_step(state, prior, grams, targets, feasible, opts):
    lam, c = state["lam"], state["c"]
    lam = lam * (c / targets) ** opts.damping
    # atoms that became slack release their multiplier entirely
    lam[(lam > 0) & (lam < 1e-12 / targets)] = 0.0
    revive = (lam == 0) & feasible & (c > targets * (1 + opts.tol))
    lam[revive] = 1.0 / (2.0 * grams.n_atoms * targets[revive])
    if state["since_best"] >= opts.stall_window:
        lam = _rescale_by_bisection(prior, lam, grams, targets, lam > 0)
        state["since_best"] = 0
    return assemble_precision(prior, lam, grams)


def _newton_step(state, prior, grams, targets, feasible, opts):
    model, c = state["model"], state["c"]
    lam = model.lam
    grad = targets - c
    hess = -fluctuation_sensitivity(model, grams)
    bound = (lam <= 0) & (grad >= 0)
    free = ~bound
    step = np.zeros_like(lam)
    if free.any():
        h = hess[np.ix_(free, free)]
        h = h + 1e-10 * np.diag(np.diag(h)) + 1e-300 * np.eye(len(h))
        try:
            step[free] = -linalg.solve(h, grad[free], assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step[free] = -grad[free] / np.maximum(np.diag(h), 1e-300)
    f0 = dual_objective(model, targets)
    alpha = 1.0
    for _ in range(60):
        trial_lam = np.maximum(lam + alpha * step, 0.0)
        trial = assemble_precision(prior, trial_lam, grams)
        if dual_objective(trial, targets) <= f0 + 1e-4 * grad @ (trial_lam - lam):
            return trial
        alpha *= 0.5
    # no decrease along the Newton arc; fall back to a projected gradient nudge
    return assemble_precision(prior, np.maximum(lam - 1e-3 * grad / np.maximum(np.diag(hess), 1e-300), 0.0), grams)


def fit_lambda(prior: KappaPrior, grams: GramSet, targets, opts: FitOptions | None = None) -> PrecisionModel:
    """Find non-negative multipliers whose induced fluctuations meet ``targets``.

    ``method="newton"`` runs projected Newton on the convex dual
    (:func:`dual_objective`); ``method="fixed_point"`` runs damped
    multiplicative updates ``lambda <- lambda * (C / target) ** damping`` with
    a global bisection rescale when progress stalls.  Both start from
    ``lambda_m = 1 / (2 M target_m)``.  Atoms that already fluctuate less than
    their target without any constraint end with ``lambda = 0``.

    Raises :class:`ConvergenceError` if ``max_iters`` runs out.
    """
    opts = opts or FitOptions()
    targets = floor_targets(targets)
    if targets.shape != (grams.n_atoms,):
        raise ValueError(f"expected {grams.n_atoms} targets, got shape {targets.shape}")

    model = assemble_precision(prior, np.zeros(grams.n_atoms), grams)
    c0 = induced_fluctuations(model, grams)
    feasible = c0 > targets
    # atoms pinned by the reference frame (c0 == 0) are expected and not reported
    n_infeasible = int(np.sum(~feasible & (c0 > 0) & (c0 < targets * (1 - opts.tol))))
    if n_infeasible:
        msg = (f"{n_infeasible} atoms fluctuate less than their target without constraints; "
               "their multipliers stay at zero")
        log.info(msg)
        warnings.warn(msg, stacklevel=2)

    def done(model, c, it, converged):
        res = constraint_residuals(c, targets, model.lam)
        model.info.update(
            converged=converged, iterations=it, method=opts.method, achieved=c,
            targets=targets, residuals=res, max_residual=float(res.max()),
            unconstrained=c0, infeasible=~feasible,
        )
        return model

    if not feasible.any():
        return done(model, c0, 0, True)

    lam = np.where(feasible, 1.0 / (2.0 * grams.n_atoms * targets), 0.0)
    model = assemble_precision(prior, lam, grams)
    step = _newton_step if opts.method == "newton" else _fixed_point_step
    state = {"since_best": 0}
    best = np.inf
    for it in range(1, opts.max_iters + 1):
        c = induced_fluctuations(model, grams)
        worst = float(constraint_residuals(c, targets, model.lam).max())
        log.debug("fit_lambda iteration %d: max relative residual %.3e", it, worst)
        if worst <= opts.tol:
            return done(model, c, it, True)
        if worst < best * (1 - 1e-3):
            best, state["since_best"] = worst, 0
        else:
            state["since_best"] += 1
        state.update(model=model, lam=model.lam.copy(), c=c)
        model = step(state, prior, grams, targets, feasible, opts)

    c = induced_fluctuations(model, grams)
    model = done(model, c, opts.max_iters, False)
    raise ConvergenceError(
        f"fit_lambda did not converge in {opts.max_iters} iterations "
        f"(max relative residual {model.info['max_residual']:.3e})",
        model, model.info["residuals"],
    )


def sample_deviations(chol: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` deviations from ``N(0, (L L^T)^-1)`` given lower Cholesky ``L``."""
    if n < 1:
        raise ValueError("need n >= 1")
    z = rng.standard_normal((chol.shape[0], n))
    return linalg.solve_triangular(chol, z, lower=True, trans="T").T


def sample(model: PrecisionModel, mean, n: int, seed, layout: KappaLayout | None = None) -> np.ndarray:
    """Sample kappa vectors ``(n, D)`` around ``mean``.

    Dihedrals are wrapped into [-pi, pi) and bond angles clamped into (0, pi).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    layout = layout or KappaLayout((len(mean) + 5) // 2)
    return layout.wrap(mean + sample_deviations(model.chol, n, rng))
