"""Ensemble evaluation: fluctuation profiles, Ramachandran histograms, JS distance, TICA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .geometry import KappaLayout, dihedrals, wrap_angle


# ---------------------------------------------------------------------------
# superposition


def kabsch_rotation(mobile, reference) -> np.ndarray:
    """Proper rotation ``R`` minimising ``|mobile_c @ R - reference_c|`` over centred sets."""
    h = mobile.T @ reference
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def kabsch_superpose(reference, target) -> np.ndarray:
    """Return ``target`` rigidly moved onto ``reference`` (both ``(M, 3)``)."""
    reference = np.asarray(reference, dtype=float)
    target = np.asarray(target, dtype=float)
    if reference.shape != target.shape:
        raise ValueError(f"shape mismatch {reference.shape} vs {target.shape}")
    ref_c = reference.mean(axis=0)
    tgt_c = target.mean(axis=0)
    if np.allclose(target, tgt_c, atol=1e-12, rtol=0) or np.allclose(reference, ref_c, atol=1e-12, rtol=0):
        raise ValueError("cannot superpose a structure whose atoms all coincide")
    rot = kabsch_rotation(target - tgt_c, reference - ref_c)
    return (target - tgt_c) @ rot + ref_c


def rmsd(a, b) -> float:
    return float(np.sqrt(np.mean(np.sum((np.asarray(a) - np.asarray(b)) ** 2, axis=-1))))


def _rmsd_block(xa, xb):
    # xa, xb centred; optimal RMSD from the singular values of the 3x3 correlations
    h = np.einsum("imk,jml->ijkl", xa, xb)
    sv = np.linalg.svd(h, compute_uv=False)
    sign = np.sign(np.linalg.det(h))
    sv[..., -1] *= np.where(sign == 0, 1.0, sign)
    ga = np.sum(xa * xa, axis=(1, 2))
    gb = np.sum(xb * xb, axis=(1, 2))
    msd = (ga[:, None] + gb[None, :] - 2.0 * sv.sum(axis=-1)) / xa.shape[1]
    return np.sqrt(np.maximum(msd, 0.0))


def pairwise_rmsd(coords, chunk: int = 256) -> np.ndarray:
    """Optimal-superposition RMSD between all pairs of ``(N, M, 3)`` structures."""
    x = np.asarray(coords, dtype=float)
    x = x - x.mean(axis=1, keepdims=True)
    out = np.vstack([_rmsd_block(x[i:i + chunk], x) for i in range(0, len(x), chunk)])
    np.fill_diagonal(out, 0.0)
    return out


def medoid_index(coords, chunk: int = 256) -> int:
    """Structure with the smallest summed RMSD to all others."""
    x = np.asarray(coords, dtype=float)
    x = x - x.mean(axis=1, keepdims=True)
    sums = np.concatenate([_rmsd_block(x[i:i + chunk], x).sum(axis=1) for i in range(0, len(x), chunk)])
    return int(np.argmin(sums))


# ---------------------------------------------------------------------------
# fluctuation profiles


@dataclass(frozen=True)
class FluctuationProfile:
    per_atom_variance: np.ndarray  # mean over x, y, z of the positional variance
    superposed: bool

    def __len__(self) -> int:
        return len(self.per_atom_variance)


def fluctuation_profile(coords, superpose: bool) -> FluctuationProfile:
    """Per-atom variance (Angstrom^2) averaged over the three axes.

    With ``superpose`` every structure is first aligned onto the ensemble
    medoid; otherwise the coordinates are used as given (canonical frame).
    """
    x = np.asarray(coords, dtype=float)
    if x.ndim != 3 or len(x) < 2:
        raise ValueError("need an (N >= 2, M, 3) coordinate array")
    if superpose:
        ref = x[medoid_index(x)]
        x = np.stack([kabsch_superpose(ref, xi) for xi in x])
    var = np.var(x, axis=0).mean(axis=-1)
    return FluctuationProfile(var, bool(superpose))


def profile_mse(a: FluctuationProfile, b: FluctuationProfile) -> float:
    if a.superposed != b.superposed:
        raise ValueError("cannot compare superposed and non-superposed profiles")
    if len(a) != len(b):
        raise ValueError(f"profiles have different lengths {len(a)} and {len(b)}")
    return float(np.mean((a.per_atom_variance - b.per_atom_variance) ** 2))


# ---------------------------------------------------------------------------
# histograms


@dataclass(frozen=True)
class Histogram2D:
    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.counts, dtype=float)
        return self.counts / total

    def same_binning(self, other: "Histogram2D") -> bool:
        return (
            self.counts.shape == other.counts.shape
            and np.array_equal(self.x_edges, other.x_edges)
            and np.array_equal(self.y_edges, other.y_edges)
        )

    def free_energy(self, kt: float = 1.0) -> np.ndarray:
        """``-kT log p`` per bin; empty bins are ``inf``."""
        p = self.probabilities
        with np.errstate(divide="ignore"):
            return -kt * np.log(p)


def histogram2d(x, y, x_edges, y_edges) -> Histogram2D:
    counts, _, _ = np.histogram2d(np.ravel(x), np.ravel(y), bins=[x_edges, y_edges])
    return Histogram2D(np.asarray(x_edges, float), np.asarray(y_edges, float), counts)


def phi_psi(kappa) -> tuple[np.ndarray, np.ndarray]:
    """Backbone phi (residues 1..L-1) and psi (residues 0..L-2) from kappa ``(..., D)``.

    phi_k is the torsion C(k-1)-N(k)-CA(k)-C(k), i.e. dihedral ``3k - 1``;
    psi_k is N(k)-CA(k)-C(k)-N(k+1), dihedral ``3k``.
    """
    kappa = np.asarray(kappa, dtype=float)
    dih, _ = KappaLayout((kappa.shape[-1] + 5) // 2).split(kappa)
    return _phi_psi(dih)


def _phi_psi(dih):
    return dih[..., 2::3], dih[..., 0::3]


def _interior_pairs(phi, psi):
    return np.ravel(phi[..., :-1]), np.ravel(psi[..., 1:])


def ramachandran_pairs(kappa) -> tuple[np.ndarray, np.ndarray]:
    """(phi, psi) of interior residues 1..L-2, flattened over conformations."""
    return _interior_pairs(*phi_psi(kappa))


def angle_edges(bins: int) -> np.ndarray:
    return np.linspace(-np.pi, np.pi, bins + 1)


def ramachandran(kappa, bins: int = 60) -> Histogram2D:
    return _rama_hist(*ramachandran_pairs(kappa), bins)


def ramachandran_from_positions(coords, bins: int = 60) -> Histogram2D:
    dih = dihedrals(np.asarray(coords, dtype=float))
    return _rama_hist(*_interior_pairs(*_phi_psi(dih)), bins)


def _rama_hist(phi, psi, bins):
    edges = angle_edges(bins)
    return histogram2d(wrap_angle(phi), wrap_angle(psi), edges, edges)


def dilate_periodic(mask: np.ndarray, width: int = 1) -> np.ndarray:
    """Grow a boolean bin mask by ``width`` bins in every direction, wrapping at the edges."""
    out = mask.copy()
    for dx in range(-width, width + 1):
        for dy in range(-width, width + 1):
            out |= np.roll(np.roll(mask, dx, axis=0), dy, axis=1)
    return out


def ramachandran_coverage(sample: Histogram2D, reference: Histogram2D, dilation: int = 1) -> float:
    """Fraction of ``sample`` mass inside the (dilated) support of ``reference``."""
    if not sample.same_binning(reference):
        raise ValueError("histograms use different binning")
    support = dilate_periodic(reference.counts > 0, dilation)
    return float(sample.probabilities[support].sum())


def js_distance(p: Histogram2D, q: Histogram2D) -> float:
    """Jensen-Shannon distance with base-2 logarithms, in [0, 1]."""
    if not p.same_binning(q):
        raise ValueError("histograms use different binning")
    return js_distance_arrays(p.probabilities, q.probabilities)


def js_distance_arrays(p, q) -> float:
    p = np.ravel(np.asarray(p, dtype=float))
    q = np.ravel(np.asarray(q, dtype=float))
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return np.sum(a[nz] * np.log2(a[nz] / m[nz]))

    div = 0.5 * (kl(p) + kl(q))
    return float(np.sqrt(min(max(div, 0.0), 1.0)))


# ---------------------------------------------------------------------------
# TICA


def angular_features(kappa) -> np.ndarray:
    """(sin, cos) pairs of every internal coordinate, ``(..., 2D)``."""
    kappa = np.asarray(kappa, dtype=float)
    return np.concatenate([np.sin(kappa), np.cos(kappa)], axis=-1)


@dataclass(frozen=True)
class TicaModel:
    lag: int
    mean: np.ndarray
    components: np.ndarray  # (n_features, dim), columns ordered by decreasing eigenvalue
    eigenvalues: np.ndarray
    featurization: str = "sincos"

    @property
    def dim(self) -> int:
        return self.components.shape[1]


def tica_fit(series, lag: int, dim: int = 2, eig_floor: float = 1e-10,
             featurization: str = "sincos") -> TicaModel:
    """Fit TICA on a time-ordered feature matrix ``(T, F)``.

    Covariances use the symmetrised (reversible) estimator over the
    instantaneous and lagged halves of the series.  ``C_0`` is whitened
    through its eigendecomposition, dropping directions with eigenvalue below
    ``eig_floor`` times the largest.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 2:
        raise ValueError("series must be (frames, features)")
    if lag < 1:
        raise ValueError("lag must be a positive number of frames")
    if len(x) <= lag + 2:
        raise ValueError(f"need more than lag + 2 = {lag + 2} frames, got {len(x)}")
    x0, xt = x[:-lag], x[lag:]
    mean = 0.5 * (x0.mean(axis=0) + xt.mean(axis=0))
    x0 = x0 - mean
    xt = xt - mean
    n = len(x0)
    c0 = (x0.T @ x0 + xt.T @ xt) / (2 * n)
    ct = (x0.T @ xt + xt.T @ x0) / (2 * n)

    s, v = linalg.eigh(c0)
    keep = s > eig_floor * s.max()
    whiten = v[:, keep] / np.sqrt(s[keep])
    rho, u = linalg.eigh(whiten.T @ ct @ whiten)
    order = np.argsort(rho)[::-1][:dim]
    comps = whiten @ u[:, order]
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(comps.shape[1])])
    comps = comps * np.where(signs == 0, 1.0, signs)
    return TicaModel(lag, mean, comps, np.minimum(rho[order], 1.0), featurization)


def tica_project(model: TicaModel, features) -> np.ndarray:
    return (np.asarray(features, dtype=float) - model.mean) @ model.components


def tica_histogram(projection, edges_x, edges_y) -> Histogram2D:
    projection = np.asarray(projection)
    return histogram2d(projection[:, 0], projection[:, 1], edges_x, edges_y)


def tica_edges(reference_projection, bins: int = 100, pad: float = 0.05):
    """Bin edges spanning the reference projection with a small margin."""
    ref = np.asarray(reference_projection)
    edges = []
    for k in range(2):
        lo, hi = ref[:, k].min(), ref[:, k].max()
        span = hi - lo if hi > lo else 1.0
        edges.append(np.linspace(lo - pad * span, hi + pad * span, bins + 1))
    return edges
