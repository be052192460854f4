"""Synthetic backbones and ensembles for tests, demos and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .geometry import InternalCoords, KappaLayout, ideal_bond_lengths

# N-CA-C, CA-C-N, C-N-CA; indexed by (j + 1) % 3 for the angle at atom j + 1
IDEAL_BOND_ANGLES_DEG = {"N-CA-C": 111.2, "CA-C-N": 116.2, "C-N-CA": 121.7}


def _angle_cycle(n_angles: int) -> np.ndarray:
    by_centre = [
        IDEAL_BOND_ANGLES_DEG["C-N-CA"],  # centred on N
        IDEAL_BOND_ANGLES_DEG["N-CA-C"],  # centred on CA
        IDEAL_BOND_ANGLES_DEG["CA-C-N"],  # centred on C
    ]
    return np.deg2rad([by_centre[(j + 1) % 3] for j in range(n_angles)])


def backbone_from_phi_psi(phi, psi, omega=np.pi) -> InternalCoords:
    """Chain with ideal bond geometry and the given per-residue torsions.

    ``phi`` and ``psi`` have one entry per residue; ``phi[0]`` and ``psi[-1]``
    are not part of the chain and are ignored.
    """
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    n_res = len(phi)
    omega = np.broadcast_to(np.asarray(omega, dtype=float), (n_res,))
    m = 3 * n_res
    dih = np.empty(m - 3)
    for k in range(n_res - 1):
        dih[3 * k] = psi[k]
        dih[3 * k + 1] = omega[k]
        dih[3 * k + 2] = phi[k + 1]
    return InternalCoords(dih, _angle_cycle(m - 2), ideal_bond_lengths(m))


def helix(n_res: int, phi_deg: float = -57.0, psi_deg: float = -47.0) -> InternalCoords:
    return backbone_from_phi_psi(
        np.full(n_res, np.deg2rad(phi_deg)), np.full(n_res, np.deg2rad(psi_deg))
    )


def random_backbone(n_res: int, rng: np.random.Generator) -> InternalCoords:
    """Random but well-conditioned chain: torsions uniform, angles near ideal."""
    m = 3 * n_res
    dih = rng.uniform(-np.pi, np.pi, m - 3)
    ang = _angle_cycle(m - 2) + rng.normal(0.0, 0.05, m - 2)
    lengths = ideal_bond_lengths(m) * rng.uniform(0.95, 1.05, m - 1)
    return InternalCoords(dih, ang, lengths)


def folded_like_backbone(n_res: int, rng: np.random.Generator) -> InternalCoords:
    """Chain with alternating helix / strand / loop segments."""
    phi = np.empty(n_res)
    psi = np.empty(n_res)
    k = 0
    kinds = ["helix", "loop", "strand", "loop"]
    seg = 0
    while k < n_res:
        kind = kinds[seg % len(kinds)]
        length = {"helix": 8, "strand": 6, "loop": 3}[kind]
        for r in range(k, min(n_res, k + length)):
            if kind == "helix":
                phi[r], psi[r] = -57.0, -47.0
            elif kind == "strand":
                phi[r], psi[r] = -120.0, 130.0
            else:
                phi[r], psi[r] = rng.uniform(-150, -60), rng.uniform(-40, 160)
        k += length
        seg += 1
    phi = np.deg2rad(phi + rng.normal(0, 3.0, n_res))
    psi = np.deg2rad(psi + rng.normal(0, 3.0, n_res))
    return backbone_from_phi_psi(phi, psi)


def kappa_noise_scales(layout: KappaLayout, dihedral_sd: float = 0.08, angle_sd: float = 0.03) -> np.ndarray:
    s = np.empty(layout.size)
    s[layout.dihedral_slice] = dihedral_sd
    s[layout.angle_slice] = angle_sd
    return s


def two_state_series(n_frames: int, n_dims: int, rng: np.random.Generator,
                     switch_prob: float = 0.01, noise: float = 0.3):
    """Slow two-state jump process hidden among fast noise dimensions.

    Returns ``(series, direction)`` where ``direction`` is the unit vector
    that carries the jump coordinate after a random rotation.
    """
    state = np.empty(n_frames)
    s = 1.0
    flips = rng.random(n_frames) < switch_prob
    for t in range(n_frames):
        if flips[t]:
            s = -s
        state[t] = s
    x = rng.normal(0.0, 1.0, (n_frames, n_dims))
    x[:, 0] = state + noise * rng.normal(0.0, 1.0, n_frames)
    q, _ = np.linalg.qr(rng.normal(size=(n_dims, n_dims)))
    return x @ q.T, q[:, 0]


def jittered_ensemble(base: InternalCoords, n: int, rng: np.random.Generator,
                      dihedral_sd: float = 0.08, angle_sd: float = 0.03, residue_names=None):
    """Independent Gaussian jitter of every angular coordinate around ``base``."""
    from .ensemble import EnsembleDataset

    layout = base.layout
    kappa = base.kappa + rng.normal(size=(n, layout.size)) * kappa_noise_scales(layout, dihedral_sd, angle_sd)
    lengths = np.broadcast_to(base.bond_lengths, (n, layout.n_atoms - 1))
    return EnsembleDataset(layout.wrap(kappa), lengths, residue_names)
