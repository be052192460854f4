"""Backbone geometry: Cartesian <-> internal coordinates.

Atoms are ordered N, CA, C per residue, so a chain of ``L`` residues has
``M = 3 * L`` atoms.  Internal coordinates index as follows:

* dihedral ``i`` is the torsion of atoms ``i, i+1, i+2, i+3`` (``M - 3`` values)
* bond angle ``j`` is the angle at atom ``j+1`` in ``j, j+1, j+2`` (``M - 2`` values)
* bond length ``k`` is the distance between atoms ``k`` and ``k+1`` (``M - 1`` values)

Torsions follow the IUPAC right-handed convention.  Reconstruction places the
first atom at the origin, the second on +x and the third in the xy-plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_RESIDUES = 3

# Engh & Huber backbone bond lengths (Angstrom), indexed by the atom a bond starts at.
IDEAL_BOND_LENGTHS = {"N-CA": 1.458, "CA-C": 1.525, "C-N": 1.329}

_DEGENERACY_EPS = 1e-10


class GeometryError(ValueError):
    """Raised for degenerate backbone geometry.

    ``atom_index`` points at the first offending atom.
    """

    def __init__(self, message: str, atom_index: int | None = None):
        super().__init__(message)
        self.atom_index = atom_index


def wrap_angle(x):
    """Wrap angles (radians) into ``[-pi, pi)``."""
    return np.mod(np.asarray(x, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class KappaLayout:
    """Flat index map for the angular degrees of freedom of an ``M``-atom chain.

    The flat vector holds the ``M - 3`` dihedrals first, then the ``M - 2``
    bond angles.
    """

    n_atoms: int

    def __post_init__(self):
        if self.n_atoms < 3 * MIN_RESIDUES or self.n_atoms % 3:
            raise ValueError(
                f"need a multiple of 3 atoms and at least {3 * MIN_RESIDUES}, got {self.n_atoms}"
            )

    @property
    def n_dihedrals(self) -> int:
        return self.n_atoms - 3

    @property
    def n_angles(self) -> int:
        return self.n_atoms - 2

    @property
    def size(self) -> int:
        return 2 * self.n_atoms - 5

    @property
    def dihedral_slice(self) -> slice:
        return slice(0, self.n_dihedrals)

    @property
    def angle_slice(self) -> slice:
        return slice(self.n_dihedrals, self.size)

    @property
    def is_dihedral(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.dihedral_slice] = True
        return mask

    def describe(self, i: int) -> tuple[str, int]:
        """Return ``(kind, chain_position)`` for flat index ``i``."""
        if not 0 <= i < self.size:
            raise IndexError(i)
        if i < self.n_dihedrals:
            return "dihedral", i
        return "angle", i - self.n_dihedrals

    def index(self, kind: str, position: int) -> int:
        if kind == "dihedral":
            if not 0 <= position < self.n_dihedrals:
                raise IndexError(position)
            return position
        if kind == "angle":
            if not 0 <= position < self.n_angles:
                raise IndexError(position)
            return self.n_dihedrals + position
        raise ValueError(f"unknown coordinate kind {kind!r}")

    @property
    def pivots(self) -> np.ndarray:
        """Last atom left in place when each coordinate changes.

        Atoms with index greater than the pivot move rigidly.
        """
        return np.concatenate(
            [np.arange(self.n_dihedrals) + 2, np.arange(self.n_angles) + 1]
        )

    def split(self, kappa):
        kappa = np.asarray(kappa, dtype=float)
        return kappa[..., self.dihedral_slice], kappa[..., self.angle_slice]

    def join(self, dihedrals, bond_angles):
        return np.concatenate([np.asarray(dihedrals, float), np.asarray(bond_angles, float)], axis=-1)

    def wrap(self, kappa):
        """Wrap dihedrals into [-pi, pi) and clamp bond angles into (0, pi)."""
        dih, ang = self.split(kappa)
        eps = 1e-6
        return self.join(wrap_angle(dih), np.clip(ang, eps, np.pi - eps))


@dataclass
class BackboneChain:
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must have shape (M, 3), got {self.positions.shape}")
        n = len(self.positions)
        if n % 3 or n < 3 * MIN_RESIDUES:
            raise ValueError(
                f"backbone needs 3 atoms per residue and at least {MIN_RESIDUES} residues, got {n} atoms"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")

    @property
    def n_atoms(self) -> int:
        return len(self.positions)

    @property
    def residue_count(self) -> int:
        return self.n_atoms // 3


@dataclass
class InternalCoords:
    dihedrals: np.ndarray
    bond_angles: np.ndarray
    bond_lengths: np.ndarray

    def __post_init__(self):
        self.dihedrals = np.asarray(self.dihedrals, dtype=float)
        self.bond_angles = np.asarray(self.bond_angles, dtype=float)
        self.bond_lengths = np.asarray(self.bond_lengths, dtype=float)
        m = len(self.bond_lengths) + 1
        if len(self.bond_angles) != m - 2 or len(self.dihedrals) != m - 3:
            raise ValueError(
                "inconsistent internal coordinate sizes: "
                f"{len(self.dihedrals)} dihedrals, {len(self.bond_angles)} angles, "
                f"{len(self.bond_lengths)} lengths"
            )
        if m % 3 or m < 3 * MIN_RESIDUES:
            raise ValueError(f"internal coordinates describe {m} atoms; need 3*L with L >= {MIN_RESIDUES}")
        if np.any(self.bond_lengths <= 0):
            raise ValueError("bond lengths must be positive")
        if np.any((self.bond_angles <= 0) | (self.bond_angles >= np.pi)):
            raise ValueError("bond angles must lie strictly inside (0, pi)")

    @property
    def n_atoms(self) -> int:
        return len(self.bond_lengths) + 1

    @property
    def layout(self) -> KappaLayout:
        return KappaLayout(self.n_atoms)

    @property
    def kappa(self) -> np.ndarray:
        return np.concatenate([self.dihedrals, self.bond_angles])

    @classmethod
    def from_kappa(cls, kappa, bond_lengths) -> "InternalCoords":
        layout = KappaLayout(len(bond_lengths) + 1)
        dih, ang = layout.split(kappa)
        return cls(dih, ang, bond_lengths)


def ideal_bond_lengths(n_atoms: int) -> np.ndarray:
    """Bond lengths N-CA, CA-C, C-N repeated along the chain."""
    cycle = [IDEAL_BOND_LENGTHS["N-CA"], IDEAL_BOND_LENGTHS["CA-C"], IDEAL_BOND_LENGTHS["C-N"]]
    return np.array([cycle[k % 3] for k in range(n_atoms - 1)])


# ---------------------------------------------------------------------------
# batched kernels; leading axes are conformations


def bond_lengths(x):
    return np.linalg.norm(np.diff(x, axis=-2), axis=-1)


def bond_angles(x):
    a = x[..., :-2, :] - x[..., 1:-1, :]
    b = x[..., 2:, :] - x[..., 1:-1, :]
    cos = np.sum(a * b, axis=-1)
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.arctan2(sin, cos)


def dihedrals(x):
    """IUPAC torsions of every run of four consecutive atoms, in [-pi, pi)."""
    b1 = x[..., 1:-2, :] - x[..., :-3, :]
    b2 = x[..., 2:-1, :] - x[..., 1:-2, :]
    b3 = x[..., 3:, :] - x[..., 2:-1, :]
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    y = np.linalg.norm(b2, axis=-1) * np.sum(b1 * n2, axis=-1)
    return wrap_angle(np.arctan2(y, np.sum(n1 * n2, axis=-1)))


def check_geometry(x) -> None:
    """Reject coincident consecutive atoms and collinear consecutive triples."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, x.shape[-2], 3)
    lengths = bond_lengths(flat)
    bad = np.nonzero(np.any(lengths <= _DEGENERACY_EPS, axis=0))[0]
    if len(bad):
        k = int(bad[0])
        raise GeometryError(f"atoms {k} and {k + 1} coincide", atom_index=k + 1)
    a = flat[:, :-2] - flat[:, 1:-1]
    b = flat[:, 2:] - flat[:, 1:-1]
    sin = np.linalg.norm(np.cross(a, b), axis=-1) / (lengths[:, :-1] * lengths[:, 1:])
    bad = np.nonzero(np.any(sin <= _DEGENERACY_EPS, axis=0))[0]
    if len(bad):
        j = int(bad[0])
        raise GeometryError(f"atoms {j}, {j + 1}, {j + 2} are collinear", atom_index=j + 1)


def cartesian_to_internal(chain: BackboneChain) -> InternalCoords:
    x = chain.positions
    check_geometry(x)
    return InternalCoords(dihedrals(x), bond_angles(x), bond_lengths(x))


def _place_next(a, b, c, length, angle, torsion):
    bc = c - b
    bc /= np.linalg.norm(bc, axis=-1, keepdims=True)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    m = np.cross(n, bc)
    sin_a = np.sin(angle)
    d = (
        -np.cos(angle)[..., None] * bc
        + (sin_a * np.cos(torsion))[..., None] * m
        + (sin_a * np.sin(torsion))[..., None] * n
    )
    return c + length[..., None] * d


def build_positions(dih, ang, lengths):
    """NeRF reconstruction in the canonical frame.

    All inputs may carry matching leading batch axes; ``lengths`` may also be
    a single ``(M - 1,)`` vector shared by the batch.
    """
    dih = np.asarray(dih, dtype=float)
    ang = np.asarray(ang, dtype=float)
    batch = ang.shape[:-1]
    lengths = np.broadcast_to(np.asarray(lengths, dtype=float), batch + (ang.shape[-1] + 1,))
    m = ang.shape[-1] + 2
    x = np.zeros(batch + (m, 3))
    x[..., 1, 0] = lengths[..., 0]
    x[..., 2, 0] = lengths[..., 0] - lengths[..., 1] * np.cos(ang[..., 0])
    x[..., 2, 1] = lengths[..., 1] * np.sin(ang[..., 0])
    for k in range(3, m):
        x[..., k, :] = _place_next(
            x[..., k - 3, :], x[..., k - 2, :], x[..., k - 1, :],
            lengths[..., k - 1], ang[..., k - 2], dih[..., k - 3],
        )
    return x


def internal_to_cartesian(ic: InternalCoords) -> BackboneChain:
    return BackboneChain(build_positions(ic.dihedrals, ic.bond_angles, ic.bond_lengths))


def kappa_from_positions(x):
    """Flat kappa vectors (dihedrals then angles) for positions of shape (..., M, 3)."""
    return np.concatenate([dihedrals(x), bond_angles(x)], axis=-1)


def positions_from_kappa(kappa, lengths):
    layout = KappaLayout(np.shape(lengths)[-1] + 1)
    dih, ang = layout.split(kappa)
    return build_positions(dih, ang, lengths)
