"""First-order response of atom positions to internal-coordinate changes.

Changing a coordinate rigidly rotates every atom past its pivot about a fixed
axis, so each derivative is a lever-arm cross product.  The Gram matrix of
atom ``m`` is ``G_m = J_m J_m^T`` where ``J_m`` is the ``(D, 3)`` slice of the
Jacobian; ``dk^T G_m dk`` approximates the squared displacement of the atom.
"""

from __future__ import annotations

import numpy as np

from .geometry import BackboneChain, GeometryError, KappaLayout, check_geometry

# Increasing the interior angle at atom j+1 rotates the downstream atoms
# clockwise about unit((x[j+1]-x[j]) x (x[j+2]-x[j+1])).  Pinned by
# tests/test_jacobian.py::test_bond_angle_sign_calibration.
BOND_ANGLE_SIGN = -1.0


class JacobianTable:
    """Dense ``(M, D, 3)`` array of d x_m / d kappa_i (Angstrom / rad)."""

    def __init__(self, values: np.ndarray, layout: KappaLayout):
        if values.shape != (layout.n_atoms, layout.size, 3):
            raise ValueError(f"expected shape {(layout.n_atoms, layout.size, 3)}, got {values.shape}")
        self.values = values
        self.layout = layout

    def __getitem__(self, item):
        return self.values[item]

    @property
    def n_atoms(self) -> int:
        return self.layout.n_atoms

    @property
    def n_coords(self) -> int:
        return self.layout.size


def rotation_axes(x: np.ndarray, layout: KappaLayout) -> tuple[np.ndarray, np.ndarray]:
    """Signed unit axes and anchor points for every coordinate."""
    bonds = np.diff(x, axis=0)
    norms = np.linalg.norm(bonds, axis=1)
    if np.any(norms <= 0):
        k = int(np.argmin(norms))
        raise GeometryError(f"zero-length bond between atoms {k} and {k + 1}", atom_index=k + 1)

    # dihedral i rotates about bond i+1 -> i+2, anchored at atom i+2
    dih_axis = bonds[1:-1] / norms[1:-1, None]
    dih_anchor = x[2:-1]

    normal = np.cross(bonds[:-1], bonds[1:])
    nn = np.linalg.norm(normal, axis=1)
    if np.any(nn <= 1e-12 * norms[:-1] * norms[1:]):
        j = int(np.argmin(nn / (norms[:-1] * norms[1:])))
        raise GeometryError(f"collinear atoms {j}, {j + 1}, {j + 2}", atom_index=j + 1)
    ang_axis = BOND_ANGLE_SIGN * normal / nn[:, None]
    ang_anchor = x[1:-1]

    return np.concatenate([dih_axis, ang_axis]), np.concatenate([dih_anchor, ang_anchor])


def compute_jacobian(chain: BackboneChain, layout: KappaLayout | None = None) -> JacobianTable:
    x = chain.positions
    layout = layout or KappaLayout(chain.n_atoms)
    if layout.n_atoms != chain.n_atoms:
        raise ValueError(f"layout is for {layout.n_atoms} atoms, chain has {chain.n_atoms}")
    check_geometry(x)
    axes, anchors = rotation_axes(x, layout)
    lever = x[:, None, :] - anchors[None, :, :]
    jac = np.cross(axes[None, :, :], lever)
    downstream = np.arange(chain.n_atoms)[:, None] > layout.pivots[None, :]
    jac[~downstream] = 0.0
    return JacobianTable(jac, layout)


class GramSet:
    """Per-atom Gram matrices, stored through their Jacobian factors.

    ``G_m`` is materialised only on request; everything the model needs
    (weighted sums, traces against a covariance) goes through the factor.
    """

    def __init__(self, jacobian: JacobianTable):
        self.jacobian = jacobian
        # (D, 3M): column 3m + k is component k of atom m's derivative
        self.factor = np.ascontiguousarray(
            jacobian.values.transpose(1, 0, 2).reshape(jacobian.n_coords, -1)
        )

    @property
    def n_atoms(self) -> int:
        return self.jacobian.n_atoms

    @property
    def n_coords(self) -> int:
        return self.jacobian.n_coords

    def __len__(self) -> int:
        return self.n_atoms

    def __getitem__(self, m: int) -> np.ndarray:
        jm = self.jacobian.values[m]
        return jm @ jm.T

    def __iter__(self):
        for m in range(self.n_atoms):
            yield self[m]

    def dense(self) -> np.ndarray:
        """All Gram matrices as an ``(M, D, D)`` array."""
        j = self.jacobian.values
        return np.einsum("mik,mjk->mij", j, j)

    def weighted_sum(self, weights) -> np.ndarray:
        """``sum_m w_m G_m``."""
        w = np.repeat(np.asarray(weights, dtype=float), 3)
        return (self.factor * w) @ self.factor.T

    def quadratic(self, dk) -> np.ndarray:
        """``dk^T G_m dk`` for every atom; ``dk`` may be batched ``(..., D)``."""
        disp = np.asarray(dk, dtype=float) @ self.factor
        disp = disp.reshape(disp.shape[:-1] + (self.n_atoms, 3))
        return np.sum(disp**2, axis=-1)

    def traces(self, cov) -> np.ndarray:
        """``tr(cov G_m)`` for every atom."""
        y = np.asarray(cov) @ self.factor
        return np.sum((self.factor * y).reshape(self.n_coords, self.n_atoms, 3), axis=(0, 2))


def compute_gram_set(jacobian: JacobianTable) -> GramSet:
    return GramSet(jacobian)
