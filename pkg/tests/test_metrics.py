import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.distance import jensenshannon
from scipy.spatial.transform import Rotation

from backbone_maxent import metrics as mt
from backbone_maxent.geometry import positions_from_kappa
from backbone_maxent.synthetic import helix, jittered_ensemble, two_state_series

from oracles import aligned_rmsd, js_distance_direct, random_rigid_motion


def brute_force_rmsd(a, b, rng, n_grid=4000):
    """Best RMSD over a random rotation grid, polished by Nelder-Mead."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)

    def cost(rotvec):
        moved = Rotation.from_rotvec(rotvec).apply(b)
        return np.sqrt(np.mean(np.sum((moved - a) ** 2, axis=1)))

    grid = Rotation.random(n_grid, random_state=rng).as_rotvec()
    start = grid[np.argmin([cost(r) for r in grid])]
    return minimize(cost, start, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12}).fun


class TestKabsch:
    def test_exact_recovery(self, rng):
        ref = rng.normal(size=(20, 3))
        rot, shift = random_rigid_motion(rng)
        moved = mt.kabsch_superpose(ref, ref @ rot.T + shift)
        assert mt.rmsd(moved, ref) < 1e-10

    def test_identity(self, rng):
        ref = rng.normal(size=(10, 3))
        np.testing.assert_allclose(mt.kabsch_superpose(ref, ref), ref, atol=1e-12)
        c = ref - ref.mean(axis=0)
        np.testing.assert_allclose(mt.kabsch_rotation(c, c), np.eye(3), atol=1e-12)

    def test_never_reflects(self, rng):
        ref = rng.normal(size=(8, 3))
        mirrored = ref * np.array([1, 1, -1])
        rot = mt.kabsch_rotation(mirrored - mirrored.mean(0), ref - ref.mean(0))
        assert np.linalg.det(rot) == pytest.approx(1.0)

    def test_against_rotation_search(self):
        rng = np.random.default_rng(17)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        aligned = mt.rmsd(mt.kabsch_superpose(a, b), a)
        assert aligned <= mt.rmsd(a, b)
        assert aligned == pytest.approx(brute_force_rmsd(a, b, rng), abs=1e-3)

    def test_coincident_atoms_rejected(self):
        with pytest.raises(ValueError):
            mt.kabsch_superpose(np.ones((4, 3)), np.ones((4, 3)))

    def test_pairwise_matches_scipy(self, rng):
        x = rng.normal(size=(6, 12, 3))
        d = mt.pairwise_rmsd(x, chunk=4)
        for i in range(6):
            for j in range(6):
                assert d[i, j] == pytest.approx(aligned_rmsd(x[i], x[j]), abs=1e-9)
        np.testing.assert_allclose(d, d.T, atol=1e-12)

    def test_medoid(self, rng):
        centre = rng.normal(size=(10, 3))
        x = np.stack([centre] + [centre + rng.normal(0, s, (10, 3)) for s in (1.0, 2.0, 3.0)])
        assert mt.medoid_index(x) == 0


class TestProfiles:
    def test_identical_conformations(self, rng):
        x = np.repeat(rng.normal(size=(1, 9, 3)), 5, axis=0)
        for sup in (False, True):
            np.testing.assert_allclose(mt.fluctuation_profile(x, sup).per_atom_variance, 0.0, atol=1e-20)

    def test_isotropic_jitter(self, rng):
        sigma = 0.3
        base = rng.normal(size=(12, 3)) * 5
        x = base + rng.normal(0, sigma, size=(20_000, 12, 3))
        prof = mt.fluctuation_profile(x, superpose=False)
        np.testing.assert_allclose(prof.per_atom_variance, sigma**2, rtol=0.03)

    def test_superposition_removes_rigid_motion(self, rng):
        base = rng.normal(size=(12, 3)) * 5
        x = np.stack([base @ random_rigid_motion(rng)[0].T + rng.normal(0, 3, 3) for _ in range(10)])
        assert mt.fluctuation_profile(x, True).per_atom_variance.max() < 1e-20
        assert mt.fluctuation_profile(x, False).per_atom_variance.min() > 1.0

    def test_mse_cases(self, rng):
        a = mt.FluctuationProfile(rng.random(9), False)
        assert mt.profile_mse(a, a) == 0.0
        assert mt.profile_mse(a, mt.FluctuationProfile(a.per_atom_variance + 1, False)) == pytest.approx(1.0)
        b = mt.FluctuationProfile(rng.random(9), False)
        direct = sum((p - q) ** 2 for p, q in zip(a.per_atom_variance, b.per_atom_variance)) / 9
        assert mt.profile_mse(a, b) == pytest.approx(direct, rel=1e-14)

    def test_mode_mismatch(self):
        with pytest.raises(ValueError):
            mt.profile_mse(mt.FluctuationProfile(np.ones(3), True), mt.FluctuationProfile(np.ones(3), False))


class TestRamachandran:
    def test_counts_per_conformation(self):
        ic = helix(7)
        phi, psi = mt.phi_psi(ic.kappa)
        assert len(phi) == 6 and len(psi) == 6
        phi_i, psi_i = mt.ramachandran_pairs(ic.kappa)
        assert len(phi_i) == len(psi_i) == 5

    def test_helix_occupies_one_bin(self):
        ic = helix(12)
        hist = mt.ramachandran(ic.kappa)
        occupied = np.argwhere(hist.counts > 0)
        assert len(occupied) == 1
        i, j = occupied[0]
        centre = (0.5 * (hist.x_edges[i] + hist.x_edges[i + 1]), 0.5 * (hist.y_edges[j] + hist.y_edges[j + 1]))
        assert centre == pytest.approx((-1.05, -0.79), abs=0.1)
        assert hist.probabilities.sum() == pytest.approx(1.0)

    def test_positions_and_kappa_agree(self):
        ds = jittered_ensemble(helix(8), 30, np.random.default_rng(2), 0.3, 0.02)
        a = mt.ramachandran(ds.kappa, bins=36)
        b = mt.ramachandran_from_positions(ds.positions(), bins=36)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_coverage(self):
        ds = jittered_ensemble(helix(8), 50, np.random.default_rng(3), 0.1, 0.02)
        ref = mt.ramachandran(ds.kappa)
        assert mt.ramachandran_coverage(ref, ref) == pytest.approx(1.0)
        shifted = mt.ramachandran(ds.kappa + np.pi / 2)
        assert mt.ramachandran_coverage(shifted, ref) == 0.0

    def test_dilation_wraps(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[0, 5] = True
        grown = mt.dilate_periodic(mask, 1)
        assert grown[5, 0] and grown[1, 4] and grown.sum() == 9


class TestJensenShannon:
    def test_identical(self):
        assert mt.js_distance_arrays([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_disjoint(self):
        assert mt.js_distance_arrays([1, 0], [0, 1]) == pytest.approx(1.0)

    def test_two_bin_oracle(self):
        value = mt.js_distance_arrays([0.5, 0.5], [1.0, 0.0])
        assert value == pytest.approx(js_distance_direct([0.5, 0.5], [1.0, 0.0]), rel=1e-14)
        assert value == pytest.approx(0.5579230452841438, rel=1e-12)

    def test_matches_scipy(self, rng):
        p, q = rng.random(50), rng.random(50)
        assert mt.js_distance_arrays(p, q) == pytest.approx(jensenshannon(p, q, base=2), rel=1e-10)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_metric_properties(self, seed):
        r = np.random.default_rng(seed)
        p, q, s = (r.random(8) * (r.random(8) < 0.8) + 1e-3 for _ in range(3))
        d = mt.js_distance_arrays
        assert d(p, q) == pytest.approx(d(q, p), abs=1e-12)
        assert 0.0 <= d(p, q) <= 1.0
        assert d(p, s) <= d(p, q) + d(q, s) + 1e-12

    def test_binning_mismatch(self):
        e = mt.angle_edges(4)
        a = mt.Histogram2D(e, e, np.ones((4, 4)))
        b = mt.Histogram2D(mt.angle_edges(5), mt.angle_edges(5), np.ones((5, 5)))
        with pytest.raises(ValueError):
            mt.js_distance(a, b)


class TestTica:
    def test_noise_has_no_slow_modes(self, rng):
        n = 20_000
        model = mt.tica_fit(rng.normal(size=(n, 2)), lag=5)
        assert np.all(np.abs(model.eigenvalues) < 3 / np.sqrt(n))

    def test_noise_bound_grows_with_dimension(self, rng):
        # the top noise eigenvalue sits near the semicircle edge sqrt(2 d / N)
        n, d = 20_000, 6
        model = mt.tica_fit(rng.normal(size=(n, d)), lag=5)
        assert np.all(np.abs(model.eigenvalues) < 1.5 * np.sqrt(2 * d / n))

    def test_recovers_switching_coordinate(self, rng):
        series, direction = two_state_series(20_000, 10, rng)
        model = mt.tica_fit(series, lag=10)
        w = model.components[:, 0]
        assert abs(w @ direction) / np.linalg.norm(w) > 0.95
        assert model.eigenvalues[0] > 0.5

    def test_unit_whitened_norm(self, rng):
        series, _ = two_state_series(5_000, 6, rng)
        lag = 5
        model = mt.tica_fit(series, lag=lag)
        proj = mt.tica_project(model, series)
        second_moment = 0.5 * (np.mean(proj[:-lag] ** 2, axis=0) + np.mean(proj[lag:] ** 2, axis=0))
        np.testing.assert_allclose(second_moment, 1.0, rtol=1e-8)

    def test_angular_features(self):
        f = mt.angular_features(np.zeros((3, 4)))
        assert f.shape == (3, 8)
        np.testing.assert_array_equal(f[:, 4:], 1.0)

    def test_too_short_series(self, rng):
        with pytest.raises(ValueError):
            mt.tica_fit(rng.normal(size=(10, 3)), lag=10)

    def test_histogram_edges_cover_reference(self, rng):
        proj = rng.normal(size=(100, 2))
        ex, ey = mt.tica_edges(proj, bins=20)
        hist = mt.tica_histogram(proj, ex, ey)
        assert hist.counts.sum() == 100


def test_profiles_of_reconstructed_chains_start_pinned():
    ds = jittered_ensemble(helix(6), 40, np.random.default_rng(4), 0.05, 0.02)
    x = positions_from_kappa(ds.kappa, ds.bond_lengths)
    prof = mt.fluctuation_profile(x, superpose=False).per_atom_variance
    assert prof[0] == 0.0 and prof[1] < 1e-20
    assert prof[-1] > prof[3]
