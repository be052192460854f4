import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backbone_maxent.constraint import (
    TARGET_FLOOR, VARIANCE_FLOOR, ConvergenceError, FitOptions, KappaPrior, PrecisionError,
    assemble_precision, build_prior, constraint_residuals, dual_objective, fit_lambda,
    fluctuation_sensitivity, induced_fluctuations, sample, sample_deviations,
)
from backbone_maxent.geometry import BackboneChain, KappaLayout, positions_from_kappa
from backbone_maxent.jacobian import GramSet, JacobianTable, compute_gram_set, compute_jacobian
from backbone_maxent.synthetic import folded_like_backbone, kappa_noise_scales

from oracles import summed_precision


def make_system(n_res, seed=7, dihedral_sd=0.1, angle_sd=0.03, a=1.0):
    rng = np.random.default_rng(seed)
    ic = folded_like_backbone(n_res, rng)
    x = positions_from_kappa(ic.kappa, ic.bond_lengths)
    layout = KappaLayout(len(x))
    grams = compute_gram_set(compute_jacobian(BackboneChain(x)))
    prior = KappaPrior(a, kappa_noise_scales(layout, dihedral_sd, angle_sd) ** 2)
    return ic, grams, prior


@pytest.fixture(scope="module")
def system10():
    return make_system(10)


@pytest.fixture(scope="module")
def system3():
    return make_system(3)


class TestPrior:
    def test_identical_conformations_hit_floor(self):
        prior = build_prior(np.zeros((5, 13)), a=50.0)
        np.testing.assert_array_equal(prior.data_variances, VARIANCE_FLOOR)
        np.testing.assert_array_equal(prior.diagonal, 50.0 / VARIANCE_FLOOR)

    def test_recovers_sampling_variance(self, rng):
        s = np.array([0.05, 0.2, 0.7])
        prior = build_prior(rng.normal(size=(100_000, 3)) * s, a=1.0)
        np.testing.assert_allclose(prior.data_variances, s**2, rtol=0.02)

    @pytest.mark.parametrize("a", [0.0, -1.0])
    def test_strength_must_be_positive(self, a):
        with pytest.raises(ValueError):
            KappaPrior(a, np.ones(3))

    def test_single_conformation_rejected(self):
        with pytest.raises(ValueError):
            build_prior(np.zeros((1, 13)), 1.0)


class TestAssembly:
    def test_zero_multipliers_give_prior(self, system10):
        _, grams, prior = system10
        model = assemble_precision(prior, np.zeros(grams.n_atoms), grams)
        np.testing.assert_array_equal(model.precision, prior.precision)

    def test_uniform_multipliers_match_direct_sum(self, system3):
        _, grams, prior = system3
        lam = np.full(grams.n_atoms, 0.37)
        model = assemble_precision(prior, lam, grams)
        oracle = summed_precision(prior.diagonal, lam, grams.jacobian.values)
        np.testing.assert_allclose(model.precision, oracle, rtol=1e-12, atol=1e-12)

    def test_random_multipliers_match_direct_sum(self, system3, rng):
        _, grams, prior = system3
        lam = rng.exponential(size=grams.n_atoms)
        oracle = summed_precision(prior.diagonal, lam, grams.jacobian.values)
        np.testing.assert_allclose(assemble_precision(prior, lam, grams).precision, oracle, rtol=1e-12, atol=1e-12)

    def test_homogeneity_in_the_weak_prior_limit(self, system10, rng):
        _, grams, prior = system10
        weak = KappaPrior(1e-12, prior.data_variances)
        lam = rng.uniform(0.5, 2.0, grams.n_atoms)
        cov1 = assemble_precision(weak, lam, grams).covariance()
        cov2 = assemble_precision(weak, 2 * lam, grams).covariance()
        np.testing.assert_allclose(cov2, 0.5 * cov1, rtol=1e-6, atol=1e-9 * np.abs(cov1).max())

    def test_negative_multiplier_rejected(self, system3):
        _, grams, prior = system3
        lam = np.zeros(grams.n_atoms)
        lam[3] = -1.0
        with pytest.raises(ValueError):
            assemble_precision(prior, lam, grams)

    def test_shape_mismatch(self, system3):
        _, grams, prior = system3
        with pytest.raises(ValueError):
            assemble_precision(prior, np.zeros(grams.n_atoms + 1), grams)

    def test_indefinite_precision_is_reported(self, system3):
        _, grams, prior = system3
        model = assemble_precision(prior, np.zeros(grams.n_atoms), grams)
        bad = model.precision.copy()
        bad[0, 0] = -1.0
        from backbone_maxent.constraint import _factorise
        with pytest.raises(PrecisionError, match="min eigenvalue"):
            _factorise(bad)


class TestFluctuations:
    def test_fixed_atoms_do_not_fluctuate(self, system10):
        _, grams, prior = system10
        c = induced_fluctuations(assemble_precision(prior, np.zeros(grams.n_atoms), grams), grams)
        assert c[0] == 0.0 and c[1] == 0.0
        assert np.all(c[2:] > 0)

    def test_diagonal_toy_closed_form(self):
        layout = KappaLayout(9)
        g1, g2, p1, p2, ell = 2.0, 0.5, 3.0, 7.0, 0.8
        values = np.zeros((9, layout.size, 3))
        values[8, 0] = [np.sqrt(g1), 0, 0]
        values[8, 1] = [0, np.sqrt(g2), 0]
        grams = GramSet(JacobianTable(values, layout))
        variances = np.ones(layout.size)
        variances[:2] = [1 / p1, 1 / p2]
        lam = np.zeros(9)
        lam[8] = ell
        c = induced_fluctuations(assemble_precision(KappaPrior(1.0, variances), lam, grams), grams)
        assert c[8] == pytest.approx(g1 / (p1 + 2 * ell * g1) + g2 / (p2 + 2 * ell * g2), rel=1e-13)
        np.testing.assert_array_equal(c[:8], 0.0)

    def test_matches_explicit_trace(self, system10, rng):
        _, grams, prior = system10
        model = assemble_precision(prior, rng.exponential(size=grams.n_atoms), grams)
        cov = np.linalg.inv(model.precision)
        oracle = [np.trace(cov @ g) for g in grams]
        np.testing.assert_allclose(induced_fluctuations(model, grams), oracle, rtol=1e-9, atol=1e-14)

    def test_monte_carlo_trace_identity(self, system10):
        _, grams, prior = system10
        model = assemble_precision(prior, np.full(grams.n_atoms, 0.5), grams)
        dk = sample_deviations(model.chol, 100_000, np.random.default_rng(11))
        mc = grams.quadratic(dk).mean(axis=0)
        c = induced_fluctuations(model, grams)
        moving = c > 0
        assert np.max(np.abs(mc[moving] / c[moving] - 1)) < 0.015

    def test_sensitivity_matches_finite_differences(self, system3, rng):
        _, grams, prior = system3
        lam = rng.uniform(0.5, 1.5, grams.n_atoms)
        sens = fluctuation_sensitivity(assemble_precision(prior, lam, grams), grams)
        h = 1e-6
        for k in (2, 5, 8):
            up, down = lam.copy(), lam.copy()
            up[k] += h
            down[k] -= h
            fd = (induced_fluctuations(assemble_precision(prior, up, grams), grams)
                  - induced_fluctuations(assemble_precision(prior, down, grams), grams)) / (2 * h)
            np.testing.assert_allclose(sens[:, k], fd, rtol=1e-5, atol=1e-12)
        assert np.all(sens <= 1e-15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_multipliers(self, system10, seed):
        _, grams, prior = system10
        r = np.random.default_rng(seed)
        lam = r.exponential(size=grams.n_atoms) * (r.random(grams.n_atoms) < 0.7)
        bumped = lam + r.exponential(size=grams.n_atoms) * (r.random(grams.n_atoms) < 0.5)
        c0 = induced_fluctuations(assemble_precision(prior, lam, grams), grams)
        c1 = induced_fluctuations(assemble_precision(prior, bumped, grams), grams)
        assert np.all(c1 <= c0 + 1e-12)


class TestResiduals:
    def test_complementary_slackness(self):
        res = constraint_residuals([1.1, 0.5, 1.2, 0.9], [1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0])
        np.testing.assert_allclose(res, [0.1, 0.5, 0.2, 0.0])

    def test_dual_gradient(self, system3, rng):
        _, grams, prior = system3
        lam = rng.uniform(0.5, 1.5, grams.n_atoms)
        targets = rng.uniform(0.01, 0.1, grams.n_atoms)
        model = assemble_precision(prior, lam, grams)
        grad = targets - induced_fluctuations(model, grams)
        h = 1e-6
        for k in (3, 7):
            up, down = lam.copy(), lam.copy()
            up[k] += h
            down[k] -= h
            fd = (dual_objective(assemble_precision(prior, up, grams), targets)
                  - dual_objective(assemble_precision(prior, down, grams), targets)) / (2 * h)
            assert fd == pytest.approx(grad[k], rel=1e-5, abs=1e-10)


class TestFit:
    def test_already_satisfied_returns_zero(self, system10):
        _, grams, prior = system10
        c0 = induced_fluctuations(assemble_precision(prior, np.zeros(grams.n_atoms), grams), grams)
        model = fit_lambda(prior, grams, np.maximum(c0, TARGET_FLOOR))
        np.testing.assert_array_equal(model.lam, 0.0)
        assert model.info["converged"] and model.info["iterations"] == 0

    @pytest.mark.parametrize("method", ["newton", "fixed_point"])
    def test_self_consistency(self, system10, method):
        _, grams, prior = system10
        lam_star = np.random.default_rng(5).uniform(0.5, 5.0, grams.n_atoms)
        targets = induced_fluctuations(assemble_precision(prior, lam_star, grams), grams)
        model = fit_lambda(prior, grams, targets, FitOptions(method=method))
        achieved = induced_fluctuations(model, grams)
        floored = np.maximum(targets, TARGET_FLOOR)
        assert model.info["converged"]
        assert model.info["iterations"] <= 500
        assert np.max(constraint_residuals(achieved, floored, model.lam)) <= 1e-2
        assert np.all(model.lam >= 0)

    def test_unreachable_targets_stay_unconstrained(self, system10):
        _, grams, prior = system10
        c0 = induced_fluctuations(assemble_precision(prior, np.zeros(grams.n_atoms), grams), grams)
        targets = np.maximum(0.5 * c0, TARGET_FLOOR)
        targets[10] = 10 * c0[10]
        with pytest.warns(UserWarning, match="fluctuate less than their target"):
            model = fit_lambda(prior, grams, targets)
        assert model.lam[10] == 0.0
        assert model.info["infeasible"][10]
        assert model.info["converged"]

    def test_iteration_budget_exhausted(self, system10):
        _, grams, prior = system10
        c0 = induced_fluctuations(assemble_precision(prior, np.zeros(grams.n_atoms), grams), grams)
        with pytest.raises(ConvergenceError) as err:
            fit_lambda(prior, grams, np.maximum(1e-3 * c0, TARGET_FLOOR), FitOptions(max_iters=1))
        assert err.value.model.info["converged"] is False
        assert err.value.residuals.max() > 1e-2

    def test_bad_options(self):
        with pytest.raises(ValueError):
            FitOptions(damping=0.0)
        with pytest.raises(ValueError):
            FitOptions(method="gradient")


class TestSampling:
    def test_deterministic_given_seed(self, system3):
        ic, grams, prior = system3
        model = assemble_precision(prior, np.ones(grams.n_atoms), grams)
        a = sample(model, ic.kappa, 10, seed=3)
        b = sample(model, ic.kappa, 10, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_covariance_recovery(self, system3):
        _, grams, prior = system3
        model = assemble_precision(prior, np.full(grams.n_atoms, 2.0), grams)
        n = 100_000
        dk = sample_deviations(model.chol, n, np.random.default_rng(21))
        cov = model.covariance()
        emp = dk.T @ dk / n
        sd = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
        assert np.all(np.abs(emp - cov) < 5 * sd)

    def test_constraints_only_shrink_variances(self, system10):
        _, grams, prior = system10
        model = assemble_precision(prior, np.full(grams.n_atoms, 3.0), grams)
        prior_var = prior.data_variances / prior.strength
        assert np.all(np.diag(model.covariance()) <= prior_var * (1 + 1e-12))
        n = 20_000
        dk = sample_deviations(model.chol, n, np.random.default_rng(2))
        assert np.all(dk.var(axis=0) <= prior_var * (1 + 5 * np.sqrt(2 / n)))

    def test_infinite_precision_collapses_to_mean(self, system3):
        ic, grams, prior = system3
        stiff = KappaPrior(1e12, prior.data_variances)
        model = assemble_precision(stiff, np.full(grams.n_atoms, 1e12), grams)
        draws = sample(model, ic.kappa, 200, seed=0)
        layout = KappaLayout(ic.n_atoms)
        dev = layout.wrap(draws) - layout.wrap(ic.kappa)
        dev[:, layout.dihedral_slice] = (dev[:, layout.dihedral_slice] + np.pi) % (2 * np.pi) - np.pi
        assert np.sqrt(np.mean(dev**2)) < 1e-6

    def test_samples_are_wrapped(self, system3):
        ic, grams, prior = system3
        wide = KappaPrior(1e-2, prior.data_variances)
        layout = KappaLayout(ic.n_atoms)
        draws = sample(assemble_precision(wide, np.zeros(grams.n_atoms), grams), ic.kappa, 500, seed=1)
        dih, ang = layout.split(draws)
        assert np.all((dih >= -np.pi) & (dih < np.pi))
        assert np.all((ang > 0) & (ang < np.pi))

    def test_log_prob_matches_scipy(self, system3):
        from scipy.stats import multivariate_normal

        _, grams, prior = system3
        model = assemble_precision(prior, np.full(grams.n_atoms, 0.5), grams)
        dk = sample_deviations(model.chol, 5, np.random.default_rng(0))
        ref = multivariate_normal(np.zeros(model.size), model.covariance()).logpdf(dk)
        np.testing.assert_allclose(model.log_prob(dk), ref, rtol=1e-9)
