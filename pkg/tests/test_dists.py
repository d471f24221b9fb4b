"""Probability primitives: closed-form values, Monte Carlo moments, quadrature."""

import math

import numpy as np
import pytest

from editsuggest import autodiff as ad
from editsuggest.dists import (
    CategoricalParams,
    DiagGaussianParams,
    GmmParams,
    categorical_kl,
    categorical_kl_from_logs,
    diag_gaussian_logpdf,
    gmm_logpdf,
    kl_diag_gaussians,
    reparam_sample,
)

LOG_2PI = math.log(2.0 * math.pi)


def standard_1d():
    return DiagGaussianParams(mean=np.zeros(1), log_var=np.zeros(1))


class TestDiagGaussianLogpdf:
    def test_standard_normal_at_zero(self):
        val = diag_gaussian_logpdf(np.zeros(1), standard_1d()).value
        assert val == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)  # -0.918939

    def test_standard_normal_at_one(self):
        val = diag_gaussian_logpdf(np.ones(1), standard_1d()).value
        assert val == pytest.approx(-0.5 * LOG_2PI - 0.5, abs=1e-12)  # -1.418939

    def test_additive_over_dimensions(self):
        p = DiagGaussianParams(mean=np.zeros(2), log_var=np.zeros(2))
        val = diag_gaussian_logpdf(np.zeros(2), p).value
        assert val == pytest.approx(-LOG_2PI, abs=1e-12)  # -1.837877

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            diag_gaussian_logpdf(np.zeros(3), standard_1d())

    def test_batched_rows_match_loop(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=(6, 3))
        p = DiagGaussianParams(mean=rng.normal(size=3), log_var=rng.normal(size=3))
        batched = diag_gaussian_logpdf(y, p).value
        single = [diag_gaussian_logpdf(row, p).value for row in y]
        np.testing.assert_allclose(batched, single, atol=1e-14)

    def test_log_var_clamped_at_construction(self):
        p = DiagGaussianParams(mean=np.zeros(2), log_var=np.array([-50.0, 50.0]))
        np.testing.assert_array_equal(p.log_var, [-10.0, 10.0])


class TestReparamSample:
    def test_zero_noise_returns_mean(self):
        p = DiagGaussianParams(mean=np.array([2.0, -1.0]), log_var=np.zeros(2))
        np.testing.assert_array_equal(reparam_sample(p, np.zeros(2)).value, [2.0, -1.0])

    def test_unit_scale(self):
        p = DiagGaussianParams(mean=np.zeros(1), log_var=np.zeros(1))
        assert reparam_sample(p, np.ones(1)).value == pytest.approx(1.0)

    def test_monte_carlo_moments(self):
        """1e5 draws from N(2, 4): sample mean within 0.02, variance within 0.1."""
        rng = np.random.default_rng(123)
        p = DiagGaussianParams(mean=np.full(1, 2.0), log_var=np.full(1, math.log(4.0)))
        noise = rng.standard_normal((100_000, 1))
        draws = reparam_sample(p, noise).value
        assert abs(draws.mean() - 2.0) < 0.02
        assert abs(draws.var() - 4.0) < 0.1

    def test_gradient_wrt_mean_is_identity(self):
        """d(sample)/d(mean) = 1, checked against finite differences."""

        def fn(leaves):
            p = DiagGaussianParams(mean=leaves["mu"], log_var=np.array([0.3]))
            return ad.reduce_sum(reparam_sample(p, np.array([0.7])))

        assert ad.grad_check(fn, {"mu": np.array([0.5])}) <= 1e-8


class TestKlDiagGaussians:
    def test_identical_is_zero(self):
        q = DiagGaussianParams(mean=np.array([0.3, -2.0]), log_var=np.array([0.1, 1.0]))
        p = DiagGaussianParams(mean=np.array([0.3, -2.0]), log_var=np.array([0.1, 1.0]))
        assert kl_diag_gaussians(q, p).value == pytest.approx(0.0, abs=1e-12)

    def test_unit_mean_shift(self):
        q = DiagGaussianParams(mean=np.zeros(1), log_var=np.zeros(1))
        p = DiagGaussianParams(mean=np.ones(1), log_var=np.zeros(1))
        assert kl_diag_gaussians(q, p).value == pytest.approx(0.5, abs=1e-12)

    def test_variance_e_case(self):
        """KL(N(0,e) || N(0,1)) = (e - 2) / 2 = 0.359141 within 1e-6."""
        q = DiagGaussianParams(mean=np.zeros(1), log_var=np.ones(1))
        p = standard_1d()
        assert kl_diag_gaussians(q, p).value == pytest.approx((math.e - 2.0) / 2.0, abs=1e-12)
        assert kl_diag_gaussians(q, p).value == pytest.approx(0.359141, abs=1e-6)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            q = DiagGaussianParams(mean=rng.normal(size=3), log_var=rng.uniform(-2, 2, 3))
            p = DiagGaussianParams(mean=rng.normal(size=3), log_var=rng.uniform(-2, 2, 3))
            assert kl_diag_gaussians(q, p).value >= -1e-12


class TestCategoricalKl:
    def test_uniform_vs_uniform(self):
        u = CategoricalParams(np.full(4, 0.25))
        assert categorical_kl(u, u).value == pytest.approx(0.0, abs=1e-15)

    def test_degenerate_vs_uniform(self):
        q = CategoricalParams(np.array([1.0, 0.0]))
        p = CategoricalParams(np.array([0.5, 0.5]))
        assert categorical_kl(q, p).value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_three_quarters_case(self):
        """Direct summation oracle: 0.75 ln 1.5 + 0.25 ln 0.5 = 0.130812 nats."""
        q_probs = np.array([0.75, 0.25])
        p_probs = np.array([0.5, 0.5])
        expected = float(np.sum(q_probs * np.log(q_probs / p_probs)))
        got = categorical_kl(CategoricalParams(q_probs), CategoricalParams(p_probs)).value
        assert got == pytest.approx(expected, abs=1e-14)
        assert got == pytest.approx(0.130812, abs=1e-6)

    def test_zero_prior_mass_rejected(self):
        q = CategoricalParams(np.array([0.5, 0.5]))
        p = CategoricalParams(np.array([1.0, 0.0]))
        with pytest.raises(ValueError, match="zero mass"):
            categorical_kl(q, p)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            categorical_kl(CategoricalParams(np.ones(2) / 2), CategoricalParams(np.ones(3) / 3))

    def test_log_domain_variant_agrees(self):
        rng = np.random.default_rng(3)
        q = rng.dirichlet(np.ones(5))
        p = rng.dirichlet(np.ones(5))
        direct = categorical_kl(CategoricalParams(q), CategoricalParams(p)).value
        via_logs = categorical_kl_from_logs(np.log(q), np.log(p)).value
        assert via_logs == pytest.approx(direct, abs=1e-12)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            q = CategoricalParams(rng.dirichlet(np.ones(4)))
            p = CategoricalParams(rng.dirichlet(np.ones(4)))
            assert categorical_kl(q, p).value >= -1e-12

    def test_invalid_simplex_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            CategoricalParams(np.array([0.5, 0.4]))
        with pytest.raises(ValueError, match="nonnegative"):
            CategoricalParams(np.array([1.5, -0.5]))


def two_component_mixture(mu0, mu1, log_var=0.0, w0=0.5):
    return GmmParams(
        weights=CategoricalParams(np.array([w0, 1.0 - w0])),
        components=[
            DiagGaussianParams(mean=np.array([mu0]), log_var=np.array([log_var])),
            DiagGaussianParams(mean=np.array([mu1]), log_var=np.array([log_var])),
        ],
    )


class TestGmmLogpdf:
    def test_single_component_reduces(self):
        comp = DiagGaussianParams(mean=np.array([0.4]), log_var=np.array([-0.2]))
        g = GmmParams(weights=CategoricalParams(np.ones(1)), components=[comp])
        z = np.array([0.1])
        assert gmm_logpdf(z, g).value == pytest.approx(
            diag_gaussian_logpdf(z, comp).value, abs=1e-14
        )

    def test_identical_components_collapse(self):
        g = two_component_mixture(0.3, 0.3, log_var=0.5)
        z = np.array([-0.2])
        single = diag_gaussian_logpdf(z, g.components[0]).value
        assert gmm_logpdf(z, g).value == pytest.approx(single, abs=1e-14)

    def test_far_separated_dominance(self):
        """At one mean of a far-apart pair, the mixture density is log w_k + that
        component's density, verified against direct summation."""
        g = two_component_mixture(-30.0, 30.0, log_var=-1.0, w0=0.3)
        z = np.array([30.0])
        direct = np.log(
            0.3 * np.exp(diag_gaussian_logpdf(z, g.components[0]).value)
            + 0.7 * np.exp(diag_gaussian_logpdf(z, g.components[1]).value)
        )
        approx = math.log(0.7) + diag_gaussian_logpdf(z, g.components[1]).value
        got = gmm_logpdf(z, g).value
        assert got == pytest.approx(direct, abs=1e-12)
        assert got == pytest.approx(approx, abs=1e-6)

    def test_density_integrates_to_one(self):
        """Trapezoid quadrature of exp(logpdf) over [-10, 10] with 1e4 points."""
        g = two_component_mixture(-1.5, 2.0, log_var=-0.5, w0=0.35)
        zs = np.linspace(-10.0, 10.0, 10_000)
        dens = np.array([np.exp(gmm_logpdf(np.array([z]), g).value) for z in zs])
        assert np.trapezoid(dens, zs) == pytest.approx(1.0, abs=1e-4)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(10)
        g = two_component_mixture(-1.0, 1.0, log_var=0.2, w0=0.6)
        z = rng.normal(size=(5, 1))
        batched = gmm_logpdf(z, g).value
        single = [gmm_logpdf(row, g).value for row in z]
        np.testing.assert_allclose(batched, single, atol=1e-14)

    def test_differentiable_through_everything(self):
        """Gradients flow into weights (via log), means, and log-variances."""

        def fn(leaves):
            w = ad.softmax(leaves["logits"])
            g = GmmParams(
                weights=CategoricalParams(w),
                components=[
                    DiagGaussianParams(
                        mean=ad.slice_(leaves["means"], k, k + 1, axis=0),
                        log_var=ad.slice_(leaves["lvs"], k, k + 1, axis=0),
                    )
                    for k in range(2)
                ],
            )
            return gmm_logpdf(np.array([0.3]), g)

        point = {
            "logits": np.array([0.2, -0.4]),
            "means": np.array([-0.5, 0.8]),
            "lvs": np.array([0.1, -0.3]),
        }
        assert ad.grad_check(fn, point) <= 1e-5


class TestDeterminism:
    def test_ops_are_pure(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=4)
        p = DiagGaussianParams(mean=rng.normal(size=4), log_var=rng.normal(size=4))
        a = diag_gaussian_logpdf(y, p).value
        b = diag_gaussian_logpdf(y, p).value
        assert a == b
