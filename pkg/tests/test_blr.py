import math

import numpy as np
import pytest
from scipy.stats import norm

from cbfmeta import features
from cbfmeta.blr import (
    Posterior,
    cbf_lower_bound,
    cbf_lower_bound_gradient,
    chi_square_quantile,
    confidence_radius,
    gaussian_nll,
    negative_log_likelihood,
    posterior_update,
    posterior_update_features,
    predict,
    predict_batch,
)
from cbfmeta.errors import DomainError, NearSingularNorm, NumericalBreakdown
from cbfmeta.features import NetParams, NetSpec


def constant_basis_net(vector):
    """A net whose output is the given constant vector for every input."""
    vector = np.asarray(vector, dtype=float)
    spec = NetSpec(hidden=(), output_dim=len(vector))
    return NetParams(spec, [np.zeros((len(vector), 2))], [vector])


def dense_posterior_oracle(Phi, y, prior_mean, prior_precision):
    """Normal equations with explicit inverses, the slow reference path."""
    precision = Phi.T @ Phi + prior_precision
    mean = np.linalg.inv(precision) @ (Phi.T @ y + prior_precision @ prior_mean)
    return mean, precision


class TestPosteriorUpdate:
    def test_empty_batch_returns_same_snapshot(self, rng):
        prior = Posterior.standard_prior(4, sigma=0.01)
        net = features.init_params(NetSpec(hidden=(4,), output_dim=4), rng)
        assert posterior_update(prior, np.empty((0, 2)), np.empty(0), net) is prior

    def test_matches_normal_equations_oracle(self, rng):
        for _ in range(50):
            d, n = 2, 5
            Phi = rng.normal(size=(n, d))
            y = rng.normal(size=n)
            prior = Posterior(rng.normal(size=d), np.eye(d) * rng.uniform(0.5, 2.0), 0.1)
            post = posterior_update_features(prior, Phi, y)
            mean, precision = dense_posterior_oracle(Phi, y, prior.mean, prior.precision)
            assert np.abs(post.mean - mean).max() < 1e-10
            assert np.abs(post.precision - precision).max() < 1e-10

    def test_sequential_equals_batched(self, rng):
        d = 6
        prior = Posterior.standard_prior(d, sigma=0.05)
        Phi = rng.normal(size=(40, d))
        y = rng.normal(size=40)
        batched = posterior_update_features(prior, Phi, y)
        seq = posterior_update_features(prior, Phi[:17], y[:17])
        seq = posterior_update_features(seq, Phi[17:], y[17:])
        assert np.abs(seq.mean - batched.mean).max() < 1e-9
        assert np.abs(seq.precision - batched.precision).max() < 1e-9

    def test_non_spd_precision_rejected(self):
        with pytest.raises(NumericalBreakdown):
            Posterior(np.zeros(2), -np.eye(2), 0.1)


class TestPredict:
    def test_zero_basis(self):
        net = constant_basis_net([0.0, 0.0, 0.0])
        post = Posterior.standard_prior(3, sigma=0.02)
        pred = predict(post, (0.5, 0.5), net)
        assert pred.mean == 0.0
        assert pred.variance == pytest.approx(0.02**2)

    def test_unit_basis_prior(self):
        net = constant_basis_net([1.0, 0.0])
        post = Posterior.standard_prior(2, sigma=0.1)
        pred = predict(post, (0.0, 0.0), net)
        assert pred.mean == 0.0
        assert pred.variance == pytest.approx(2 * 0.1**2)

    def test_variance_matches_dense_inverse(self, rng):
        d = 8
        net = features.init_params(NetSpec(hidden=(10,), output_dim=d), rng)
        prior = Posterior.standard_prior(d, sigma=0.05)
        post = posterior_update(prior, rng.normal(size=(30, 2)), rng.normal(size=30), net)
        zs = rng.normal(size=(100, 2))
        mu, var = predict_batch(post, zs, net)
        inv = np.linalg.inv(post.precision)
        for i, z in enumerate(zs):
            phi = features.forward(net, z)
            assert mu[i] == pytest.approx(float(post.mean @ phi), abs=1e-12)
            expected = 0.05**2 * (1.0 + float(phi @ inv @ phi))
            assert var[i] == pytest.approx(expected, abs=1e-10)

    def test_variance_never_below_noise(self, rng):
        d = 8
        net = features.init_params(NetSpec(hidden=(10,), output_dim=d), rng)
        prior = Posterior.standard_prior(d, sigma=0.01)
        post = posterior_update(prior, rng.normal(size=(50, 2)), rng.normal(size=50), net)
        _, var = predict_batch(post, rng.normal(size=(200, 2)), net)
        assert np.all(var >= 0.01**2 - 1e-15)


class TestChiSquareQuantile:
    def test_two_dof_closed_form(self):
        assert chi_square_quantile(2, 0.95) == pytest.approx(-2.0 * math.log(0.05), abs=1e-10)

    def test_one_dof_normal_quantile(self):
        assert chi_square_quantile(1, 0.5) == pytest.approx(norm.ppf(0.75) ** 2, abs=1e-10)

    def test_32_dof_against_series_oracle(self):
        # Independent evaluation of the regularized lower incomplete gamma via
        # its power series, then bisection.
        def gamma_cdf_series(a, x, terms=600):
            total, term = 0.0, 1.0 / a
            for k in range(1, terms):
                total += term
                term *= x / (a + k)
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

        def oracle(d, p):
            lo, hi = 0.0, 300.0
            for _ in range(90):
                mid = 0.5 * (lo + hi)
                if gamma_cdf_series(d / 2.0, mid / 2.0) < p:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)

        assert chi_square_quantile(32, 0.95) == pytest.approx(oracle(32, 0.95), abs=1e-8)
        assert chi_square_quantile(32, 0.95) == pytest.approx(46.194, abs=1e-3)

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            chi_square_quantile(0, 0.5)
        with pytest.raises(ValueError):
            chi_square_quantile(3, 1.0)


class TestConfidenceRadius:
    def test_prior_equals_posterior_closed_form(self):
        prior = Posterior.standard_prior(2, sigma=1.0)
        beta = confidence_radius(prior, prior, 0.05)
        expected = math.sqrt(2.0 * math.log(20.0)) + math.sqrt(chi_square_quantile(2, 0.95))
        assert beta == pytest.approx(expected, abs=1e-10)
        assert beta == pytest.approx(4.8955, abs=1e-4)

    def test_linear_in_sigma(self, rng):
        d = 5
        precision = np.eye(d) + 0.3 * np.ones((d, d))
        p1 = Posterior(np.zeros(d), precision, 0.01)
        p2 = Posterior(np.zeros(d), precision, 0.02)
        prior1 = Posterior.standard_prior(d, sigma=0.01)
        prior2 = Posterior.standard_prior(d, sigma=0.02)
        assert confidence_radius(p2, prior2, 0.1) == pytest.approx(
            2.0 * confidence_radius(p1, prior1, 0.1), rel=1e-12
        )

    def test_eigenvalue_term_monotone_under_data(self, rng):
        d = 6
        prior = Posterior.standard_prior(d, sigma=0.1)
        lam_max_prior = np.linalg.eigvalsh(prior.precision)[-1]
        prev_ratio = lam_max_prior / np.linalg.eigvalsh(prior.precision)[0]
        post = prior
        for _ in range(10):
            Phi = rng.normal(size=(5, d))
            post = posterior_update_features(post, Phi, rng.normal(size=5))
            ratio = lam_max_prior / np.linalg.eigvalsh(post.precision)[0]
            assert ratio <= prev_ratio + 1e-12
            prev_ratio = ratio

    def test_domain_error_reported(self):
        # Posterior determinant far below the prior's drives the radicand negative.
        prior = Posterior(np.zeros(8), 2.0 * np.eye(8), 0.1)
        shrunk = Posterior(np.zeros(8), 1.0 * np.eye(8), 0.1)
        with pytest.raises(DomainError):
            confidence_radius(shrunk, prior, 0.45)

    def test_delta_validation(self):
        prior = Posterior.standard_prior(2, sigma=1.0)
        with pytest.raises(ValueError):
            confidence_radius(prior, prior, 0.7)


class TestLowerBound:
    def test_zero_basis_gives_zero(self):
        net = constant_basis_net([0.0, 0.0])
        prior = Posterior.standard_prior(2, sigma=0.1)
        value = cbf_lower_bound(prior, prior, 0.05, np.array([1.0, 2.0, 0.0]), net)
        assert value == 0.0

    def test_beta_zero_collapses_to_mean(self, rng):
        d = 6
        net = features.init_params(NetSpec(hidden=(8,), output_dim=d), rng)
        prior = Posterior.standard_prior(d, sigma=0.01)
        post = posterior_update(prior, rng.normal(size=(20, 2)), rng.normal(size=20), net)
        x = np.array([0.3, -0.4, 0.2])
        value = cbf_lower_bound(post, prior, 0.05, x, net, beta=0.0)
        assert value == pytest.approx(predict(post, x[:2], net).mean, abs=1e-14)

    def test_never_exceeds_mean(self, rng):
        d = 6
        net = features.init_params(NetSpec(hidden=(8,), output_dim=d), rng)
        prior = Posterior.standard_prior(d, sigma=0.01)
        post = posterior_update(prior, rng.normal(size=(20, 2)), rng.normal(size=20), net)
        for _ in range(50):
            x = rng.normal(size=3)
            assert cbf_lower_bound(post, prior, 0.05, x, net) <= predict(
                post, x[:2], net
            ).mean + 1e-14


class TestLowerBoundGradient:
    def test_beta_zero_matches_mean_finite_differences(self, rng):
        d = 6
        net = features.init_params(NetSpec(hidden=(8,), output_dim=d), rng)
        prior = Posterior.standard_prior(d, sigma=0.01)
        post = posterior_update(prior, rng.normal(size=(20, 2)), rng.normal(size=20), net)
        x = np.array([0.2, 0.6, 0.0])
        grad = cbf_lower_bound_gradient(post, prior, 0.05, x, net, beta=0.0)
        h = 1e-6
        for i in range(2):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (
                cbf_lower_bound(post, prior, 0.05, xp, net, beta=0.0)
                - cbf_lower_bound(post, prior, 0.05, xm, net, beta=0.0)
            ) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_full_gradient_matches_finite_differences(self, rng):
        d = 6
        net = features.init_params(NetSpec(hidden=(8,), output_dim=d), rng)
        prior = Posterior.standard_prior(d, sigma=0.01)
        post = posterior_update(prior, rng.normal(size=(20, 2)), rng.normal(size=20), net)
        beta = confidence_radius(post, prior, 0.05)
        h = 1e-6
        for _ in range(100):
            x = rng.normal(size=3)
            grad = cbf_lower_bound_gradient(post, prior, 0.05, x, net, beta=beta)
            fd = np.zeros(2)
            for i in range(2):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd[i] = (
                    cbf_lower_bound(post, prior, 0.05, xp, net, beta=beta)
                    - cbf_lower_bound(post, prior, 0.05, xm, net, beta=beta)
                ) / (2 * h)
            rel = np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-9)
            assert rel < 1e-4

    def test_near_singular_norm_raises(self):
        net = constant_basis_net([0.0, 0.0])
        prior = Posterior.standard_prior(2, sigma=0.1)
        with pytest.raises(NearSingularNorm):
            cbf_lower_bound_gradient(prior, prior, 0.05, np.array([0.0, 0.0, 0.0]), net)

    def test_radial_field_gives_radial_gradient(self, tiny_checkpoint):
        from cbfmeta.environment import EnvironmentSpec, Obstacle
        from cbfmeta.lidar import LidarConfig, cast_scan
        from cbfmeta.meta import ring_poses
        from cbfmeta.surface import OffsetConfig, SurfaceDataset, build_offset_dataset

        checkpoint, _ = tiny_checkpoint
        env = EnvironmentSpec((Obstacle.ellipse((0.5, 0.5)),))
        rng = np.random.default_rng(0)
        parts = []
        for pose in ring_poses((0.0, 0.0), 1.5, 8):
            scan = cast_scan(env, pose, LidarConfig(range_noise_std=0.0), rng)
            parts.append(build_offset_dataset(scan, OffsetConfig()))
        ds = SurfaceDataset.concat(parts)
        prior = checkpoint.prior()
        post = posterior_update(prior, ds.points, ds.labels, checkpoint.net)
        beta = confidence_radius(post, prior, 0.05)
        for ang in np.linspace(0.0, 2.0 * math.pi, 24, endpoint=False):
            z = 0.55 * np.array([math.cos(ang), math.sin(ang)])
            grad = cbf_lower_bound_gradient(post, prior, 0.05, z, checkpoint.net, beta=beta)
            radial = z / np.linalg.norm(z)
            cos = float(grad @ radial) / np.linalg.norm(grad)
            assert math.degrees(math.acos(np.clip(cos, -1.0, 1.0))) < 10.0


class TestNegativeLogLikelihood:
    def test_perfect_prediction_floor(self):
        sigma = 0.02
        net = constant_basis_net([0.0, 0.0])
        prior = Posterior.standard_prior(2, sigma=sigma)
        value = negative_log_likelihood(prior, np.zeros((5, 2)), np.zeros(5), net)
        assert value == pytest.approx(0.5 * math.log(2 * math.pi * sigma**2), abs=1e-12)

    def test_monotone_in_residuals(self):
        mu = np.zeros(4)
        var = np.full(4, 0.01)
        assert gaussian_nll(mu, var, np.full(4, 0.2)) > gaussian_nll(mu, var, np.full(4, 0.1))

    def test_matches_density_oracle(self, rng):
        mu = rng.normal(size=30)
        var = rng.uniform(0.01, 2.0, size=30)
        y = rng.normal(size=30)
        oracle = -np.mean(norm.logpdf(y, loc=mu, scale=np.sqrt(var)))
        assert gaussian_nll(mu, var, y) == pytest.approx(oracle, abs=1e-12)

    def test_empty_testset_rejected(self, rng):
        net = constant_basis_net([1.0])
        prior = Posterior.standard_prior(1, sigma=0.1)
        with pytest.raises(ValueError):
            negative_log_likelihood(prior, np.empty((0, 2)), np.empty(0), net)


class TestPosteriorProperties:
    def test_variance_monotone_under_update(self, rng):
        d = 8
        net = features.init_params(NetSpec(hidden=(10,), output_dim=d), rng)
        for _ in range(100):
            prior = Posterior.standard_prior(d, sigma=0.05)
            post1 = posterior_update(prior, rng.normal(size=(10, 2)), rng.normal(size=10), net)
            post2 = posterior_update(post1, rng.normal(size=(10, 2)), rng.normal(size=10), net)
            z = rng.normal(size=(10, 2))
            _, v1 = predict_batch(post1, z, net)
            _, v2 = predict_batch(post2, z, net)
            assert np.all(v2 <= v1 + 1e-10)

    def test_posterior_consistency_noiseless_realizable(self, rng):
        # Identity feature map keeps the design well conditioned, so the
        # prior's pull vanishes at the 1e-6 level by n = 1000.
        spec = NetSpec(hidden=(), output_dim=2)
        net = NetParams(spec, [np.eye(2)], [np.zeros(2)])
        theta_true = np.array([0.8, -0.6])
        z = rng.uniform(-3, 3, size=(1000, 2))
        y = z @ theta_true
        prior = Posterior(np.zeros(2), 1e-3 * np.eye(2), sigma=1e-4)
        post = posterior_update(prior, z, y, net)
        assert np.abs(post.mean - theta_true).max() < 1e-6
        mu, _ = predict_batch(post, z[:100], net)
        assert np.abs(mu - y[:100]).max() < 5e-6

    def test_calibration_small(self, rng):
        # Reduced version of the coverage property; the acceptance suite runs
        # the full 500-task check.
        d, sigma, delta = 6, 0.1, 0.05
        net = features.init_params(NetSpec(hidden=(8,), output_dim=d), rng)
        prior = Posterior.standard_prior(d, sigma=sigma)
        probe = rng.uniform(-1, 1, size=(40, 2))
        probe_phi = features.forward(net, probe)
        hits = 0
        n_tasks = 150
        for _ in range(n_tasks):
            theta_star = rng.multivariate_normal(prior.mean, sigma**2 * np.eye(d))
            z = rng.uniform(-1, 1, size=(25, 2))
            y = features.forward(net, z) @ theta_star + sigma * rng.normal(size=25)
            post = posterior_update(prior, z, y, net)
            beta = confidence_radius(post, prior, delta)
            inv = np.linalg.inv(post.precision)
            err = np.abs(probe_phi @ (post.mean - theta_star))
            norms = np.sqrt(np.einsum("nd,dk,nk->n", probe_phi, inv, probe_phi))
            if np.all(err <= norms * beta):
                hits += 1
        assert hits / n_tasks >= 1.0 - 2 * delta - 0.05
