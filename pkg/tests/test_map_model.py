"""
Unit tests for the MAP objective, its gradients and the latent count update.
"""

import math

import numpy as np
import pytest

from sinomap.errors import ShapeMismatchError, ValidationError
from sinomap.map_model import (
    LossBreakdown,
    PriorConfig,
    data_energy,
    data_grad_f,
    latent_objective,
    log_factorial,
    prior_energy,
    prior_grad,
    second_diff,
    second_diff_adjoint,
    unsup_loss_and_grad,
    update_G,
)
from sinomap.noise_sim import PhotonData, ScanConfig

ORACLE_SEED = 2024


def directional_fd(fn, f, v, h=1e-6):
    return (fn(f + h * v) - fn(f - h * v)) / (2 * h)


@pytest.fixture
def small_problem(rng):
    """Low-count sinogram where the latent update has real work to do."""
    scan = ScanConfig(i0=50.0, sigma=3.0)
    f = rng.uniform(0.5, 2.0, size=(6, 7))
    G = rng.poisson(50.0 * np.exp(-f))
    I = G + rng.normal(0.0, 3.0, size=f.shape)
    return f, PhotonData(I=I, G=G), scan


class TestLogFactorial:
    """Tests for ln(n!)."""

    def test_small_values_exact(self):
        assert log_factorial(0) == 0.0
        assert log_factorial(1) == 0.0
        assert log_factorial(5) == pytest.approx(math.log(120))

    def test_large_values(self):
        assert log_factorial(1000) == pytest.approx(math.lgamma(1001))

    def test_array(self):
        out = log_factorial(np.array([0, 3, 20, 21, 50]))
        expected = [math.lgamma(n + 1) for n in (0, 3, 20, 21, 50)]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            log_factorial(np.array([2, -1]))


class TestSecondDifference:
    """Tests for the D2 operator and its transpose."""

    def test_quadratic_has_constant_curvature(self):
        f = (np.arange(6.0) ** 2)[:, None] * np.ones((1, 4))
        d = second_diff(f, axis=0)
        np.testing.assert_allclose(d[1:-1], 2.0)
        assert not d[0].any() and not d[-1].any()

    @pytest.mark.parametrize("axis", [0, 1])
    def test_adjoint_identity(self, rng, axis):
        """Test <D2 f, g> == <f, D2^T g>."""
        f = rng.normal(size=(7, 9))
        g = rng.normal(size=(7, 9))
        lhs = np.sum(second_diff(f, axis) * g)
        rhs = np.sum(f * second_diff_adjoint(g, axis))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_too_short_axis(self):
        with pytest.raises(ValidationError):
            second_diff(np.zeros((2, 5)), axis=0)
        with pytest.raises(ValidationError):
            second_diff_adjoint(np.zeros((5, 2)), axis=1)


class TestPrior:
    """Tests for the sparsity prior on second differences."""

    def test_planar_field_costs_nothing(self):
        r, c = np.meshgrid(np.arange(5.0), np.arange(6.0), indexing="ij")
        f = 3.0 * r - 2.0 * c + 4.0
        cfg = PriorConfig(k=2.0, eps=0.01)
        assert prior_energy(f, cfg) == 0.0
        assert not prior_grad(f, cfg).any()

    def test_zero_weight_switches_off(self, rng):
        f = rng.normal(size=(5, 5))
        cfg = PriorConfig(k=0.0)
        assert prior_energy(f, cfg) == 0.0
        assert not prior_grad(f, cfg).any()

    def test_gradient_matches_finite_difference(self, rng):
        f = rng.normal(size=(6, 7))
        v = rng.normal(size=(6, 7))
        cfg = PriorConfig(k=0.7, eps=0.1)
        fd = directional_fd(lambda z: prior_energy(z, cfg), f, v)
        assert np.sum(prior_grad(f, cfg) * v) == pytest.approx(fd, rel=1e-5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PriorConfig(k=-1.0)
        with pytest.raises(ValueError):
            PriorConfig(eps=0.0)


class TestDataTerm:
    """Tests for the likelihood term."""

    def test_gradient_matches_finite_difference(self, small_problem, rng):
        f, pd, scan = small_problem
        v = rng.normal(size=f.shape)
        fd = directional_fd(lambda z: data_energy(z, pd, scan), f, v)
        assert np.sum(data_grad_f(f, pd, scan) * v) == pytest.approx(fd, rel=1e-6)

    def test_gradient_closed_form(self, small_problem):
        f, pd, scan = small_problem
        np.testing.assert_allclose(data_grad_f(f, pd, scan), pd.G - 50.0 * np.exp(-f))

    def test_combined_loss(self, small_problem):
        f, pd, scan = small_problem
        cfg = PriorConfig(k=0.5, eps=0.05)
        loss, grad = unsup_loss_and_grad(f, pd, scan, cfg)
        assert isinstance(loss, LossBreakdown)
        assert loss.data_term == pytest.approx(data_energy(f, pd, scan))
        assert loss.prior_term == pytest.approx(prior_energy(f, cfg))
        assert loss.total == pytest.approx(loss.data_term + loss.prior_term)
        np.testing.assert_allclose(grad, data_grad_f(f, pd, scan) + prior_grad(f, cfg))

    def test_single_ray_value(self):
        """Test every constant of the likelihood on one ray with I0 = 100, G = I = 50, f = ln 2."""
        scan = ScanConfig(i0=100.0, sigma=1.0)
        pd = PhotonData(I=np.array([[50.0]]), G=np.array([[50]]))
        expected = -50.0 * math.log(100.0) + 50.0 * math.log(2.0) + math.lgamma(51.0) + 50.0
        assert data_energy(np.array([[math.log(2.0)]]), pd, scan) == pytest.approx(expected, rel=1e-12)

    def test_matches_per_ray_loop(self, small_problem):
        f, pd, scan = small_problem
        expected = 0.0
        for j in np.ndindex(f.shape):
            g, i, fj = int(pd.G[j]), float(pd.I[j]), float(f[j])
            expected += ((i - g) ** 2 / (2.0 * scan.sigma ** 2) - g * math.log(scan.i0) + g * fj
                         + math.lgamma(g + 1.0) + scan.i0 * math.exp(-fj))
        assert data_energy(f, pd, scan) == pytest.approx(expected, rel=1e-12)

    def test_requires_electronic_noise(self, small_problem):
        f, pd, _ = small_problem
        with pytest.raises(ValidationError):
            data_energy(f, pd, ScanConfig(i0=50.0, sigma=0.0))

    def test_shape_mismatch(self, small_problem):
        f, pd, scan = small_problem
        with pytest.raises(ShapeMismatchError):
            data_grad_f(f[:, :-1], pd, scan)


class TestUpdateG:
    """Tests for the exact integer latent count update."""

    def brute_force_minimum(self, f, I, scan, upper=300):
        candidates = np.arange(upper + 1)[:, None]
        h = latent_objective(candidates, f.ravel()[None, :], I.ravel()[None, :], scan)
        return h.min(axis=0).reshape(f.shape)

    def test_matches_brute_force(self, small_problem):
        f, pd, scan = small_problem
        updated = update_G(f, pd, scan)
        achieved = latent_objective(updated.G, f, pd.I, scan)
        np.testing.assert_allclose(achieved, self.brute_force_minimum(f, pd.I, scan), rtol=1e-12, atol=1e-9)

    def test_independent_of_warm_start(self, small_problem):
        """Test far-off starts in both directions reach the same optimum."""
        f, pd, scan = small_problem
        high = PhotonData(I=pd.I, G=np.full(pd.shape, 250))
        low = PhotonData(I=pd.I, G=np.zeros(pd.shape, dtype=np.int64))
        h_high = latent_objective(update_G(f, high, scan).G, f, pd.I, scan)
        h_low = latent_objective(update_G(f, low, scan).G, f, pd.I, scan)
        np.testing.assert_allclose(h_high, h_low, rtol=1e-12, atol=1e-9)

    def test_never_increases_energy(self, small_problem):
        f, pd, scan = small_problem
        assert data_energy(f, update_G(f, pd, scan), scan) <= data_energy(f, pd, scan) + 1e-9

    def test_keeps_measurement(self, small_problem):
        f, pd, scan = small_problem
        updated = update_G(f, pd, scan)
        np.testing.assert_array_equal(updated.I, pd.I)
        assert updated.G.min() >= 0

    def test_walks_up_from_zero(self):
        scan = ScanConfig(i0=100.0, sigma=1.0)
        pd = PhotonData(I=np.array([[50.0]]), G=np.array([[0]]))
        assert update_G(np.array([[math.log(2.0)]]), pd, scan).G[0, 0] == 50

    def test_optimal_start_is_kept(self, small_problem):
        f, pd, scan = small_problem
        optimal = update_G(f, pd, scan)
        np.testing.assert_array_equal(update_G(f, optimal, scan).G, optimal.G)
        single = PhotonData(I=np.array([[50.0]]), G=np.array([[50]]))
        assert update_G(np.array([[math.log(2.0)]]), single, ScanConfig(i0=100.0, sigma=1.0)).G[0, 0] == 50

    def test_huge_sigma_matches_brute_force(self, small_problem):
        """Test the Poisson term alone decides G when electronic noise is negligible."""
        f, pd, _ = small_problem
        scan = ScanConfig(i0=50.0, sigma=1e6)
        achieved = latent_objective(update_G(f, pd, scan).G, f, pd.I, scan)
        np.testing.assert_allclose(achieved, self.brute_force_minimum(f, pd.I, scan), rtol=1e-12, atol=1e-9)

    def test_requires_electronic_noise(self, small_problem):
        f, pd, _ = small_problem
        with pytest.raises(ValidationError):
            update_G(f, pd, ScanConfig(i0=50.0))


class TestLatentOracle:
    """Exact integer minimization against exhaustive search on random single rays."""

    def test_thousand_random_instances(self):
        rng = np.random.default_rng(ORACLE_SEED)
        mismatches = 0
        for _ in range(1000):
            i0 = rng.uniform(1e3, 1e5)
            f = rng.uniform(0.0, 4.0)
            sigma = rng.uniform(1.0, 20.0)
            scan = ScanConfig(i0=i0, sigma=sigma)
            measured = rng.poisson(i0 * math.exp(-f)) + rng.normal(0.0, sigma)
            pd = PhotonData.from_measured(np.array([[measured]]))
            found = update_G(np.array([[f]]), pd, scan).G[0, 0]
            upper = int(math.ceil(max(measured, 0.0)) + 10 * sigma + 50)
            h = latent_objective(np.arange(upper + 1), np.full(upper + 1, f), np.full(upper + 1, measured), scan)
            best = int(np.argmin(h))
            if found != best and not math.isclose(h[found], h[best], rel_tol=1e-12, abs_tol=1e-6):
                mismatches += 1
        assert mismatches == 0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
