"""
Unit tests for the supervised, unsupervised and semi-supervised training loops.
"""

import logging

import numpy as np
import pytest

from sinomap.errors import ShapeMismatchError, ValidationError
from sinomap.map_model import PriorConfig
from sinomap.net import NetSpec, NetworkParams, forward, init_params
from sinomap.noise_sim import PhotonData, ScanConfig, sample_low_dose
from sinomap.trainer import (
    TrainConfig,
    batch_gradient,
    enhance,
    has_converged,
    semi_weight,
    timed_enhance,
    train_semi,
    train_supervised,
    train_unsupervised,
    unsup_objective,
)

SMALL_NET = NetSpec(n_layers=2, channels=3)


@pytest.fixture
def unlabeled(smooth_sinogram, noisy_scan):
    """Three noisy realizations of the same clean sinogram."""
    samples = []
    for seed in (1, 2, 3):
        pd, x = sample_low_dose(smooth_sinogram, noisy_scan, seed=seed)
        samples.append((x, pd))
    return samples


@pytest.fixture
def paired(smooth_sinogram, unlabeled):
    return [(x, smooth_sinogram) for x, _ in unlabeled[:2]]


@pytest.fixture
def base_config(noisy_scan):
    return TrainConfig(mode="unsupervised", epochs=3, batch_size=2, seed=11, net=SMALL_NET,
                       scan=noisy_scan, prior=PriorConfig(k=0.3, eps=0.01), learning_rate=1e-3)


def random_params(spec, seed, scale=0.2):
    rng = np.random.default_rng(seed)
    base = init_params(spec)
    return NetworkParams.from_arrays(spec, [scale * rng.normal(size=a.shape) for a in base.arrays()])


class TestTrainConfig:
    """Tests for training hyperparameters."""

    def test_lambda_alias(self):
        assert TrainConfig(**{"lambda": 0.5}).lam == 0.5
        assert TrainConfig(lam=0.25).lam == 0.25

    def test_rejects_negative_lambda(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=-0.1)

    def test_default_lambda_is_labeled_fraction(self):
        assert semi_weight(TrainConfig(), n_unsup=3, n_sup=1) == pytest.approx(0.25)
        assert semi_weight(TrainConfig(lam=2.0), n_unsup=3, n_sup=1) == 2.0


class TestBatchGradient:
    """Tests for the mixed-batch loss and gradient."""

    def test_total_combines_terms(self, unlabeled, paired, noisy_scan):
        params = random_params(SMALL_NET, seed=0)
        result = batch_gradient(params, unlabeled[:2], paired, 0.7, noisy_scan, PriorConfig())
        assert result.total == pytest.approx(result.data_term + result.prior_term + 0.7 * result.sup_term)

    def test_gradient_matches_finite_difference(self, unlabeled, paired, noisy_scan):
        """Test the linear-net gradient of the prior-free objective against central differences."""
        spec = NetSpec(n_layers=2, channels=2, activation="linear")
        params = random_params(spec, seed=1, scale=0.1)
        prior = PriorConfig(k=0.0)
        rng = np.random.default_rng(2)
        direction = [rng.normal(size=a.shape) for a in params.arrays()]
        h = 1e-6

        def total(sign):
            shifted = NetworkParams.from_arrays(
                spec, [a + sign * h * d for a, d in zip(params.arrays(), direction)])
            return batch_gradient(shifted, unlabeled[:1], paired[:1], 0.5, noisy_scan, prior).total

        fd = (total(1.0) - total(-1.0)) / (2 * h)
        grads = batch_gradient(params, unlabeled[:1], paired[:1], 0.5, noisy_scan, prior).grads
        analytic = sum(np.sum(g * d) for g, d in zip(grads.arrays(), direction))
        assert analytic == pytest.approx(fd, rel=1e-4)

    def test_large_lambda_follows_supervised_gradient(self, unlabeled, paired, noisy_scan):
        params = random_params(SMALL_NET, seed=3)
        mixed = batch_gradient(params, unlabeled[:2], paired, 1e6, noisy_scan, PriorConfig()).grads
        sup = batch_gradient(params, [], paired, 1.0, noisy_scan, PriorConfig()).grads
        a = np.concatenate([g.ravel() for g in mixed.arrays()])
        b = np.concatenate([g.ravel() for g in sup.arrays()])
        assert np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)) >= 0.999

    def test_sample_weight_ignores_batch_company(self, unlabeled, paired, noisy_scan):
        """Test a sample contributes the same loss and gradient alone or inside a larger batch."""
        params = random_params(SMALL_NET, seed=4)
        prior = PriorConfig()
        norms = dict(unsup_norm=1.5, sup_norm=2.0)
        together = batch_gradient(params, unlabeled[:1], paired, 1.0, noisy_scan, prior, **norms)
        parts = [batch_gradient(params, unlabeled[:1], [], 1.0, noisy_scan, prior, **norms)]
        parts += [batch_gradient(params, [], [pair], 1.0, noisy_scan, prior, **norms) for pair in paired]
        assert together.data_term == pytest.approx(parts[0].data_term, rel=1e-12)
        assert together.sup_term == pytest.approx(sum(p.sup_term for p in parts), rel=1e-12)
        assert parts[1].sup_term > 0 and parts[1].data_term == 0.0
        for i, g in enumerate(together.grads.arrays()):
            np.testing.assert_allclose(g, sum(p.grads.arrays()[i] for p in parts), rtol=1e-10, atol=1e-10)

    def test_unlabeled_needs_scan(self, unlabeled):
        with pytest.raises(ValidationError):
            batch_gradient(init_params(SMALL_NET), unlabeled[:1], [], 0.0, None, PriorConfig())


class TestUnsupervised:
    """Tests for the MAP-driven alternation."""

    def test_sweeps_never_increase_objective(self, unlabeled, base_config):
        state = train_unsupervised(unlabeled, base_config)
        assert len(state.sweeps) == 3
        for sweep in state.sweeps:
            for before, after in zip(sweep.per_sample_before, sweep.per_sample_after):
                assert after <= before + 1e-9 * abs(before)

    def test_bookkeeping(self, unlabeled, base_config):
        """Test step, epoch and sweep counters for 3 samples in batches of 2."""
        calls = []
        cfg = base_config.model_copy(update={"g_update_period": 2})
        state = train_unsupervised(unlabeled, cfg, on_epoch_end=lambda s: calls.append(s.epoch))
        assert [r.step for r in state.history] == list(range(6))
        assert [r.epoch for r in state.history] == [0, 0, 1, 1, 2, 2]
        assert [s.epoch for s in state.sweeps] == [0, 2]
        assert calls == [0, 1, 2]
        assert state.epoch == 3
        assert len(state.epoch_losses) == 3
        assert not state.stopped_early
        frame = state.history_frame()
        assert list(frame.columns) == ["epoch", "step", "mode", "data_term", "prior_term", "sup_term", "total"]
        assert set(frame["mode"]) == {"unsupervised"}
        assert (frame["sup_term"] == 0.0).all()

    def test_sweep_totals_match_recomputed_objective(self, unlabeled, base_config):
        """Test logged sweep totals equal data + prior energy recomputed from the params and G of that sweep."""
        snapshots = []
        state = train_unsupervised(unlabeled, base_config,
                                   on_epoch_end=lambda s: snapshots.append((s.params, list(s.G))))
        xs = [x for x, _ in unlabeled]
        params_before = [init_params(SMALL_NET, seed=11)] + [p for p, _ in snapshots[:-1]]
        g_before = [[PhotonData.from_measured(pd.I) for _, pd in unlabeled]] + [g for _, g in snapshots[:-1]]
        for e, sweep in enumerate(state.sweeps):
            expected_after = unsup_objective(params_before[e], xs, snapshots[e][1], base_config)
            expected_before = unsup_objective(params_before[e], xs, g_before[e], base_config)
            assert sweep.after == pytest.approx(expected_after, rel=1e-9)
            assert sweep.before == pytest.approx(expected_before, rel=1e-9)

    def test_same_seed_same_trajectory(self, unlabeled, base_config):
        a = train_unsupervised(unlabeled, base_config)
        b = train_unsupervised(unlabeled, base_config)
        assert [r.total for r in a.history] == [r.total for r in b.history]

    def test_requires_samples(self, base_config):
        with pytest.raises(ValidationError):
            train_unsupervised([], base_config)

    def test_requires_scan(self, unlabeled, base_config):
        with pytest.raises(ValidationError):
            train_unsupervised(unlabeled, base_config.model_copy(update={"scan": None}))

    def test_requires_electronic_noise(self, unlabeled, base_config):
        cfg = base_config.model_copy(update={"scan": ScanConfig(i0=1e4)})
        with pytest.raises(ValidationError):
            train_unsupervised(unlabeled, cfg)


class TestSemi:
    """Tests for the combined objective."""

    def test_zero_lambda_degenerates_to_unsupervised(self, unlabeled, base_config):
        """Test semi mode with lambda = 0 and no pairs reproduces the unsupervised run exactly."""
        cfg = base_config.model_copy(update={"lam": 0.0})
        unsup = train_unsupervised(unlabeled, cfg)
        semi = train_semi([], unlabeled, cfg)
        for a, b in zip(unsup.history, semi.history):
            assert (a.data_term, a.prior_term, a.sup_term, a.total) == (b.data_term, b.prior_term, b.sup_term, b.total)
        assert len(unsup.history) == len(semi.history)
        for p, q in zip(unsup.params.arrays(), semi.params.arrays()):
            np.testing.assert_array_equal(p, q)

    def test_zero_lambda_drops_pairs_with_warning(self, unlabeled, paired, base_config, caplog):
        cfg = base_config.model_copy(update={"lam": 0.0})
        with caplog.at_level(logging.WARNING):
            semi = train_semi(paired, unlabeled, cfg)
        assert "ignoring 2 supervised pairs" in caplog.text
        unsup = train_unsupervised(unlabeled, cfg)
        assert [r.total for r in semi.history] == [r.total for r in unsup.history]

    def test_mixed_batches_log_all_terms(self, unlabeled, paired, base_config):
        cfg = base_config.model_copy(update={"lam": 0.5, "epochs": 2})
        state = train_semi(paired, unlabeled, cfg)
        frame = state.history_frame()
        assert (frame["mode"] == "semi").all()
        assert len(frame) == 2 * 3  # five items in batches of two
        assert (frame["sup_term"] > 0).any()
        assert np.allclose(frame["total"], frame["data_term"] + frame["prior_term"] + 0.5 * frame["sup_term"])

    def test_epoch_loss_is_set_averaged_objective(self, unlabeled, paired, base_config):
        """Test the mean step total of an epoch equals mean MAP energy over C1 plus lambda times mean MSE over C2."""
        cfg = base_config.model_copy(update={"lam": 0.5, "epochs": 1, "learning_rate": 1e-12})
        state = train_semi(paired, unlabeled, cfg)
        rays = unlabeled[0][0].size
        unsup_mean = unsup_objective(init_params(SMALL_NET, seed=11), [x for x, _ in unlabeled], state.G, cfg)
        unsup_mean /= len(unlabeled) * rays
        sup_mean = np.mean([np.mean((x - y) ** 2) for x, y in paired])
        assert len(state.history) == 3  # batches of 2, 2 and 1
        assert state.epoch_losses[0] == pytest.approx(unsup_mean + 0.5 * sup_mean, rel=1e-6)

    def test_positive_lambda_needs_pairs(self, unlabeled, base_config):
        with pytest.raises(ValidationError):
            train_semi([], unlabeled, base_config.model_copy(update={"lam": 0.5}))

    def test_needs_unlabeled(self, paired, base_config):
        with pytest.raises(ValidationError):
            train_semi(paired, [], base_config.model_copy(update={"lam": 0.5}))


class TestSupervised:
    """Tests for MSE training."""

    def test_linear_least_squares_converges(self):
        """Test a single linear convolution learns a realizable linear target."""
        spec = NetSpec(n_layers=1, channels=1, residual=False, activation="linear")
        kernel = np.array([[0.0, 0.2, 0.0], [0.1, 0.5, -0.3], [0.0, 0.25, 0.0]])
        target = NetworkParams(spec=spec, weights=[kernel[None, None]], biases=[np.array([0.3])])
        rng = np.random.default_rng(8)
        xs = [rng.normal(size=(32, 32)) for _ in range(2)]
        pairs = [(x, forward(target, x)[0]) for x in xs]
        cfg = TrainConfig(mode="supervised", epochs=200, batch_size=2, net=spec, learning_rate=0.02,
                          early_stop_tol=0.0)
        state = train_supervised(pairs, cfg)
        initial = np.mean([np.mean(y ** 2) for _, y in pairs])
        final = np.mean([np.mean((enhance(state.params, x) - y) ** 2) for x, y in pairs])
        assert state.history[0].total == pytest.approx(initial)
        assert final <= 0.01 * initial
        assert len(state.history) == 200

    def test_early_stop_on_flat_loss(self, paired):
        cfg = TrainConfig(mode="supervised", epochs=20, batch_size=2, net=SMALL_NET,
                          learning_rate=1e-12, patience=2)
        state = train_supervised(paired, cfg)
        assert state.stopped_early
        assert state.epoch == 3
        assert len(state.epoch_losses) == 3

    def test_pair_shape_mismatch(self, smooth_sinogram, base_config):
        with pytest.raises(ShapeMismatchError):
            train_supervised([(smooth_sinogram, smooth_sinogram[:, :-1])], base_config)

    def test_requires_pairs(self, base_config):
        with pytest.raises(ValidationError):
            train_supervised([], base_config)


class TestEarlyStopping:
    """Tests for the convergence rule."""

    def test_oscillating_loss_keeps_training(self):
        """Test equal endpoints do not count as convergence while the loss still swings."""
        losses = [1.0, 1.1, 1.0, 1.1, 1.0, 1.1]
        assert not has_converged(losses, tol=1e-5, patience=2)
        assert not has_converged(losses, tol=1e-5, patience=4)

    def test_flat_window_stops(self):
        assert has_converged([2.0, 1.0, 1.0 + 1e-9, 1.0, 1.0], tol=1e-5, patience=3)

    def test_one_jump_inside_the_window(self):
        assert not has_converged([1.0, 1.0, 1.5, 1.5, 1.5], tol=1e-5, patience=3)
        assert has_converged([1.0, 1.0, 1.5, 1.5, 1.5], tol=1e-5, patience=2)

    def test_needs_a_full_window(self):
        assert not has_converged([1.0, 1.0], tol=1e-5, patience=2)
        assert has_converged([1.0, 1.0, 1.0], tol=1e-5, patience=2)

    def test_zero_tolerance_never_stops(self):
        assert not has_converged([1.0] * 10, tol=0.0, patience=3)


class TestEnhance:
    """Tests for inference."""

    def test_fresh_network_returns_input(self, smooth_sinogram):
        params = init_params(SMALL_NET, seed=4)
        np.testing.assert_array_equal(enhance(params, smooth_sinogram), smooth_sinogram)

    def test_timed_enhance_reports_seconds(self, smooth_sinogram, caplog):
        params = init_params(SMALL_NET)
        with caplog.at_level(logging.INFO):
            out, seconds = timed_enhance(params, smooth_sinogram, name="probe")
        assert out.shape == smooth_sinogram.shape
        assert seconds >= 0.0
        assert "Enhanced probe" in caplog.text


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
