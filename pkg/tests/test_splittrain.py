import copy

import numpy as np
import pytest

from camc.mcnet import McConfig, MCNet
from camc.rng import stream
from camc.sscnet import SscConfig, SSCNet
from camc.splittrain import (
    LinkNoiseSpec,
    Optimizer,
    OptimizerConfig,
    StepResult,
    TrainReport,
    adapt,
    cce_loss,
    evaluate,
    monolithic_step,
    offline_step,
    one_hot,
    split_gradients,
    stretch_with_zeros,
    train_offline,
)


def tiny_nets(seed=0):
    ssc = SSCNet(SscConfig(L=16, N=4, conv1_kernels=4, conv2_kernels=4, dropout=0.0),
                 rng=stream(seed, "weights/ssc"))
    mc = MCNet(McConfig(N=4, M=3, lstm_units=4, n_heads=2, head_dim=4, dense2=8,
                        dropout=0.0), rng=stream(seed, "weights/mc"))
    return ssc, mc


def random_batch(rng, n, L=16, M=3):
    X = rng.normal(size=(n, L, 2)).astype(np.float32)
    y = rng.integers(0, M, size=n)
    return X, y


class TestCceLoss:
    def test_perfect_prediction_zero_loss(self):
        p = np.eye(3, dtype=np.float32)[[0, 2]]
        assert cce_loss(p, p) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_prediction_is_log_m(self):
        M = 11
        preds = np.full((5, M), 1.0 / M)
        labels = one_hot(np.arange(5) % M, M)
        assert cce_loss(preds, labels) == pytest.approx(np.log(M), rel=1e-9)

    def test_batch_mean_of_per_sample_losses(self):
        a = np.array([[0.9, 0.1], [0.4, 0.6]])
        lab = one_hot(np.array([0, 1]), 2)
        expected = (-np.log(0.9) - np.log(0.6)) / 2
        assert cce_loss(a, lab) == pytest.approx(expected, rel=1e-9)

    def test_clamped_log_never_infinite(self):
        preds = np.array([[1.0, 0.0]])
        labels = np.array([[0.0, 1.0]])
        assert np.isfinite(cce_loss(preds, labels))


class TestNoiseSpec:
    def test_infinite_snr_is_silent(self):
        spec = LinkNoiseSpec()
        x = np.ones((4, 8), dtype=np.float32)
        np.testing.assert_array_equal(spec.sample(x, spec.fwd_snr_db, None), 0.0)

    def test_noise_power_tracks_snr(self):
        spec = LinkNoiseSpec(fwd_snr_db=10.0)
        rng = np.random.default_rng(0)
        x = np.full(200_000, 2.0, dtype=np.float64)
        w = spec.sample(x, spec.fwd_snr_db, rng)
        # signal power 4, SNR 10 dB → noise variance 0.4
        assert np.var(w) == pytest.approx(0.4, rel=0.05)


class TestSplitStep:
    def test_noiseless_split_equals_monolithic(self):
        rng = np.random.default_rng(1)
        X, y = random_batch(rng, 6)
        onehot = one_hot(y, 3)
        cfg = OptimizerConfig(eta=0.05, batch=6, epochs=1)

        ssc_a, mc_a = tiny_nets()
        offline_step(ssc_a, mc_a, X, onehot, LinkNoiseSpec(),
                     Optimizer(cfg), Optimizer(cfg))
        ssc_b, mc_b = tiny_nets()
        monolithic_step(ssc_b, mc_b, X, onehot, Optimizer(cfg), Optimizer(cfg))

        for params_a, params_b in ((ssc_a.params, ssc_b.params),
                                   (mc_a.params, mc_b.params)):
            for name, t, _ in params_a.items():
                ref = params_b[name].data
                denom = np.maximum(np.abs(ref), 1e-8)
                assert np.max(np.abs(t.data - ref) / denom) < 1e-6, name

    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(2)
        X, y = random_batch(rng, 4)
        ssc, mc = tiny_nets()
        before = (ssc.params.state_arrays(), mc.params.state_arrays())
        cfg = OptimizerConfig(eta=1e-30, batch=4, epochs=1)
        cfg.eta = 0.0
        offline_step(ssc, mc, X, one_hot(y, 3), LinkNoiseSpec(fwd_snr_db=5, bwd_snr_db=5),
                     Optimizer(cfg), Optimizer(cfg),
                     stream(0, "fwd"), stream(0, "bwd"))
        # weights bit-exact; BN running statistics are state, not weights
        for name, _ in ssc.params.trainable():
            np.testing.assert_array_equal(before[0][name], ssc.params[name].data)
        for name, _ in mc.params.trainable():
            np.testing.assert_array_equal(before[1][name], mc.params[name].data)

    def test_loss_deterministic_given_noise_seed(self):
        rng = np.random.default_rng(3)
        X, y = random_batch(rng, 4)
        onehot = one_hot(y, 3)
        spec = LinkNoiseSpec(fwd_snr_db=8, bwd_snr_db=8)
        losses = []
        for _ in range(2):
            ssc, mc = tiny_nets()
            res = split_gradients(ssc, mc, X, onehot, spec,
                                  stream(7, "fwd"), stream(7, "bwd"))
            losses.append(res.loss)
        assert losses[0] == losses[1]

    def test_backward_noise_estimator_is_unbiased(self):
        """Averaged noisy device gradients converge on the exact gradient.

        With only backward-link noise the device gradient is the exact one
        plus a zero-mean term, so the Monte-Carlo mean over K draws must sit
        within a few standard errors of the noiseless gradient.
        """
        rng = np.random.default_rng(4)
        X, y = random_batch(rng, 4)
        onehot = one_hot(y, 3)
        ssc, mc = tiny_nets()

        exact = split_gradients(ssc, mc, X, onehot, LinkNoiseSpec())
        exact_grads = {n: t.grad.copy() for n, t in ssc.params.trainable()}

        spec = LinkNoiseSpec(bwd_snr_db=0.0)
        noise_rng = stream(11, "mc")
        K = 2000
        sums = {n: np.zeros_like(g, dtype=np.float64) for n, g in exact_grads.items()}
        sq = {n: np.zeros_like(g, dtype=np.float64) for n, g in exact_grads.items()}
        for _ in range(K):
            split_gradients(ssc, mc, X, onehot, spec, rng_bwd=noise_rng)
            for n, t in ssc.params.trainable():
                g = t.grad.astype(np.float64)
                sums[n] += g
                sq[n] += g * g
        for n, g_exact in exact_grads.items():
            mean = sums[n] / K
            var = sq[n] / K - mean ** 2
            sem = np.sqrt(np.maximum(var, 0) / K)
            # elements with zero spread must match exactly; others within 5σ
            z = np.abs(mean - g_exact) / np.maximum(sem, 1e-12)
            assert np.all((sem > 0) | (np.abs(mean - g_exact) < 1e-10)), n
            assert np.max(z[sem > 0]) < 5.0, n

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_aborts_on_nonfinite_loss(self):
        rng = np.random.default_rng(5)
        X, y = random_batch(rng, 4)
        ssc, mc = tiny_nets()
        mc.params["dense3.w"].data[:] = np.inf
        cfg = OptimizerConfig(eta=0.1, batch=4, epochs=1)
        before = ssc.params.state_arrays()
        res = offline_step(ssc, mc, X, one_hot(y, 3), LinkNoiseSpec(),
                           Optimizer(cfg), Optimizer(cfg))
        assert res.aborted
        for name, _ in ssc.params.trainable():
            np.testing.assert_array_equal(before[name], ssc.params[name].data)


class TestOptimizer:
    def test_sgd_matches_hand_update(self):
        from camc.numcore import ParamSet
        p = ParamSet()
        t = p.add("w", np.array([1.0, 2.0]))
        t.grad = np.array([0.5, -0.5], dtype=np.float32)
        Optimizer(OptimizerConfig(eta=0.1, batch=1, epochs=1)).step(p)
        np.testing.assert_allclose(t.data, [0.95, 2.05], rtol=1e-6)

    def test_adam_first_step_moves_by_eta(self):
        from camc.numcore import ParamSet
        p = ParamSet()
        t = p.add("w", np.array([1.0, -1.0]))
        t.grad = np.array([3.0, -0.01], dtype=np.float32)
        opt = Optimizer(OptimizerConfig(rule="adaptive-moment", eta=0.1,
                                        batch=1, epochs=1))
        opt.step(p)
        # bias-corrected first Adam step is ±eta regardless of magnitude
        np.testing.assert_allclose(t.data, [0.9, -0.9], atol=1e-4)

    def test_mask_freezes_pruned_entries(self):
        from camc.numcore import ParamSet
        p = ParamSet()
        t = p.add("w", np.array([1.0, 2.0]))
        t.grad = np.ones(2, dtype=np.float32)
        mask = {"w": np.array([1.0, 0.0], dtype=np.float32)}
        Optimizer(OptimizerConfig(eta=0.5, batch=1, epochs=1)).step(p, mask)
        np.testing.assert_allclose(t.data, [0.5, 2.0], rtol=1e-6)

    def test_bad_rule_rejected(self):
        with pytest.raises(ValueError, match="rule"):
            OptimizerConfig(rule="nesterov")


class TestTrainLoop:
    def _labelled_gaussian_task(self, rng, n_per_class, M=3, L=16):
        """Classes distinguishable by amplitude scale — learnable quickly."""
        X, y = [], []
        for m in range(M):
            amp = 0.5 + 1.5 * m
            block = rng.normal(size=(n_per_class, L, 2)).astype(np.float32)
            block[:, :, 0] = np.abs(block[:, :, 0]) * amp
            X.append(block)
            y.append(np.full(n_per_class, m))
        return np.concatenate(X), np.concatenate(y)

    def test_single_class_reaches_perfect_accuracy(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(32, 16, 2)).astype(np.float32)
        y = np.zeros(32, dtype=np.int64)
        ssc, mc = tiny_nets()
        report = train_offline(ssc, mc, (X[:24], y[:24]), (X[24:], y[24:]), 3,
                               LinkNoiseSpec(), OptimizerConfig(
                                   rule="adaptive-moment", eta=0.01, batch=8, epochs=3))
        val = [r for r in report.records if r["split"] == "val"]
        assert val[-1]["acc"] == 1.0

    def test_same_seed_gives_identical_loss_curve(self):
        rng = np.random.default_rng(7)
        X, y = self._labelled_gaussian_task(rng, 12)
        curves = []
        for _ in range(2):
            ssc, mc = tiny_nets()
            rep = train_offline(ssc, mc, (X, y), (X[:12], y[:12]), 3,
                                LinkNoiseSpec(fwd_snr_db=10, bwd_snr_db=10),
                                OptimizerConfig(eta=0.01, batch=12, epochs=2, seed=5))
            curves.append([r["loss"] for r in rep.records])
        assert curves[0] == curves[1]

    def test_confusion_rows_sum_to_class_counts(self):
        rng = np.random.default_rng(8)
        X, y = self._labelled_gaussian_task(rng, 10)
        ssc, mc = tiny_nets()
        _, _, confusion = evaluate(ssc, mc, X, y, 3, LinkNoiseSpec())
        np.testing.assert_array_equal(confusion.sum(axis=1),
                                      np.bincount(y, minlength=3))

    def test_report_files_written(self, tmp_path):
        rng = np.random.default_rng(9)
        X, y = self._labelled_gaussian_task(rng, 8)
        ssc, mc = tiny_nets()
        train_offline(ssc, mc, (X, y), (X[:9], y[:9]), 3, LinkNoiseSpec(),
                      OptimizerConfig(eta=0.01, batch=8, epochs=1),
                      out_dir=tmp_path, label_order=["a", "b", "c"])
        assert (tmp_path / "sscnet.camcw").exists()
        assert (tmp_path / "mcnet.camcw").exists()
        lines = (tmp_path / "train_report.log").read_text().splitlines()
        assert lines and lines[0].startswith("epoch=0 split=train")
        header = (tmp_path / "confusion.csv").read_text().splitlines()[0]
        assert header.split(",")[1:] == ["a", "b", "c"]


class TestAdapt:
    def test_empty_adaptation_set_is_identity(self):
        ssc, mc = tiny_nets()
        before = (ssc.params.state_arrays(), mc.params.state_arrays())
        adapt(ssc, mc, (np.empty((0, 16, 2), np.float32), np.empty(0, np.int64)),
              3, LinkNoiseSpec(), OptimizerConfig(eta=0.1, batch=4, epochs=1))
        for name, arr in before[0].items():
            np.testing.assert_array_equal(arr, ssc.params[name].data)
        for name, arr in before[1].items():
            np.testing.assert_array_equal(arr, mc.params[name].data)

    def test_adaptation_changes_parameters(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(8, 16, 2)).astype(np.float32)
        y = rng.integers(0, 3, 8)
        ssc, mc = tiny_nets()
        w_before = ssc.params["conv1.w"].data.copy()
        adapt(ssc, mc, (X, y), 3, LinkNoiseSpec(),
              OptimizerConfig(eta=0.1, batch=4, epochs=1), budget_epochs=2)
        assert not np.array_equal(w_before, ssc.params["conv1.w"].data)


class TestZeroInsertion:
    def test_values_preserved_in_order(self):
        rng = np.random.default_rng(11)
        s = (np.arange(8) + 1j * np.arange(8)).astype(np.complex64)
        out = stretch_with_zeros(s, 16, rng)
        assert len(out) == 16
        np.testing.assert_array_equal(out[out != 0], s[s != 0])
        assert np.count_nonzero(out) == np.count_nonzero(s)

    def test_rejects_shrinking(self):
        with pytest.raises(ValueError):
            stretch_with_zeros(np.ones(8, np.complex64), 4, np.random.default_rng(0))
