import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from bnnlv.data import DataSet, gen_synthetic
from bnnlv.diffcore import Architecture, mlp_forward_np
from bnnlv.exceptions import ConfigError, DivergenceError
from bnnlv.model import PriorConfig
from bnnlv.ncai import NcaiConfig
from bnnlv.train import (
    TrainConfig,
    adam_init,
    adam_step,
    eb_update_sw,
    eb_update_sz,
    restart_select,
    train,
    train_restarts,
)
from bnnlv.vi import MeanFieldPosterior


def _linear_data(n=40, slope=2.0, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    x = np.linspace(-1.0, 1.0, n).reshape(-1, 1)
    y = slope * x + rng.normal(0.0, noise, size=(n, 1))
    k = int(0.8 * n)
    return DataSet(x=x, y=y, train_idx=list(range(k)), val_idx=list(range(k, n)), test_idx=[])


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        w = np.array([1.0, -2.0])
        state = adam_init([w])
        (out,), _ = adam_step([w], [np.zeros(2)], state, 0.1)
        assert np.array_equal(out, w)

    def test_first_step_magnitude_is_learning_rate(self):
        w = np.array([0.0])
        state = adam_init([w])
        (out,), _ = adam_step([w], [np.array([7.3])], state, 0.05)
        assert abs(out[0] + 0.05) < 1e-6

    def test_trajectory_matches_reference(self):
        # independent textbook implementation, run side by side on f(w) = w^2
        lr, b1, b2, eps = 0.02, 0.9, 0.999, 1e-8
        w = np.array([1.0, -0.5])
        state = adam_init([w])
        w_ref = w.copy()
        m = np.zeros(2)
        v = np.zeros(2)
        for t in range(1, 101):
            g = 2.0 * w
            (w,), state = adam_step([w], [g], state, lr, b1, b2, eps)
            g_ref = 2.0 * w_ref
            m = b1 * m + (1 - b1) * g_ref
            v = b2 * v + (1 - b2) * g_ref * g_ref
            w_ref = w_ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            assert np.allclose(w, w_ref, atol=1e-10)

    def test_nonfinite_gradient_names_block(self):
        w = np.array([1.0])
        state = adam_init([w, w])
        with pytest.raises(DivergenceError) as err:
            adam_step([w, w], [np.zeros(1), np.array([np.nan])], state, 0.1)
        assert err.value.diagnostics["param_index"] == 1


class TestEbUpdates:
    def test_sz_worked_example(self):
        mu = np.zeros((4, 1))
        var = np.full((4, 1), 0.25)
        assert eb_update_sz(mu, var, alpha=3.0, beta=0.5) == pytest.approx(0.25)

    def test_sz_degenerate_limit(self):
        mu = np.zeros((3, 2))
        var = np.full((3, 2), 1e-300)
        assert eb_update_sz(mu, var, alpha=3.0, beta=0.5) == pytest.approx(1.0 / 6.0)

    def test_sw_worked_example(self):
        assert eb_update_sw(np.zeros(1), np.ones(1), alpha=3.0, beta=0.5) == pytest.approx(0.4)

    def test_sw_mean_scaling(self):
        mu = np.array([1.0, 2.0])
        var = np.array([0.1, 0.2])
        base = eb_update_sw(mu, var, 3.0, 0.5)
        scaled = eb_update_sw(3.0 * mu, var, 3.0, 0.5)
        h = 2
        denom = h + 2 * 3.0 - 2
        assert scaled - base == pytest.approx(8.0 * np.sum(mu * mu) / denom)

    def test_sz_matches_golden_section(self):
        # the closed form minimizes the latent-block KL as a function of s
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            k = int(rng.integers(1, 4))
            mu = rng.standard_normal((n, k))
            var = rng.uniform(0.01, 2.0, size=(n, k))
            alpha = float(rng.uniform(1.5, 5.0))
            beta = float(rng.uniform(0.1, 2.0))
            stat = np.sum(var + mu * mu) / n

            def kl_part(s, stat=stat, k=k, alpha=alpha, beta=beta):
                return (
                    0.5 * stat / s
                    + 0.5 * k * np.log(s)
                    + (alpha - 1.0) * np.log(s)
                    + beta / s
                )

            res = minimize_scalar(kl_part, bracket=(1e-3, 1.0, 1e3), method="golden")
            closed = eb_update_sz(mu, var, alpha, beta)
            assert abs(closed - res.x) / res.x <= 1e-6

    def test_sw_matches_golden_section(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            h = int(rng.integers(1, 20))
            mu = rng.standard_normal(h)
            var = rng.uniform(0.01, 2.0, size=h)
            alpha = float(rng.uniform(1.5, 5.0))
            beta = float(rng.uniform(0.1, 2.0))
            stat = np.sum(var + mu * mu)

            def kl_part(s, stat=stat, h=h, alpha=alpha, beta=beta):
                return (
                    0.5 * stat / s
                    + 0.5 * h * np.log(s)
                    + (alpha - 1.0) * np.log(s)
                    + beta / s
                )

            res = minimize_scalar(kl_part, bracket=(1e-3, 1.0, 1e3), method="golden")
            closed = eb_update_sw(mu, var, alpha, beta)
            assert abs(closed - res.x) / res.x <= 1e-6

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            eb_update_sz(np.zeros((2, 1)), np.zeros((2, 1)), alpha=0.5, beta=0.5)
        with pytest.raises(ValueError):
            eb_update_sw(np.zeros(1), -np.ones(1), alpha=3.0, beta=0.5)


class TestTrain:
    def test_linear_slope_recovery(self):
        data = _linear_data()
        arch = Architecture(input_dim_x=1, input_dim_z=0, hidden_layers=(), output_dim=1)
        cfg = TrainConfig(epochs=1500, restarts=1, learning_rate=0.02, n_mc=1)
        q, _ = train(data, arch, PriorConfig(sigma2_w=10.0, sigma2_eps=0.05), None, cfg, "BNN", seed=0)
        x = np.array([[0.0], [1.0]])
        pred = mlp_forward_np(arch, q.mu_w, x, None)
        slope = float(pred[1, 0] - pred[0, 0])
        assert 1.8 <= slope <= 2.2

    def test_bnn_has_no_latent_block(self):
        data = _linear_data(n=20)
        arch = Architecture(input_dim_x=1, input_dim_z=0, hidden_layers=(2,), output_dim=1)
        cfg = TrainConfig(epochs=5, restarts=1)
        q, _ = train(data, arch, PriorConfig(), None, cfg, "BNN", seed=0)
        assert q.mu_z.size == 0

    def test_method_architecture_mismatch(self):
        data = _linear_data(n=10)
        with_z = Architecture(input_dim_x=1, input_dim_z=1, hidden_layers=(2,), output_dim=1)
        without = Architecture(input_dim_x=1, input_dim_z=0, hidden_layers=(2,), output_dim=1)
        cfg = TrainConfig(epochs=1, restarts=1)
        with pytest.raises(ConfigError):
            train(data, with_z, PriorConfig(), None, cfg, "BNN", seed=0)
        with pytest.raises(ConfigError):
            train(data, without, PriorConfig(), None, cfg, "NCAI", seed=0)
        with pytest.raises(ConfigError, match="method"):
            train(data, with_z, PriorConfig(), None, cfg, "SGLD", seed=0)

    def test_penalty_free_ncai_equals_bbb(self):
        data = gen_synthetic("heavy_tail", seed=0, sizes=(20, 5, 0))
        arch = Architecture(input_dim_x=1, input_dim_z=1, hidden_layers=(5,), output_dim=1)
        zero = NcaiConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0)
        cfg = TrainConfig(epochs=30, restarts=1, init="warm", warm_epochs=50)
        _, h_ncai = train(data, arch, PriorConfig(sigma2_eps=0.1), zero, cfg, "NCAI", seed=4)
        _, h_bbb = train(data, arch, PriorConfig(sigma2_eps=0.1), zero, cfg, "BNNLV_BBB", seed=4)
        assert h_ncai.objective == h_bbb.objective

    def test_deterministic_given_seed(self):
        data = gen_synthetic("heavy_tail", seed=1, sizes=(15, 0, 0))
        arch = Architecture(input_dim_x=1, input_dim_z=1, hidden_layers=(3,), output_dim=1)
        cfg = TrainConfig(epochs=10, restarts=1, warm_epochs=20)
        qa, ha = train(data, arch, PriorConfig(), NcaiConfig(), cfg, "NCAI", seed=9)
        qb, hb = train(data, arch, PriorConfig(), NcaiConfig(), cfg, "NCAI", seed=9)
        assert np.array_equal(qa.mu_w, qb.mu_w)
        assert ha.objective == hb.objective

    def test_eb_updates_move_prior_variances(self):
        data = gen_synthetic("heavy_tail", seed=2, sizes=(15, 0, 0))
        arch = Architecture(input_dim_x=1, input_dim_z=1, hidden_layers=(3,), output_dim=1)
        priors = PriorConfig(sigma2_w=5.0, sigma2_z=5.0, eb_w=True, eb_z=True)
        cfg = TrainConfig(epochs=20, restarts=1, warm_epochs=20)
        _, h = train(data, arch, priors, NcaiConfig(), cfg, "NCAI", seed=0)
        assert h.s_z[-1] != 5.0
        assert h.s_w[-1] != 5.0
        assert min(h.s_z) > 0.0 and min(h.s_w) > 0.0

    def test_ground_truth_init_runs_variance_phase_first(self):
        data = gen_synthetic("heavy_tail", seed=3, sizes=(12, 0, 0), distill=True)
        cfg = TrainConfig(epochs=4, restarts=1, init="ground_truth")
        _, h = train(
            data, data.gt_arch, PriorConfig(sigma2_w=10.0), NcaiConfig(), cfg, "NCAI", seed=0
        )
        phases = list(dict.fromkeys(h.phase))
        assert phases == ["variance", "joint"]

    def test_divergence_carries_history(self):
        data = gen_synthetic("heavy_tail", seed=4, sizes=(10, 0, 0))
        arch = Architecture(input_dim_x=1, input_dim_z=1, hidden_layers=(3,), output_dim=1)
        priors = PriorConfig(sigma2_eps=1e-320)
        cfg = TrainConfig(epochs=5, restarts=1, warm_epochs=5)
        with pytest.raises(DivergenceError) as err:
            train(data, arch, priors, NcaiConfig(), cfg, "BNNLV_BBB", seed=0)
        assert err.value.history is not None


class TestRestarts:
    def _handmade_pair(self, data):
        arch = Architecture(input_dim_x=1, input_dim_z=0, hidden_layers=(), output_dim=1)
        good = MeanFieldPosterior(
            arch, np.array([2.0, 0.0]), np.full(2, -6.0), np.zeros((32, 0)), np.zeros((32, 0))
        )
        bad = MeanFieldPosterior(
            arch, np.array([-5.0, 3.0]), np.full(2, -6.0), np.zeros((32, 0)), np.zeros((32, 0))
        )
        return good, bad

    def test_selects_best_validation_likelihood(self):
        data = _linear_data(n=40)
        good, bad = self._handmade_pair(data)
        priors = PriorConfig(sigma2_eps=0.05)
        idx = restart_select([(bad, priors), (good, priors)], data, s_ll=200, seed=0)
        assert idx == 1

    def test_single_candidate_short_circuits(self):
        data = _linear_data(n=40)
        good, _ = self._handmade_pair(data)
        assert restart_select([(good, PriorConfig())], data) == 0

    def test_jobs_do_not_change_result(self):
        data = gen_synthetic("heavy_tail", seed=5, sizes=(12, 4, 0))
        arch = Architecture(input_dim_x=1, input_dim_z=1, hidden_layers=(3,), output_dim=1)
        cfg = TrainConfig(epochs=8, restarts=3, warm_epochs=10)
        q1, p1, h1, b1 = train_restarts(
            data, arch, PriorConfig(), NcaiConfig(), cfg, "NCAI", seed=0, jobs=1
        )
        q2, p2, h2, b2 = train_restarts(
            data, arch, PriorConfig(), NcaiConfig(), cfg, "NCAI", seed=0, jobs=2
        )
        assert b1 == b2
        assert np.array_equal(q1.mu_w, q2.mu_w)
        assert len(h1) == len(h2) == 3
        assert p1 == p2
