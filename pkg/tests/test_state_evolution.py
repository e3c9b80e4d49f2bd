import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistent_robustness import state_evolution as se
from consistent_robustness.losses import get_loss

PHI_2 = 0.977249868051820792800
FAST = se.SolverSettings(tol=1e-7)


class TestChannelPrimitives:
    def test_Z0_examples(self):
        np.testing.assert_allclose(se.Z0_channel(1.0, 2.0, 1.0), PHI_2, atol=1e-15)
        np.testing.assert_allclose(se.Z0_channel(-1.0, 2.0, 1.0), 1 - PHI_2, atol=1e-15)
        assert se.Z0_channel(1.0, 0.0, 3.0) == 0.5

    def test_Z0_probit_adds_variance(self):
        np.testing.assert_allclose(se.Z0_channel(1.0, 2.0, 0.5, noise_var=0.5), PHI_2, atol=1e-15)

    def test_Z0_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            se.Z0_channel(1.0, 0.0, 0.0)

    @given(st.sampled_from([1.0, -1.0]), st.floats(-5, 5), st.floats(0.05, 4), st.floats(0, 1))
    def test_dZ0_finite_difference(self, y, omega, V, noise):
        h = 1e-6
        fd = (se.Z0_channel(y, omega + h, V, noise) - se.Z0_channel(y, omega - h, V, noise)) / (2 * h)
        np.testing.assert_allclose(se.dZ0_channel(y, omega, V, noise), fd, atol=1e-7)

    def test_prox_shifted_loss_stationarity(self):
        loss = get_loss("logistic")
        y, omega, V, shift = -1.0, 0.4, 0.7, 0.3
        z = se.prox_shifted_loss("logistic", y, omega, V, shift)
        g = y * loss.derivative(y * z - shift) + (z - omega) / V
        assert abs(g) < 1e-12

    def test_prox_rejects_bad_step(self):
        with pytest.raises(ValueError):
            se.prox_shifted_loss("hinge", 1.0, 0.0, -1.0)


class TestPriorPrimitives:
    def test_prox_elastic_net_example(self):
        assert se.prox_elastic_net(2.0, 1.0, 0.5, 0.25) == pytest.approx(1.0, abs=1e-15)

    def test_prox_elastic_net_dead_zone(self):
        assert se.prox_elastic_net(0.3, 2.0, 0.5, 0.1) == 0.0

    @given(st.floats(-5, 5), st.floats(0.1, 5), st.floats(0, 2), st.floats(0, 2))
    def test_prox_elastic_net_grid(self, v, Lam, thr, lam):
        t = np.linspace(-60, 60, 240_001)
        obj = Lam / 2 * t**2 - v * t + lam * t**2 + thr * np.abs(t)
        np.testing.assert_allclose(se.prox_elastic_net(v, Lam, thr, lam), t[np.argmin(obj)], atol=1e-3)

    def test_blocks_cover_all_coordinates(self):
        for g in (0.25, 1.0):
            assert sum(b.fraction for b in se.prior_blocks(g)) == pytest.approx(1.0)
        assert se.prior_blocks(3.0)[0].fraction == 1.0

    def test_zero_m_hat_gives_zero_m(self):
        cfg = se.LatentModelConfig(1.0, 0.5)
        out = se.prior_update((0.0, 0.8, 1.2, 0.1), cfg)
        assert out["m"] == 0.0 and out["q_ov"] > 0

    @given(st.floats(0.1, 4), st.floats(0, 3), st.floats(0.01, 3), st.floats(0.1, 4), st.floats(0, 1), st.floats(1e-4, 1))
    @settings(max_examples=40)
    def test_overlap_decomposition(self, gamma, m_hat, q_hat, V_hat, P_hat, lam):
        cfg = se.LatentModelConfig(1.0, gamma, lam=lam)
        out = se.prior_update((m_hat, q_hat, V_hat, P_hat), cfg)
        np.testing.assert_allclose(out["q_ov"], gamma * out["q_ell"] + out["q_f"], rtol=1e-12, atol=1e-15)

    def test_branches_agree_at_gamma_one(self):
        cfg = se.LatentModelConfig(1.0, 1.0)
        hats = (0.7, 0.4, 1.1, 0.2)
        a = se.prior_update(hats, cfg, "small")
        b = se.prior_update(hats, cfg, "large")
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-14)

    def test_prior_against_sampling(self):
        # Each block draws theta = prox(s sqrt(q_hat) g + c m_hat nu) with nu, g standard normals.
        cfg = se.LatentModelConfig(1.0, 0.5, lam=0.05)
        hats = (0.8, 0.5, 1.3, 0.3)
        rng = np.random.default_rng(1)
        n = 1_000_000
        m = q = 0.0
        for blk in se.prior_blocks(cfg.gamma):
            s = math.sqrt(blk.scale2)
            nu, g = rng.standard_normal((2, n))
            v = s * math.sqrt(hats[1]) * g + blk.coupling * hats[0] * nu
            theta = se.prox_elastic_net(v, blk.scale2 * hats[2], hats[3] / 2, cfg.lam)
            m += blk.fraction * blk.coupling * np.mean(theta * nu)
            q += blk.fraction * blk.scale2 * np.mean(theta**2)
        out = se.prior_update(hats, cfg)
        np.testing.assert_allclose([out["m"], out["q_ov"]], [m, q], rtol=5e-3)


class TestChannelUpdate:
    @pytest.mark.parametrize("loss,r", [("logistic", 0.0), ("logistic", 0.5), ("hinge", 0.2)])
    def test_against_sampling(self, loss, r):
        cfg = se.LatentModelConfig(2.0, 0.5, loss=loss, r=r)
        state = se.OverlapState(m=0.8, q_ov=1.5, V=0.9, P=0.4)
        hats = se.channel_update(state, cfg)
        rng = np.random.default_rng(2)
        n = 2_000_000
        xi, eta = rng.standard_normal((2, n))
        corr = state.m / math.sqrt(state.q_ov)
        V0 = 1 - state.m**2 / state.q_ov
        y = np.sign(corr * xi + math.sqrt(V0) * eta)
        omega = math.sqrt(state.q_ov) * xi
        shift = r * state.P
        L = get_loss(loss)
        f = se.f_out(L, y, omega, state.V, shift)
        h = 1e-6
        df = (se.f_out(L, y, omega + h, state.V, shift) - se.f_out(L, y, omega - h, state.V, shift)) / (2 * h)
        a = cfg.samples_per_feature
        ref = [a * np.mean(f * eta) / math.sqrt(V0), a * np.mean(f * f), -a * np.mean(df), 2 * r * a * np.mean(y * f)]
        np.testing.assert_allclose(hats, ref, rtol=1e-2, atol=2e-3)

    def test_no_shift_no_sparsity(self):
        cfg = se.LatentModelConfig(1.0, 1.0)
        assert se.channel_update(se.OverlapState(), cfg)[3] == 0.0


class TestFixedPoint:
    def test_converges_with_invariants(self):
        cfg = se.LatentModelConfig(1.0, 0.5, lam=1e-2, r=0.1)
        st_ = se.solve_fixed_point(cfg, FAST)
        assert st_.converged and st_.residual < FAST.tol
        assert st_.q_ov > st_.m**2 > 0
        np.testing.assert_allclose(st_.q_ov, cfg.gamma * st_.q_ell + st_.q_f, rtol=1e-10)

    def test_fixed_point_is_stationary(self):
        cfg = se.LatentModelConfig(2.0, 2.0, lam=1e-2)
        st_ = se.solve_fixed_point(cfg, FAST)
        again = se.prior_update(se.channel_update(st_, cfg), cfg)
        np.testing.assert_allclose([again[k] for k in ("m", "q_ov", "V", "P")], st_.order(), atol=1e-6)

    def test_damping_independent(self):
        cfg = se.LatentModelConfig(1.0, 2.0, lam=1e-2)
        a = se.solve_fixed_point(cfg, replace(FAST, damping=0.3))
        b = se.solve_fixed_point(cfg, replace(FAST, damping=0.7))
        np.testing.assert_allclose(a.order(), b.order(), atol=1e-5)

    def test_branches_agree_at_gamma_one(self):
        cfg = se.LatentModelConfig(1.0, 1.0, lam=1e-2)
        a = se.solve_fixed_point(cfg, FAST, "small")
        b = se.solve_fixed_point(cfg, FAST, "large")
        np.testing.assert_allclose(a.order(), b.order(), atol=1e-10)

    def test_strong_regularization_shrinks(self):
        weak = se.solve_fixed_point(se.LatentModelConfig(1.0, 0.5, lam=1e-2), FAST)
        strong = se.solve_fixed_point(se.LatentModelConfig(1.0, 0.5, lam=1e3), FAST)
        assert strong.m < 1e-2 * weak.m
        assert strong.q_ov < 1e-4 * weak.q_ov

    def test_non_convergence_reports_state(self):
        cfg = se.LatentModelConfig(1.0, 0.5)
        with pytest.raises(se.NonConvergenceError) as info:
            se.solve_fixed_point(cfg, replace(FAST, max_iter=3))
        assert len(info.value.trace) == 3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            se.LatentModelConfig(1.0, 1.0, s_dual=2.0)
        with pytest.raises(ValueError):
            se.LatentModelConfig(1.0, 1.0, noise_var=0.1)
        with pytest.raises(ValueError):
            se.SolverSettings(damping=0.0)
        cfg = se.LatentModelConfig.from_psi(2.0, 4.0)
        np.testing.assert_allclose(cfg.alpha * cfg.gamma * cfg.psi, 1.0)


class TestLatentMetrics:
    def test_requires_converged(self):
        cfg = se.LatentModelConfig(1.0, 0.5)
        with pytest.raises(ValueError):
            se.latent_metrics(se.OverlapState(), cfg, [0.0])

    @pytest.mark.parametrize("gamma", [0.5, 2.0])
    def test_chain(self, gamma):
        cfg = se.LatentModelConfig(1.0, gamma, lam=1e-2, r=0.1, q_att=math.inf)
        rep = se.latent_metrics(se.solve_fixed_point(cfg, FAST), cfg, np.linspace(0, 2, 9))
        assert np.all(rep.bnd_cns <= rep.rob_cns + 1e-14) and np.all(rep.rob_cns <= rep.rob + 1e-14)
        assert rep.rob[0] == pytest.approx(rep.clean)

    def test_latent_form_within_block_sum(self):
        cfg = se.LatentModelConfig(1.0, 2.0, lam=1e-2, q_att=math.inf)
        st_ = se.solve_fixed_point(cfg, FAST)
        lat = se.latent_metrics(st_, cfg, [1.0]).rob_cns[0]
        blk = se.latent_metrics(st_, cfg, [1.0], form="block_sum").rob_cns[0]
        assert lat <= blk


TUNE_CFG = se.LatentModelConfig(2.0, 1.0, lam=1.0)


@pytest.fixture(scope="module")
def tuned():
    return se.tune_hyperparameters(TUNE_CFG, "clean", ("lam",), settings=FAST)


class TestTuning:
    CFG = TUNE_CFG

    def test_locally_optimal(self, tuned):
        for factor in (0.9, 1.1):
            cfg = replace(self.CFG, lam=tuned.lam * factor)
            val = se.latent_metrics(se.solve_fixed_point(cfg, FAST), cfg, [0.0]).clean
            assert tuned.value <= val + 1e-6

    def test_not_worse_than_untuned(self, tuned):
        base = se.latent_metrics(se.solve_fixed_point(self.CFG, FAST), self.CFG, [0.0]).clean
        assert tuned.value <= base
        assert all(v >= tuned.value for _, v, _ in tuned.trace)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            se.tune_hyperparameters(self.CFG, "bogus")
        with pytest.raises(ValueError):
            se.tune_hyperparameters(self.CFG, tunables=("alpha",))
