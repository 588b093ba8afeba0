"""Unit tests for the infinite-width training-limit particle simulator."""

import numpy as np
import pytest

from nfdlab.errors import ConfigError, FormatError, SpdViolation
from nfdlab.limit_sim import (
    LimitConfig,
    correction_gap,
    covariance_minima,
    dump_trajectories,
    limit_output,
    load_trajectories,
    simulate_training,
)
from nfdlab.data import sphere_inputs
from nfdlab.numerics import Rng


def make_samples(seed, count, d=4):
    x = sphere_inputs(Rng(seed, 1), count, d)
    return [(x[i], float((-1.0) ** i)) for i in range(count)]


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"steps_L": 0, "particles": 10},
            {"steps_L": 4, "particles": 0},
            {"steps_L": 4, "particles": 10, "k_max": -1},
            {"steps_L": 4, "particles": 10, "T": 0.0},
        ],
    )
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            LimitConfig(**kwargs)

    def test_tau(self):
        assert LimitConfig(steps_L=8, particles=10, T=2.0).tau == 0.25

    def test_needs_enough_samples(self):
        cfg = LimitConfig(steps_L=4, particles=100, k_max=2)
        with pytest.raises(ConfigError):
            simulate_training(cfg, make_samples(0, 2), Rng(0, 0))


class TestInitialization:
    def test_k0_output_near_zero(self):
        # g_T independent of the forward path at initialization
        cfg = LimitConfig(steps_L=8, particles=10**4, activation="relu")
        run = simulate_training(cfg, make_samples(1, 1), Rng(1, 0))
        assert abs(limit_output(run, 0)) <= 4.0 / np.sqrt(cfg.particles)

    def test_deterministic(self):
        cfg = LimitConfig(steps_L=4, particles=500, k_max=1, eta_c=0.5)
        a = simulate_training(cfg, make_samples(2, 2), Rng(2, 0))
        b = simulate_training(cfg, make_samples(2, 2), Rng(2, 0))
        np.testing.assert_array_equal(a.ensemble.h, b.ensemble.h)
        np.testing.assert_array_equal(a.ensemble.g, b.ensemble.g)
        np.testing.assert_array_equal(a.outputs, b.outputs)


class TestFrozenHistory:
    def test_later_label_does_not_touch_earlier_iterations(self):
        cfg = LimitConfig(
            steps_L=6, particles=400, k_max=2, eta_c=0.5, activation="tanh"
        )
        samples = make_samples(3, 3)
        altered = list(samples)
        altered[2] = (samples[2][0], samples[2][1] + 10.0)
        a = simulate_training(cfg, samples, Rng(3, 0))
        b = simulate_training(cfg, altered, Rng(3, 0))
        np.testing.assert_array_equal(a.ensemble.h[:, :2], b.ensemble.h[:, :2])
        np.testing.assert_array_equal(a.ensemble.g[:, :2], b.ensemble.g[:, :2])
        np.testing.assert_array_equal(a.outputs, b.outputs)
        assert a.loss_derivs[2] != b.loss_derivs[2]
        np.testing.assert_array_equal(a.ledger_fw, b.ledger_fw)


class TestNoiseConstruction:
    def test_ledger_covariance_consistency(self):
        # realized increments match Sigma * tau entrywise within 3 SE
        cfg = LimitConfig(
            steps_L=4, particles=10**5, k_max=2, eta_c=0.5,
            activation="identity",
        )
        run = simulate_training(cfg, make_samples(4, 3), Rng(4, 0))
        P, tau = cfg.particles, cfg.tau
        for t in range(cfg.steps_L):
            inc = run.ledger_fw[t]  # (3, P)
            emp = inc @ inc.T / P
            target = run.cov.sigma[2][t] * tau
            for i in range(3):
                for j in range(3):
                    se = np.sqrt(
                        (target[i, i] * target[j, j] + target[i, j] ** 2) / P
                    )
                    assert abs(emp[i, j] - target[i, j]) <= 3.0 * se + 1e-12

    def test_forward_backward_ledgers_uncorrelated(self):
        cfg = LimitConfig(steps_L=8, particles=10**4, activation="relu")
        run = simulate_training(cfg, make_samples(5, 1), Rng(5, 0))
        for t in range(cfg.steps_L):
            corr = float(
                np.corrcoef(run.ledger_fw[t, 0], run.ledger_bw[t, 0])[0, 1]
            )
            assert abs(corr) <= 4.0 / np.sqrt(cfg.particles)


class TestCorrectionGap:
    def test_zero_without_training(self):
        cfg = LimitConfig(steps_L=4, particles=300, k_max=0)
        gaps = correction_gap(cfg, make_samples(6, 1), Rng(6, 0), steps_list=(4, 8))
        assert all(g == 0.0 for _, g in gaps)

    def test_positive_with_training(self):
        cfg = LimitConfig(
            steps_L=8, particles=4000, k_max=2, eta_c=0.5, activation="identity"
        )
        gaps = dict(
            correction_gap(cfg, make_samples(7, 3), Rng(7, 0), steps_list=(8,))
        )
        assert gaps[8] > 0.0


class TestCovarianceMinima:
    def test_all_positive_for_distinct_inputs(self):
        cfg = LimitConfig(
            steps_L=4, particles=10**4, k_max=2, eta_c=0.5, activation="relu"
        )
        run = simulate_training(cfg, make_samples(8, 3), Rng(8, 0))
        rows = covariance_minima(run)
        assert len(rows) == cfg.steps_L * (cfg.k_max + 1)
        assert all(ls > 0 and lt > 0 for _, _, ls, lt in rows)

    def test_k0_sigma_is_second_moment(self):
        cfg = LimitConfig(steps_L=2, particles=2000, activation="relu")
        run = simulate_training(cfg, make_samples(9, 1), Rng(9, 0))
        t, k, lmin_s, _ = covariance_minima(run)[0]
        feat = cfg.phi(run.ensemble.h[0, 0])
        assert lmin_s == pytest.approx(float(np.mean(feat**2)))


class TestDegenerateInputs:
    def test_duplicate_input_jitter_path(self):
        cfg = LimitConfig(
            steps_L=4, particles=2000, k_max=1, eta_c=0.0, spd_floor=-1e-6
        )
        samples = make_samples(10, 2)
        samples[1] = samples[0]
        run = simulate_training(cfg, samples, Rng(10, 0))
        assert len(run.jitter_events) >= 1
        assert any(ev.where == "gram" for ev in run.jitter_events)

    def test_duplicate_input_spd_floor_violation(self):
        # with zero learning rate the repeated sample reproduces the first
        # trajectory exactly, so the cross-iteration covariance is singular
        cfg = LimitConfig(
            steps_L=4, particles=2000, k_max=1, eta_c=0.0, spd_floor=1e-6
        )
        samples = make_samples(10, 2)
        samples[1] = samples[0]
        with pytest.raises(SpdViolation) as exc:
            simulate_training(cfg, samples, Rng(10, 0))
        assert exc.value.t_idx is not None
        assert exc.value.iteration == 1

    def test_distinct_inputs_pass_positive_floor(self):
        cfg = LimitConfig(
            steps_L=4, particles=2000, k_max=1, eta_c=0.5, spd_floor=1e-6
        )
        run = simulate_training(cfg, make_samples(10, 2), Rng(10, 0))
        assert run.outputs.shape == (2,)


class TestLimitOutput:
    def test_index_bounds(self):
        cfg = LimitConfig(steps_L=2, particles=200)
        run = simulate_training(cfg, make_samples(11, 1), Rng(11, 0))
        with pytest.raises(IndexError):
            limit_output(run, 1)

    def test_matches_ensemble_mean(self):
        cfg = LimitConfig(steps_L=2, particles=500, k_max=1, eta_c=0.3)
        run = simulate_training(cfg, make_samples(12, 2), Rng(12, 0))
        k = 1
        expect = float(np.mean(run.ensemble.g[-1, k] * run.ensemble.h[-1, k]))
        assert limit_output(run, k) == pytest.approx(expect)


class TestTrajectoryDump:
    def test_round_trip(self, tmp_path):
        cfg = LimitConfig(steps_L=3, particles=50, k_max=1, eta_c=0.2)
        run = simulate_training(cfg, make_samples(13, 2), Rng(13, 0))
        path = tmp_path / "traj.bin"
        dump_trajectories(run, path)
        h, g = load_trajectories(path)
        np.testing.assert_array_equal(h, run.ensemble.h)
        np.testing.assert_array_equal(g, run.ensemble.g)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 24)
        with pytest.raises(FormatError):
            load_trajectories(path)

    def test_truncated_payload(self, tmp_path):
        cfg = LimitConfig(steps_L=3, particles=50, k_max=1, eta_c=0.2)
        run = simulate_training(cfg, make_samples(13, 2), Rng(13, 0))
        path = tmp_path / "trunc.bin"
        dump_trajectories(run, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(FormatError):
            load_trajectories(path)
