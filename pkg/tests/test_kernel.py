"""Unit tests for initialization-time kernel machinery."""

import numpy as np
import pytest

from nfdlab.data import sphere_inputs
from nfdlab.errors import ConfigError, DomainError
from nfdlab.kernel import (
    GramMatrix,
    KernelConfig,
    dual_activation,
    export_gram_csv,
    kernel_ridge,
    nesting_gap,
    nngp_gram,
    read_gram_csv,
    spd_min_eig,
)
from nfdlab.limit_sim import LimitConfig, simulate_training
from nfdlab.numerics import Rng


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"T": -1.0, "steps": 8, "particles": 100},
            {"T": 1.0, "steps": 0, "particles": 100},
            {"T": 1.0, "steps": 8, "particles": 5},
        ],
    )
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            KernelConfig(**kwargs)


class TestNngpGram:
    def test_zero_depth_is_input_gram(self):
        x = sphere_inputs(Rng(0, 0), 5, 8)
        cfg = KernelConfig(T=0.0, steps=1, particles=100)
        gram = nngp_gram(cfg, x, Rng(0, 3))
        np.testing.assert_array_equal(gram.values, x @ x.T / 8)
        np.testing.assert_array_equal(gram.se, np.zeros((5, 5)))

    def test_identity_exponential_growth(self):
        # identity features: C_T = e^T * input Gram, exactly in the limit
        x = sphere_inputs(Rng(1, 0), 4, 16)
        cfg = KernelConfig(T=1.0, steps=64, particles=20000, activation="identity")
        gram = nngp_gram(cfg, x, Rng(1, 3))
        target = (1.0 + 1.0 / 64) ** 64 * (x @ x.T / 16)
        # batches share one realized covariance path, so the reported SE
        # understates the run-to-run spread; use an absolute tolerance
        assert np.abs(gram.values - target).max() <= 0.1

    def test_relu_orthogonal_small_t_offdiag(self):
        # first-order: off-diagonal grows like T * phihat(0) = T / (2 pi)
        d = 64
        x = np.zeros((2, d))
        x[0, : d // 2] = np.sqrt(2.0)
        x[1, d // 2 :] = np.sqrt(2.0)
        T = 0.05
        cfg = KernelConfig(T=T, steps=50, particles=200000, activation="relu")
        gram = nngp_gram(cfg, x, Rng(2, 3))
        target = T / (2.0 * np.pi)
        tol = 3.0 * gram.se[0, 1] + 10.0 * T**2
        assert abs(gram.values[0, 1] - target) <= tol

    def test_exact_symmetry(self):
        x = sphere_inputs(Rng(3, 0), 6, 8)
        cfg = KernelConfig(T=1.0, steps=16, particles=2000)
        gram = nngp_gram(cfg, x, Rng(3, 3))
        np.testing.assert_array_equal(gram.values, gram.values.T)

    def test_diagonal_grows(self):
        x = sphere_inputs(Rng(4, 0), 4, 8)
        cfg = KernelConfig(T=1.0, steps=32, particles=20000, activation="relu")
        gram = nngp_gram(cfg, x, Rng(4, 3))
        assert np.all(np.diag(gram.values) >= 1.0 - 3.0 * np.diag(gram.se))

    def test_spd_min_eig_positive_on_sphere_points(self):
        x = sphere_inputs(Rng(5, 0), 8, 32)
        cfg = KernelConfig(T=1.0, steps=32, particles=20000, activation="relu")
        gram = nngp_gram(cfg, x, Rng(5, 3))
        assert spd_min_eig(gram) > 0.0

    def test_bad_input_shape(self):
        cfg = KernelConfig(T=1.0, steps=4, particles=100)
        with pytest.raises(ConfigError):
            nngp_gram(cfg, np.ones(5), Rng(0, 0))


class TestNestingGap:
    def test_equal_times_exactly_zero(self):
        x = sphere_inputs(Rng(6, 0), 3, 8)
        cfg = KernelConfig(T=1.0, steps=16, particles=1000)
        assert nesting_gap(x, 0.5, 0.5, cfg, Rng(6, 3)) == 0.0

    def test_identity_analytic_gap(self):
        # single input: C_t is scalar (1+t'/s)^(s t/t'), strictly increasing
        x = np.ones((1, 4))  # row with norm sqrt(d), so the Gram entry is 1
        cfg = KernelConfig(T=1.0, steps=32, particles=50000, activation="identity")
        gap = nesting_gap(x, 0.5, 1.0, cfg, Rng(7, 3))
        base = 1.0 + 1.0 / 32
        expect = base**32 - base**16
        assert gap == pytest.approx(expect, rel=0.05)

    def test_off_grid_time(self):
        x = sphere_inputs(Rng(8, 0), 3, 8)
        cfg = KernelConfig(T=1.0, steps=10, particles=1000)
        with pytest.raises(ConfigError):
            nesting_gap(x, 0.333, 1.0, cfg, Rng(8, 3))

    def test_reversed_times(self):
        x = sphere_inputs(Rng(8, 0), 3, 8)
        cfg = KernelConfig(T=1.0, steps=10, particles=1000)
        with pytest.raises(DomainError):
            nesting_gap(x, 2.0, 1.0, cfg, Rng(8, 3))


class TestDualActivation:
    def test_identity_is_rho(self):
        for rho in (-0.7, 0.0, 0.42):
            assert dual_activation(rho, "identity") == pytest.approx(rho, abs=1e-10)

    def test_relu_uncorrelated(self):
        assert dual_activation(0.0, "relu") == pytest.approx(
            1.0 / (2.0 * np.pi), abs=1e-8
        )

    def test_relu_fully_correlated(self):
        assert dual_activation(1.0, "relu") == pytest.approx(0.5, abs=1e-8)

    def test_rho_domain(self):
        with pytest.raises(DomainError):
            dual_activation(1.2, "relu")


class TestKernelRidge:
    def _gram(self, values):
        v = np.asarray(values, dtype=np.float64)
        return GramMatrix(v, np.zeros_like(v), 1.0, "relu", 100)

    def test_zero_labels_zero_predictions(self):
        gram = self._gram(np.eye(3) * 2.0)
        pred = kernel_ridge(gram, np.zeros(3), 0.1, np.ones((2, 3)))
        np.testing.assert_array_equal(pred, np.zeros(2))

    def test_identity_gram_halves_labels(self):
        gram = self._gram(np.eye(3))
        labels = np.array([2.0, -4.0, 6.0])
        pred = kernel_ridge(gram, labels, 1.0, np.eye(3))
        np.testing.assert_allclose(pred, labels / 2.0, atol=1e-12)

    def test_lambda_domain(self):
        gram = self._gram(np.eye(2))
        with pytest.raises(DomainError):
            kernel_ridge(gram, np.zeros(2), 0.0, np.eye(2))


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        x = sphere_inputs(Rng(9, 0), 4, 8)
        cfg = KernelConfig(T=0.5, steps=8, particles=500, activation="tanh")
        gram = nngp_gram(cfg, x, Rng(9, 3))
        path = tmp_path / "gram.csv"
        export_gram_csv(gram, path)
        back = read_gram_csv(path)
        np.testing.assert_array_equal(back.values, gram.values)
        assert back.T == gram.T
        assert back.activation == gram.activation
        assert back.seed == gram.seed

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,0.0\n0.0,1.0\n")
        with pytest.raises(ConfigError):
            read_gram_csv(path)


class TestCrossModuleAgreement:
    def test_matches_limit_simulator_at_initialization(self):
        # E[h_T^2] from the training-limit simulator equals the kernel
        # diagonal for the same input, within combined Monte Carlo error
        x = sphere_inputs(Rng(10, 1), 1, 8)
        steps, P = 32, 50000
        cfg_k = KernelConfig(T=1.0, steps=steps, particles=P, activation="relu")
        gram = nngp_gram(cfg_k, x, Rng(10, 3))

        cfg_l = LimitConfig(steps_L=steps, particles=P, T=1.0, activation="relu")
        run = simulate_training(cfg_l, [(x[0], 0.0)], Rng(10, 0))
        h_final = run.ensemble.h[-1, 0]
        emp = float(np.mean(h_final**2))
        se_l = float(np.std(h_final**2)) / np.sqrt(P)
        combined = np.sqrt(gram.se[0, 0] ** 2 + se_l**2)
        assert abs(emp - gram.values[0, 0]) <= 3.0 * combined
