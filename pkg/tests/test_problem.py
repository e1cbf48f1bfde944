"""Inverse-problem contract and the quadratic oracle model."""

import json

import numpy as np
import pytest

from lishdsa.linops import ContractViolation, save_csv
from lishdsa.problem import (
    QuadraticModel,
    fd_gradient,
    fd_hess_vec,
    fd_mixed_col,
    random_quadratic,
)


def identity_model(m=2, d=None, with_reg=False):
    return QuadraticModel(
        A=np.eye(m),
        C=None,
        d=np.zeros(m) if d is None else d,
        Hreg=np.eye(m) if with_reg else np.zeros((m, m)),
    )


class TestObjective:
    def test_exact_fit_no_regularization(self):
        model = identity_model(d=np.array([0.3, -0.7]))
        assert model.objective(np.array([0.3, -0.7]), np.zeros(0)) == 0.0

    def test_hand_evaluation_with_regularization(self):
        # A=I, W=I, Hreg=I, z=d=(1,0): misfit 0, reg 1/2
        model = identity_model(d=np.array([1.0, 0.0]), with_reg=True)
        assert model.objective(np.array([1.0, 0.0]), np.zeros(0)) == pytest.approx(0.5)

    def test_weighted_residual(self):
        # residual (1,1), W=2I: 0.5 * 2 * (1+1) = 2
        model = QuadraticModel(A=np.eye(2), C=None, d=np.zeros(2), W=2 * np.eye(2))
        assert model.objective(np.ones(2), np.zeros(0)) == pytest.approx(2.0)


class TestGradient:
    def test_stationary_at_minimizer(self):
        model = random_quadratic(12, 3, seed=0)
        theta = np.zeros(3)
        z_star = model.solve_optimal(theta)
        g_star = model.gradient_z(z_star, theta)
        g_origin = model.gradient_z(np.zeros(12), theta)
        assert np.linalg.norm(g_star) <= 1e-10 * np.linalg.norm(g_origin)

    def test_closed_form_identity_instance(self):
        # A=I, W=I, Hreg=I, d=0: gradient = 2 z
        model = identity_model(with_reg=True)
        np.testing.assert_allclose(
            model.gradient_z(np.array([1.0, 2.0]), np.zeros(0)), [2.0, 4.0]
        )

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        model = random_quadratic(10, 4, seed=5)
        z = rng.standard_normal(10)
        theta = rng.standard_normal(4)
        g = model.gradient_z(z, theta)
        g_fd = fd_gradient(model, z, theta)
        assert np.linalg.norm(g - g_fd) <= 1e-6 * np.linalg.norm(g_fd)


class TestHessianVector:
    def test_identity_misfit(self):
        model = identity_model()
        v = np.array([0.2, -0.4])
        np.testing.assert_allclose(model.hess_misfit_vec(None, None, v), v)

    def test_diagonal_regularization(self):
        model = QuadraticModel(
            A=np.eye(2), C=None, d=np.zeros(2), Hreg=np.diag([1.0, 3.5])
        )
        np.testing.assert_allclose(model.hess_reg_vec(None, np.ones(2)), [1.0, 3.5])

    def test_symmetry_probes(self):
        rng = np.random.default_rng(7)
        model = random_quadratic(15, 3, seed=7)
        for _ in range(10):
            v, w = rng.standard_normal((2, 15))
            hv = model.hess_misfit_vec(None, None, v)
            hw = model.hess_misfit_vec(None, None, w)
            gap = abs(hv @ w - v @ hw)
            assert gap <= 1e-10 * np.linalg.norm(v) * np.linalg.norm(w)


class TestMixedJacobian:
    def test_matches_dense_product(self):
        model = random_quadratic(9, 4, seed=11)
        B = model.A.T @ model.W @ model.C
        for i in range(4):
            np.testing.assert_allclose(
                model.mixed_jacobian_col(None, np.zeros(4), i), B[:, i], rtol=1e-14
            )

    def test_theta_independent_misfit(self):
        model = QuadraticModel(A=np.eye(3), C=np.zeros((3, 2)), d=np.zeros(3))
        for i in range(2):
            np.testing.assert_array_equal(
                model.mixed_jacobian_col(None, np.zeros(2), i), np.zeros(3)
            )

    def test_fd_cross_check(self):
        rng = np.random.default_rng(13)
        model = random_quadratic(8, 5, seed=13)
        z = rng.standard_normal(8)
        theta = rng.standard_normal(5)
        for i in range(5):
            col = model.mixed_jacobian_col(z, theta, i)
            col_fd = fd_mixed_col(model, z, theta, i)
            assert np.linalg.norm(col - col_fd) <= 1e-8 * (1 + np.linalg.norm(col_fd))

    def test_index_out_of_range(self):
        model = random_quadratic(4, 2, seed=0)
        with pytest.raises(ContractViolation):
            model.mixed_jacobian_col(None, np.zeros(2), 2)


class TestRandomInstanceConsistency:
    def test_derivative_stack_on_random_instances(self):
        # gradient / Hessian-vector / B-column consistency, m, n <= 40
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            m = int(rng.integers(3, 41))
            n = int(rng.integers(1, 21))
            model = random_quadratic(m, n, seed=seed)
            z = rng.standard_normal(m)
            theta = rng.standard_normal(n)

            g_err = np.linalg.norm(
                model.gradient_z(z, theta) - fd_gradient(model, z, theta)
            ) / (1 + np.linalg.norm(model.gradient_z(z, theta)))
            assert g_err <= 1e-6

            v = rng.standard_normal(m)
            hv = model.hess_vec(z, theta, v)
            hv_err = np.linalg.norm(hv - fd_hess_vec(model, z, theta, v)) / (
                1 + np.linalg.norm(hv)
            )
            assert hv_err <= 1e-5

            i = int(rng.integers(n))
            col = model.mixed_jacobian_col(z, theta, i)
            col_err = np.linalg.norm(col - fd_mixed_col(model, z, theta, i)) / (
                1 + np.linalg.norm(col)
            )
            assert col_err <= 1e-5

    def test_full_hessian_spd(self):
        for seed in range(5):
            model = random_quadratic(20, 4, seed=seed)
            np.linalg.cholesky(model.full_hessian())  # raises if not SPD


class TestConfigLoading:
    def test_inline_matrices(self, tmp_path):
        config = {
            "A": [[1.0, 0.0], [0.0, 2.0]],
            "d": [1.0, 1.0],
            "Hreg": [[0.1, 0.0], [0.0, 0.1]],
        }
        path = tmp_path / "model.json"
        path.write_text(json.dumps(config))
        model = QuadraticModel.from_config(path)
        assert model.m == 2 and model.n == 0
        np.testing.assert_allclose(model.A, [[1, 0], [0, 2]])

    def test_csv_paths(self, tmp_path):
        save_csv(tmp_path / "A.csv", np.eye(3))
        save_csv(tmp_path / "d.csv", np.array([[1.0, 2.0, 3.0]]))
        config = {"A": "A.csv", "d": "d.csv"}
        (tmp_path / "model.json").write_text(json.dumps(config))
        model = QuadraticModel.from_config(tmp_path / "model.json")
        np.testing.assert_allclose(model.d, [1, 2, 3])

    def test_missing_required_key(self, tmp_path):
        (tmp_path / "model.json").write_text(json.dumps({"d": [1.0]}))
        with pytest.raises(ContractViolation):
            QuadraticModel.from_config(tmp_path / "model.json")
