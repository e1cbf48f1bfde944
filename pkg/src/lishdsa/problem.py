"""Inverse-problem contract and the fully analytic quadratic test model.

An :class:`InverseProblem` bundles the objective J(z; theta) = M + R, its
z-gradient, misfit/regularization Hessian-vector products and the mixed
second-derivative columns B e_i = d/dtheta_i grad_z J.  The misfit and
regularization Hessians are exposed separately because the likelihood
informed eigenproblem pairs them.

:class:`QuadraticModel` provides a linear observation map F(z, theta) =
A z + C theta with quadratic misfit and regularization, so every quantity has
a dense closed form.  It serves as the oracle against which the matrix-free
paths are verified.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .linops import (
    ContractViolation,
    IdentityOperator,
    LinearOperator,
    MatrixOperator,
    as_vector,
    load_csv,
)


class InverseProblem:
    """Abstract operation bundle for a fixed model.

    Instances are immutable after construction; evaluations at distinct
    arguments may run concurrently.  Subclasses set ``m`` (inversion
    dimension), ``n`` (auxiliary dimension) and ``Wz`` (SPD weighting
    operator for the solution space).
    """

    m: int
    n: int
    Wz: LinearOperator

    #: True when the full Hessian at any iterate is provably SPD, which
    #: enables the direct (solve-based) sensitivity path.
    hessian_spd_certified: bool = False

    def objective(self, z, theta) -> float:
        return self.misfit(z, theta) + self.regularization(z)

    def misfit(self, z, theta) -> float:
        raise NotImplementedError

    def regularization(self, z) -> float:
        raise NotImplementedError

    def gradient_z(self, z, theta) -> np.ndarray:
        raise NotImplementedError

    def hess_misfit_vec(self, z, theta, v, mode: str = "full") -> np.ndarray:
        raise NotImplementedError

    def hess_reg_vec(self, z, v) -> np.ndarray:
        raise NotImplementedError

    def hess_vec(self, z, theta, v, mode: str = "full") -> np.ndarray:
        return self.hess_misfit_vec(z, theta, v, mode=mode) + self.hess_reg_vec(z, v)

    def mixed_jacobian_col(self, z, theta, i: int) -> np.ndarray:
        raise NotImplementedError

    def mixed_jacobian(self, z, theta, workers: int = 1) -> np.ndarray:
        """All columns B e_i, i = 0..n-1, as an m-by-n block.

        Columns are independent; with ``workers > 1`` they are computed in a
        thread pool (the heavy kernels release the GIL inside BLAS/SuperLU).
        """
        cols = range(self.n)
        if workers and workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(
                    pool.map(lambda i: self.mixed_jacobian_col(z, theta, i), cols)
                )
        else:
            results = [self.mixed_jacobian_col(z, theta, i) for i in cols]
        return np.column_stack(results)

    def misfit_hessian_operator(self, z, theta, mode: str = "full") -> LinearOperator:
        from .linops import FunctionOperator

        return FunctionOperator(
            self.m, self.m, lambda v: self.hess_misfit_vec(z, theta, v, mode=mode)
        )

    def reg_hessian_operator(self, z) -> LinearOperator:
        from .linops import FunctionOperator

        return FunctionOperator(self.m, self.m, lambda v: self.hess_reg_vec(z, v))

    def hessian_operator(self, z, theta, mode: str = "full") -> LinearOperator:
        from .linops import FunctionOperator

        return FunctionOperator(
            self.m, self.m, lambda v: self.hess_vec(z, theta, v, mode=mode)
        )

    def theta_labels(self) -> list[str]:
        return [f"theta-{i}" for i in range(self.n)]

    def theta_groups(self) -> list[str]:
        return ["aux"] * self.n


class QuadraticModel(InverseProblem):
    """F(z, theta) = A z + C theta, quadratic misfit and regularization.

    J(z; theta) = 1/2 (Az + Ctheta - d)^T W (Az + Ctheta - d) + 1/2 z^T Hreg z

    so H_M = A^T W A and B = A^T W C are constant and the minimizer solves
    (A^T W A + Hreg) z = A^T W (d - C theta) in closed form.
    """

    hessian_spd_certified = True

    def __init__(self, A, C, d, W=None, Hreg=None, Wz: Optional[LinearOperator] = None):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2:
            raise ContractViolation("A must be a matrix")
        n_obs, m = A.shape
        C = np.zeros((n_obs, 0)) if C is None else np.asarray(C, dtype=float)
        if C.shape[0] != n_obs:
            raise ContractViolation("C row count must match A")
        self.A = A
        self.C = C
        self.d = as_vector(d, n_obs, "data")
        self.W = np.eye(n_obs) if W is None else np.asarray(W, dtype=float)
        self.Hreg = np.zeros((m, m)) if Hreg is None else np.asarray(Hreg, dtype=float)
        self.m = m
        self.n = C.shape[1]
        self.Wz = Wz if Wz is not None else IdentityOperator(m)
        self._HM = A.T @ self.W @ A
        self._B = A.T @ self.W @ C

    # -- contract -----------------------------------------------------------

    def misfit(self, z, theta):
        r = self.residual(z, theta)
        return 0.5 * float(r @ self.W @ r)

    def regularization(self, z):
        z = np.asarray(z)
        return 0.5 * float(z @ self.Hreg @ z)

    def residual(self, z, theta):
        return self.A @ np.asarray(z) + self.C @ np.asarray(theta) - self.d

    def gradient_z(self, z, theta):
        return self.A.T @ (self.W @ self.residual(z, theta)) + self.Hreg @ np.asarray(z)

    def hess_misfit_vec(self, z, theta, v, mode="full"):
        # exactly quadratic: full Hessian and Gauss-Newton coincide
        return self._HM @ np.asarray(v)

    def hess_reg_vec(self, z, v):
        return self.Hreg @ np.asarray(v)

    def mixed_jacobian_col(self, z, theta, i):
        if not 0 <= i < self.n:
            raise ContractViolation(f"column index {i} out of range [0, {self.n})")
        return self._B[:, i].copy()

    # -- dense conveniences --------------------------------------------------

    def misfit_hessian(self) -> np.ndarray:
        return self._HM.copy()

    def reg_hessian(self) -> np.ndarray:
        return self.Hreg.copy()

    def full_hessian(self) -> np.ndarray:
        return self._HM + self.Hreg

    def mixed_block(self) -> np.ndarray:
        return self._B.copy()

    def solve_optimal(self, theta) -> np.ndarray:
        """Closed-form minimizer (A^T W A + Hreg) z = A^T W (d - C theta)."""
        rhs = self.A.T @ (self.W @ (self.d - self.C @ np.asarray(theta)))
        return np.linalg.solve(self.full_hessian(), rhs)

    def misfit_hessian_operator(self, z=None, theta=None, mode="full"):
        return MatrixOperator(self._HM)

    def reg_hessian_operator(self, z=None):
        return MatrixOperator(self.Hreg, spd=True)

    def hessian_operator(self, z=None, theta=None, mode="full"):
        return MatrixOperator(self.full_hessian(), spd=True)

    def generate_data(self, z_true, theta, noise_rel: float = 0.0, seed: int = 0):
        """Synthetic d = A z_true + C theta (+ relative Gaussian noise)."""
        clean = self.A @ np.asarray(z_true) + self.C @ np.asarray(theta)
        if noise_rel == 0.0:
            return clean
        rng = np.random.default_rng(seed)
        return clean + noise_rel * np.abs(clean) * rng.standard_normal(clean.shape)

    # -- config I/O ----------------------------------------------------------

    @classmethod
    def from_config(cls, config, base_dir: Optional[Path] = None) -> "QuadraticModel":
        """Build from a dict or a JSON file; matrices inline or CSV paths."""
        if isinstance(config, (str, Path)):
            base_dir = Path(config).parent
            with open(config) as fh:
                config = json.load(fh)
        base = Path(base_dir) if base_dir is not None else Path(".")

        def mat(key, required=False):
            if key not in config or config[key] is None:
                if required:
                    raise ContractViolation(f"quadratic config misses '{key}'")
                return None
            val = config[key]
            if isinstance(val, str):
                return load_csv(base / val)
            return np.asarray(val, dtype=float)

        d = mat("d", required=True)
        return cls(
            A=mat("A", required=True),
            C=mat("C"),
            d=np.ravel(d),
            W=mat("W"),
            Hreg=mat("Hreg"),
        )


def random_quadratic(
    m: int,
    n: int,
    seed: int = 0,
    n_obs: Optional[int] = None,
    reg_scale: float = 1.0,
    misfit_rank: Optional[int] = None,
) -> QuadraticModel:
    """Random well-posed instance used across the oracle test suites.

    The regularization Hessian is SPD by construction, so the full Hessian is
    SPD regardless of the misfit rank.  ``misfit_rank`` caps the rank of A to
    emulate data sparsity (fast-decaying generalized spectra).
    """
    rng = np.random.default_rng(seed)
    n_obs = n_obs if n_obs is not None else m
    A = rng.standard_normal((n_obs, m)) / np.sqrt(m)
    if misfit_rank is not None and misfit_rank < min(n_obs, m):
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        s[misfit_rank:] = 0.0
        A = (U * s) @ Vt
    C = rng.standard_normal((n_obs, n)) / np.sqrt(max(n, 1))
    W = np.diag(rng.uniform(0.5, 2.0, size=n_obs))
    L = rng.standard_normal((m, m)) / np.sqrt(m)
    Hreg = reg_scale * (L @ L.T + np.eye(m))
    z_true = rng.standard_normal(m)
    theta0 = rng.standard_normal(n)
    d = A @ z_true + C @ theta0
    return QuadraticModel(A=A, C=C, d=d, W=W, Hreg=Hreg)


# -- finite-difference oracles -------------------------------------------------
#
# Central differences of one order lower than the quantity they check; these
# stay independent of the adjoint/analytic paths they verify.


def fd_gradient(problem: InverseProblem, z, theta, h: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for i in range(z.size):
        zp = z.copy()
        zm = z.copy()
        step = h * (1.0 + abs(z[i]))
        zp[i] += step
        zm[i] -= step
        g[i] = (problem.objective(zp, theta) - problem.objective(zm, theta)) / (2 * step)
    return g


def fd_directional(problem: InverseProblem, z, theta, direction, h: float = 1e-6) -> float:
    z = np.asarray(z, dtype=float)
    v = np.asarray(direction, dtype=float)
    step = h * (1.0 + float(np.linalg.norm(z)) / max(np.linalg.norm(v), 1e-30))
    jp = problem.objective(z + step * v, theta)
    jm = problem.objective(z - step * v, theta)
    return (jp - jm) / (2 * step)


def fd_hess_vec(problem: InverseProblem, z, theta, v, h: float = 1e-5) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    vnorm = np.linalg.norm(v)
    if vnorm == 0:
        return np.zeros_like(z)
    step = h * (1.0 + float(np.linalg.norm(z))) / vnorm
    gp = problem.gradient_z(z + step * v, theta)
    gm = problem.gradient_z(z - step * v, theta)
    return (gp - gm) / (2 * step)


def fd_mixed_col(problem: InverseProblem, z, theta, i: int, h: Optional[float] = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    step = h if h is not None else 1e-4 * (1.0 + abs(float(theta[i])))
    tp = theta.copy()
    tm = theta.copy()
    tp[i] += step
    tm[i] -= step
    gp = problem.gradient_z(z, tp)
    gm = problem.gradient_z(z, tm)
    return (gp - gm) / (2 * step)
