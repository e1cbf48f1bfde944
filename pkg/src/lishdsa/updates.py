"""First- and second-order a-posteriori regularization updates.

When an optimizer is stopped early, the returned iterate z* fails the
stationarity condition grad J(z*) = 0.  The first-order update is the
minimum-norm nonnegative convex quadratic added to the regularization so
that z* becomes stationary; its Hessian is the rank-one matrix
g g^T / (alpha ||g||) built from the residual gradient g.  The second-order
update records rank-one eigenvalue shifts that restore positive
definiteness of the full Hessian without touching the data-informed
eigenpairs; it is bookkeeping only and is never applied inside the
eigensolver.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linops import FunctionOperator, LinearOperator, as_vector, load_csv, save_csv


@dataclass(frozen=True)
class UpdateSpec:
    """Closed-form first-order update.

    value(z) = alpha/2 ||g|| - (z - z*)^T g + ((z - z*)^T g)^2 / (2 alpha ||g||)
             = ((z - z*)^T g - alpha ||g||)^2 / (2 alpha ||g||)

    The second expression is used for evaluation since it is exactly
    nonnegative in floating point.  ``constant`` is the offset that makes the
    minimum value zero when the quadratic is written in absolute coordinates.
    """

    g: np.ndarray
    alpha: float
    z_star: np.ndarray
    constant: float = field(init=False)

    def __post_init__(self):
        g = as_vector(self.g, name="gradient")
        z = as_vector(self.z_star, g.size, "z_star")
        object.__setattr__(self, "g", g.astype(float))
        object.__setattr__(self, "z_star", z.astype(float))
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        gnorm = float(np.linalg.norm(g))
        object.__setattr__(
            self,
            "constant",
            0.5 * self.alpha * gnorm + float(np.dot(z, g)) if gnorm > 0 else 0.0,
        )

    @property
    def gnorm(self) -> float:
        return float(np.linalg.norm(self.g))

    @property
    def trivial(self) -> bool:
        """Zero residual gradient: the update is the zero function."""
        return self.gnorm == 0.0

    def value(self, z) -> float:
        if self.trivial:
            return 0.0
        t = float(np.dot(np.asarray(z) - self.z_star, self.g))
        s = self.alpha * self.gnorm
        return (t - s) ** 2 / (2.0 * s)

    def gradient(self, z) -> np.ndarray:
        if self.trivial:
            return np.zeros_like(self.z_star)
        t = np.dot(np.asarray(z) - self.z_star, self.g)
        return self.g * (t / (self.alpha * self.gnorm) - 1.0)

    def hess_vec(self, v) -> np.ndarray:
        if self.trivial:
            return np.zeros_like(self.z_star)
        return self.g * (np.dot(self.g, v) / (self.alpha * self.gnorm))

    def hessian_operator(self) -> LinearOperator:
        m = self.z_star.size
        return FunctionOperator(m, m, self.hess_vec)

    def minimizer(self) -> np.ndarray:
        """One point of the global minimum set z* + alpha g/||g|| + g-perp."""
        if self.trivial:
            return self.z_star.copy()
        return self.z_star + self.alpha * self.g / self.gnorm


def default_alpha(z_star) -> float:
    """Length scale: half the spread of z*; falls back to 1.0 when constant."""
    z = as_vector(z_star, name="z_star")
    spread = float(z.max() - z.min())
    if spread <= 0.0:
        warnings.warn(
            "z* has zero spread; falling back to alpha = 1.0", UserWarning, stacklevel=2
        )
        return 1.0
    return 0.5 * spread


def first_order_update(g, alpha: float, z_star) -> UpdateSpec:
    """Minimum-norm stationarity-restoring update for residual gradient g.

    A zero gradient yields the trivial (identically zero) update so that
    already-converged solves pass through unchanged.
    """
    return UpdateSpec(g=np.asarray(g, dtype=float), alpha=float(alpha), z_star=z_star)


def update_norm(spec: UpdateSpec) -> float:
    """L1 norm of the update against the Gaussian measure N(z*, alpha^2 I)."""
    return spec.alpha * spec.gnorm


def is_second_order_satisfied(eigenvalues) -> bool:
    """Positive definiteness of H_M + H_R <=> every generalized eigenvalue > -1.

    The boundary value -1 itself is excluded (the Hessian is then singular).
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        return True
    return bool(lam.min() > -1.0)


@dataclass(frozen=True)
class SecondOrderShift:
    """Rank-one shift records for eigenvalues at or below -1.

    For each recorded index i, adding U_i = delta_i * H_R v_i v_i^T H_R moves
    the i-th generalized eigenvalue to -1 + epsilon and leaves every other
    eigenpair unchanged.  The shifts are declarative: downstream analysis
    never needs the vectors v_i, so none are stored here.
    """

    indices: np.ndarray
    shifts: np.ndarray
    epsilon: float

    @property
    def empty(self) -> bool:
        return self.indices.size == 0


def second_order_shift(eigenvalues, epsilon: float = 1e-8) -> SecondOrderShift:
    """Shift amounts delta_i = -1 - lambda_i + epsilon for all lambda_i <= -1."""
    lam = np.asarray(eigenvalues, dtype=float)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if lam.size > 1 and np.any(np.diff(lam) > 0):
        raise ValueError("eigenvalues must be sorted descending")
    idx = np.flatnonzero(lam <= -1.0)
    deltas = -1.0 - lam[idx] + epsilon
    return SecondOrderShift(indices=idx, shifts=deltas, epsilon=float(epsilon))


def shift_matrix_dense(HR: np.ndarray, v: np.ndarray, delta: float) -> np.ndarray:
    """Dense U(delta) = delta * H_R v v^T H_R, for verification tests."""
    w = np.asarray(HR) @ np.asarray(v)
    return delta * np.outer(w, w)


def shifted_misfit_hessian_dense(
    HM: np.ndarray, HR: np.ndarray, V: np.ndarray, shift: SecondOrderShift
) -> np.ndarray:
    """H_M plus all recorded shifts; V holds the H_R-orthonormal eigenvectors."""
    out = np.array(HM, dtype=float, copy=True)
    for i, delta in zip(shift.indices, shift.shifts):
        out += shift_matrix_dense(HR, V[:, i], delta)
    return out


def save_update_spec(spec: UpdateSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(out / "update_gradient.csv", spec.g.reshape(1, -1))
    save_csv(out / "update_z_star.csv", spec.z_star.reshape(1, -1))
    with open(out / "update_manifest.json", "w") as fh:
        json.dump(
            {
                "alpha": spec.alpha,
                "gradient_norm": spec.gnorm,
                "constant": spec.constant,
                "l1_norm": update_norm(spec),
                "trivial": spec.trivial,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")


def load_update_spec(out_dir) -> UpdateSpec:
    out = Path(out_dir)
    with open(out / "update_manifest.json") as fh:
        meta = json.load(fh)
    g = load_csv(out / "update_gradient.csv").ravel()
    z_star = load_csv(out / "update_z_star.csv").ravel()
    return UpdateSpec(g=g, alpha=meta["alpha"], z_star=z_star)
