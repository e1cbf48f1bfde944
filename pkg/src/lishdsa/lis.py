"""Likelihood-informed subspace: randomized generalized eigensolver and projector.

The pencil (H_M, H_Rt) pairs the misfit Hessian with the (possibly updated)
regularization Hessian; eigenvalues measure the misfit-to-regularization
ratio along the eigenvector directions, so a threshold of 1 keeps exactly
the directions where the data dominates.  The solver sketches the range of
H_Rt^{-1} H_M with a Gaussian block, grows the block until the requested
eigenvalue threshold is crossed, and reuses every H_M product from earlier
passes so the total count stays at 2(r + p).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .linops import (
    ContractViolation,
    CountingOperator,
    LinearOperator,
    b_orthonormalize,
    cg_solve,
    dense_sym_eig,
    load_csv,
    save_csv,
    weighted_norm,
)


@dataclass
class GevpConfig:
    """Knobs for the randomized eigensolver.

    ``r0`` and ``dr`` default to 8 so a single growth step saturates a small
    worker pool; set r0 = workers - oversampling and dr = workers to keep all
    sketch applications simultaneously in flight.
    """

    oversampling: int = 20
    r0: int = 8
    dr: int = 8
    lambda_min: float = 1.0
    seed: int = 0
    cg_tol: float = 1e-10
    max_rank: Optional[int] = None

    def validate(self):
        if self.oversampling < 0:
            raise ContractViolation("oversampling must be nonnegative")
        if self.r0 < 1 or self.dr < 1:
            raise ContractViolation("r0 and dr must be at least 1")
        if self.lambda_min <= 0:
            raise ContractViolation("lambda_min must be positive")


@dataclass
class GevpBasis:
    """Leading generalized eigenpairs, vectors normalized v^T H_Rt v = 1."""

    eigenvalues: np.ndarray
    vectors: np.ndarray  # m x r, column j pairs with eigenvalues[j]
    lambda_min: float
    oversampling: int = 0
    seed: Optional[int] = None
    hm_applications: int = 0
    normalized: bool = True

    @property
    def r(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def m(self) -> int:
        return int(self.vectors.shape[0])

    def __len__(self) -> int:
        return self.r


def _resolve_solver(HRt: LinearOperator, cg_tol: float, override=None) -> Callable:
    if override is not None:
        return override
    if HRt.has_solve:
        return HRt.solve
    return lambda b: cg_solve(HRt, b, tol=cg_tol).require()


def _solve_block(solve, B):
    out = np.empty_like(B, dtype=float)
    for j in range(B.shape[1]):
        out[:, j] = solve(B[:, j])
    return out


def randomized_gevp(
    HM: LinearOperator,
    HRt: LinearOperator,
    cfg: GevpConfig,
    hrt_solve: Optional[Callable] = None,
) -> GevpBasis:
    """Randomized solver for H_M v = lambda H_Rt v, H_Rt SPD, H_M symmetric.

    Returns every computed pair (descending), including those at or below the
    threshold; :func:`truncate` filters afterwards at no operator cost.  The
    Gaussian sketch is extended, never regenerated, across growth passes, and
    cached H_M products keep the total application count at 2(r + p) where r
    is the target rank at termination.
    """
    cfg.validate()
    if HM.shape != HRt.shape or HM.dim_in != HM.dim_out:
        raise ContractViolation("H_M and H_Rt must be square with equal shapes")
    m = HM.dim_in
    rng = np.random.default_rng(cfg.seed)
    solve = _resolve_solver(HRt, cfg.cg_tol, hrt_solve)
    counter = CountingOperator(HM)
    r_cap = min(cfg.max_rank or m, m)

    r = min(cfg.r0, r_cap)
    n_sketch = min(r + cfg.oversampling, m)
    Omega = rng.standard_normal((m, n_sketch))
    HMO = counter.apply_block(Omega)
    HMQ = np.empty((m, 0))
    pair = None
    Q = None

    while True:
        Y = _solve_block(solve, HMO)
        Q_new = b_orthonormalize(Y, HRt)
        # leading columns of Q are stable under sketch extension (triangular
        # orthonormalization), so earlier H_M Q products stay valid
        n_reuse = min(HMQ.shape[1], Q_new.shape[1])
        if Q is not None and Q_new.shape[1] < Q.shape[1]:
            n_reuse = 0  # rank drop invalidated the cache
        Q = Q_new
        HMQ = np.hstack([HMQ[:, :n_reuse], counter.apply_block(Q[:, n_reuse:])])
        T = Q.T @ HMQ
        pair = dense_sym_eig(0.5 * (T + T.T))
        k = min(r, pair.eigenvalues.size)
        lam_iter = pair.eigenvalues[k - 1] if k > 0 else -np.inf
        if Q.shape[1] < n_sketch:
            # sketch saturated the operator range: the nonzero spectrum is
            # complete and every remaining eigenvalue vanishes within
            # round-off, which is below any positive threshold
            r = pair.eigenvalues.size
            break
        if lam_iter <= cfg.lambda_min:
            break
        if n_sketch >= m:
            # the sketch spans the whole space: decomposition is exact
            r = pair.eigenvalues.size
            if r and pair.eigenvalues[-1] > cfg.lambda_min:
                warnings.warn(
                    f"entire spectrum lies above the threshold {cfg.lambda_min:g}",
                    UserWarning,
                    stacklevel=2,
                )
            break
        if r >= r_cap:
            warnings.warn(
                f"eigenvalue threshold {cfg.lambda_min:g} not reached at rank "
                f"cap {r}; smallest computed eigenvalue {lam_iter:.3e}",
                UserWarning,
                stacklevel=2,
            )
            break
        r = min(r + cfg.dr, r_cap)
        grow = min(r + cfg.oversampling, m) - n_sketch
        if grow > 0:
            Omega_new = rng.standard_normal((m, grow))
            Omega = np.hstack([Omega, Omega_new])
            HMO = np.hstack([HMO, counter.apply_block(Omega_new)])
            n_sketch += grow

    r_out = min(r, pair.eigenvalues.size)
    eigenvalues = pair.eigenvalues[:r_out].copy()
    V = Q @ pair.S[:, :r_out]
    # renormalize explicitly against H_Rt and fix signs for determinism
    for j in range(r_out):
        nrm = np.sqrt(abs(float(np.dot(V[:, j], HRt(V[:, j])))))
        if nrm > 0:
            V[:, j] /= nrm
        k = np.argmax(np.abs(V[:, j]))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    return GevpBasis(
        eigenvalues=eigenvalues,
        vectors=V,
        lambda_min=cfg.lambda_min,
        oversampling=cfg.oversampling,
        seed=cfg.seed,
        hm_applications=counter.count,
    )


def dense_gevp(HM_dense, HR_dense, lambda_min: float = -np.inf) -> GevpBasis:
    """Reference full-spectrum path for small dense pencils (oracle use).

    Solves the generalized symmetric problem directly; vectors come out
    H_R-orthonormal.  Independent of the randomized path.
    """
    import scipy.linalg

    HM_dense = np.asarray(HM_dense, dtype=float)
    HR_dense = np.asarray(HR_dense, dtype=float)
    w, V = scipy.linalg.eigh(HM_dense, HR_dense)
    order = np.argsort(w)[::-1]
    w = w[order]
    V = V[:, order]
    for j in range(V.shape[1]):
        k = np.argmax(np.abs(V[:, j]))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    keep = w >= lambda_min
    return GevpBasis(
        eigenvalues=w[keep],
        vectors=V[:, keep],
        lambda_min=float(lambda_min),
    )


def projector_apply(basis: GevpBasis, HR: LinearOperator, v) -> np.ndarray:
    """Apply P = V V^T H_R; idempotent when HR matches the basis metric."""
    if basis.r == 0:
        return np.zeros_like(np.asarray(v, dtype=float))
    return basis.vectors @ (basis.vectors.T @ HR(np.asarray(v)))


def truncate(basis: GevpBasis, lambda_min_new: float) -> GevpBasis:
    """Drop pairs with eigenvalue strictly below the new threshold.

    Pure postprocessing: no operator applications.  An empty result is
    allowed (with a warning) so threshold sweeps can overshoot safely.
    """
    if lambda_min_new < basis.lambda_min:
        raise ContractViolation(
            f"new threshold {lambda_min_new:g} is below the computed one "
            f"{basis.lambda_min:g}; eigenpairs were never computed down there"
        )
    keep = basis.eigenvalues >= lambda_min_new
    if not np.any(keep):
        warnings.warn(
            f"truncation at {lambda_min_new:g} removed every eigenpair",
            UserWarning,
            stacklevel=2,
        )
    return replace(
        basis,
        eigenvalues=basis.eigenvalues[keep],
        vectors=basis.vectors[:, keep],
        lambda_min=float(lambda_min_new),
    )


def save_basis(basis: GevpBasis, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(out / "eigenvalues.csv", basis.eigenvalues.reshape(1, -1))
    save_csv(out / "eigenvectors.csv", basis.vectors)
    with open(out / "basis_manifest.json", "w") as fh:
        json.dump(
            {
                "r": basis.r,
                "m": basis.m,
                "lambda_min": basis.lambda_min,
                "oversampling": basis.oversampling,
                "seed": basis.seed,
                "hm_applications": basis.hm_applications,
                "normalized": basis.normalized,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")


def load_basis(out_dir) -> GevpBasis:
    out = Path(out_dir)
    with open(out / "basis_manifest.json") as fh:
        meta = json.load(fh)
    eigenvalues = load_csv(out / "eigenvalues.csv").ravel()
    vectors = load_csv(out / "eigenvectors.csv")
    return GevpBasis(
        eigenvalues=eigenvalues,
        vectors=vectors,
        lambda_min=meta["lambda_min"],
        oversampling=meta["oversampling"],
        seed=meta["seed"],
        hm_applications=meta["hm_applications"],
        normalized=meta["normalized"],
    )
