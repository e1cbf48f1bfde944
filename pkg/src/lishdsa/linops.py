"""Vector/operator substrate for the sensitivity toolkit.

Everything downstream (eigensolvers, sensitivity indices, trust-region
solves) talks to linear maps through the matrix-free :class:`LinearOperator`
contract defined here.  Dense materialization is reserved for small oracle
problems; large operators are apply-only.  The module also provides the
weighted inner products, the conjugate-gradient solver, the B-orthonormalizer
and the small dense symmetric eigensolver used by the randomized
generalized eigenvalue algorithm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

# Dense materialization guard: as_dense() refuses above this size unless the
# caller raises the cap explicitly.  Large-scale cost is measured in operator
# applications, so densifying big operators is almost always a bug.
DENSE_CAP = 512


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (dims, symmetry, ...)."""


class ConvergenceFailure(RuntimeError):
    """An iterative solve stopped without reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class RankDeficiencyWarning(UserWarning):
    """Emitted when dependent columns are dropped during orthonormalization."""


def as_vector(x, dim: Optional[int] = None, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D array, checking finiteness and (optionally) length."""
    v = np.asarray(x)
    if v.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ContractViolation(f"{name} has length {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return v


class LinearOperator:
    """A deterministic, side-effect-free linear map v -> A v.

    Subclasses implement :meth:`apply`.  An operator may additionally expose
    an (exact or inner-tolerance) ``solve`` method; ``has_solve`` reports
    whether one is available.  Applications must be reentrant so callers can
    apply one operator to many vectors concurrently.
    """

    def __init__(self, dim_out: int, dim_in: int):
        if dim_out <= 0 or dim_in <= 0:
            raise ContractViolation("operator dimensions must be positive")
        self.dim_out = int(dim_out)
        self.dim_in = int(dim_in)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.dim_out, self.dim_in)

    def apply(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v)
        if v.shape != (self.dim_in,):
            raise ContractViolation(
                f"operator expects shape ({self.dim_in},), got {v.shape}"
            )
        return self.apply(v)

    def apply_block(self, V: np.ndarray) -> np.ndarray:
        """Apply to the columns of V; subclasses may override with matmul."""
        V = np.asarray(V)
        out = np.empty((self.dim_out, V.shape[1]), dtype=np.result_type(V, float))
        for j in range(V.shape[1]):
            out[:, j] = self(V[:, j])
        return out

    @property
    def has_solve(self) -> bool:
        return hasattr(self, "solve")

    def as_dense(self, cap: int = DENSE_CAP) -> np.ndarray:
        """Materialize by applying to canonical basis vectors (small sizes only)."""
        if self.dim_in > cap:
            raise ContractViolation(
                f"refusing to densify operator of width {self.dim_in} (cap {cap})"
            )
        return self.apply_block(np.eye(self.dim_in))

    def __add__(self, other: "LinearOperator") -> "LinearOperator":
        if self.shape != other.shape:
            raise ContractViolation("operator shapes differ in sum")
        return FunctionOperator(
            self.dim_out, self.dim_in, lambda v: self(v) + other(v)
        )

    def __rmul__(self, scalar: float) -> "LinearOperator":
        s = float(scalar)
        return FunctionOperator(self.dim_out, self.dim_in, lambda v: s * self(v))


class FunctionOperator(LinearOperator):
    """Wrap a pure callable as an operator."""

    def __init__(self, dim_out, dim_in, fn: Callable[[np.ndarray], np.ndarray]):
        super().__init__(dim_out, dim_in)
        self._fn = fn

    def apply(self, v):
        return self._fn(v)


class IdentityOperator(LinearOperator):
    def __init__(self, dim: int):
        super().__init__(dim, dim)

    def apply(self, v):
        return np.array(v, copy=True)

    def apply_block(self, V):
        return np.array(V, copy=True)

    def solve(self, b):
        return np.array(b, copy=True)


class DiagonalOperator(LinearOperator):
    def __init__(self, diagonal):
        d = as_vector(diagonal, name="diagonal")
        super().__init__(d.size, d.size)
        self.diagonal = d

    def apply(self, v):
        return self.diagonal * v

    def apply_block(self, V):
        return self.diagonal[:, None] * V

    def solve(self, b):
        return b / self.diagonal


class MatrixOperator(LinearOperator):
    """Dense-backed operator; keeps a Cholesky factor around when SPD."""

    def __init__(self, matrix, spd: bool = False):
        A = np.asarray(matrix, dtype=float)
        if A.ndim != 2:
            raise ContractViolation("matrix must be 2-D")
        super().__init__(A.shape[0], A.shape[1])
        self.matrix = A
        self._spd = spd
        self._chol = None

    def apply(self, v):
        return self.matrix @ v

    def apply_block(self, V):
        return self.matrix @ V

    def solve(self, b):
        if self._spd:
            if self._chol is None:
                self._chol = scipy.linalg.cho_factor(self.matrix)
            return scipy.linalg.cho_solve(self._chol, b)
        return np.linalg.solve(self.matrix, b)

    def as_dense(self, cap: int = DENSE_CAP) -> np.ndarray:
        return np.array(self.matrix, copy=True)


class SparseOperator(LinearOperator):
    """Sparse-backed operator with a lazily factorized direct solve."""

    def __init__(self, matrix):
        A = scipy.sparse.csr_matrix(matrix)
        super().__init__(A.shape[0], A.shape[1])
        self.matrix = A
        self._lu = None

    def apply(self, v):
        return self.matrix @ v

    def apply_block(self, V):
        return self.matrix @ V

    def solve(self, b):
        if self._lu is None:
            self._lu = scipy.sparse.linalg.splu(self.matrix.tocsc())
        return self._lu.solve(np.asarray(b))

    def as_dense(self, cap: int = DENSE_CAP) -> np.ndarray:
        if self.dim_in > cap:
            raise ContractViolation(
                f"refusing to densify operator of width {self.dim_in} (cap {cap})"
            )
        return self.matrix.toarray()


class LowRankUpdateOperator(LinearOperator):
    """base + sigma * u u^T with a Sherman-Morrison solve when base has one.

    Used for the regularization Hessian plus its rank-one a-posteriori
    update: the base factorization is reused and the correction costs one
    extra base solve overall.
    """

    def __init__(self, base: LinearOperator, u, sigma: float):
        if base.dim_in != base.dim_out:
            raise ContractViolation("low-rank update requires a square base")
        super().__init__(base.dim_out, base.dim_in)
        self.base = base
        self.u = as_vector(u, base.dim_in, "update vector")
        self.sigma = float(sigma)
        self._base_inv_u = None

    def apply(self, v):
        return self.base(v) + self.sigma * self.u * np.dot(self.u, v)

    def apply_block(self, V):
        return self.base.apply_block(V) + self.sigma * np.outer(self.u, self.u @ V)

    def solve(self, b):
        if not self.base.has_solve:
            raise ContractViolation("base operator exposes no solve")
        if self._base_inv_u is None:
            self._base_inv_u = self.base.solve(self.u)
        y = self.base.solve(b)
        denom = 1.0 + self.sigma * np.dot(self.u, self._base_inv_u)
        return y - self._base_inv_u * (self.sigma * np.dot(self.u, y) / denom)


class CountingOperator(LinearOperator):
    """Wrapper that counts applications (block applies count per column)."""

    def __init__(self, op: LinearOperator):
        super().__init__(op.dim_out, op.dim_in)
        self.op = op
        self.count = 0

    def apply(self, v):
        self.count += 1
        return self.op(v)

    def apply_block(self, V):
        self.count += V.shape[1]
        return self.op.apply_block(V)


def weighted_inner(u, v, W: Optional[LinearOperator] = None) -> float:
    """u^T W v for SPD weighting W (identity when W is None)."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ContractViolation(f"shape mismatch {u.shape} vs {v.shape}")
    if W is None:
        return float(np.dot(u, v))
    if W.shape != (u.size, u.size):
        raise ContractViolation(
            f"weight operator shape {W.shape} incompatible with vectors of length {u.size}"
        )
    return float(np.dot(u, W(v)))


def weighted_norm(v, W: Optional[LinearOperator] = None) -> float:
    val = weighted_inner(v, v, W)
    # guard tiny negative round-off from an SPD quadratic form
    return float(np.sqrt(max(val, 0.0)))


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float

    def require(self) -> np.ndarray:
        if not self.converged:
            raise ConvergenceFailure(
                f"CG stalled at relative residual {self.residual:.3e} "
                f"after {self.iterations} iterations",
                self.residual,
                self.iterations,
            )
        return self.x


def cg_solve(
    A: LinearOperator,
    b,
    tol: float = 1e-10,
    maxit: Optional[int] = None,
    x0=None,
) -> CGResult:
    """Conjugate gradients for SPD A; stops at ||Ax-b|| <= tol*||b||.

    Returns a :class:`CGResult`; non-convergence is reported on the result
    (``converged=False`` with the final residual) rather than raised, so
    callers that tolerate inexact solves can proceed.
    """
    b = as_vector(b, A.dim_in, "rhs")
    if maxit is None:
        maxit = 10 * A.dim_in
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b, dtype=float), True, 0, 0.0)
    x = np.zeros_like(b, dtype=float) if x0 is None else np.array(x0, dtype=float)
    r = b - A(x) if x0 is not None else b.astype(float, copy=True)
    p = r.copy()
    rr = np.dot(r, r)
    it = 0
    while np.sqrt(rr) > tol * bnorm and it < maxit:
        Ap = A(p)
        pAp = np.dot(p, Ap)
        if pAp <= 0:
            raise ContractViolation(
                "CG encountered non-positive curvature; operator is not SPD"
            )
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = np.dot(r, r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    residual = float(np.sqrt(rr) / bnorm)
    return CGResult(x, residual <= tol, it, residual)


def _gram(Y: np.ndarray, BY: np.ndarray) -> np.ndarray:
    G = Y.T @ BY
    return 0.5 * (G + G.T)


def b_orthonormalize(Y: np.ndarray, Bop: LinearOperator, drop_tol: float = 1e-12):
    """Return Q with span(Q) = span(Y) and Q^T B Q = I.

    Euclidean QR preconditioning (absorbs arbitrary column scaling from
    decaying spectra) followed by Cholesky of the B-Gram matrix and a second
    re-orthonormalization pass.  All three transforms are triangular, so
    leading columns of Q stay stable when Y is later extended; the randomized
    eigensolver relies on that for its matvec reuse.  Numerically dependent
    columns are dropped with a warning.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ContractViolation("Y must be a column block")
    Q = _euclidean_precondition(Y, drop_tol)
    for _ in range(2):
        if Q.shape[1] == 0:
            return Q
        BQ = Bop.apply_block(Q)
        G = _gram(Q, BQ)
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            Q = _drop_dependent_columns(Q, G, drop_tol)
            BQ = Bop.apply_block(Q)
            G = _gram(Q, BQ)
            if G.size == 0:
                return Q
            L = np.linalg.cholesky(G)
        Q = scipy.linalg.solve_triangular(L, Q.T, lower=True).T
    return Q


def _euclidean_precondition(Y: np.ndarray, drop_tol: float) -> np.ndarray:
    """Householder-QR orthonormalization, dropping dependent columns.

    A tiny R diagonal marks a column (numerically) dependent on its
    predecessors; dropping those keeps the surviving prefix unchanged.
    """
    if Y.shape[1] == 0:
        return Y.copy()
    Q, R = np.linalg.qr(Y)
    rdiag = np.abs(np.diag(R))
    scale = rdiag.max() if rdiag.size else 0.0
    if scale == 0.0:
        warnings.warn(
            f"dropping {Y.shape[1]} numerically dependent column(s) during "
            "B-orthonormalization",
            RankDeficiencyWarning,
            stacklevel=3,
        )
        return np.empty((Y.shape[0], 0))
    bad = rdiag <= drop_tol * scale
    if not np.any(bad):
        return Q
    warnings.warn(
        f"dropping {int(bad.sum())} numerically dependent column(s) during "
        "B-orthonormalization",
        RankDeficiencyWarning,
        stacklevel=3,
    )
    Q2, _ = np.linalg.qr(Y[:, ~bad])
    return Q2


def _drop_dependent_columns(Y, G, drop_tol):
    w, U = np.linalg.eigh(G)
    scale = max(w.max(), 0.0)
    keep = w > drop_tol * max(scale, 1.0)
    n_drop = int(np.count_nonzero(~keep))
    warnings.warn(
        f"dropping {n_drop} numerically dependent column(s) during "
        "B-orthonormalization",
        RankDeficiencyWarning,
        stacklevel=3,
    )
    if not np.any(keep):
        return np.empty((Y.shape[0], 0))
    # well-conditioned basis for the retained subspace
    return Y @ (U[:, keep] / np.sqrt(w[keep]))


@dataclass
class DensePair:
    """Eigendecomposition T = S diag(eigenvalues) S^T, eigenvalues descending."""

    T: np.ndarray
    S: np.ndarray
    eigenvalues: np.ndarray


def dense_sym_eig(T, skew_tol: float = 1e-12) -> DensePair:
    """Descending eigendecomposition of a small symmetric matrix."""
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ContractViolation("T must be square")
    if T.size:
        scale = max(np.abs(T).max(), 1.0)
        if np.abs(T - T.T).max() > skew_tol * scale:
            raise ContractViolation("matrix is not symmetric within tolerance")
    Tsym = 0.5 * (T + T.T)
    w, S = np.linalg.eigh(Tsym)
    order = np.argsort(w)[::-1]
    w = w[order]
    S = S[:, order]
    # deterministic sign: largest-magnitude entry of each eigenvector positive
    for j in range(S.shape[1]):
        k = np.argmax(np.abs(S[:, j]))
        if S[k, j] < 0:
            S[:, j] = -S[:, j]
    return DensePair(T=Tsym, S=S, eigenvalues=w)


def check_linearity(op: LinearOperator, rng, n_probes: int = 20, rtol: float = 1e-12):
    """Max relative violation of A(au+bv) = aAu + bAv over random probes."""
    worst = 0.0
    for _ in range(n_probes):
        u = rng.standard_normal(op.dim_in)
        v = rng.standard_normal(op.dim_in)
        a, b = rng.standard_normal(2)
        lhs = op(a * u + b * v)
        rhs = a * op(u) + b * op(v)
        scale = np.linalg.norm(rhs) + 1.0
        worst = max(worst, np.linalg.norm(lhs - rhs) / scale)
    return worst, worst <= rtol


def check_symmetry(op: LinearOperator, rng, n_probes: int = 20, rtol: float = 1e-10):
    """Max |<Av,w> - <v,Aw>| / (||v|| ||w||) over random probes."""
    if op.dim_in != op.dim_out:
        raise ContractViolation("symmetry check requires a square operator")
    worst = 0.0
    for _ in range(n_probes):
        v = rng.standard_normal(op.dim_in)
        w = rng.standard_normal(op.dim_in)
        gap = abs(np.dot(op(v), w) - np.dot(v, op(w)))
        worst = max(worst, gap / (np.linalg.norm(v) * np.linalg.norm(w)))
    return worst, worst <= rtol


def save_csv(path, array) -> None:
    """Row-major CSV with a '# rows cols' header line."""
    a = np.atleast_2d(np.asarray(array, dtype=float))
    with open(path, "w") as fh:
        fh.write(f"# {a.shape[0]} {a.shape[1]}\n")
        for row in a:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ContractViolation(f"{path}: missing dimension header")
        rows, cols = (int(t) for t in header[1:].split())
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (rows, cols):
        raise ContractViolation(
            f"{path}: header says {(rows, cols)}, data is {data.shape}"
        )
    return data if rows > 1 else data.reshape(rows, cols)
