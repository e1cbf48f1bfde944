"""Self-verification suites: oracle comparisons and theorem-style identities.

Every check pits an implementation path against an independent reference
(dense factorizations, finite differences, Monte Carlo) and returns a
pass/fail row.  The CLI ``verify`` command runs these and exits nonzero on
any failure; the test suite reuses the same functions.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
import scipy.linalg

from . import hdsa, lis, updates
from .linops import MatrixOperator
from .problem import (
    QuadraticModel,
    fd_gradient,
    fd_hess_vec,
    fd_mixed_col,
    random_quadratic,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


def sample_candidate_update(g, z_star, rank, rng):
    """Random feasible competitor for the first-order update optimality test.

    Builds a rank-`rank` PSD Hessian whose range contains g, with the offset
    chosen so the quadratic is nonnegative with minimum value zero: exactly
    the feasible set the closed-form update minimizes over.  Returns
    (value_fn, hessian, offset).
    """
    g = np.asarray(g, dtype=float)
    z_star = np.asarray(z_star, dtype=float)
    m = g.size
    gnorm = np.linalg.norm(g)
    # orthonormal frame whose first column spans g
    Q, _ = np.linalg.qr(
        np.column_stack([g / gnorm, rng.standard_normal((m, max(rank - 1, 0)))])
    )
    sigmas = rng.uniform(0.2, 5.0, size=Q.shape[1])
    A = (Q * sigmas) @ Q.T
    A_pinv_g = Q @ ((Q.T @ g) / sigmas)
    offset = 0.5 * float(g @ A_pinv_g)  # makes min value zero

    def value(z):
        w = np.asarray(z) - z_star
        return 0.5 * float(w @ A @ w) - float(w @ g) + offset

    return value, A, offset


def mc_l1_norm(value_fn, z_star, alpha, n_samples, rng):
    """Monte Carlo L1 norm against the Gaussian N(z*, alpha^2 I)."""
    z_star = np.asarray(z_star, dtype=float)
    samples = z_star + alpha * rng.standard_normal((n_samples, z_star.size))
    vals = np.array([abs(value_fn(s)) for s in samples])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


# -- individual checks -----------------------------------------------------------


def check_gradient_fd(problem, z, theta, tol=1e-6, name="gradient vs finite differences"):
    g = problem.gradient_z(z, theta)
    g_fd = fd_gradient(problem, z, theta)
    err = np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-30)
    return CheckResult(name, err <= tol, f"rel err {err:.2e} (tol {tol:g})")


def check_gradient_fd_directional(
    problem, z, theta, n_dirs=10, tol=1e-4, seed=0, name="adjoint gradient vs FD"
):
    rng = np.random.default_rng(seed)
    g = problem.gradient_z(z, theta)
    worst = 0.0
    for _ in range(n_dirs):
        v = rng.standard_normal(problem.m)
        v /= np.linalg.norm(v)
        h = 1e-5
        jp = problem.objective(np.asarray(z) + h * v, theta)
        jm = problem.objective(np.asarray(z) - h * v, theta)
        fd = (jp - jm) / (2 * h)
        an = float(np.dot(g, v))
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-30))
    return CheckResult(name, worst <= tol, f"worst rel err {worst:.2e} (tol {tol:g})")


def check_hessvec_symmetry(problem, z, theta, n_probes=5, tol=1e-8, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        v = rng.standard_normal(problem.m)
        w = rng.standard_normal(problem.m)
        hv = problem.hess_misfit_vec(z, theta, v)
        hw = problem.hess_misfit_vec(z, theta, w)
        num = abs(np.dot(hv, w) - np.dot(v, hw))
        den = np.linalg.norm(hv) * np.linalg.norm(w) + 1e-30
        worst = max(worst, num / den)
    return CheckResult(
        "misfit Hessian symmetry", worst <= tol, f"worst rel gap {worst:.2e} (tol {tol:g})"
    )


def check_hessvec_fd(problem, z, theta, n_dirs=3, tol=1e-3, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_dirs):
        v = rng.standard_normal(problem.m)
        v /= np.linalg.norm(v)
        hv = problem.hess_vec(z, theta, v)
        hv_fd = fd_hess_vec(problem, z, theta, v)
        worst = max(worst, np.linalg.norm(hv - hv_fd) / max(np.linalg.norm(hv_fd), 1e-30))
    return CheckResult(
        "Hessian-vector vs FD of gradient", worst <= tol, f"worst rel err {worst:.2e} (tol {tol:g})"
    )


def check_mixed_col_fd(problem, z, theta, cols, tol=1e-3, seed=0):
    worst = 0.0
    for i in cols:
        b = problem.mixed_jacobian_col(z, theta, i)
        b_fd = fd_mixed_col(problem, z, theta, i)
        scale = max(np.linalg.norm(b_fd), 1e-30)
        worst = max(worst, np.linalg.norm(b - b_fd) / scale)
    return CheckResult(
        "mixed-Jacobian columns vs FD", worst <= tol, f"worst rel err {worst:.2e} (tol {tol:g})"
    )


def check_equivalence_identity(m=40, n=8, r=None, seed=0, tol=1e-6):
    """Closed-form indices against the solve-project-norm oracle path."""
    rng = np.random.default_rng(seed)
    model = random_quadratic(m, n, seed=seed, misfit_rank=max(m // 2, 2))
    r = r if r is not None else int(rng.integers(1, m // 2))
    basis_full = lis.dense_gevp(model.misfit_hessian(), model.reg_hessian())
    basis = lis.GevpBasis(
        eigenvalues=basis_full.eigenvalues[:r],
        vectors=basis_full.vectors[:, :r],
        lambda_min=float(basis_full.eigenvalues[r - 1]),
    )
    B = model.mixed_block()
    HR_op = model.reg_hessian_operator()
    S_formula = hdsa.sensitivity_indices(basis, B, model.Wz)
    S_direct = hdsa.sensitivity_indices_direct(
        model.hessian_operator(), B, basis, HR_op, model.Wz, cg_tol=1e-13
    )
    scale = np.maximum(np.abs(S_direct), 1e-12)
    err = float(np.max(np.abs(S_formula - S_direct) / scale))
    return CheckResult(
        "index formula vs direct solve path", err <= tol, f"max rel err {err:.2e} (tol {tol:g})"
    )


def check_smw_identity(m=60, seed=0, tol=1e-8):
    """Full-spectrum low-rank representation of the Hessian inverse."""
    model = random_quadratic(m, 4, seed=seed, misfit_rank=m // 2)
    HM, HR = model.misfit_hessian(), model.reg_hessian()
    basis = lis.dense_gevp(HM, HR)
    lam, V = basis.eigenvalues, basis.vectors
    Hinv = np.linalg.inv(HM + HR)
    HRinv = np.linalg.inv(HR)
    rep = HRinv - (V * (lam / (1.0 + lam))) @ V.T
    err = np.linalg.norm(Hinv - rep, "fro") / np.linalg.norm(Hinv, "fro")
    return CheckResult(
        "spectral inverse identity", err <= tol, f"Frobenius rel err {err:.2e} (tol {tol:g})"
    )


def check_gevp_accuracy(m=120, seed=0, tol_eig=1e-6, tol_angle=1e-4):
    """Randomized eigensolver against a constructed dense pencil."""
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((m, m)) / np.sqrt(m)
    HR = L @ L.T + np.eye(m)
    lam_true = 50.0 * 0.6 ** np.arange(m)
    U, _ = np.linalg.qr(rng.standard_normal((m, m)))
    R = np.linalg.cholesky(HR)
    HM = R @ (U * lam_true) @ U.T @ R.T
    HM = 0.5 * (HM + HM.T)

    cfg = lis.GevpConfig(oversampling=20, r0=4, dr=4, lambda_min=1.0, seed=seed + 1)
    basis = lis.randomized_gevp(MatrixOperator(HM), MatrixOperator(HR, spd=True), cfg)
    oracle = lis.dense_gevp(HM, HR)

    r_cmp = int(np.count_nonzero(oracle.eigenvalues >= cfg.lambda_min))
    est = basis.eigenvalues[:r_cmp]
    ref = oracle.eigenvalues[:r_cmp]
    eig_err = float(np.max(np.abs(est - ref) / np.abs(ref)))

    Rh = scipy.linalg.cholesky(HR, lower=True)
    ang = scipy.linalg.subspace_angles(
        Rh.T @ basis.vectors[:, :r_cmp], Rh.T @ oracle.vectors[:, :r_cmp]
    )
    max_angle = float(np.max(ang)) if ang.size else 0.0
    ok = eig_err <= tol_eig and max_angle <= tol_angle
    return CheckResult(
        "randomized eigensolver vs dense pencil",
        ok,
        f"eig rel err {eig_err:.2e}, max principal angle {max_angle:.2e}",
    )


def check_update_bound(m=20, n=5, seed=0):
    """Perturbation bound for the first-order update on a dense SPD instance."""
    rng = np.random.default_rng(seed)
    model = random_quadratic(m, n, seed=seed, misfit_rank=m // 2)
    theta = np.zeros(n)
    z_opt = model.solve_optimal(theta)
    z_star = z_opt + 0.3 * rng.standard_normal(m)

    HM, HR, B = model.misfit_hessian(), model.reg_hessian(), model.mixed_block()
    H = HM + HR
    g = model.gradient_z(z_star, theta)
    alpha = updates.default_alpha(z_star)
    Ht = H + np.outer(g, g) / (alpha * np.linalg.norm(g))

    basis_full = lis.dense_gevp(HM, HR)
    r = max(int(np.count_nonzero(basis_full.eigenvalues >= 1.0)), 1)
    basis = lis.GevpBasis(
        eigenvalues=basis_full.eigenvalues[:r],
        vectors=basis_full.vectors[:, :r],
        lambda_min=1.0,
    )
    # identity z-weighting: matches the norm algebra the bound is proved in
    HR_op = MatrixOperator(HR, spd=True)

    X = np.linalg.solve(H, B)
    Xt = np.linalg.solve(Ht, B)
    P = lambda M: basis.vectors @ (basis.vectors.T @ (HR @ M))
    S = np.linalg.norm(P(X), axis=0)
    St = np.linalg.norm(P(Xt), axis=0)
    denom = np.linalg.norm(X, axis=0)

    diag = hdsa.update_diagnostics(
        g, lambda b: np.linalg.solve(H, b), basis, HR_op, None, alpha
    )
    lhs = np.abs(St - S) / denom
    ok = bool(np.all(lhs <= diag.bound * (1 + 1e-10) + 1e-14))
    return CheckResult(
        "first-order update perturbation bound",
        ok,
        f"max lhs {lhs.max():.3e} vs bound {diag.bound:.3e}",
    )


def check_alpha_bound(m=20, n=5, seed=0, betas=(-0.5, 0.5)):
    """Length-scale robustness bound via dense two-run comparison."""
    rng = np.random.default_rng(seed)
    model = random_quadratic(m, n, seed=seed, misfit_rank=m // 2)
    theta = np.zeros(n)
    z_star = model.solve_optimal(theta) + 0.3 * rng.standard_normal(m)
    HM, HR, B = model.misfit_hessian(), model.reg_hessian(), model.mixed_block()
    H = HM + HR
    g = model.gradient_z(z_star, theta)
    gnorm = np.linalg.norm(g)
    alpha = updates.default_alpha(z_star)

    basis_full = lis.dense_gevp(HM, HR)
    r = max(int(np.count_nonzero(basis_full.eigenvalues >= 1.0)), 1)
    basis = lis.GevpBasis(
        eigenvalues=basis_full.eigenvalues[:r],
        vectors=basis_full.vectors[:, :r],
        lambda_min=1.0,
    )
    HR_op = MatrixOperator(HR, spd=True)
    P = lambda M: basis.vectors @ (basis.vectors.T @ (HR @ M))
    denom = np.linalg.norm(np.linalg.solve(H, B), axis=0)

    def indices(a):
        Ha = H + np.outer(g, g) / (a * gnorm)
        return np.linalg.norm(P(np.linalg.solve(Ha, B)), axis=0)

    diag = hdsa.update_diagnostics(
        g, lambda b: np.linalg.solve(H, b), basis, HR_op, None, alpha
    )
    base = indices(alpha)
    ok = True
    worst = 0.0
    for row in hdsa.alpha_robustness(diag, betas):
        beta, bound = row["beta"], row["bound"]
        lhs = np.abs(indices(alpha * (1 + beta)) - base) / denom
        worst = max(worst, float(lhs.max() - bound))
        ok = ok and bool(np.all(lhs <= bound + 1e-14))
    return CheckResult(
        "alpha-robustness bound", ok, f"worst (lhs - bound) {worst:.3e}"
    )


def check_pd_characterization(m=12, seed=0):
    """PD of H_M + H_R iff all generalized eigenvalues exceed -1."""
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((m, m)) / np.sqrt(m)
    HR = L @ L.T + np.eye(m)
    R = np.linalg.cholesky(HR)
    U, _ = np.linalg.qr(rng.standard_normal((m, m)))
    ok = True
    for margin, expect_pd in ((1e-6, True), (-1e-6, False)):
        lam = np.sort(rng.uniform(-0.9, 3.0, size=m))[::-1]
        lam[-1] = -1.0 + margin
        HM = R @ (U * lam) @ U.T @ R.T
        HM = 0.5 * (HM + HM.T)
        min_eig = float(np.linalg.eigvalsh(HM + HR).min())
        gen = np.sort(scipy.linalg.eigh(HM, HR, eigvals_only=True))[::-1]
        pred = updates.is_second_order_satisfied(gen)
        ok = ok and (min_eig > 0) == expect_pd and pred == expect_pd
    return CheckResult("PD characterization at the -1 boundary", ok, "both margins consistent")


def check_shift_action(m=10, seed=0, tol=1e-8):
    """Rank-one shifts move one eigenpair and leave the rest unchanged."""
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((m, m)) / np.sqrt(m)
    HR = L @ L.T + np.eye(m)
    HM_raw = rng.standard_normal((m, m))
    HM = 0.5 * (HM_raw + HM_raw.T) - 1.5 * HR  # force eigenvalues below -1
    lam, V = scipy.linalg.eigh(HM, HR)
    lam, V = lam[::-1], V[:, ::-1]
    shift = updates.second_order_shift(lam, epsilon=1e-8)
    if shift.empty:
        return CheckResult("second-order shift action", False, "instance had no shiftable pair")
    HM_shifted = updates.shifted_misfit_hessian_dense(HM, HR, V, shift)
    lam_new = np.sort(scipy.linalg.eigh(HM_shifted, HR, eigvals_only=True))[::-1]
    expected = lam.copy()
    expected[shift.indices] = -1.0 + shift.epsilon
    err = float(np.max(np.abs(np.sort(lam_new) - np.sort(expected))))
    pd = bool(np.linalg.eigvalsh(HM_shifted + HR).min() > 0)
    ok = err <= tol and pd
    return CheckResult(
        "second-order shift action", ok, f"eigenvalue err {err:.2e}, shifted Hessian PD: {pd}"
    )


def check_update_optimality(m=6, n_candidates=20, seed=0, n_samples=20000):
    """Closed-form update never beaten by sampled feasible competitors."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(m)
    z_star = rng.standard_normal(m)
    alpha = 0.8
    best = updates.update_norm(updates.first_order_update(g, alpha, z_star))
    ok = True
    margin = np.inf
    for _ in range(n_candidates):
        rank = int(rng.integers(1, m + 1))
        value_fn, A, offset = sample_candidate_update(g, z_star, rank, rng)
        est, se = mc_l1_norm(value_fn, z_star, alpha, n_samples, rng)
        ok = ok and best <= est + 3 * se
        margin = min(margin, est + 3 * se - best)
    return CheckResult(
        "first-order update optimality", ok, f"min MC margin {margin:.3e} over {n_candidates} candidates"
    )


# -- suites ------------------------------------------------------------------------


def fast_suite(seed: int = 0) -> list[CheckResult]:
    model = random_quadratic(12, 4, seed=seed)
    theta = np.zeros(4)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(12)
    results = [
        check_gradient_fd(model, z, theta),
        check_equivalence_identity(m=40, n=6, seed=seed),
        check_smw_identity(m=40, seed=seed),
        check_gevp_accuracy(m=80, seed=seed),
        check_pd_characterization(seed=seed),
        check_shift_action(seed=seed),
        check_update_bound(seed=seed),
    ]
    results.append(_tracer_fd_checks(mesh=8, n_steps=6, seed=seed, n_dirs=3, quick=True))
    return results


def full_suite(seed: int = 0) -> list[CheckResult]:
    results = fast_suite(seed)
    results += [
        check_alpha_bound(seed=seed, betas=(-0.9, -0.5, -0.1, 0.1, 0.5, 0.9)),
        check_update_optimality(seed=seed),
        _tracer_fd_checks(mesh=16, n_steps=10, seed=seed, n_dirs=5, quick=False),
    ]
    for s in range(1, 4):
        results.append(check_equivalence_identity(m=60 + 10 * s, n=8, seed=s))
        results.append(check_gevp_accuracy(m=100 + 20 * s, seed=s))
    return results


def _tracer_fd_checks(mesh, n_steps, seed, n_dirs, quick):
    from .tracer import TracerConfig, TracerProblem, generate_data

    cfg = TracerConfig(
        mesh_coarse=mesh,
        mesh_fine=2 * mesh,
        n_steps_coarse=n_steps,
        n_steps_fine=2 * n_steps,
        seed=seed,
    )
    data = generate_data(cfg)
    prob = TracerProblem(cfg, data)
    rng = np.random.default_rng(seed)
    # smooth off-truth iterate: keeps the transport state physical so the
    # finite-difference oracle is not dominated by cancellation noise
    x, y = prob.mesh.coords[:, 0], prob.mesh.coords[:, 1]
    z = 0.3 * np.sin(2 * np.pi * x) * np.cos(np.pi * y) + 0.1
    theta = 0.1 * rng.standard_normal(prob.n)
    sub = [
        check_gradient_fd_directional(prob, z, theta, n_dirs=n_dirs, tol=1e-4),
        check_hessvec_symmetry(prob, z, theta, n_probes=2 if quick else 5),
    ]
    if not quick:
        sub.append(check_hessvec_fd(prob, z, theta, n_dirs=2))
        sub.append(check_mixed_col_fd(prob, z, theta, cols=[0, prob.n // 2, prob.n - 1]))
    ok = all(c.passed for c in sub)
    detail = "; ".join(c.row() for c in sub)
    label = f"tracer derivative checks ({mesh}x{mesh})"
    return CheckResult(label, ok, detail)


def run_suite(level: str = "fast", seed: int = 0) -> tuple[list[CheckResult], bool]:
    suite = fast_suite(seed) if level == "fast" else full_suite(seed)
    return suite, all(c.passed for c in suite)
