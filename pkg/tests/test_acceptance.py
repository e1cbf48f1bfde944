"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
summary lines.  Criteria 7 and 8 run the full tracer machinery and dominate
the runtime (a few minutes end to end).
"""

import time

import numpy as np
import pytest
import scipy.linalg

from lishdsa import hdsa, lis, optim, tracer, updates
from lishdsa.linops import MatrixOperator
from lishdsa.lis import GevpBasis, GevpConfig, dense_gevp, randomized_gevp, truncate
from lishdsa.problem import fd_mixed_col, random_quadratic
from lishdsa.verify import mc_l1_norm, sample_candidate_update


def report(criterion: str, passed: bool, detail: str):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(line)
    assert passed, line


def leading_basis(HM, HR, r=None, lambda_min=None):
    full = dense_gevp(HM, HR)
    keep = (
        full.eigenvalues >= lambda_min
        if lambda_min is not None
        else np.arange(full.eigenvalues.size) < r
    )
    return GevpBasis(
        eigenvalues=full.eigenvalues[keep],
        vectors=full.vectors[:, keep],
        lambda_min=float(lambda_min if lambda_min is not None else full.eigenvalues[r - 1]),
    )


def test_criterion_1_index_formula_equivalence():
    """Low-rank index formula vs direct solve path, 20 random SPD instances."""
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(20, 201))
        n = int(rng.integers(1, 21))
        model = random_quadratic(m, n, seed=seed, misfit_rank=max(2, m // 2))
        r = int(rng.integers(1, max(2, m // 3)))
        basis = leading_basis(model.misfit_hessian(), model.reg_hessian(), r=r)
        B = model.mixed_block()
        S = hdsa.sensitivity_indices(basis, B, model.Wz)
        S_direct = hdsa.sensitivity_indices_direct(
            model.hessian_operator(), B, basis, model.reg_hessian_operator(),
            model.Wz, cg_tol=1e-13,
        )
        scale = np.maximum(np.abs(S_direct), 1e-10)
        worst = max(worst, float(np.max(np.abs(S - S_direct) / scale)))
    elapsed = time.perf_counter() - t0
    report(
        "1 (index formula equivalence)",
        worst <= 1e-6 and elapsed < 30.0,
        f"max rel err {worst:.2e} (tol 1e-6), runtime {elapsed:.1f}s (< 30s)",
    )


def test_criterion_2_spectral_inverse_identity():
    """Full-spectrum low-rank representation of the Hessian inverse."""
    worst = 0.0
    for seed in range(5):
        m = 40 + 15 * seed  # up to 100
        model = random_quadratic(m, 3, seed=seed, misfit_rank=m // 2)
        HM, HR = model.misfit_hessian(), model.reg_hessian()
        full = dense_gevp(HM, HR)
        lam, V = full.eigenvalues, full.vectors
        rep = np.linalg.inv(HR) - (V * (lam / (1 + lam))) @ V.T
        Hinv = np.linalg.inv(HM + HR)
        worst = max(
            worst, np.linalg.norm(rep - Hinv, "fro") / np.linalg.norm(Hinv, "fro")
        )
    report(
        "2 (spectral inverse identity)",
        worst <= 1e-8,
        f"max Frobenius rel err {worst:.2e} (tol 1e-8)",
    )


def test_criterion_3_randomized_eigensolver_accuracy():
    """Randomized pencil solver vs dense oracle over 10 seeds, p = 20."""
    worst_eig, worst_angle = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        m = int(rng.integers(80, 201))
        L = rng.standard_normal((m, m)) / np.sqrt(m)
        HR = L @ L.T + np.eye(m)
        lam_true = 60.0 * 0.55 ** np.arange(m)
        U, _ = np.linalg.qr(rng.standard_normal((m, m)))
        R = np.linalg.cholesky(HR)
        HM = R @ (U * lam_true) @ U.T @ R.T
        HM = 0.5 * (HM + HM.T)
        cfg = GevpConfig(oversampling=20, r0=4, dr=4, lambda_min=1.0, seed=seed)
        basis = randomized_gevp(MatrixOperator(HM), MatrixOperator(HR, spd=True), cfg)
        oracle = dense_gevp(HM, HR)
        r_cmp = int(np.count_nonzero(oracle.eigenvalues >= cfg.lambda_min))
        est, ref = basis.eigenvalues[:r_cmp], oracle.eigenvalues[:r_cmp]
        worst_eig = max(worst_eig, float(np.max(np.abs(est - ref) / np.abs(ref))))
        angles = scipy.linalg.subspace_angles(
            R.T @ basis.vectors[:, :r_cmp], R.T @ oracle.vectors[:, :r_cmp]
        )
        worst_angle = max(worst_angle, float(angles.max()))
    report(
        "3 (randomized eigensolver)",
        worst_eig <= 1e-6 and worst_angle <= 1e-4,
        f"max eig rel err {worst_eig:.2e} (tol 1e-6), "
        f"max principal angle {worst_angle:.2e} (tol 1e-4)",
    )


def test_criterion_4_first_order_update():
    """Stationarity restoration, nonnegativity, norm, and optimality."""
    rng = np.random.default_rng(4)

    # stationarity to 1e-12 * ||g|| per component
    g = rng.standard_normal(40)
    z_star = rng.standard_normal(40)
    spec = updates.first_order_update(g, updates.default_alpha(z_star), z_star)
    stat_err = np.abs(g + spec.gradient(z_star)).max() / np.linalg.norm(g)

    # nonnegativity on 1e4 random points
    pts = z_star + 3.0 * rng.standard_normal((10_000, 40))
    nonneg = all(spec.value(p) >= 0.0 for p in pts)

    # closed-form norm vs Monte Carlo, m = 3, 1e5 samples, 2 percent
    g3 = np.array([0.8, -1.1, 0.5])
    z3 = np.array([0.2, 0.0, -0.4])
    spec3 = updates.first_order_update(g3, 0.6, z3)
    est, _ = mc_l1_norm(spec3.value, z3, 0.6, 100_000, np.random.default_rng(44))
    mc_gap = abs(est - updates.update_norm(spec3)) / updates.update_norm(spec3)

    # optimality against 100 sampled feasible competitors
    m = 5
    g5 = rng.standard_normal(m)
    z5 = rng.standard_normal(m)
    alpha5 = 1.1
    best = updates.update_norm(updates.first_order_update(g5, alpha5, z5))
    violations = 0
    for _ in range(100):
        rank = int(rng.integers(1, m + 1))
        value_fn, _, _ = sample_candidate_update(g5, z5, rank, rng)
        cand, se = mc_l1_norm(value_fn, z5, alpha5, 20_000, rng)
        if best > cand + 3 * se:
            violations += 1
    report(
        "4 (first-order update)",
        stat_err <= 1e-12 and nonneg and mc_gap <= 0.02 and violations == 0,
        f"stationarity {stat_err:.1e} (tol 1e-12), nonneg {nonneg}, "
        f"MC norm gap {mc_gap:.3%} (tol 2%), optimality violations {violations}/100",
    )


def test_criterion_5_perturbation_bounds():
    """Index-change bound and its alpha-robustness version, 20 instances."""
    worst_slack = -np.inf
    worst_beta_slack = -np.inf
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        m = int(rng.integers(10, 31))
        n = int(rng.integers(2, 8))
        model = random_quadratic(m, n, seed=seed, misfit_rank=max(2, m // 2))
        theta = np.zeros(n)
        z_star = model.solve_optimal(theta) + 0.3 * rng.standard_normal(m)
        HM, HR, B = model.misfit_hessian(), model.reg_hessian(), model.mixed_block()
        H = HM + HR
        g = model.gradient_z(z_star, theta)
        gnorm = np.linalg.norm(g)
        alpha = updates.default_alpha(z_star)
        basis = leading_basis(HM, HR, lambda_min=1.0)
        if basis.r == 0:
            basis = leading_basis(HM, HR, r=1)
        P = lambda M: basis.vectors @ (basis.vectors.T @ (HR @ M))
        X = np.linalg.solve(H, B)
        denom = np.linalg.norm(X, axis=0)
        S = np.linalg.norm(P(X), axis=0)

        def indices(a):
            Ha = H + np.outer(g, g) / (a * gnorm)
            return np.linalg.norm(P(np.linalg.solve(Ha, B)), axis=0)

        diag = hdsa.update_diagnostics(
            g, lambda b: np.linalg.solve(H, b), basis,
            MatrixOperator(HR, spd=True), None, alpha,
        )
        lhs = np.abs(indices(alpha) - S) / denom
        worst_slack = max(worst_slack, float((lhs - diag.bound).max()))

        base = indices(alpha)
        for row in hdsa.alpha_robustness(diag, (-0.9, -0.5, -0.1, 0.1, 0.5, 0.9)):
            lhs_b = np.abs(indices(alpha * (1 + row["beta"])) - base) / denom
            worst_beta_slack = max(worst_beta_slack, float((lhs_b - row["bound"]).max()))
    report(
        "5 (perturbation bounds)",
        worst_slack <= 1e-12 and worst_beta_slack <= 1e-12,
        f"worst bound violation {worst_slack:.2e}, "
        f"worst alpha-sweep violation {worst_beta_slack:.2e} (both <= 0)",
    )


def test_criterion_6_definiteness_and_shifts():
    """PD iff min generalized eigenvalue > -1; shifts move only their pair."""
    pd_ok = True
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        m = int(rng.integers(5, 40))
        L = rng.standard_normal((m, m)) / np.sqrt(m)
        HR = L @ L.T + np.eye(m)
        R = np.linalg.cholesky(HR)
        U, _ = np.linalg.qr(rng.standard_normal((m, m)))
        margin = 1e-6 if seed % 2 == 0 else -1e-6
        lam = np.sort(rng.uniform(-0.9, 3.0, size=m))[::-1]
        lam[-1] = -1.0 + margin
        HM = R @ (U * lam) @ U.T @ R.T
        HM = 0.5 * (HM + HM.T)
        gen = np.sort(scipy.linalg.eigh(HM, HR, eigvals_only=True))[::-1]
        pd = bool(np.linalg.eigvalsh(HM + HR).min() > 0)
        pd_ok = pd_ok and (pd == (margin > 0)) and (
            updates.is_second_order_satisfied(gen) == pd
        )

    shift_ok = True
    worst_move = 0.0
    for seed in range(10):
        rng = np.random.default_rng(660 + seed)
        m = int(rng.integers(5, 30))
        L = rng.standard_normal((m, m)) / np.sqrt(m)
        HR = L @ L.T + np.eye(m)
        A = rng.standard_normal((m, m))
        HM = 0.5 * (A + A.T) - 1.6 * HR
        lam, V = scipy.linalg.eigh(HM, HR)
        lam, V = lam[::-1], V[:, ::-1]
        shift = updates.second_order_shift(lam, epsilon=1e-6)
        if shift.empty:
            continue
        HM_new = updates.shifted_misfit_hessian_dense(HM, HR, V, shift)
        lam_new = np.sort(scipy.linalg.eigh(HM_new, HR, eigvals_only=True))[::-1]
        expected = lam.copy()
        expected[shift.indices] = -1.0 + shift.epsilon
        move_err = np.abs(np.sort(lam_new) - np.sort(expected)).max()
        worst_move = max(worst_move, move_err / max(1.0, np.abs(lam).max()))
        shift_ok = shift_ok and move_err <= 1e-8 * max(1.0, np.abs(lam).max())
        shift_ok = shift_ok and bool(np.linalg.eigvalsh(HM_new + HR).min() > 0)
    report(
        "6 (definiteness and shifts)",
        pd_ok and shift_ok,
        f"PD characterization at -1 +/- 1e-6 consistent: {pd_ok}; "
        f"shift action max relative eigenvalue error {worst_move:.2e} (tol 1e-8)",
    )


def test_criterion_7_tracer_derivatives():
    """Adjoint gradient, Hessian symmetry and mixed columns on 16x16."""
    t0 = time.perf_counter()
    cfg = tracer.TracerConfig(
        mesh_coarse=16, mesh_fine=32, n_steps_coarse=10, n_steps_fine=20, seed=0
    )
    data = tracer.generate_data(cfg)
    prob = tracer.TracerProblem(cfg, data)
    rng = np.random.default_rng(7)
    x, y = prob.mesh.coords[:, 0], prob.mesh.coords[:, 1]
    z = 0.3 * np.sin(2 * np.pi * x) * np.cos(np.pi * y) + 0.1
    theta = 0.1 * rng.standard_normal(prob.n)

    g = prob.gradient_z(z, theta)
    grad_err = 0.0
    for _ in range(10):
        v = rng.standard_normal(prob.m)
        v /= np.linalg.norm(v)
        h = 1e-5
        fd = (prob.objective(z + h * v, theta) - prob.objective(z - h * v, theta)) / (2 * h)
        grad_err = max(grad_err, abs(g @ v - fd) / max(abs(fd), 1e-30))

    sym_err = 0.0
    for _ in range(5):
        v, w = rng.standard_normal((2, prob.m))
        hv = prob.hess_misfit_vec(z, theta, v)
        hw = prob.hess_misfit_vec(z, theta, w)
        sym_err = max(
            sym_err, abs(hv @ w - v @ hw) / (np.linalg.norm(hv) * np.linalg.norm(w))
        )

    col_err = 0.0
    for i in (0, 21, 2 * 21 + 40, prob.n - 1):
        col = prob.mixed_jacobian_col(z, theta, i)
        col_fd = fd_mixed_col(prob, z, theta, i)
        col_err = max(
            col_err, np.linalg.norm(col - col_fd) / max(np.linalg.norm(col_fd), 1e-30)
        )
    elapsed = time.perf_counter() - t0
    report(
        "7 (tracer derivatives)",
        grad_err <= 1e-4 and sym_err <= 1e-8 and col_err <= 1e-3 and elapsed < 300,
        f"gradient FD {grad_err:.2e} (tol 1e-4), symmetry {sym_err:.2e} (tol 1e-8), "
        f"B columns FD {col_err:.2e} (tol 1e-3), runtime {elapsed:.0f}s (< 300s)",
    )


def test_criterion_8_desk_scale_qualitative():
    """End-to-end 32x32 run: spectrum decay, ranking stability, block order,
    projected Newton-step smallness."""
    t0 = time.perf_counter()
    cfg = tracer.TracerConfig()
    data = tracer.generate_data(cfg)
    prob = tracer.TracerProblem(cfg, data)
    theta0 = np.zeros(prob.n)
    # early termination at a 1e-4 relative gradient drop: the motivating
    # scenario leaves a genuinely suboptimal iterate for the updates to fix
    g0 = float(np.linalg.norm(prob.gradient_z(prob.initial_iterate(), theta0)))
    sol = optim.trust_region_solve(
        prob,
        prob.initial_iterate(),
        theta0,
        optim.TrustRegionOptions(max_iter=75, gtol=1e-4 * g0),
    )
    rep = hdsa.run_pipeline(
        prob,
        theta0,
        z_star=sol.z,
        gevp_cfg=GevpConfig(oversampling=20, r0=8, dr=8, seed=0, max_rank=500),
        lambda_headline=1.0,
        lambda_sweep=(0.1, 0.5, 1.0, 2.0),
    )
    elapsed = time.perf_counter() - t0

    lam = rep.eigenvalues
    positive = lam[lam > 0]
    decay_orders = np.log10(positive.max() / positive.min())
    a_ok = decay_orders >= 3.0 and 10 <= rep.r <= 100

    # ranking stability across the swept thresholds: the same blocks stay
    # largest and smallest
    groups = np.array(rep.groups)
    largest_blocks, smallest_blocks = set(), set()
    for entry in rep.sweep:
        if entry.lambda_min not in (0.5, 1.0, 2.0):
            continue
        block_max = {
            grp: entry.indices[groups == grp].max()
            for grp in ("boundary-right", "boundary-left", "source-site", "diffusion")
        }
        ranked = sorted(block_max, key=block_max.get)
        largest_blocks.add(ranked[-1])
        smallest_blocks.add(ranked[0])
    b_ok = len(largest_blocks) == 1 and len(smallest_blocks) == 1

    right = rep.indices[groups == "boundary-right"].max()
    left = rep.indices[groups == "boundary-left"].max()
    c_ok = right > left

    d = rep.diagnostics
    ratio = d.pn_norm / max(d.n_norm, 1e-300)
    d_ok = ratio <= 1e-2

    # solver run properties: monotone accepted objectives, gradient norm
    # down at least one order of magnitude
    objs = [r.objective for r in sol.history if r.accepted]
    monotone = all(objs[i + 1] <= objs[i] + 1e-12 for i in range(len(objs) - 1))
    grad_drop = sol.history[0].grad_norm / sol.history[-1].grad_norm
    solver_ok = monotone and grad_drop >= 10.0

    report(
        "8 (desk-scale qualitative)",
        a_ok and b_ok and c_ok and d_ok and solver_ok and elapsed < 1800,
        f"(a) spectrum decays {decay_orders:.1f} orders, r={rep.r}; "
        f"(b) largest/smallest blocks stable: {largest_blocks}/{smallest_blocks}; "
        f"(c) x=1 boundary max {right:.3g} > x=0 max {left:.3g}; "
        f"(d) ||Pn||/||n|| = {ratio:.2e} (tol 1e-2); "
        f"solver monotone={monotone}, gradient dropped {grad_drop:.1e}x; "
        f"runtime {elapsed:.0f}s (< 1800s)",
    )


def test_criterion_9_matvec_accounting():
    """The eigensolver spends exactly 2(r + p) misfit-Hessian products."""
    ok = True
    details = []
    for r0, dr, lam_min, seed in ((4, 4, 1.0, 0), (2, 3, 0.2, 1), (8, 8, 1.0, 2)):
        rng = np.random.default_rng(900 + seed)
        m = 120
        L = rng.standard_normal((m, m)) / np.sqrt(m)
        HR = L @ L.T + np.eye(m)
        lam_true = 40.0 * 0.55 ** np.arange(m)
        U, _ = np.linalg.qr(rng.standard_normal((m, m)))
        R = np.linalg.cholesky(HR)
        HM = R @ (U * lam_true) @ U.T @ R.T
        HM = 0.5 * (HM + HM.T)
        cfg = GevpConfig(oversampling=20, r0=r0, dr=dr, lambda_min=lam_min, seed=seed)
        basis = randomized_gevp(MatrixOperator(HM), MatrixOperator(HR, spd=True), cfg)
        expected = 2 * (basis.r + cfg.oversampling)
        ok = ok and basis.hm_applications == expected
        details.append(f"r={basis.r}: {basis.hm_applications} (expected {expected})")
    report("9 (matvec accounting)", ok, "; ".join(details))
