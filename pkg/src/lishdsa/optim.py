"""Trust-region solver with Steihaug-Toint truncated-CG subproblems.

Produces the (possibly early-terminated) iterate z* consumed by the
sensitivity pipeline.  Early termination is a feature here, not a failure
mode: the a-posteriori updates downstream are designed for iterates that do
not satisfy the optimality conditions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .problem import InverseProblem


@dataclass
class TrustRegionOptions:
    max_iter: int = 100
    gtol: float = 1e-8
    radius0: float = 1.0
    max_radius: float = 1e4
    eta_accept: float = 1e-4  # minimum reduction ratio to accept a step
    rho_low: float = 0.25
    rho_high: float = 0.75
    shrink: float = 0.25
    grow: float = 2.0
    cg_maxit: Optional[int] = None
    hessian_mode: str = "full"
    stagnation_tol: float = 0.0  # relative objective change; 0 disables


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    grad_norm: float
    step_norm: float
    radius: float
    rho: float
    accepted: bool
    cg_iterations: int


@dataclass
class TrustRegionResult:
    z: np.ndarray
    history: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    message: str = ""

    @property
    def n_iterations(self) -> int:
        return len(self.history) - 1 if self.history else 0


def _boundary_step(s, d, radius):
    """Positive tau with ||s + tau d|| = radius."""
    dd = float(np.dot(d, d))
    sd = float(np.dot(s, d))
    ss = float(np.dot(s, s))
    disc = max(sd * sd - dd * (ss - radius * radius), 0.0)
    return (-sd + np.sqrt(disc)) / dd


def steihaug_cg(hess_vec, g, radius, tol, maxit):
    """Approximately minimize 1/2 s^T H s + g^T s over ||s|| <= radius.

    Standard truncated CG: stops at the residual tolerance, at the boundary,
    or along a negative-curvature direction (stepped to the boundary).
    Returns (step, hit_boundary, iterations, negative_curvature_seen).
    """
    m = g.size
    s = np.zeros(m)
    r = g.copy()
    d = -r
    rr = float(np.dot(r, r))
    rnorm0 = np.sqrt(rr)
    if rnorm0 == 0.0:
        return s, False, 0, False
    for it in range(maxit):
        Hd = hess_vec(d)
        dHd = float(np.dot(d, Hd))
        if dHd <= 0.0:
            tau = _boundary_step(s, d, radius)
            return s + tau * d, True, it + 1, True
        alpha = rr / dHd
        s_next = s + alpha * d
        if np.linalg.norm(s_next) >= radius:
            tau = _boundary_step(s, d, radius)
            return s + tau * d, True, it + 1, False
        s = s_next
        r = r + alpha * Hd
        rr_new = float(np.dot(r, r))
        if np.sqrt(rr_new) <= tol * rnorm0:
            return s, False, it + 1, False
        d = -r + (rr_new / rr) * d
        rr = rr_new
    return s, False, maxit, False


def trust_region_solve(
    problem: InverseProblem,
    z0,
    theta,
    options: Optional[TrustRegionOptions] = None,
) -> TrustRegionResult:
    """Minimize J(z; theta) from z0; returns the iterate and the full history.

    Accepted steps never increase the objective.  Stops at the gradient
    tolerance, the iteration budget, or (optionally) objective stagnation.
    On a model-evaluation failure the last good iterate is returned with the
    failure recorded in the message.
    """
    opts = options or TrustRegionOptions()
    z = np.array(z0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    cg_maxit = opts.cg_maxit or max(2 * z.size, 10)

    result = TrustRegionResult(z=z)
    J = problem.objective(z, theta)
    g = problem.gradient_z(z, theta)
    gnorm = float(np.linalg.norm(g))
    radius = opts.radius0
    result.history.append(
        IterationRecord(0, J, gnorm, np.nan, radius, np.nan, True, 0)
    )

    if gnorm <= opts.gtol:
        result.converged = True
        result.message = "initial iterate already satisfies gradient tolerance"
        result.z = z
        return result

    for it in range(1, opts.max_iter + 1):
        hv = lambda v: problem.hess_vec(z, theta, v, mode=opts.hessian_mode)
        cg_tol = min(0.5, np.sqrt(gnorm))
        try:
            step, on_boundary, cg_iters, _ = steihaug_cg(hv, g, radius, cg_tol, cg_maxit)
            model_decrease = -(float(np.dot(g, step)) + 0.5 * float(np.dot(step, hv(step))))
            J_trial = problem.objective(z + step, theta)
        except Exception as exc:  # propagate context, keep last good iterate
            result.message = f"model evaluation failed at iteration {it}: {exc}"
            result.z = z
            return result

        actual_decrease = J - J_trial
        if model_decrease > 0:
            rho = actual_decrease / model_decrease
        else:
            rho = -np.inf
        step_norm = float(np.linalg.norm(step))
        accepted = rho >= opts.eta_accept and actual_decrease > 0

        if accepted:
            z = z + step
            J = J_trial
            g = problem.gradient_z(z, theta)
            gnorm = float(np.linalg.norm(g))

        if rho < opts.rho_low:
            radius *= opts.shrink
        elif rho > opts.rho_high and on_boundary:
            radius = min(radius * opts.grow, opts.max_radius)

        result.history.append(
            IterationRecord(it, J, gnorm, step_norm, radius, float(rho), accepted, cg_iters)
        )

        if gnorm <= opts.gtol:
            result.converged = True
            result.message = f"gradient tolerance reached at iteration {it}"
            break
        if (
            opts.stagnation_tol > 0
            and accepted
            and actual_decrease <= opts.stagnation_tol * max(abs(J), 1.0)
        ):
            result.message = f"objective stagnated at iteration {it}"
            break
        if radius < 1e-14:
            result.message = f"trust radius collapsed at iteration {it}"
            break
    else:
        result.message = f"iteration budget {opts.max_iter} exhausted"

    result.z = z
    return result


def history_to_csv(history: list[IterationRecord], path) -> None:
    """Iteration | Objective | Gradient Norm | Step Size columns plus extras.

    Both the step norm and the trust radius are emitted since conventions
    differ on which one 'step size' denotes.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "iteration",
                "objective",
                "gradient_norm",
                "step_size",
                "trust_radius",
                "rho",
                "accepted",
                "cg_iterations",
            ]
        )
        for rec in history:
            writer.writerow(
                [
                    rec.iteration,
                    repr(rec.objective),
                    repr(rec.grad_norm),
                    repr(rec.step_norm),
                    repr(rec.radius),
                    repr(rec.rho),
                    int(rec.accepted),
                    rec.cg_iterations,
                ]
            )
