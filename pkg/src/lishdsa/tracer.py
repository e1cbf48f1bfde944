"""Desk-scale tracer inversion: Darcy flow coupled to transient advection-diffusion.

A log-permeability field kappa on the unit square drives a steady Darcy
pressure solve (Dirichlet values on the two vertical sides, no-flux on the
horizontal ones); the resulting velocity -e^kappa grad p advects a tracer
injected at sixteen interior sites.  Observations are pointwise pressure and
time-resolved concentration readings.  Auxiliary parameters perturb the two
pressure boundary profiles (hat-function modes), the injection strengths
(3x3 local modes per site) and the scalar diffusion coefficient.

Discretization: bilinear quadrilaterals on a structured mesh for pressure,
concentration and kappa; backward Euler in time; 2x2 Gauss quadrature.  The
advective term is integrated by parts with the boundary flux retained, which
makes the transport step conservative when the normal velocity vanishes.
Derivatives are discretize-then-optimize: the kappa-gradient is a hand
assembled discrete adjoint, and second-order products (Hessian-vector,
mixed-Jacobian columns) differentiate that adjoint pipeline by a complex
step, which is exact to machine precision for this analytic discretization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .linops import ContractViolation, SparseOperator, load_csv, save_csv
from .problem import InverseProblem

# complex-step size; far below sqrt(eps) so the O(h^2) truncation vanishes
# entirely while imaginary parts stay comfortably representable
_CSTEP = 1e-100

# -- reference element ----------------------------------------------------------

_G = 1.0 / np.sqrt(3.0)
_QUAD_PTS = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
_LOCAL_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_LOCAL_ZT = np.array([-1.0, -1.0, 1.0, 1.0])


def _shape_values(pts):
    """Bilinear shape functions at reference points; (npts, 4)."""
    xi, zt = pts[:, 0:1], pts[:, 1:2]
    return 0.25 * (1.0 + xi * _LOCAL_XI) * (1.0 + zt * _LOCAL_ZT)


def _shape_gradients(pts):
    """Reference-coordinate gradients; (npts, 4, 2)."""
    xi, zt = pts[:, 0], pts[:, 1]
    out = np.empty((pts.shape[0], 4, 2))
    out[:, :, 0] = 0.25 * _LOCAL_XI[None, :] * (1.0 + zt[:, None] * _LOCAL_ZT[None, :])
    out[:, :, 1] = 0.25 * _LOCAL_ZT[None, :] * (1.0 + xi[:, None] * _LOCAL_XI[None, :])
    return out


_N_VOL = _shape_values(_QUAD_PTS)          # (4 qpts, 4 basis)
_G_VOL_REF = _shape_gradients(_QUAD_PTS)   # (4 qpts, 4 basis, 2)

# boundary sides: reference edge quadrature points and outward normals
_EDGE_DEFS = {
    "bottom": (np.array([[-_G, -1.0], [_G, -1.0]]), np.array([0.0, -1.0])),
    "right": (np.array([[1.0, -_G], [1.0, _G]]), np.array([1.0, 0.0])),
    "top": (np.array([[-_G, 1.0], [_G, 1.0]]), np.array([0.0, 1.0])),
    "left": (np.array([[-1.0, -_G], [-1.0, _G]]), np.array([-1.0, 0.0])),
}


@dataclass
class TracerConfig:
    """Mesh, time stepping, data generation and objective parameters.

    The fine mesh/step counts are used only for data generation and must be
    strictly finer than the inversion discretization (no inverse crime).
    """

    mesh_coarse: int = 32
    mesh_fine: int = 64
    n_steps_coarse: int = 40
    n_steps_fine: int = 80
    t_final: float = 0.25
    noise_rel: float = 0.01
    # regularization weights, rebalanced for the desk-scale mesh and sensor
    # density (the full-scale values 1e-5/1e-7 leave ~20% of the parameter
    # space misfit-dominated here, far from the qualitative regime where the
    # informed subspace is a small fraction); the 100x ratio is preserved
    gamma1: float = 1e-3
    gamma2: float = 1e-5
    seed: int = 0

    # auxiliary parameterization (boundary modes, sources, diffusion)
    n_boundary_modes: int = 21
    source_grid: int = 4
    source_amplitude: float = 10.0
    source_decay: float = 100.0
    source_patch_halfwidth: float = 0.1
    eta0: float = 0.025
    perturbation_scale: float = 0.1

    # sensors: concentration on an interior grid with this spacing (units of
    # the domain) spanning [margin, 1 - margin], pressure on two vertical
    # lines adjacent to the Dirichlet boundaries; all must land on mesh nodes
    sensor_spacing: float = 0.125
    conc_sensor_margin: float = 0.25
    pressure_sensor_x: tuple = (0.125, 0.875)

    artificial_diffusion: float = 0.0
    z0_value: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mesh_fine <= self.mesh_coarse:
            raise ContractViolation("data mesh must be strictly finer than inversion mesh")
        if self.n_steps_fine % self.n_steps_coarse != 0:
            raise ContractViolation("fine step count must be a multiple of the coarse one")
        if self.n_steps_fine <= self.n_steps_coarse:
            raise ContractViolation("data stepping must be finer than inversion stepping")
        if self.t_final <= 0:
            raise ContractViolation("t_final must be positive")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ContractViolation("regularization coefficients must be nonnegative")
        spacing_cells = self.sensor_spacing * self.mesh_coarse
        if abs(spacing_cells - round(spacing_cells)) > 1e-9:
            raise ContractViolation("sensor spacing must align with inversion mesh nodes")

    @property
    def dt_coarse(self) -> float:
        return self.t_final / self.n_steps_coarse

    @property
    def dt_fine(self) -> float:
        return self.t_final / self.n_steps_fine

    def concentration_sensor_coords(self) -> np.ndarray:
        s = self.sensor_spacing
        lo = int(round(self.conc_sensor_margin / s))
        hi = int(round((1.0 - self.conc_sensor_margin) / s))
        pts = [(i * s, j * s) for j in range(lo, hi + 1) for i in range(lo, hi + 1)]
        return np.array(pts)

    def pressure_sensor_coords(self) -> np.ndarray:
        s = self.sensor_spacing
        k = int(round(1.0 / s)) - 1
        pts = [(x, j * s) for x in self.pressure_sensor_x for j in range(1, k + 1)]
        return np.array(pts)

    def injection_sites(self) -> np.ndarray:
        g = self.source_grid
        pos = [(i / (g + 1), j / (g + 1)) for j in range(1, g + 1) for i in range(1, g + 1)]
        return np.array(pos)


class Mesh:
    """Structured quadrilateral mesh of the unit square with cached tables."""

    def __init__(self, nc: int):
        if nc < 2:
            raise ContractViolation("mesh needs at least 2 cells per side")
        self.nc = nc
        self.h = 1.0 / nc
        npt = nc + 1
        self.n_nodes = npt * npt
        xs = np.linspace(0.0, 1.0, npt)
        X, Y = np.meshgrid(xs, xs)  # row-major in y
        self.coords = np.column_stack([X.ravel(), Y.ravel()])

        ix, iy = np.meshgrid(np.arange(nc), np.arange(nc))
        ix, iy = ix.ravel(), iy.ravel()
        n00 = iy * npt + ix
        self.conn = np.column_stack([n00, n00 + 1, n00 + npt + 1, n00 + npt])
        self.n_elements = nc * nc

        self.jac = (self.h / 2.0) ** 2
        self.grad_vol = (2.0 / self.h) * _G_VOL_REF  # (4,4,2) physical gradients
        self._rows = np.repeat(self.conn, 4, axis=1).ravel()
        self._cols = np.tile(self.conn, (1, 4)).ravel()

        # physical quadrature coordinates per element, (E, 4 qpts, 2)
        corners = self.coords[self.conn[:, 0]]
        offsets = (_QUAD_PTS + 1.0) * (self.h / 2.0)
        self.quad_xy = corners[:, None, :] + offsets[None, :, :]

        # boundary edges: per side, adjacent element ids + edge tables
        cell_ids = np.arange(self.n_elements).reshape(nc, nc)  # [iy, ix]
        self.edges = {}
        for side, (pts, normal) in _EDGE_DEFS.items():
            if side == "bottom":
                els = cell_ids[0, :]
            elif side == "top":
                els = cell_ids[-1, :]
            elif side == "left":
                els = cell_ids[:, 0]
            else:
                els = cell_ids[:, -1]
            Ne = _shape_values(pts)
            Ge = (2.0 / self.h) * _shape_gradients(pts)
            self.edges[side] = {
                "elements": els.copy(),
                "N": Ne,
                "G": Ge,
                "Gn": Ge @ normal,  # (2 qpts, 4)
                "normal": normal,
                "measure": self.h / 2.0,
            }

        node_ix = np.tile(np.arange(npt), npt)
        self.dirichlet_left = np.flatnonzero(node_ix == 0)    # x = 0
        self.dirichlet_right = np.flatnonzero(node_ix == nc)  # x = 1
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.dirichlet_left] = True
        mask[self.dirichlet_right] = True
        self.dirichlet_mask = mask
        self.interior = np.flatnonzero(~mask)

        self.mass = self._assemble_constant(np.einsum("qa,qb->ab", _N_VOL, _N_VOL))
        self.stiffness = self._assemble_constant(
            np.einsum("qad,qbd->ab", self.grad_vol, self.grad_vol)
        )
        self._lumped_mass = np.asarray(self.mass.sum(axis=1)).ravel()

    def _assemble_constant(self, local):
        data = np.tile(self.jac * local, (self.n_elements, 1, 1))
        return self._to_csr(data)

    def _to_csr(self, elem_data):
        A = scipy.sparse.coo_matrix(
            (elem_data.ravel(), (self._rows, self._cols)),
            shape=(self.n_nodes, self.n_nodes),
        )
        return A.tocsr()

    def node_index(self, x: float, y: float) -> int:
        ix = round(x * self.nc)
        iy = round(y * self.nc)
        if abs(ix / self.nc - x) > 1e-9 or abs(iy / self.nc - y) > 1e-9:
            raise ContractViolation(f"point ({x}, {y}) is not a node of the {self.nc} mesh")
        return iy * (self.nc + 1) + ix

    def node_indices(self, coords) -> np.ndarray:
        return np.array([self.node_index(x, y) for x, y in np.asarray(coords)])

    def interp_at_quad(self, nodal):
        """Field values at volume quadrature points, (E, 4)."""
        return np.asarray(nodal)[self.conn] @ _N_VOL.T

    def grad_at_quad(self, nodal):
        """Field gradients at volume quadrature points, (E, 4, 2)."""
        return np.einsum("qad,ea->eqd", self.grad_vol, np.asarray(nodal)[self.conn])

    def total_mass(self, c) -> float:
        return float(np.dot(self._lumped_mass, c))


# -- assembly -------------------------------------------------------------------


def darcy_matrix(mesh: Mesh, kappa):
    """Stiffness with coefficient e^kappa (kappa bilinear on the mesh)."""
    cf = np.exp(mesh.interp_at_quad(kappa))
    data = mesh.jac * np.einsum("eq,qad,qbd->eab", cf, mesh.grad_vol, mesh.grad_vol)
    return mesh._to_csr(data)


def _edge_flux(mesh: Mesh, side: dict, kappa, p):
    """u.n at the edge quadrature points plus its outflow mask.

    The advective boundary flux is upwinded: incoming fluid is tracer-free,
    so only edges with outward flow (u.n > 0) contribute.  Without this the
    inflow term injects negative boundary mass and the time stepper amplifies
    boundary modes.  The mask is treated as locally constant when
    differentiating (exact away from the measure-zero flow reversals).
    """
    conn_e = mesh.conn[side["elements"]]
    kq = np.asarray(kappa)[conn_e] @ side["N"].T
    pn = np.einsum("qa,ea->eq", side["Gn"], np.asarray(p)[conn_e])
    un = -np.exp(kq) * pn
    mask = un.real > 0.0
    return conn_e, un, mask


def advection_matrix(mesh: Mesh, kappa, p):
    """Conservative discretization of c -> div(u c), u = -e^kappa grad p.

    Volume part -int (u c).grad v plus the upwinded outflow boundary flux
    int (u.n)+ c v.
    """
    cf = np.exp(mesh.interp_at_quad(kappa))
    gp = mesh.grad_at_quad(p)
    data = mesh.jac * np.einsum("eq,eqd,qad,qb->eab", cf, gp, mesh.grad_vol, _N_VOL)
    entries = [(data, mesh.conn)]
    for side in mesh.edges.values():
        conn_e, un, mask = _edge_flux(mesh, side, kappa, p)
        coeff = np.where(mask, un, 0.0)
        d = side["measure"] * np.einsum("eq,qa,qb->eab", coeff, side["N"], side["N"])
        entries.append((d, conn_e))
    rows = np.concatenate([np.repeat(c, 4, axis=1).ravel() for _, c in entries])
    cols = np.concatenate([np.tile(c, (1, 4)).ravel() for _, c in entries])
    vals = np.concatenate([d.ravel() for d, _ in entries])
    A = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(mesh.n_nodes,) * 2)
    return A.tocsr()


def load_vector(mesh: Mesh, values_at_quad):
    """Assemble int f v for f given at the volume quadrature points."""
    contrib = mesh.jac * np.einsum("eq,qa->ea", values_at_quad, _N_VOL)
    out = np.zeros(mesh.n_nodes, dtype=contrib.dtype)
    np.add.at(out, mesh.conn.ravel(), contrib.ravel())
    return out


def _kernel_darcy_kappa(mesh: Mesh, kappa, a_field, b_field):
    """d/dkappa [a^T A(kappa) b], a vector over kappa nodes."""
    cf = np.exp(mesh.interp_at_quad(kappa))
    ga = mesh.grad_at_quad(a_field)
    gb = mesh.grad_at_quad(b_field)
    s = mesh.jac * cf * np.einsum("eqd,eqd->eq", ga, gb)
    contrib = np.einsum("eq,qc->ec", s, _N_VOL)
    out = np.zeros(mesh.n_nodes, dtype=contrib.dtype)
    np.add.at(out, mesh.conn.ravel(), contrib.ravel())
    return out


def _kernels_advection(mesh: Mesh, kappa, p, lam_block, c_block):
    """kappa- and p-derivatives of sum_k lam_k^T Aadv(kappa, p) c_k.

    lam_block and c_block are (n_steps, n_nodes).  Returns (d/dkappa, d/dp)
    as node vectors; used by the adjoint assembly.
    """
    dtype = np.result_type(kappa, p, lam_block, c_block)
    out_k = np.zeros(mesh.n_nodes, dtype=dtype)
    out_p = np.zeros(mesh.n_nodes, dtype=dtype)

    cf = np.exp(mesh.interp_at_quad(kappa))
    gp = mesh.grad_at_quad(p)
    cq = np.einsum("qa,kea->keq", _N_VOL, c_block[:, mesh.conn])
    gl = np.einsum("qad,kea->keqd", mesh.grad_vol, lam_block[:, mesh.conn])

    # volume: s_eq = sum_k e^k (grad p . grad lam_k) c_k
    gp_gl = np.einsum("eqd,keqd->keq", gp, gl)
    s_vol = mesh.jac * cf * np.einsum("keq,keq->eq", gp_gl, cq)
    np.add.at(out_k, mesh.conn.ravel(), np.einsum("eq,qc->ec", s_vol, _N_VOL).ravel())

    #   d/dp_d: sum_k e^k (G_d . grad lam_k) c_k
    w_p = mesh.jac * cf[:, :, None] * np.einsum("keqd,keq->eqd", gl, cq)
    np.add.at(
        out_p, mesh.conn.ravel(), np.einsum("eqd,qcd->ec", w_p, mesh.grad_vol).ravel()
    )

    for side in mesh.edges.values():
        conn_e, un, mask = _edge_flux(mesh, side, kappa, p)
        lq = np.einsum("qa,kea->keq", side["N"], lam_block[:, conn_e])
        cqe = np.einsum("qa,kea->keq", side["N"], c_block[:, conn_e])
        lc = np.einsum("keq,keq->eq", lq, cqe)
        s_k = side["measure"] * np.where(mask, un, 0.0) * lc
        np.add.at(out_k, conn_e.ravel(), np.einsum("eq,qc->ec", s_k, side["N"]).ravel())
        ek = np.exp(np.asarray(kappa)[conn_e] @ side["N"].T)
        s_p = side["measure"] * np.where(mask, -ek, 0.0) * lc
        np.add.at(out_p, conn_e.ravel(), np.einsum("eq,qc->ec", s_p, side["Gn"]).ravel())

    return out_k, out_p


# -- auxiliary parameterization ---------------------------------------------------


def _hat_matrix(y, n_modes):
    """Piecewise-linear hat values on the uniform n_modes grid of [0,1]."""
    nodes = np.linspace(0.0, 1.0, n_modes)
    delta = nodes[1] - nodes[0]
    return np.maximum(0.0, 1.0 - np.abs(y[:, None] - nodes[None, :]) / delta)


def _local_hat(s, which):
    """1-D hats on the 3-node stencil {-1, 0, +1}, zero outside [-1, 1]."""
    if which == 0:
        return np.where((s >= -1.0) & (s <= 0.0), -s, 0.0)
    if which == 1:
        return np.where(np.abs(s) <= 1.0, 1.0 - np.abs(s), 0.0)
    return np.where((s >= 0.0) & (s <= 1.0), s, 0.0)


def nominal_p1(y):
    """Right-boundary (x=1) pressure profile."""
    return 15.0 + np.cos(2 * np.pi * y) + 0.5 * np.cos(4 * np.pi * y)


def nominal_p2(y):
    """Left-boundary (x=0) pressure profile."""
    return 10.0 + 2.0 * np.cos(2 * np.pi * y)


class AuxParameterization:
    """Auxiliary parameters: boundary perturbations, sources, diffusion.

    theta layout (paper-style default, n = 2*21 + 16*9 + 1 = 187):
      [0, nb)        hat modes scaling the x=1 Dirichlet profile
      [nb, 2 nb)     hat modes scaling the x=0 Dirichlet profile
      [2 nb, 2 nb + 9 s)   per-site 3x3 modes scaling the injection strengths
      last           scalar diffusion perturbation

    theta = 0 reproduces the nominal profiles, sources and eta exactly.
    """

    def __init__(
        self,
        cfg: TracerConfig,
        p1_profile: Callable = nominal_p1,
        p2_profile: Callable = nominal_p2,
    ):
        self.cfg = cfg
        self.nb = cfg.n_boundary_modes
        self.sites = cfg.injection_sites()
        self.n_sites = len(self.sites)
        self.n = 2 * self.nb + 9 * self.n_sites + 1
        self.p1_profile = p1_profile
        self.p2_profile = p2_profile
        self.scale = cfg.perturbation_scale

    def eta(self, theta):
        return self.cfg.eta0 * (1.0 + self.scale * np.asarray(theta)[-1])

    def dirichlet_values(self, mesh: Mesh, theta):
        """Full-length node vector holding the Dirichlet data (zero elsewhere)."""
        theta = np.asarray(theta)
        out = np.zeros(mesh.n_nodes, dtype=np.result_type(theta, float))
        y_r = mesh.coords[mesh.dirichlet_right, 1]
        y_l = mesh.coords[mesh.dirichlet_left, 1]
        mod_r = 1.0 + self.scale * (_hat_matrix(y_r, self.nb) @ theta[: self.nb])
        mod_l = 1.0 + self.scale * (
            _hat_matrix(y_l, self.nb) @ theta[self.nb : 2 * self.nb]
        )
        out[mesh.dirichlet_right] = self.p1_profile(y_r) * mod_r
        out[mesh.dirichlet_left] = self.p2_profile(y_l) * mod_l
        return out

    def source_at_quad(self, mesh: Mesh, theta):
        """Injection source evaluated at the volume quadrature points, (E, 4)."""
        theta = np.asarray(theta)
        cfg = self.cfg
        X = mesh.quad_xy[:, :, 0]
        Y = mesh.quad_xy[:, :, 1]
        total = np.zeros(X.shape, dtype=np.result_type(theta, float))
        hw = cfg.source_patch_halfwidth
        for k, (vx, wy) in enumerate(self.sites):
            bump = cfg.source_amplitude * np.exp(
                -cfg.source_decay * ((X - vx) ** 2 + (Y - wy) ** 2)
            )
            block = theta[2 * self.nb + 9 * k : 2 * self.nb + 9 * (k + 1)]
            mod = 1.0
            if np.any(block != 0.0):
                sx = (X - vx) / hw
                sy = (Y - wy) / hw
                pert = np.zeros(X.shape, dtype=block.dtype)
                for j in range(9):
                    pert = pert + block[j] * (
                        _local_hat(sx, j % 3) * _local_hat(sy, j // 3)
                    )
                mod = 1.0 + self.scale * pert
            total = total + bump * mod
        return total

    def labels(self) -> list[str]:
        out = [f"boundary-right-{j + 1:02d}" for j in range(self.nb)]
        out += [f"boundary-left-{j + 1:02d}" for j in range(self.nb)]
        for k in range(self.n_sites):
            out += [f"source-site-{k + 1:02d}-mode-{j + 1}" for j in range(9)]
        out.append("diffusion")
        return out

    def groups(self) -> list[str]:
        out = ["boundary-right"] * self.nb + ["boundary-left"] * self.nb
        out += ["source-site"] * (9 * self.n_sites)
        out.append("diffusion")
        return out


# -- forward solve ----------------------------------------------------------------


@dataclass
class StateTrajectory:
    """Pressure field and concentration snapshots c(t_k), k = 1..N; c(0) = 0."""

    pressure: np.ndarray
    concentrations: np.ndarray  # (n_steps, n_nodes)
    times: np.ndarray
    mesh: Mesh
    _lu_transport: object = field(default=None, repr=False)
    _lu_darcy: object = field(default=None, repr=False)


def forward_solve(
    mesh: Mesh,
    kappa,
    theta,
    param: AuxParameterization,
    cfg: TracerConfig,
    n_steps: int,
    c0=None,
) -> StateTrajectory:
    """Darcy solve followed by backward-Euler transport.

    Accepts complex kappa/theta (used by the derivative machinery); all
    kernels and factorizations are dtype-generic.
    """
    kappa = np.asarray(kappa)
    theta = np.asarray(theta)
    if not np.all(np.isfinite(kappa.real)) or (
        np.iscomplexobj(kappa) and not np.all(np.isfinite(kappa.imag))
    ):
        raise ContractViolation("kappa contains non-finite entries")
    dt = cfg.t_final / n_steps

    pbc = param.dirichlet_values(mesh, theta)
    A = darcy_matrix(mesh, kappa)
    dtype = np.result_type(A.dtype, pbc.dtype)
    rhs = -(A @ pbc)[mesh.interior]
    A_II = A[mesh.interior][:, mesh.interior].tocsc().astype(dtype)
    try:
        lu_darcy = scipy.sparse.linalg.splu(A_II)
    except RuntimeError as exc:
        raise ContractViolation(f"Darcy stiffness factorization failed: {exc}") from exc
    p = pbc.astype(dtype, copy=True)
    p[mesh.interior] = lu_darcy.solve(rhs.astype(dtype))

    eta = param.eta(theta) + cfg.artificial_diffusion
    S = mesh.mass + dt * (eta * mesh.stiffness + advection_matrix(mesh, kappa, p))
    lu_transport = scipy.sparse.linalg.splu(S.tocsc())
    bg = load_vector(mesh, param.source_at_quad(mesh, theta))

    c = np.zeros(mesh.n_nodes, dtype=dtype) if c0 is None else np.asarray(c0, dtype=dtype)
    C = np.empty((n_steps, mesh.n_nodes), dtype=dtype)
    for k in range(n_steps):
        c = lu_transport.solve(mesh.mass @ c + dt * bg)
        C[k] = c
    times = dt * np.arange(1, n_steps + 1)
    return StateTrajectory(
        pressure=p,
        concentrations=C,
        times=times,
        mesh=mesh,
        _lu_transport=lu_transport,
        _lu_darcy=lu_darcy,
    )


# -- data generation ----------------------------------------------------------------


def default_log_permeability(x, y):
    """Synthetic truth: a permeable channel across the domain at y = 0.5.

    The channel spans the full width so the right (inflow) boundary feeds it
    directly; a low-permeability plug at the left mouth splits the outflow
    into two lobes, and two off-channel patches create poorly swept regions.
    """
    channel = 1.0 * np.exp(-((y - 0.5) ** 2) / (2 * 0.12**2))
    plug = -0.9 * np.exp(-((x**2) + (y - 0.5) ** 2) / (2 * 0.1**2))
    low1 = -0.8 * np.exp(-(((x - 0.75) ** 2) + (y - 0.15) ** 2) / (2 * 0.15**2))
    low2 = -0.8 * np.exp(-(((x - 0.25) ** 2) + (y - 0.85) ** 2) / (2 * 0.18**2))
    return channel + plug + low1 + low2


@dataclass
class TracerData:
    """Observed data bundle with the misfit weights derived from it."""

    d_c: np.ndarray  # (n_steps_coarse, n_conc_sensors)
    d_p: np.ndarray
    conc_coords: np.ndarray
    pres_coords: np.ndarray
    w_c: float
    w_p: float
    meta: dict = field(default_factory=dict)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_csv(out / "data_concentration.csv", self.d_c)
        save_csv(out / "data_pressure.csv", self.d_p.reshape(1, -1))
        save_csv(out / "sensors_concentration.csv", self.conc_coords)
        save_csv(out / "sensors_pressure.csv", self.pres_coords)
        payload = {"w_c": self.w_c, "w_p": self.w_p, "meta": self.meta}
        with open(out / "data_manifest.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, out_dir) -> "TracerData":
        out = Path(out_dir)
        with open(out / "data_manifest.json") as fh:
            payload = json.load(fh)
        return cls(
            d_c=load_csv(out / "data_concentration.csv"),
            d_p=load_csv(out / "data_pressure.csv").ravel(),
            conc_coords=load_csv(out / "sensors_concentration.csv"),
            pres_coords=load_csv(out / "sensors_pressure.csv"),
            w_c=payload["w_c"],
            w_p=payload["w_p"],
            meta=payload["meta"],
        )


def apply_noise(values: np.ndarray, noise_rel: float, rng) -> np.ndarray:
    """Zero-mean Gaussian noise with per-entry std = noise_rel * |value|."""
    if noise_rel == 0.0:
        return np.array(values, copy=True)
    return values + noise_rel * np.abs(values) * rng.standard_normal(values.shape)


def generate_data(
    cfg: TracerConfig,
    kappa_true: Optional[Callable] = None,
    param: Optional[AuxParameterization] = None,
) -> TracerData:
    """Fine-mesh solve at theta = 0, restricted to sensors, with seeded noise.

    The misfit weights w_c and w_p are set to the mean magnitudes of the
    respective (noisy) data so the two observation types are comparable.
    """
    param = param or AuxParameterization(cfg)
    field_fn = kappa_true or default_log_permeability
    mesh_f = Mesh(cfg.mesh_fine)
    kappa_f = field_fn(mesh_f.coords[:, 0], mesh_f.coords[:, 1])
    theta0 = np.zeros(param.n)
    traj = forward_solve(mesh_f, kappa_f, theta0, param, cfg, cfg.n_steps_fine)

    conc_coords = cfg.concentration_sensor_coords()
    pres_coords = cfg.pressure_sensor_coords()
    tc_idx = mesh_f.node_indices(conc_coords)
    tp_idx = mesh_f.node_indices(pres_coords)

    stride = cfg.n_steps_fine // cfg.n_steps_coarse
    obs_steps = stride * np.arange(1, cfg.n_steps_coarse + 1) - 1
    d_c_clean = traj.concentrations[np.ix_(obs_steps, tc_idx)].real
    d_p_clean = traj.pressure[tp_idx].real

    rng = np.random.default_rng(cfg.seed)
    d_c = apply_noise(d_c_clean, cfg.noise_rel, rng)
    d_p = apply_noise(d_p_clean, cfg.noise_rel, rng)
    w_c = float(np.mean(np.abs(d_c))) or 1.0
    w_p = float(np.mean(np.abs(d_p))) or 1.0

    meta = {
        "mesh_fine": cfg.mesh_fine,
        "mesh_coarse": cfg.mesh_coarse,
        "n_steps_fine": cfg.n_steps_fine,
        "n_steps_coarse": cfg.n_steps_coarse,
        "t_final": cfg.t_final,
        "noise_rel": cfg.noise_rel,
        "seed": cfg.seed,
        "element": "bilinear quadrilateral",
        "time_integrator": "backward euler",
        "sensor_layout": "uniform interior concentration grid; "
        "boundary-adjacent pressure lines (approximate layout)",
    }
    return TracerData(
        d_c=d_c,
        d_p=d_p,
        conc_coords=conc_coords,
        pres_coords=pres_coords,
        w_c=w_c,
        w_p=w_p,
        meta=meta,
    )


# -- the inverse problem -------------------------------------------------------------


class TracerProblem(InverseProblem):
    """InverseProblem contract for the tracer inversion on the coarse mesh.

    z is the nodal log-permeability (length (nc+1)^2); theta follows the
    AuxParameterization layout.  Wz is the mesh mass matrix.  Gradients are
    exact discrete adjoints; Hessian-vector products and mixed-Jacobian
    columns differentiate the gradient pipeline with a complex step.
    """

    hessian_spd_certified = False

    def __init__(
        self,
        cfg: TracerConfig,
        data: TracerData,
        param: Optional[AuxParameterization] = None,
    ):
        self.cfg = cfg
        self.data = data
        self.param = param or AuxParameterization(cfg)
        self.mesh = Mesh(cfg.mesh_coarse)
        self.m = self.mesh.n_nodes
        self.n = self.param.n
        self.Wz = SparseOperator(self.mesh.mass)
        self._tc_idx = self.mesh.node_indices(data.conc_coords)
        self._tp_idx = self.mesh.node_indices(data.pres_coords)
        self._HR = (
            2.0 * cfg.gamma1 * self.mesh.stiffness + 2.0 * cfg.gamma2 * self.mesh.mass
        ).tocsr()
        self._reg_op = SparseOperator(self._HR)
        self.n_steps = cfg.n_steps_coarse
        self.dt = cfg.dt_coarse

    # -- pieces ----------------------------------------------------------------

    def solve_forward(self, z, theta, c0=None) -> StateTrajectory:
        return forward_solve(
            self.mesh, z, theta, self.param, self.cfg, self.n_steps, c0=c0
        )

    def observe(self, traj: StateTrajectory):
        return traj.concentrations[:, self._tc_idx], traj.pressure[self._tp_idx]

    def misfit(self, z, theta) -> float:
        obs_c, obs_p = self.observe(self.solve_forward(z, theta))
        rc = obs_c - self.data.d_c
        rp = obs_p - self.data.d_p
        val = (2.0 / self.data.w_c**2) * np.sum(rc * rc) + (
            1.0 / self.data.w_p**2
        ) * np.sum(rp * rp)
        return float(val.real) if np.iscomplexobj(val) else float(val)

    def regularization(self, z) -> float:
        z = np.asarray(z)
        return float(
            self.cfg.gamma1 * (z @ (self.mesh.stiffness @ z))
            + self.cfg.gamma2 * (z @ (self.mesh.mass @ z))
        )

    # -- first order -------------------------------------------------------------

    def _misfit_gradient(self, z, theta, residual_c=None, residual_p=None):
        """Adjoint assembly of the misfit kappa-gradient; dtype-generic.

        With residual overrides this computes J_obs^T applied to the given
        observation-space vectors at the base state (the Gauss-Newton
        building block); without them the natural weighted residuals are
        used, yielding the true misfit gradient.
        """
        mesh = self.mesh
        traj = self.solve_forward(z, theta)
        obs_c, obs_p = self.observe(traj)
        if residual_c is None:
            residual_c = (4.0 / self.data.w_c**2) * (obs_c - self.data.d_c)
        if residual_p is None:
            residual_p = (2.0 / self.data.w_p**2) * (obs_p - self.data.d_p)

        dtype = np.result_type(traj.concentrations.dtype, residual_c.dtype)
        lam = np.zeros((self.n_steps, mesh.n_nodes), dtype=dtype)
        lam_next = np.zeros(mesh.n_nodes, dtype=dtype)
        for k in range(self.n_steps - 1, -1, -1):
            rhs = mesh.mass @ lam_next
            rhs_obs = np.zeros(mesh.n_nodes, dtype=dtype)
            rhs_obs[self._tc_idx] = residual_c[k]
            lam[k] = traj._lu_transport.solve(rhs + rhs_obs, trans="T")
            lam_next = lam[k]

        kadv, omega = _kernels_advection(
            mesh, z, traj.pressure, lam, traj.concentrations
        )

        rhs_p = np.zeros(mesh.n_nodes, dtype=dtype)
        rhs_p[self._tp_idx] = residual_p
        rhs_p = rhs_p - self.dt * omega
        mu = np.zeros(mesh.n_nodes, dtype=dtype)
        # Darcy stiffness is symmetric, so the factorization is reused as-is
        mu[mesh.interior] = traj._lu_darcy.solve(rhs_p[mesh.interior])

        grad = -self.dt * kadv - _kernel_darcy_kappa(mesh, z, mu, traj.pressure)
        return grad

    def gradient_z(self, z, theta) -> np.ndarray:
        g = self._misfit_gradient(z, theta)
        reg = self._HR @ np.asarray(z)
        if np.iscomplexobj(g) and not np.iscomplexobj(reg):
            reg = reg.astype(g.dtype)
        return g + reg

    # -- second order -------------------------------------------------------------

    def hess_reg_vec(self, z, v) -> np.ndarray:
        return self._HR @ np.asarray(v)

    def hess_misfit_vec(self, z, theta, v, mode: str = "full") -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if not np.any(v):
            return np.zeros(self.m)
        if mode == "full":
            zc = np.asarray(z, dtype=complex) + 1j * _CSTEP * v
            return self._misfit_gradient(zc, theta).imag / _CSTEP
        if mode == "gauss_newton":
            zc = np.asarray(z, dtype=complex) + 1j * _CSTEP * v
            obs_c, obs_p = self.observe(self.solve_forward(zc, theta))
            dc = obs_c.imag / _CSTEP
            dp = obs_p.imag / _CSTEP
            return self._misfit_gradient(
                z,
                theta,
                residual_c=(4.0 / self.data.w_c**2) * dc,
                residual_p=(2.0 / self.data.w_p**2) * dp,
            )
        raise ContractViolation(f"unknown Hessian mode '{mode}'")

    def mixed_jacobian_col(self, z, theta, i: int) -> np.ndarray:
        if not 0 <= i < self.n:
            raise ContractViolation(f"theta index {i} out of range [0, {self.n})")
        tc = np.asarray(theta, dtype=complex).copy()
        tc[i] += 1j * _CSTEP
        return self._misfit_gradient(z, tc).imag / _CSTEP

    def reg_hessian_operator(self, z=None):
        return self._reg_op

    def theta_labels(self):
        return self.param.labels()

    def theta_groups(self):
        return self.param.groups()

    def initial_iterate(self) -> np.ndarray:
        return np.full(self.m, self.cfg.z0_value)
