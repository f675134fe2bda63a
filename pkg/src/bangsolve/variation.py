"""Second-order machinery along a reference extremal.

Linearizes the optimality system, evaluates the quadratic form of control
variations, checks the first-order/second-order duality identity, and
probes the coercivity inequality by seeded sampling.

The linearized state and costate equations are solved cell by cell with
classical RK4 on the piecewise-linear coefficient interpolants.  Because
the equations are linear, the cell updates are precomputed as propagator
matrices once per linearization; repeated solves (quadratic-form samples)
then reduce to short matrix recursions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .grid import (
    _GAUSS_NODES,
    _GAUSS_WEIGHTS,
    PIECEWISE_CONSTANT,
    PIECEWISE_LINEAR,
    Grid,
    GridFunction,
    GridMismatchError,
)
from .model import ControlAffineProblem, ExtremalTriple, Polytope


@dataclass
class LinearizationData:
    """Coefficients of the linearized optimality system along a triple.

    A = f_x, B = control matrix, W = H_xx, S = H_ux, and the switching
    function, all sampled at grid nodes and interpolated linearly in
    between.  The reference triple is kept so the linear solves reproduce
    it exactly at zero variation.
    """

    grid: Grid
    a_nodes: NDArray[np.float64]      # (N+1, n, n)
    b_nodes: NDArray[np.float64]      # (N+1, n, m)
    w_nodes: NDArray[np.float64]      # (N+1, n, n)
    s_nodes: NDArray[np.float64]      # (N+1, m, n)
    sigma_nodes: NDArray[np.float64]  # (N+1, m)
    x_ref: GridFunction
    p_ref: GridFunction
    u_ref: GridFunction
    symmetry_defect: float = 0.0
    _props: Optional[dict] = field(default=None, repr=False, compare=False)

    @property
    def state_dim(self) -> int:
        return self.a_nodes.shape[1]

    @property
    def control_dim(self) -> int:
        return self.b_nodes.shape[2]

    def sigma_function(self) -> GridFunction:
        return GridFunction(self.grid, self.sigma_nodes, PIECEWISE_LINEAR)

    def interp(self, arr: NDArray, t: NDArray) -> NDArray:
        """Linear interpolation of node-sampled coefficient arrays."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i = self.grid.cell_of(t)
        w = ((t - self.grid.nodes[i]) / self.grid.h)
        w = w.reshape((-1,) + (1,) * (arr.ndim - 1))
        return arr[i] + w * (arr[i + 1] - arr[i])


def linearize(problem: ControlAffineProblem, triple: ExtremalTriple) -> LinearizationData:
    """Evaluate A, B, W = H_xx, S = H_ux and sigma along the triple.

    Raises CapabilityError (through the problem's derivative access) when
    second-derivative slots are missing and finite differences are disabled.
    The symmetry certificate max_t ||S B - (S B)^T|| is computed on the spot.
    """
    grid = triple.grid
    t = grid.nodes
    n, m = problem.state_dim, problem.control_dim
    k = len(t)
    a = np.empty((k, n, n))
    b = np.empty((k, n, m))
    w = np.empty((k, n, n))
    s = np.empty((k, m, n))
    sig = np.empty((k, m))
    x, p = triple.x.values, triple.p.values
    u_cells = triple.u.values
    defect = 0.0
    for i in range(k):
        ui = u_cells[min(i, grid.n_steps - 1)]
        a[i] = problem.jac_dynamics_x(t[i], x[i], ui)
        b[i] = problem.control_matrix(t[i], x[i])
        w[i] = problem.hess_hamiltonian_xx(t[i], x[i], p[i], ui)
        s[i] = problem.hess_hamiltonian_ux(t[i], x[i], p[i])
        sig[i] = b[i].T @ p[i] + problem.cost_control(t[i], x[i])
        sb = s[i] @ b[i]
        defect = max(defect, float(np.max(np.abs(sb - sb.T))) if sb.size else 0.0)
    return LinearizationData(
        grid=grid, a_nodes=a, b_nodes=b, w_nodes=w, s_nodes=s, sigma_nodes=sig,
        x_ref=triple.x, p_ref=triple.p, u_ref=triple.u, symmetry_defect=defect,
    )


def _du_cells(lin: LinearizationData, du) -> NDArray[np.float64]:
    if isinstance(du, GridFunction):
        if du.grid != lin.grid or du.kind != PIECEWISE_CONSTANT:
            raise GridMismatchError("control variation must be piecewise-constant on the grid")
        return du.values
    du = np.asarray(du, dtype=float)
    if du.ndim == 1:
        du = du[:, None]
    if du.shape != (lin.grid.n_steps, lin.control_dim):
        raise GridMismatchError(
            f"variation must have shape ({lin.grid.n_steps}, {lin.control_dim})")
    return du


def _rk4_matrix(rhs, t0: float, h: float, y0: NDArray) -> NDArray:
    k1 = rhs(t0, y0)
    k2 = rhs(t0 + 0.5 * h, y0 + 0.5 * h * k1)
    k3 = rhs(t0 + 0.5 * h, y0 + 0.5 * h * k2)
    k4 = rhs(t0 + h, y0 + h * k3)
    return y0 + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _propagators(lin: LinearizationData) -> dict:
    """Per-cell RK4 propagators of the linearized equations.

    Forward state cell i:    dx_{i+1} = phi_i dx_i + psi_i du_i
    Backward costate cell i: dp_i = mp_i dp_{i+1} + ra_i dx_i + rb_i dx_{i+1} + rc_i du_i
    where dx enters the costate forcing through its within-cell linear
    interpolant.
    """
    if lin._props is not None:
        return lin._props
    grid = lin.grid
    n, m = lin.state_dim, lin.control_dim
    ncell = grid.n_steps
    h = grid.h
    t = grid.nodes
    eye = np.eye(n)

    def coeff(arr: NDArray, tt: float) -> NDArray:
        return lin.interp(arr, np.array([tt]))[0]

    phi = np.empty((ncell, n, n))
    psi = np.empty((ncell, n, m))
    mp = np.empty((ncell, n, n))
    ra = np.empty((ncell, n, n))
    rb = np.empty((ncell, n, n))
    rc = np.empty((ncell, n, m))

    for i in range(ncell):
        t0, t1 = t[i], t[i + 1]

        def fwd_rhs(tt: float, y: NDArray) -> NDArray:
            a = coeff(lin.a_nodes, tt)
            out = a @ y
            out[:, n:] += coeff(lin.b_nodes, tt)
            return out

        y = np.zeros((n, n + m))
        y[:, :n] = eye
        y = _rk4_matrix(fwd_rhs, t0, h, y)
        phi[i] = y[:, :n]
        psi[i] = y[:, n:]

        # backward pass via time mirroring s -> t0 + t1 - s
        def bwd_rhs(ss: float, y: NDArray) -> NDArray:
            tt = t0 + t1 - ss
            a_t = coeff(lin.a_nodes, tt).T
            w_t = coeff(lin.w_nodes, tt)
            s_t = coeff(lin.s_nodes, tt)
            frac = (tt - t0) / h
            out = a_t @ y
            out[:, n:2 * n] += (1.0 - frac) * w_t
            out[:, 2 * n:3 * n] += frac * w_t
            out[:, 3 * n:] += s_t.T
            return out

        y = np.zeros((n, 3 * n + m))
        y[:, :n] = eye
        y = _rk4_matrix(bwd_rhs, t0, h, y)
        mp[i] = y[:, :n]
        ra[i] = y[:, n:2 * n]
        rb[i] = y[:, 2 * n:3 * n]
        rc[i] = y[:, 3 * n:]

    lin._props = {"phi": phi, "psi": psi, "mp": mp, "ra": ra, "rb": rb, "rc": rc}
    return lin._props


def variational_state_nodes(lin: LinearizationData, du: NDArray) -> NDArray[np.float64]:
    pr = _propagators(lin)
    phi, psi = pr["phi"], pr["psi"]
    out = np.zeros((lin.grid.n_steps + 1, lin.state_dim))
    for i in range(lin.grid.n_steps):
        out[i + 1] = phi[i] @ out[i] + psi[i] @ du[i]
    return out


def variational_state(lin: LinearizationData, du) -> GridFunction:
    """Solve the linearized state equation dx' = A dx + B du, dx(0) = 0."""
    return GridFunction(lin.grid, variational_state_nodes(lin, _du_cells(lin, du)),
                        PIECEWISE_LINEAR)


def variational_costate_nodes(lin: LinearizationData, dx: NDArray,
                              du: NDArray) -> NDArray[np.float64]:
    pr = _propagators(lin)
    mp, ra, rb, rc = pr["mp"], pr["ra"], pr["rb"], pr["rc"]
    out = np.zeros((lin.grid.n_steps + 1, lin.state_dim))
    for i in range(lin.grid.n_steps - 1, -1, -1):
        out[i] = mp[i] @ out[i + 1] + ra[i] @ dx[i] + rb[i] @ dx[i + 1] + rc[i] @ du[i]
    return out


def variational_costate(lin: LinearizationData, dx: GridFunction, du) -> GridFunction:
    """Solve -dp' = A^T dp + W dx + S^T du backward from dp(T) = 0."""
    du = _du_cells(lin, du)
    return GridFunction(lin.grid, variational_costate_nodes(lin, dx.values, du),
                        PIECEWISE_LINEAR)


def _gauss_cell_points(grid: Grid) -> tuple[NDArray, NDArray]:
    mids = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
    pts = mids[:, None] + 0.5 * grid.h * _GAUSS_NODES[None, :]
    wts = 0.5 * grid.h * _GAUSS_WEIGHTS
    return pts, wts


class _QuadratureCache:
    """Coefficient values at the per-cell Gauss points, built once per lin."""

    def __init__(self, lin: LinearizationData):
        self.pts, self.wts = _gauss_cell_points(lin.grid)
        flat = self.pts.ravel()
        self.w_vals = lin.interp(lin.w_nodes, flat)
        self.s_vals = lin.interp(lin.s_nodes, flat)
        self.b_vals = lin.interp(lin.b_nodes, flat)
        self.sigma_vals = lin.interp(lin.sigma_nodes, flat)
        i = lin.grid.cell_of(flat)
        frac = ((flat - lin.grid.nodes[i]) / lin.grid.h)[:, None]
        self.cell = i
        self.frac = frac

    def node_interp(self, nodes: NDArray) -> NDArray:
        return nodes[self.cell] * (1.0 - self.frac) + nodes[self.cell + 1] * self.frac

    def cell_repeat(self, cells: NDArray) -> NDArray:
        return np.repeat(cells, self.pts.shape[1], axis=0)

    def integrate(self, integrand_flat: NDArray) -> float:
        return float(np.sum(integrand_flat.reshape(self.pts.shape) @ self.wts))


def _quad_cache(lin: LinearizationData) -> _QuadratureCache:
    pr = _propagators(lin)
    if "quad" not in pr:
        pr["quad"] = _QuadratureCache(lin)
    return pr["quad"]


def second_variation(lin: LinearizationData, du) -> float:
    """Quadratic form of a control variation: the integral of
    <W dx, dx> + 2 <S dx, du> with dx the linearized state response."""
    du = _du_cells(lin, du)
    dx = variational_state_nodes(lin, du)
    q = _quad_cache(lin)
    dxv = q.node_interp(dx)
    duv = q.cell_repeat(du)
    quad = np.einsum("tij,tj,ti->t", q.w_vals, dxv, dxv) \
        + 2.0 * np.einsum("tij,tj,ti->t", q.s_vals, dxv, duv)
    return q.integrate(quad)


@dataclass(frozen=True)
class DualityReport:
    lhs: float
    rhs: float
    gap: float  # |lhs - rhs| / max(1, |rhs|)


def duality_check(lin: LinearizationData, du) -> DualityReport:
    """Compare the first-order pairing <S dx + B^T dp, du>_1 of the
    linearized switching response against the quadratic form."""
    du = _du_cells(lin, du)
    dx = variational_state_nodes(lin, du)
    dp = variational_costate_nodes(lin, dx, du)
    q = _quad_cache(lin)
    dxv = q.node_interp(dx)
    dpv = q.node_interp(dp)
    duv = q.cell_repeat(du)
    resp = np.einsum("tij,tj->ti", q.s_vals, dxv) + np.einsum("tji,tj->ti", q.b_vals, dpv)
    lhs = q.integrate(np.einsum("ti,ti->t", resp, duv))
    rhs = second_variation(lin, du)
    gap = abs(lhs - rhs) / max(1.0, abs(rhs))
    return DualityReport(lhs=lhs, rhs=rhs, gap=gap)


def linearized_switching(lin: LinearizationData, u, z: Optional[tuple] = None) -> GridFunction:
    """The affine switching response
    sigma_ref + S (x[u,z] - x_ref) + B^T (p[u,z] - p_ref) - rho.

    x[u,z] and p[u,z] solve the linearized state/costate equations driven by
    the control u and the disturbance z = (xi, pi, rho); z = None means
    zero.  At u = u_ref, z = 0 the result is the reference switching
    function.  Membership of u in U is not required: the map is defined on
    all of L1.
    """
    grid = lin.grid
    u_cells = _du_cells(lin, u)
    du = u_cells - lin.u_ref.values
    xi = pi = rho = None
    if z is not None:
        xi, pi, rho = z

    dx = variational_state_nodes(lin, du)
    if xi is not None:
        # response to -xi: forced linear system with zero control
        dx = dx - _forced_state_nodes(lin, xi)
    dp = variational_costate_nodes(lin, dx, du)
    if pi is not None:
        dp = dp - _forced_costate_nodes(lin, pi)

    lam = lin.sigma_nodes \
        + np.einsum("tij,tj->ti", lin.s_nodes, dx) \
        + np.einsum("tji,tj->ti", lin.b_nodes, dp)
    if rho is not None:
        lam = lam - _eval_disturbance(rho, grid.nodes, lin.control_dim)
    return GridFunction(grid, lam, PIECEWISE_LINEAR)


def _eval_disturbance(f, t: NDArray, dim: int) -> NDArray:
    if isinstance(f, GridFunction):
        return np.atleast_2d(f(t))
    vals = np.asarray(f(t), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return vals


def _forced_state_nodes(lin: LinearizationData, xi) -> NDArray[np.float64]:
    """Response of dx' = A dx + xi(t), dx(0) = 0 (per-cell RK4)."""
    grid = lin.grid
    t, h = grid.nodes, grid.h
    out = np.zeros((grid.n_steps + 1, lin.state_dim))
    for i in range(grid.n_steps):
        def rhs(tt: float, y: NDArray) -> NDArray:
            return lin.interp(lin.a_nodes, np.array([tt]))[0] @ y \
                + _eval_disturbance(xi, np.array([tt]), lin.state_dim)[0]
        out[i + 1] = _rk4_matrix(rhs, t[i], h, out[i])
    return out


def _forced_costate_nodes(lin: LinearizationData, pi) -> NDArray[np.float64]:
    """Response of -dp' = A^T dp + pi(t), dp(T) = 0 (per-cell RK4)."""
    grid = lin.grid
    t, h = grid.nodes, grid.h
    out = np.zeros((grid.n_steps + 1, lin.state_dim))
    for i in range(grid.n_steps - 1, -1, -1):
        def back(ss: float, y: NDArray) -> NDArray:
            tt = t[i] + t[i + 1] - ss
            return lin.interp(lin.a_nodes, np.array([tt]))[0].T @ y \
                + _eval_disturbance(pi, np.array([tt]), lin.state_dim)[0]
        out[i] = _rk4_matrix(back, t[i], h, out[i + 1])
    return out


# ---------------------------------------------------------------------------
# Coercivity probe
# ---------------------------------------------------------------------------


def _trig_bump(rng: np.random.Generator, horizon: float, m: int, target: float,
               n_terms: int = 3):
    """Smooth perturbation with W^{1,inf} norm equal to target."""
    coeff_cos = rng.normal(size=(m, n_terms))
    coeff_sin = rng.normal(size=(m, n_terms))
    freq = np.arange(1, n_terms + 1) * np.pi / horizon

    def raw(t: NDArray) -> NDArray:
        t = np.atleast_1d(t)
        return np.cos(np.outer(t, freq)) @ coeff_cos.T + np.sin(np.outer(t, freq)) @ coeff_sin.T

    def raw_dot(t: NDArray) -> NDArray:
        t = np.atleast_1d(t)
        return (np.cos(np.outer(t, freq)) * freq) @ coeff_sin.T \
            - (np.sin(np.outer(t, freq)) * freq) @ coeff_cos.T

    dense = np.linspace(0.0, horizon, 513)
    w1inf = float(np.max(np.abs(raw(dense))) + np.max(np.abs(raw_dot(dense))))
    scale = target / w1inf if w1inf > 0 else 0.0

    def bump(t: NDArray) -> NDArray:
        return scale * raw(t)

    return bump


@dataclass
class CoercivityProbeReport:
    min_margin: Optional[float]
    argmin_sample_norm: Optional[float]
    samples: int
    seed: int
    c0: float
    alpha0: float
    gamma0: float
    counterexample: Optional[dict] = None
    warning: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.min_margin is None or self.min_margin >= 0.0

    def to_json_dict(self) -> dict:
        out = {
            "min_margin": self.min_margin,
            "argmin_sample_norm": self.argmin_sample_norm,
            "samples": self.samples,
            "seed": self.seed,
            "c0": self.c0,
            "alpha0": self.alpha0,
            "gamma0": self.gamma0,
            "pass": self.passed,
        }
        if self.counterexample is not None:
            out["counterexample"] = self.counterexample
        if self.warning is not None:
            out["warning"] = self.warning
        return out


def coercivity_probe(lin: LinearizationData, control_set: Polytope, c0: float,
                     alpha0: float = 1.0, sample_count: int = 1000, seed: int = 0,
                     gamma0: float = 0.0, sign_restricted: bool = False) -> CoercivityProbeReport:
    """Sampled check of the lower bound
    integral |<sigma, du>| + Gamma(du) >= c0 ||du||_1^2.

    du ranges over differences of random feasible piecewise-constant
    controls rescaled so ||du||_1 <= alpha0; sigma ranges over the reference
    switching function and seeded smooth perturbations inside a W^{1,inf}
    ball of radius gamma0.  A negative margin is a counterexample
    certificate; a nonnegative minimum over the sample is evidence, not
    proof.  ``sign_restricted`` (box sets only) replaces the unsigned
    pairing by <sigma, du> with du = u' - u, where u is the cellwise vertex
    minimizer adapted to the sampled sigma; that keeps sigma inside
    -N_U(u) without projecting it out of the sampling ball.
    """
    if c0 <= 0 or alpha0 <= 0:
        raise ValueError("c0 and alpha0 must be positive")
    if sign_restricted and control_set.kind != "box":
        raise ValueError("the sign-restricted probe is implemented for boxes only")
    if sample_count == 0:
        return CoercivityProbeReport(
            min_margin=None, argmin_sample_norm=None, samples=0, seed=seed,
            c0=c0, alpha0=alpha0, gamma0=gamma0,
            warning="empty sample: vacuous pass",
        )

    rng = np.random.default_rng(seed)
    grid = lin.grid
    q = _quad_cache(lin)
    flat = q.pts.ravel()

    min_margin = np.inf
    argmin_norm = None
    counterexample = None

    verts = control_set.vertices
    mids = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])

    for k in range(sample_count):
        gamma = gamma0 * rng.uniform(0.0, 1.0) if gamma0 > 0 else 0.0
        sigma_vals = q.sigma_vals
        bump = None
        if gamma > 0:
            bump = _trig_bump(rng, grid.horizon, lin.control_dim, gamma)
            sigma_vals = sigma_vals + bump(flat)

        u_prime = control_set.sample(rng, grid.n_steps)
        if sign_restricted:
            sigma_mid = lin.interp(lin.sigma_nodes, mids)
            if bump is not None:
                sigma_mid = sigma_mid + bump(mids)
            u_base = verts[np.argmin(sigma_mid @ verts.T, axis=1)]
        else:
            u_base = control_set.sample(rng, grid.n_steps)
        du = u_prime - u_base
        norm1 = float(np.sum(np.linalg.norm(du, axis=1)) * grid.h)
        if norm1 == 0.0:
            continue
        target = alpha0 * rng.uniform(0.2, 1.0)
        if norm1 > target:
            du = du * (target / norm1)
            norm1 = target

        duv = q.cell_repeat(du)
        if sign_restricted:
            pair = np.einsum("ti,ti->t", sigma_vals, duv)
        else:
            pair = np.abs(np.einsum("ti,ti->t", sigma_vals, duv))
        margin = q.integrate(pair) + second_variation(lin, du) - c0 * norm1**2

        if margin < min_margin:
            min_margin = margin
            argmin_norm = norm1
            if margin < 0:
                counterexample = {
                    "sample_index": k,
                    "du_cells": du[:, 0].tolist() if lin.control_dim == 1 else du.tolist(),
                    "du_l1": norm1,
                    "gamma": gamma,
                    "margin": margin,
                }

    return CoercivityProbeReport(
        min_margin=float(min_margin), argmin_sample_norm=argmin_norm,
        samples=sample_count, seed=seed, c0=c0, alpha0=alpha0, gamma0=gamma0,
        counterexample=counterexample,
    )
