"""The discrete-time problem: damped forward-backward sweep for the discrete
minimum principle, continuous embedding, defect residuals, and convergence
studies against a dense oracle."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .grid import (
    PIECEWISE_CONSTANT,
    PIECEWISE_LINEAR,
    ContinuousSolution,
    ErrorNorms,
    Grid,
    GridFunction,
    control_error_l1,
    gauss_integrate,
    split_edges,
    w11_error,
)
from .model import (
    ControlAffineProblem,
    ExtremalTriple,
    normal_cone_distance,
    switching_function,
)
from .integrate import euler_backward_nodes, euler_forward_nodes


@dataclass(frozen=True)
class SweepConfig:
    """Forward-backward sweep settings.

    ``damping`` is the initial mixing weight of the minimizer update; it is
    halved automatically when the control change stalls (bang-bang chatter
    around a switch cell), which keeps the L1 stopping rule meaningful.
    """

    damping: float = 0.5
    tol_control: float = 1e-9
    max_iterations: int = 300
    tol_round: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol_control <= 0 or self.tol_round <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class SweepResult:
    grid: Grid
    x_nodes: NDArray[np.float64]
    p_nodes: NDArray[np.float64]
    u_cells: NDArray[np.float64]
    converged: bool
    iterations: int
    control_change: float
    stationarity_residual: float
    ambiguous_cells: int
    damping_final: float

    def embed(self) -> ExtremalTriple:
        return embed(self.grid, self.x_nodes, self.p_nodes, self.u_cells)


def discrete_switching(problem: ControlAffineProblem, x_nodes: NDArray,
                       p_nodes: NDArray, grid: Grid) -> NDArray[np.float64]:
    """sigma_i = B(t_i, x_i)^T p_{i+1} + s(t_i, x_i), the gradient entering
    the discrete stationarity condition."""
    t = grid.nodes
    out = np.empty((grid.n_steps, problem.control_dim))
    for i in range(grid.n_steps):
        out[i] = problem.control_matrix(t[i], x_nodes[i]).T @ p_nodes[i + 1] \
            + problem.cost_control(t[i], x_nodes[i])
    return out


def sweep_solve(problem: ControlAffineProblem, grid: Grid,
                config: SweepConfig = SweepConfig(),
                initial_control: Optional[NDArray] = None) -> SweepResult:
    """Damped forward-backward sweep for the discrete minimum principle.

    Iterates forward Euler, backward Euler adjoint, and the damped pointwise
    minimizer update until the L1 change of the control falls below
    tol_control, then rounds to the minimizing vertex wherever the vertex
    margin exceeds tol_round.  The returned state and costate are recomputed
    from the final control, so the discrete recursions hold exactly.
    """
    n = grid.n_steps
    verts = problem.control_set.vertices
    if initial_control is None:
        u = np.tile(problem.control_set.centroid, (n, 1))
    else:
        u = np.asarray(initial_control, dtype=float).copy()
        if u.ndim == 1:
            u = u[:, None]
        if u.shape != (n, problem.control_dim):
            raise ValueError(f"initial control must have shape ({n}, {problem.control_dim})")

    lam = config.damping
    guard = 10.0 * problem.bound()
    deltas: list[float] = []
    best_u = u.copy()
    best_delta = np.inf
    converged = False
    iterations = 0

    for it in range(config.max_iterations):
        iterations = it + 1
        x = euler_forward_nodes(problem, u, grid, guard)
        p = euler_backward_nodes(problem, x, u, grid, guard)
        sigma = discrete_switching(problem, x, p, grid)
        u_star = verts[np.argmin(sigma @ verts.T, axis=1)]
        u_new = (1.0 - lam) * u + lam * u_star
        delta = float(np.sum(np.linalg.norm(u_new - u, axis=1)) * grid.h)
        u = u_new
        deltas.append(delta)
        if delta < best_delta:
            best_delta, best_u = delta, u.copy()
        if delta < config.tol_control:
            converged = True
            break
        # chatter guard: insufficient decay over 6 iterations halves the damping
        if len(deltas) >= 7 and deltas[-1] > 0.5 * deltas[-7]:
            lam = max(0.5 * lam, 1e-4)

    if not converged and config.max_iterations > 0:
        u = best_u

    ambiguous = 0
    if config.max_iterations > 0:
        # bang-bang projection: repeat until the rounded control is stable
        for _ in range(5):
            x = euler_forward_nodes(problem, u, grid, guard)
            p = euler_backward_nodes(problem, x, u, grid, guard)
            sigma = discrete_switching(problem, x, p, grid)
            vals = sigma @ verts.T
            order = np.sort(vals, axis=1)
            gap = order[:, 1] - order[:, 0] if vals.shape[1] > 1 else np.full(n, np.inf)
            snap = gap > config.tol_round
            u_new = np.where(snap[:, None], verts[np.argmin(vals, axis=1)], u)
            if np.array_equal(u_new, u):
                break
            u = u_new
        ambiguous = int(np.sum(~snap))

    x = euler_forward_nodes(problem, u, grid, guard)
    p = euler_backward_nodes(problem, x, u, grid, guard)
    sigma = discrete_switching(problem, x, p, grid)
    residual = 0.0
    for i in range(n):
        residual = max(residual, normal_cone_distance(sigma[i], u[i], problem.control_set))

    return SweepResult(
        grid=grid, x_nodes=x, p_nodes=p, u_cells=u,
        converged=converged, iterations=iterations,
        control_change=deltas[-1] if deltas else 0.0,
        stationarity_residual=residual,
        ambiguous_cells=ambiguous,
        damping_final=lam,
    )


def embed(grid: Grid, x_nodes: NDArray, p_nodes: NDArray,
          u_cells: NDArray) -> ExtremalTriple:
    """Continuous embedding: piecewise-linear state and costate through the
    nodes, piecewise-constant control on half-open cells.  Node values are
    preserved exactly."""
    return ExtremalTriple(
        grid=grid,
        x=GridFunction(grid, np.asarray(x_nodes, dtype=float), PIECEWISE_LINEAR),
        p=GridFunction(grid, np.asarray(p_nodes, dtype=float), PIECEWISE_LINEAR),
        u=GridFunction(grid, np.asarray(u_cells, dtype=float), PIECEWISE_CONSTANT),
    )


@dataclass(frozen=True)
class ResidualTriple:
    d1: float  # state-equation defect, L1
    d2: float  # costate-equation defect, L1
    d3: float  # stationarity-gradient defect, sup


def residuals(problem: ControlAffineProblem, triple: ExtremalTriple) -> ResidualTriple:
    """Defects of the embedded discrete solution in the continuous system.

    The embedding preserves node values, so the discrete triple is read off
    the node arrays of `triple`.
    """
    grid = triple.grid
    t = grid.nodes
    xdot = triple.x.derivative()
    pdot = triple.p.derivative()

    def d1_integrand(ts: NDArray) -> NDArray:
        xs, us = triple.x(ts), triple.u(ts)
        f = np.stack([problem.dynamics(ti, xi, ui) for ti, xi, ui in zip(ts, xs, us)])
        return np.linalg.norm(xdot(ts) - f, axis=1)

    def d2_integrand(ts: NDArray) -> NDArray:
        xs, ps, us = triple.x(ts), triple.p(ts), triple.u(ts)
        g = np.stack([problem.grad_hamiltonian_x(ti, xi, pi, ui)
                      for ti, xi, pi, ui in zip(ts, xs, ps, us)])
        return np.linalg.norm(pdot(ts) + g, axis=1)

    d1 = gauss_integrate(d1_integrand, t)
    d2 = gauss_integrate(d2_integrand, t)

    d3 = 0.0
    x_nodes, p_nodes, u_cells = triple.x.values, triple.p.values, triple.u.values
    for i in range(grid.n_steps):
        sig_i = switching_function(problem, t[i], x_nodes[i], p_nodes[i])
        samples = np.linspace(t[i], t[i + 1], 7)
        samples[-1] = np.nextafter(t[i + 1], t[i])  # stay inside the half-open cell
        xs, ps = triple.x(samples), triple.p(samples)
        for ts_, xi, pi in zip(samples, xs, ps):
            sig_c = switching_function(problem, ts_, xi, pi)
            d3 = max(d3, float(np.linalg.norm(sig_i - sig_c)))
    return ResidualTriple(d1=d1, d2=d2, d3=d3)


def solution_distance(triple: ExtremalTriple, oracle: ContinuousSolution) -> ErrorNorms:
    """Y-space distance of an embedded triple to a dense solution, with
    quadrature cells split at the oracle's switching times."""
    return ErrorNorms(
        x_w11=w11_error(triple.x, oracle.x, oracle.xdot, oracle.breakpoints),
        p_w11=w11_error(triple.p, oracle.p, oracle.pdot, oracle.breakpoints),
        u_l1=control_error_l1(triple.u, oracle),
    )


def triple_as_solution(triple: ExtremalTriple) -> ContinuousSolution:
    """View an embedded triple as a dense solution (for self-comparison and
    as a fallback oracle)."""
    xdot = triple.x.derivative()
    pdot = triple.p.derivative()
    return ContinuousSolution(
        horizon=triple.grid.horizon,
        x=triple.x, p=triple.p, u=triple.u, xdot=xdot, pdot=pdot,
        breakpoints=triple.grid.nodes[1:-1].copy(),
    )


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    h: float
    err_x_w11: float
    err_p_w11: float
    err_u_l1: float
    err_total: float
    converged: bool


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]
    order: Optional[float] = None
    constant: Optional[float] = None
    rows_used: int = 0

    CSV_HEADER = "N,h,err_x_w11,err_p_w11,err_u_l1,err_total,converged"

    def consecutive_ratios(self) -> list[float]:
        out = []
        for a, b in zip(self.rows[:-1], self.rows[1:]):
            out.append(a.err_total / b.err_total if b.err_total > 0 else float("inf"))
        return out

    def to_csv_text(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.n},{r.h:.17g},{r.err_x_w11:.17g},{r.err_p_w11:.17g},"
                f"{r.err_u_l1:.17g},{r.err_total:.17g},{int(r.converged)}"
            )
        footer = {
            "order": self.order,
            "constant_C": self.constant,
            "rows_used": self.rows_used,
        }
        lines.append("# " + json.dumps(footer))
        return "\n".join(lines) + "\n"


def fit_order(rows: Sequence[ConvergenceRow]) -> tuple[Optional[float], Optional[float], int]:
    """Least-squares fit of log(total error) against log(h).

    The largest-h row is dropped when its error ratio deviates more than 20%
    from the median of the remaining consecutive ratios (pre-asymptotic
    regime); returns (order, constant, rows_used) with None sentinels when
    fewer than two usable rows remain.
    """
    usable = [r for r in rows if r.converged and r.err_total > 0.0]
    usable.sort(key=lambda r: -r.h)
    if len(usable) >= 4:
        ratios = [a.err_total / b.err_total for a, b in zip(usable[:-1], usable[1:])]
        med = float(np.median(ratios[1:]))
        if med > 0 and abs(ratios[0] - med) / med > 0.2:
            usable = usable[1:]
    if len(usable) < 2:
        return None, None, len(usable)
    lg_h = np.log([r.h for r in usable])
    lg_e = np.log([r.err_total for r in usable])
    slope, intercept = np.polyfit(lg_h, lg_e, 1)
    return float(slope), float(np.exp(intercept)), len(usable)


def convergence_study(problem: ControlAffineProblem, oracle: ContinuousSolution,
                      n_list: Sequence[int],
                      config: SweepConfig = SweepConfig()) -> ConvergenceTable:
    """Solve at every N, embed, and measure the three error norms against the
    dense oracle; a least-squares fit of the totals gives the observed order.

    Non-converged sweeps are flagged and excluded from the fit; the study
    continues.
    """
    if any(b <= a for a, b in zip(n_list, list(n_list)[1:])):
        raise ValueError("N list must be strictly increasing")
    rows = []
    for n in n_list:
        grid = Grid(n, problem.horizon)
        result = sweep_solve(problem, grid, config)
        err = solution_distance(result.embed(), oracle)
        rows.append(ConvergenceRow(
            n=n, h=grid.h, err_x_w11=err.x_w11, err_p_w11=err.p_w11,
            err_u_l1=err.u_l1, err_total=err.total, converged=result.converged,
        ))
    order, constant, used = fit_order(rows)
    return ConvergenceTable(rows=rows, order=order, constant=constant, rows_used=used)
