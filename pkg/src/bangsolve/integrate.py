"""Time stepping: forward Euler, backward Euler adjoint, and a high-order
reference integrator used as a desk-scale oracle when no closed form exists."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .grid import (
    PIECEWISE_CONSTANT,
    PIECEWISE_LINEAR,
    ContinuousSolution,
    Grid,
    GridFunction,
)
from .model import ControlAffineProblem


class DivergenceError(RuntimeError):
    """State or costate escaped the working ball; names the first bad node."""

    def __init__(self, what: str, node: int, t: float, value: float, limit: float):
        self.node = node
        super().__init__(
            f"{what} norm {value:.6g} exceeded {limit:.6g} at node {node} (t = {t:.6g})"
        )


def _control_cells(control, grid: Grid, m: int) -> NDArray[np.float64]:
    if isinstance(control, GridFunction):
        if control.kind != PIECEWISE_CONSTANT or control.grid != grid:
            raise ValueError("control must be piecewise-constant on the integration grid")
        return control.values
    u = np.asarray(control, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape != (grid.n_steps, m):
        raise ValueError(f"control must have shape ({grid.n_steps}, {m}), got {u.shape}")
    return u


def euler_forward_nodes(problem: ControlAffineProblem, u_cells: NDArray, grid: Grid,
                        guard: Optional[float]) -> NDArray[np.float64]:
    """Raw node array for x_{i+1} = x_i + h f(t_i, x_i, u_i)."""
    n, h = grid.n_steps, grid.h
    t = grid.nodes
    x = np.empty((n + 1, problem.state_dim))
    x[0] = problem.initial_state
    for i in range(n):
        x[i + 1] = x[i] + h * problem.dynamics(t[i], x[i], u_cells[i])
        if guard is not None:
            nrm = float(np.linalg.norm(x[i + 1]))
            if not nrm <= guard:
                raise DivergenceError("state", i + 1, t[i + 1], nrm, guard)
    return x


def euler_backward_nodes(problem: ControlAffineProblem, x_nodes: NDArray,
                         u_cells: NDArray, grid: Grid,
                         guard: Optional[float]) -> NDArray[np.float64]:
    """Raw node array for p_i = p_{i+1} + h grad_x H(t_i, x_i, u_i, p_{i+1}),
    p_N = 0."""
    n, h = grid.n_steps, grid.h
    t = grid.nodes
    p = np.empty((n + 1, problem.state_dim))
    p[n] = 0.0
    for i in range(n - 1, -1, -1):
        p[i] = p[i + 1] + h * problem.grad_hamiltonian_x(t[i], x_nodes[i], p[i + 1], u_cells[i])
        if guard is not None:
            nrm = float(np.linalg.norm(p[i]))
            if not nrm <= guard:
                raise DivergenceError("costate", i, t[i], nrm, guard)
    return p


def _default_guard(problem: ControlAffineProblem) -> float:
    # escape from B(0; M-bar) signals a setup bug, not a math result
    return 10.0 * problem.bound()


def euler_forward(problem: ControlAffineProblem, control, grid: Grid,
                  guard: Optional[float] = 0.0) -> GridFunction:
    """Forward Euler state sweep; returns the piecewise-linear embedding.

    ``guard`` is the divergence threshold (default 10 * M-bar, None disables).
    """
    u = _control_cells(control, grid, problem.control_dim)
    limit = _default_guard(problem) if guard == 0.0 else guard
    x = euler_forward_nodes(problem, u, grid, limit)
    return GridFunction(grid, x, PIECEWISE_LINEAR)


def euler_backward_adjoint(problem: ControlAffineProblem, state, control, grid: Grid,
                           guard: Optional[float] = 0.0) -> GridFunction:
    """Backward Euler costate sweep paired with euler_forward on the same grid."""
    u = _control_cells(control, grid, problem.control_dim)
    x = state.values if isinstance(state, GridFunction) else np.asarray(state, dtype=float)
    limit = _default_guard(problem) if guard == 0.0 else guard
    p = euler_backward_nodes(problem, x, u, grid, limit)
    return GridFunction(grid, p, PIECEWISE_LINEAR)


# ---------------------------------------------------------------------------
# Reference integrator (classical RK4 with breakpoint-aligned steps)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseConstantControl:
    """Control with exactly known breakpoints: value k on [times[k], times[k+1])."""

    times: NDArray[np.float64]   # length k+1, starts at 0, ends at T
    values: NDArray[np.float64]  # shape (k, m)

    def __post_init__(self) -> None:
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", v)
        if len(self.times) != len(self.values) + 1:
            raise ValueError("need one more breakpoint than control values")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("breakpoints must be strictly increasing")

    @staticmethod
    def from_grid_function(u: GridFunction) -> "PiecewiseConstantControl":
        if u.kind != PIECEWISE_CONSTANT:
            raise ValueError("expected a piecewise-constant grid function")
        vals = u.values
        keep = np.concatenate([[True], np.any(np.diff(vals, axis=0) != 0.0, axis=1)])
        times = np.concatenate([u.grid.nodes[:-1][keep], [u.grid.horizon]])
        return PiecewiseConstantControl(times, vals[keep])

    def __call__(self, t: NDArray | float) -> NDArray[np.float64]:
        idx = np.clip(np.searchsorted(self.times, np.atleast_1d(t), side="right") - 1,
                      0, len(self.values) - 1)
        return self.values[idx]

    @property
    def interior_breakpoints(self) -> NDArray[np.float64]:
        return self.times[1:-1]


class _CubicHermite:
    """Dense output through (t_k, y_k) with one-sided step slopes.

    Slopes are stored per step (left and right), so steps adjacent to a
    control breakpoint interpolate with the slope belonging to their own
    smooth piece.
    """

    def __init__(self, t: NDArray, y: NDArray, f_left: NDArray, f_right: NDArray):
        self.t, self.y = t, y
        self.f_left, self.f_right = f_left, f_right

    def __call__(self, tq: NDArray | float) -> NDArray[np.float64]:
        tq = np.atleast_1d(np.asarray(tq, dtype=float))
        i = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        h = (self.t[i + 1] - self.t[i])[:, None]
        s = ((tq - self.t[i]) / (self.t[i + 1] - self.t[i]))[:, None]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return (h00 * self.y[i] + h10 * h * self.f_left[i]
                + h01 * self.y[i + 1] + h11 * h * self.f_right[i])

    def derivative(self, tq: NDArray | float) -> NDArray[np.float64]:
        tq = np.atleast_1d(np.asarray(tq, dtype=float))
        i = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        h = (self.t[i + 1] - self.t[i])[:, None]
        s = ((tq - self.t[i]) / (self.t[i + 1] - self.t[i]))[:, None]
        d00 = 6.0 * s * (s - 1.0) / h
        d10 = 3.0 * s * s - 4.0 * s + 1.0
        d01 = -d00
        d11 = 3.0 * s * s - 2.0 * s
        return (d00 * self.y[i] + d10 * self.f_left[i]
                + d01 * self.y[i + 1] + d11 * self.f_right[i])


def _segment_nodes(times: NDArray, steps_per_unit: int) -> NDArray[np.float64]:
    """Union of per-segment uniform subgrids, so every breakpoint is a node."""
    parts = [np.array([times[0]])]
    for a, b in zip(times[:-1], times[1:]):
        k = max(1, int(np.ceil((b - a) * steps_per_unit)))
        parts.append(a + (b - a) * np.arange(1, k + 1) / k)
    return np.concatenate(parts)


def reference_solve(problem: ControlAffineProblem, control: PiecewiseConstantControl,
                    steps_per_unit: int = 4096,
                    guard: Optional[float] = 0.0) -> ContinuousSolution:
    """Classical 4th-order integration of the state and costate equations.

    Steps are split at the control breakpoints so the right-hand side is
    smooth within every step; local error is O(h_ref^5).  Returns dense
    cubic-Hermite interpolants for x and p, with xdot/pdot evaluated
    through the dynamics for exact consistency.
    """
    limit = _default_guard(problem) if guard == 0.0 else guard
    t = _segment_nodes(control.times, steps_per_unit)
    k = len(t) - 1
    n = problem.state_dim

    def u_left(ti: float, tj: float) -> NDArray:
        # control value on the step [ti, tj): sample strictly inside
        return control(0.5 * (ti + tj))[0]

    x = np.empty((k + 1, n))
    fxl = np.empty((k, n))
    fxr = np.empty((k, n))
    x[0] = problem.initial_state
    for i in range(k):
        h = t[i + 1] - t[i]
        u = u_left(t[i], t[i + 1])
        k1 = problem.dynamics(t[i], x[i], u)
        k2 = problem.dynamics(t[i] + 0.5 * h, x[i] + 0.5 * h * k1, u)
        k3 = problem.dynamics(t[i] + 0.5 * h, x[i] + 0.5 * h * k2, u)
        k4 = problem.dynamics(t[i] + h, x[i] + h * k3, u)
        x[i + 1] = x[i] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if limit is not None:
            nrm = float(np.linalg.norm(x[i + 1]))
            if not nrm <= limit:
                raise DivergenceError("state", i + 1, t[i + 1], nrm, limit)
        fxl[i] = k1
        fxr[i] = problem.dynamics(t[i + 1], x[i + 1], u)
    x_dense = _CubicHermite(t, x, fxl, fxr)

    def pdot_rhs(ti: float, pi: NDArray, u: NDArray) -> NDArray:
        return -problem.grad_hamiltonian_x(ti, x_dense(ti)[0], pi, u)

    p = np.empty((k + 1, n))
    gpl = np.empty((k, n))
    gpr = np.empty((k, n))
    p[k] = 0.0
    for i in range(k - 1, -1, -1):
        h = t[i + 1] - t[i]
        u = u_left(t[i], t[i + 1])
        k1 = pdot_rhs(t[i + 1], p[i + 1], u)
        k2 = pdot_rhs(t[i + 1] - 0.5 * h, p[i + 1] - 0.5 * h * k1, u)
        k3 = pdot_rhs(t[i + 1] - 0.5 * h, p[i + 1] - 0.5 * h * k2, u)
        k4 = pdot_rhs(t[i], p[i + 1] - h * k3, u)
        p[i] = p[i + 1] - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if limit is not None:
            nrm = float(np.linalg.norm(p[i]))
            if not nrm <= limit:
                raise DivergenceError("costate", i, t[i], nrm, limit)
        gpr[i] = k1
        gpl[i] = pdot_rhs(t[i], p[i], u)
    p_dense = _CubicHermite(t, p, gpl, gpr)

    def u_fn(tq: NDArray) -> NDArray:
        return control(tq)

    # the cubic derivatives track the right-hand sides to O(h_ref^3)
    return ContinuousSolution(
        horizon=float(control.times[-1]),
        x=x_dense, p=p_dense, u=u_fn,
        xdot=x_dense.derivative, pdot=p_dense.derivative,
        breakpoints=control.interior_breakpoints.copy(),
    )
