"""Continuous optimality-system residuals and switching-structure analysis.

The switching analyzer locates zeros of the switching function along every
edge direction of the control polytope, estimates one-sided slopes, and
checks the linear-growth condition that rules out singular arcs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray

from .grid import gauss_integrate
from .model import ControlAffineProblem, ExtremalTriple, Polytope, normal_cone_distance


@dataclass(frozen=True)
class SwitchingConfig:
    tol_sing: Optional[float] = None   # default 1e-8 * max |sigma_e|
    kappa_min: float = 1e-6
    window: int = 5                    # slope-fit nodes per side, nearest node excluded


@dataclass
class EdgeSwitchingReport:
    edge_index: int
    direction: NDArray[np.float64]
    zeros: list[float]
    slopes_minus: list[float]
    slopes_plus: list[float]
    kappa: Optional[float]            # None encodes the no-zero (+inf) sentinel
    tau: float
    bang_bang: bool
    passed: bool
    singular_runs: int = 0

    def to_json_dict(self) -> dict:
        return {
            "edge_index": self.edge_index,
            "zeros": list(map(float, self.zeros)),
            "slopes_minus": list(map(float, self.slopes_minus)),
            "slopes_plus": list(map(float, self.slopes_plus)),
            "kappa": None if self.kappa is None else float(self.kappa),
            "tau": float(self.tau),
            "bang_bang": bool(self.bang_bang),
            "pass": bool(self.passed),
        }


@dataclass
class SwitchingReport:
    edges: list[EdgeSwitchingReport]

    @property
    def kappa(self) -> Optional[float]:
        finite = [e.kappa for e in self.edges if e.kappa is not None]
        return min(finite) if finite else None

    @property
    def tau(self) -> float:
        return min((e.tau for e in self.edges), default=0.0)

    @property
    def zero_count(self) -> int:
        return sum(len(e.zeros) for e in self.edges)

    @property
    def bang_bang(self) -> bool:
        return all(e.bang_bang for e in self.edges)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.edges)

    def to_json(self) -> str:
        return json.dumps([e.to_json_dict() for e in self.edges], indent=2)


def _fit_slope(t: NDArray, v: NDArray) -> float:
    if len(t) < 2:
        return float("nan")
    return float(np.polyfit(t, v, 1)[0])


def analyze_switching_samples(times: NDArray, values: NDArray,
                              config: SwitchingConfig = SwitchingConfig(),
                              edge_index: int = 0,
                              direction: Optional[NDArray] = None) -> EdgeSwitchingReport:
    """Scalar switching series analysis on grid nodes.

    Zeros are bracketed by sign changes and placed at the exact zero of the
    piecewise-linear interpolant.  One-sided slopes come from least-squares
    fits over ``window`` nodes on each side, excluding the node nearest the
    zero (it straddles the kink).
    """
    times = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    scale = float(np.max(np.abs(v))) if len(v) else 0.0
    tol_sing = config.tol_sing if config.tol_sing is not None else 1e-8 * max(scale, 1e-300)

    small = np.abs(v) < tol_sing
    # singular plateau: more than 2 consecutive cells with |sigma_e| below tol
    singular_runs = 0
    run = 0
    for flag in small:
        run = run + 1 if flag else 0
        if run == 4:  # 4 nodes = 3 cells > 2 cells
            singular_runs += 1
    bang_bang = singular_runs == 0

    zeros: list[float] = []
    slopes_minus: list[float] = []
    slopes_plus: list[float] = []
    zero_cells: list[int] = []
    sign = np.sign(v)
    for i in range(len(v) - 1):
        if sign[i] * sign[i + 1] < 0:
            s = times[i] + (times[i + 1] - times[i]) * v[i] / (v[i] - v[i + 1])
            zeros.append(float(s))
            zero_cells.append(i)
        elif v[i] == 0.0 and (i == 0 or v[i - 1] != 0.0) and (i + 1 < len(v) and v[i + 1] != 0.0):
            if i > 0 and sign[i - 1] * sign[i + 1] < 0:
                zeros.append(float(times[i]))
                zero_cells.append(i)

    w = max(1, config.window)
    for s, i in zip(zeros, zero_cells):
        lo = slice(max(0, i - w), max(0, i))                  # nodes left of the nearest-left node
        hi = slice(min(len(v), i + 2), min(len(v), i + 2 + w))
        slopes_minus.append(_fit_slope(times[lo], v[lo]))
        slopes_plus.append(_fit_slope(times[hi], v[hi]))

    if zeros:
        kappa = float(min(min(np.abs(slopes_minus), default=np.inf),
                          min(np.abs(slopes_plus), default=np.inf)))
    else:
        kappa = None  # +inf sentinel: the growth condition is vacuous

    # largest radius r such that |sigma_e(t_i)| >= 0.9 kappa |t_i - s| holds
    # for every node within distance r of every zero
    tau = float(times[-1] - times[0])
    growth_ok_window = True
    if zeros and kappa is not None and kappa > 0:
        for s in zeros:
            d = np.abs(times - s)
            ok = np.abs(v) >= 0.9 * kappa * d - 1e-14
            bad = np.where(~ok)[0]
            tau = min(tau, float(d[bad].min()) if len(bad) else float(d.max()))
        for s, i in zip(zeros, zero_cells):
            sel = np.abs(times - s) <= (w + 1) * (times[1] - times[0])
            ok = np.abs(v[sel]) >= 0.9 * kappa * np.abs(times[sel] - s) - 1e-14
            if not np.all(ok):
                growth_ok_window = False

    passed = bool(bang_bang and (kappa is None or kappa >= config.kappa_min)
                  and growth_ok_window)
    return EdgeSwitchingReport(
        edge_index=edge_index,
        direction=direction if direction is not None else np.array([1.0]),
        zeros=zeros,
        slopes_minus=slopes_minus,
        slopes_plus=slopes_plus,
        kappa=kappa,
        tau=tau,
        bang_bang=bang_bang,
        passed=passed,
        singular_runs=singular_runs,
    )


def analyze_switching(problem: ControlAffineProblem, triple: ExtremalTriple,
                      config: SwitchingConfig = SwitchingConfig()) -> SwitchingReport:
    """Per-edge switching analysis of a triple's switching function."""
    sigma = triple.sigma_nodes(problem)
    t = triple.grid.nodes
    dirs = problem.control_set.edge_directions()
    reports = []
    for k, e in enumerate(dirs):
        reports.append(
            analyze_switching_samples(t, sigma @ e, config, edge_index=k, direction=e)
        )
    return SwitchingReport(edges=reports)


class RobustMargin(NamedTuple):
    kappa_robust: float
    tau_robust: float
    valid: bool


def robust_switching_margin(report: SwitchingReport | EdgeSwitchingReport,
                            gamma: float) -> RobustMargin:
    """Growth certificate after a W^{1,inf} perturbation of size gamma.

    Returns kappa' = kappa - gamma and tau' = tau / 2, valid only while
    gamma < kappa / 4 (the regime the robustness argument covers); larger
    perturbations flag the certificate invalid.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    kappa = report.kappa
    if kappa is None:
        return RobustMargin(float("inf"), report.tau / 2.0, True)
    valid = gamma < kappa / 4.0
    return RobustMargin(float(kappa - gamma), report.tau / 2.0, bool(valid))


class CoercivityBound(NamedTuple):
    value: Optional[float]
    note: str


def coercivity_constant_bound(report: SwitchingReport | EdgeSwitchingReport,
                              control_interval: Polytope) -> CoercivityBound:
    """First-order coercivity constant Q / (8 k (u2 - u1)) for a scalar
    control on an interval, from the zero count k and the minimal one-sided
    slope magnitude Q."""
    if control_interval.kind != "box" or control_interval.dim != 1:
        raise ValueError("the bound applies to scalar interval controls only")
    edges = report.edges if isinstance(report, SwitchingReport) else [report]
    zeros = [s for e in edges for s in e.zeros]
    k = len(zeros)
    if k == 0:
        return CoercivityBound(
            None,
            "no switching; first-order term bounded below by min|sigma| * ||du||_1",
        )
    slopes = [abs(s) for e in edges for s in (e.slopes_minus + e.slopes_plus)]
    q = min(slopes)
    width = float(control_interval.upper[0] - control_interval.lower[0])
    return CoercivityBound(q / (8.0 * k * width), "")


def pmp_residuals(problem: ControlAffineProblem,
                  triple: ExtremalTriple) -> tuple[float, float, float]:
    """(r_state, r_costate, r_stationarity) of the continuous optimality system.

    r_state and r_costate are L1 norms of the interpolant defects, by
    per-cell Gauss quadrature; r_stationarity is the sup over cells of the
    distance from -sigma(t_i) to the normal cone at u_i.
    """
    grid = triple.grid
    xdot = triple.x.derivative()
    pdot = triple.p.derivative()
    edges = grid.nodes

    def state_defect(t: NDArray) -> NDArray:
        xs, us = triple.x(t), triple.u(t)
        f = np.stack([problem.dynamics(ti, xi, ui) for ti, xi, ui in zip(t, xs, us)])
        return np.linalg.norm(xdot(t) - f, axis=1)

    def costate_defect(t: NDArray) -> NDArray:
        xs, ps, us = triple.x(t), triple.p(t), triple.u(t)
        g = np.stack([problem.grad_hamiltonian_x(ti, xi, pi, ui)
                      for ti, xi, pi, ui in zip(t, xs, ps, us)])
        return np.linalg.norm(pdot(t) + g, axis=1)

    r_state = gauss_integrate(state_defect, edges)
    r_costate = gauss_integrate(costate_defect, edges)

    sigma = triple.sigma_nodes(problem)
    r_stat = 0.0
    for i in range(grid.n_steps):
        r_stat = max(r_stat, normal_cone_distance(sigma[i], triple.u.values[i],
                                                  problem.control_set))
    return r_state, r_costate, r_stat
