"""Families of perturbed problems and the uniform-convergence experiment.

Members are built from the base problem by adding smooth, time-invariant
bumps to the drift, the control matrix, and the two running-cost slots.
Each member is measured on a dense lattice over the working domain
D = B(0; M-bar) x U and rescaled so the combined W^{1,inf} distance of the
dynamics and cost pairs stays within the requested budget.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .grid import ContinuousSolution, Grid, continuous_distance
from .integrate import PiecewiseConstantControl, reference_solve
from .model import ControlAffineProblem
from .euler import ConvergenceTable, SweepConfig, convergence_study, sweep_solve


@dataclass(frozen=True)
class TrigBump:
    """amp * cos(freq * <c, x> / scale + phase), with analytic derivatives."""

    amplitude: float
    frequency: float
    direction: NDArray[np.float64]
    phase: float
    scale: float

    def _z(self, x: NDArray) -> float:
        return self.frequency * float(self.direction @ x) / self.scale + self.phase

    def value(self, x: NDArray) -> float:
        return self.amplitude * np.cos(self._z(x))

    def grad(self, x: NDArray) -> NDArray[np.float64]:
        return (-self.amplitude * np.sin(self._z(x))
                * self.frequency / self.scale) * self.direction

    def hess(self, x: NDArray) -> NDArray[np.float64]:
        c = -self.amplitude * np.cos(self._z(x)) * (self.frequency / self.scale) ** 2
        return c * np.outer(self.direction, self.direction)

    def scaled(self, factor: float) -> "TrigBump":
        return TrigBump(self.amplitude * factor, self.frequency, self.direction,
                        self.phase, self.scale)


def _draw_bump(rng: np.random.Generator, n: int, scale: float,
               frequencies: Sequence[float]) -> TrigBump:
    direction = rng.normal(size=n)
    nrm = np.linalg.norm(direction)
    direction = direction / nrm if nrm > 0 else np.ones(n) / np.sqrt(n)
    return TrigBump(
        amplitude=rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0]),
        frequency=float(rng.choice(frequencies)),
        direction=direction,
        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        scale=scale,
    )


@dataclass(frozen=True)
class PerturbationSpec:
    """Sampling plan for a problem family within a W^{1,inf} budget."""

    rho: float
    seed: int
    count: int
    split: float = 0.5                  # budget fraction for the dynamics pair
    frequencies: tuple[float, ...] = (np.pi, 2.0 * np.pi)
    lattice: int = 50                   # lattice points per dimension for the norm check

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if not 0.0 <= self.split <= 1.0:
            raise ValueError("split must lie in [0, 1]")
        if self.count < 0:
            raise ValueError("count must be nonnegative")


@dataclass
class _MemberBumps:
    da: list[TrigBump]            # per state component
    db: list[list[TrigBump]]      # (n, m)
    dw: TrigBump
    ds: list[TrigBump]            # per control component

    def scale_f(self, factor: float) -> None:
        self.da = [b.scaled(factor) for b in self.da]
        self.db = [[b.scaled(factor) for b in row] for row in self.db]

    def scale_g(self, factor: float) -> None:
        self.dw = self.dw.scaled(factor)
        self.ds = [b.scaled(factor) for b in self.ds]


def _domain_lattice(problem: ControlAffineProblem, points: int) -> tuple[NDArray, NDArray]:
    bound = problem.bound()
    n, m = problem.state_dim, problem.control_dim
    ax_x = [np.linspace(-bound, bound, points)] * n
    xs = np.stack(np.meshgrid(*ax_x, indexing="ij"), axis=-1).reshape(-1, n)
    cs = problem.control_set
    if cs.kind == "box":
        ax_u = [np.linspace(lo, hi, points) if hi > lo else np.array([lo])
                for lo, hi in zip(cs.lower, cs.upper)]
        us = np.stack(np.meshgrid(*ax_u, indexing="ij"), axis=-1).reshape(-1, m)
    else:
        mix = np.random.default_rng(0).dirichlet(np.ones(len(cs.vertices)), size=points**m)
        us = np.vstack([cs.vertices, mix @ cs.vertices])
    return xs, us


def _w1inf_f(bumps: _MemberBumps, xs: NDArray, us: NDArray) -> float:
    """sup |df| + sup |grad_(x,u) df| of df(x,u) = da(x) + dB(x) u (max-abs)."""
    val = 0.0
    der = 0.0
    for x in xs:
        da = np.array([b.value(x) for b in bumps.da])
        db = np.array([[b.value(x) for b in row] for row in bumps.db])
        dag = np.array([b.grad(x) for b in bumps.da])
        dbg = np.array([[b.grad(x) for b in row] for row in bumps.db])
        v = da[None, :] + us @ db.T
        gx = dag[None, :, :] + np.einsum("uj,ijk->uik", us, dbg)
        val = max(val, float(np.max(np.abs(v))))
        der = max(der, float(np.max(np.abs(gx))), float(np.max(np.abs(db))))
    return val + der


def _w1inf_g(bumps: _MemberBumps, xs: NDArray, us: NDArray) -> float:
    val = 0.0
    der = 0.0
    for x in xs:
        dw = bumps.dw.value(x)
        ds = np.array([b.value(x) for b in bumps.ds])
        dwg = bumps.dw.grad(x)
        dsg = np.array([b.grad(x) for b in bumps.ds])
        v = dw + us @ ds
        gx = dwg[None, :] + us @ dsg
        val = max(val, float(np.max(np.abs(v))))
        der = max(der, float(np.max(np.abs(gx))), float(np.max(np.abs(ds))))
    return val + der


def _compose(base, extra):
    """Wrap a base derivative slot with an additive analytic term; None stays None."""
    if base is None:
        return None
    return lambda t, x, *rest: base(t, x, *rest) + extra(x)


class _BumpStack:
    """Vectorized evaluation of a list of bumps sharing one x argument.

    The single-bump scalar-state case (the whole built-in catalog) takes a
    plain-float fast path: these closures sit inside every integration step.
    """

    def __init__(self, bumps: Sequence[TrigBump], shape: tuple[int, ...]):
        self.shape = shape
        self.amps = np.array([b.amplitude for b in bumps])
        self.rate = np.array([b.frequency / b.scale for b in bumps])
        self.dirs = np.array([b.direction for b in bumps])  # (k, n)
        self.phase = np.array([b.phase for b in bumps])
        self.scalar = len(bumps) == 1 and self.dirs.shape[1] == 1
        if self.scalar:
            self._a = float(self.amps[0])
            self._r = float(self.rate[0] * self.dirs[0, 0])
            self._ph = float(self.phase[0])

    def _z(self, x: NDArray) -> NDArray:
        return self.rate * (self.dirs @ x) + self.phase

    def value(self, x: NDArray) -> NDArray:
        if self.scalar:
            return np.asarray(self._a * math.cos(self._r * x[0] + self._ph)).reshape(self.shape)
        return (self.amps * np.cos(self._z(x))).reshape(self.shape)

    def jac(self, x: NDArray) -> NDArray:
        if self.scalar:
            v = -self._a * math.sin(self._r * x[0] + self._ph) * self._r
            return np.asarray(v).reshape(self.shape + (1,))
        coeff = -self.amps * np.sin(self._z(x)) * self.rate
        return (coeff[:, None] * self.dirs).reshape(self.shape + self.dirs.shape[1:])

    def hess(self, x: NDArray) -> NDArray:
        if self.scalar:
            v = -self._a * math.cos(self._r * x[0] + self._ph) * self._r * self._r
            return np.asarray(v).reshape(self.shape + (1, 1))
        coeff = -self.amps * np.cos(self._z(x)) * self.rate**2
        outer = np.einsum("ki,kj->kij", self.dirs, self.dirs)
        return (coeff[:, None, None] * outer).reshape(
            self.shape + self.dirs.shape[1:] * 2)


def _perturbed_problem(base: ControlAffineProblem, bumps: _MemberBumps,
                       index: int, meta: dict) -> ControlAffineProblem:
    n, m = base.state_dim, base.control_dim
    a_st = _BumpStack(bumps.da, (n,))
    b_st = _BumpStack([b for row in bumps.db for b in row], (n, m))
    w_st = _BumpStack([bumps.dw], ())
    s_st = _BumpStack(bumps.ds, (m,))

    da_val, da_jac = a_st.value, a_st.jac
    db_val, db_jac = b_st.value, b_st.jac
    ds_val, ds_jac, ds_hess = s_st.value, s_st.jac, s_st.hess

    def dw_val(x):
        return float(w_st.value(x))

    def dw_grad(x):
        return w_st.jac(x)

    def dw_hess(x):
        return w_st.hess(x)

    def df_hess(x, u):
        return a_st.hess(x) + np.einsum("ijkl,j->ikl", b_st.hess(x), u)

    return ControlAffineProblem(
        name=f"{base.name}+pert{index}",
        state_dim=n,
        control_dim=m,
        horizon=base.horizon,
        initial_state=base.initial_state.copy(),
        drift=lambda t, x, _f=base.drift: _f(t, x) + da_val(x),
        control_matrix=lambda t, x, _f=base.control_matrix: _f(t, x) + db_val(x),
        cost_state=lambda t, x, _f=base.cost_state: _f(t, x) + dw_val(x),
        cost_control=lambda t, x, _f=base.cost_control: _f(t, x) + ds_val(x),
        control_set=base.control_set,
        drift_x=_compose(base.drift_x, da_jac),
        control_matrix_x=_compose(base.control_matrix_x, db_jac),
        cost_state_x=_compose(base.cost_state_x, dw_grad),
        cost_control_x=_compose(base.cost_control_x, ds_jac),
        cost_state_xx=_compose(base.cost_state_xx, dw_hess),
        cost_control_xx=_compose(base.cost_control_xx, ds_hess),
        dynamics_xx=(None if base.dynamics_xx is None else
                     (lambda t, x, u, _f=base.dynamics_xx: _f(t, x, u) + df_hess(x, u))),
        trajectory_bound=base.bound(),
        time_invariant=base.time_invariant,
        allow_finite_differences=base.allow_finite_differences,
        metadata=meta,
    )


def sample_family(problem: ControlAffineProblem, spec: PerturbationSpec
                  ) -> list[ControlAffineProblem]:
    """Draw ``count`` perturbed problems within the W^{1,inf} budget.

    Deterministic in the seed; every member is rescaled to its drawn target
    sizes and then verified against the lattice membership check (a hard
    invariant, not a statistical one).
    """
    if not problem.time_invariant:
        raise ValueError("the family construction requires a time-invariant base problem")
    n, m = problem.state_dim, problem.control_dim
    bound = problem.bound()
    xs, us = _domain_lattice(problem, spec.lattice)
    rng = np.random.default_rng(spec.seed)
    members = []
    for k in range(spec.count):
        bumps = _MemberBumps(
            da=[_draw_bump(rng, n, bound, spec.frequencies) for _ in range(n)],
            db=[[_draw_bump(rng, n, bound, spec.frequencies) for _ in range(m)]
                for _ in range(n)],
            dw=_draw_bump(rng, n, bound, spec.frequencies),
            ds=[_draw_bump(rng, n, bound, spec.frequencies) for _ in range(m)],
        )
        size = rng.uniform(0.5, 1.0)
        target_f = spec.split * spec.rho * size
        target_g = (1.0 - spec.split) * spec.rho * size
        raw_f = _w1inf_f(bumps, xs, us)
        raw_g = _w1inf_g(bumps, xs, us)
        if raw_f <= 0 or raw_g <= 0:
            raise RuntimeError(f"degenerate perturbation draw for member {k}")
        bumps.scale_f(target_f / raw_f)
        bumps.scale_g(target_g / raw_g)
        dist_f = _w1inf_f(bumps, xs, us)
        dist_g = _w1inf_g(bumps, xs, us)
        if dist_f + dist_g > spec.rho * (1.0 + 1e-9):
            raise RuntimeError(
                f"member {k} failed the budget check: {dist_f + dist_g} > {spec.rho}")
        meta = {
            "index": k, "rho": spec.rho, "seed": spec.seed,
            "target_f": target_f, "target_g": target_g,
            "measured_f": dist_f, "measured_g": dist_g,
        }
        members.append(_perturbed_problem(problem, bumps, k, meta))
    return members


def family_distances(problem: ControlAffineProblem,
                     member: ControlAffineProblem) -> tuple[float, float]:
    """Measured lattice distances stored at sampling time."""
    return member.metadata["measured_f"], member.metadata["measured_g"]


# ---------------------------------------------------------------------------
# Member oracles and the uniform study
# ---------------------------------------------------------------------------


def _structure_from_cells(u_cells: NDArray, grid: Grid,
                          vertices: Optional[NDArray] = None) -> PiecewiseConstantControl:
    """Bang-bang structure of a cell control.

    A single ambiguous cell left unrounded by the sweep (vertex margin below
    tolerance) is absorbed into a plain switch at its midpoint; the refine
    step relocates it anyway.
    """
    times = [0.0]
    values = [u_cells[0]]
    start = [0]
    for i in range(1, grid.n_steps):
        if np.any(u_cells[i] != values[-1]):
            times.append(grid.nodes[i])
            values.append(u_cells[i])
            start.append(i)
    times.append(grid.horizon)

    if vertices is not None and len(values) > 2:
        def is_vertex(v: NDArray) -> bool:
            return bool(np.min(np.linalg.norm(vertices - v, axis=1)) < 1e-9)

        merged_t = [0.0]
        merged_v = [values[0]]
        k = 1
        while k < len(values):
            seg_len = (times[k + 1] - times[k]) if k + 1 < len(times) else 0.0
            one_cell = seg_len <= grid.h * (1 + 1e-9)
            if one_cell and not is_vertex(values[k]) and k + 1 < len(values):
                merged_t.append(0.5 * (times[k] + times[k + 1]))
                merged_v.append(values[k + 1])
                k += 2
            else:
                merged_t.append(times[k])
                merged_v.append(values[k])
                k += 1
        merged_t.append(grid.horizon)
        times, values = merged_t, merged_v

    return PiecewiseConstantControl(np.array(times), np.array(values))


def _sigma_along(problem: ControlAffineProblem, sol, s: float, d: NDArray) -> float:
    x_s = sol.x(np.array([s]))[0]
    p_s = sol.p(np.array([s]))[0]
    sigma = problem.control_matrix(s, x_s).T @ p_s + problem.cost_control(s, x_s)
    return float(sigma @ d)


def refine_switch_times(problem: ControlAffineProblem,
                        control: PiecewiseConstantControl,
                        bracket: float,
                        steps_per_unit: int = 512,
                        max_rounds: int = 5,
                        tol: float = 1e-9) -> PiecewiseConstantControl:
    """Polish node-quantized switch times to continuous accuracy.

    Fixed-point iteration: integrate the current structure once with the
    reference integrator, move every switch to the nearby zero of the dense
    switching function paired with its control jump, repeat.  The zero
    location is insensitive to the switch position, so a few rounds reach
    root-level accuracy with one integration each.
    """
    times = control.times.copy()
    n_sw = len(times) - 2
    if n_sw == 0:
        return control
    for _ in range(max_rounds):
        sol = reference_solve(problem, PiecewiseConstantControl(times, control.values),
                              steps_per_unit=steps_per_unit)
        moved = 0.0
        for k in range(1, len(times) - 1):
            jump = control.values[k] - control.values[k - 1]
            d = jump / np.linalg.norm(jump)
            lo = max(times[k - 1] + 1e-12, times[k] - bracket)
            hi = min(times[k + 1] - 1e-12, times[k] + bracket)
            grid_s = np.linspace(lo, hi, 33)
            vals = np.array([_sigma_along(problem, sol, s, d) for s in grid_s])
            crossings = np.where(vals[:-1] * vals[1:] < 0)[0]
            if len(crossings) == 0:
                continue  # no sign change in the bracket: keep the current time
            pick = crossings[np.argmin(np.abs(grid_s[crossings] - times[k]))]
            root = brentq(lambda s: _sigma_along(problem, sol, s, d),
                          grid_s[pick], grid_s[pick + 1], xtol=1e-13)
            moved = max(moved, abs(root - times[k]))
            times[k] = root
        if moved < tol:
            break
    return PiecewiseConstantControl(times, control.values)


def member_reference_solution(problem: ControlAffineProblem, n_struct: int,
                              steps_per_unit: int,
                              config: SweepConfig = SweepConfig()
                              ) -> tuple[ContinuousSolution, bool]:
    """Oracle for a problem without a closed form: a sweep at n_struct fixes
    the bang-bang structure, the switch times are polished by root finding,
    and the trajectories come from the reference integrator on the refined
    breakpoints.  Returns (solution, sweep_converged)."""
    grid = Grid(n_struct, problem.horizon)
    result = sweep_solve(problem, grid, config)
    structure = _structure_from_cells(result.u_cells, grid,
                                      vertices=problem.control_set.vertices)
    refined = refine_switch_times(problem, structure, bracket=2.0 * grid.h)
    sol = reference_solve(problem, refined, steps_per_unit=steps_per_unit)
    return sol, result.converged


@dataclass
class MemberStudy:
    index: int
    table: ConvergenceTable
    c_pi: Optional[float]
    d_y_to_base: float
    switch_times: list[float]
    converged_all: bool

    def to_json_dict(self) -> dict:
        return {
            "index": self.index,
            "c_pi": self.c_pi,
            "d_y_to_base": self.d_y_to_base,
            "switch_times": self.switch_times,
            "converged_all": self.converged_all,
            "order": self.table.order,
            "constant_C": self.table.constant,
            "rows": [
                {"N": r.n, "h": r.h, "err_x_w11": r.err_x_w11, "err_p_w11": r.err_p_w11,
                 "err_u_l1": r.err_u_l1, "err_total": r.err_total,
                 "converged": r.converged}
                for r in self.table.rows
            ],
        }


@dataclass
class FamilyReport:
    rho: float
    seed: int
    count: int
    n_list: list[int]
    members: list[MemberStudy]
    failed_members: list[int]

    def _c_values(self) -> list[float]:
        return [m.c_pi for m in self.members
                if m.c_pi is not None and m.index not in self.failed_members]

    @property
    def c_max(self) -> Optional[float]:
        vals = self._c_values()
        return max(vals) if vals else None

    @property
    def c_min(self) -> Optional[float]:
        vals = self._c_values()
        return min(vals) if vals else None

    @property
    def c_median(self) -> Optional[float]:
        vals = self._c_values()
        return float(np.median(vals)) if vals else None

    @property
    def c_spread(self) -> Optional[float]:
        vals = self._c_values()
        return max(vals) / min(vals) if vals and min(vals) > 0 else None

    @property
    def d_y_median(self) -> Optional[float]:
        vals = [m.d_y_to_base for m in self.members if m.index not in self.failed_members]
        return float(np.median(vals)) if vals else None

    def to_json_dict(self) -> dict:
        return {
            "rho": self.rho,
            "seed": self.seed,
            "count": self.count,
            "n_list": self.n_list,
            "members": [m.to_json_dict() for m in self.members],
            "failed_members": self.failed_members,
            "summary": {
                "c_max": self.c_max, "c_min": self.c_min, "c_median": self.c_median,
                "c_spread": self.c_spread, "d_y_median": self.d_y_median,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def uniform_study(problem: ControlAffineProblem, base_oracle: ContinuousSolution,
                  spec: PerturbationSpec, n_list: Sequence[int],
                  config: SweepConfig = SweepConfig(),
                  n_ref_factor: int = 16,
                  n_struct: int = 256) -> FamilyReport:
    """Convergence study over a sampled family: one error constant per member
    plus the family statistics, and the distance of every member's reference
    solution to the base oracle (the linear-in-rho perturbation response).

    Member sweep failures are flagged, excluded from the statistics, and the
    study continues.
    """
    members = sample_family(problem, spec)
    n_max = max(n_list)
    steps_per_unit = max(4096, int(np.ceil(n_ref_factor * n_max / problem.horizon)))
    studies = []
    failed = []
    for k, member in enumerate(members):
        oracle, struct_ok = member_reference_solution(
            member, n_struct=n_struct, steps_per_unit=steps_per_unit, config=config)
        table = convergence_study(member, oracle, n_list, config)
        ok_rows = [r for r in table.rows if r.converged]
        c_pi = max((r.err_total / r.h for r in ok_rows), default=None)
        d_y = continuous_distance(oracle, base_oracle).total
        all_ok = struct_ok and len(ok_rows) == len(table.rows)
        if not all_ok:
            failed.append(k)
        studies.append(MemberStudy(
            index=k, table=table, c_pi=c_pi, d_y_to_base=d_y,
            switch_times=[float(s) for s in oracle.breakpoints],
            converged_all=all_ok,
        ))
    return FamilyReport(
        rho=spec.rho, seed=spec.seed, count=spec.count, n_list=list(n_list),
        members=studies, failed_members=failed,
    )
