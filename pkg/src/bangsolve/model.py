"""Control-affine problem class, control polytopes, and the built-in catalog.

A problem is the tuple (a, B, w, s, U, x0, T) with dynamics
f(t,x,u) = a(t,x) + B(t,x) u and running cost g(t,x,u) = w(t,x) + <s(t,x), u>.
Problems are supplied as code; the catalog maps names to factories so the
CLI can construct them from parameter maps.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .grid import (
    PIECEWISE_CONSTANT,
    PIECEWISE_LINEAR,
    ContinuousSolution,
    Grid,
    GridFunction,
    GridMismatchError,
    norm,
)


class CapabilityError(RuntimeError):
    """A derivative slot is missing and finite differences are disabled."""


# ---------------------------------------------------------------------------
# Control sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Polytope:
    """Convex compact control set, either a box or an explicit vertex list.

    Vertices of a box are enumerated in binary order with the last
    coordinate varying fastest; the Hamiltonian minimizer breaks ties by
    lowest vertex index, so this order is part of the contract.
    """

    kind: str
    lower: Optional[NDArray[np.float64]] = None
    upper: Optional[NDArray[np.float64]] = None
    vertex_array: Optional[NDArray[np.float64]] = None
    edge_pairs: Optional[tuple[tuple[int, int], ...]] = None

    @staticmethod
    def box(lower, upper) -> "Polytope":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box requires lower <= upper componentwise")
        return Polytope(kind="box", lower=lo, upper=hi)

    @staticmethod
    def general(vertices, edges) -> "Polytope":
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or len(v) < 1:
            raise ValueError("vertex list must be a nonempty (k, m) array")
        pairs = tuple((int(i), int(j)) for i, j in edges)
        for i, j in pairs:
            if not (0 <= i < len(v) and 0 <= j < len(v) and i != j):
                raise ValueError(f"invalid edge ({i}, {j})")
        return Polytope(kind="general", vertex_array=v, edge_pairs=pairs)

    @staticmethod
    def interval(lo: float, hi: float) -> "Polytope":
        return Polytope.box([lo], [hi])

    @property
    def dim(self) -> int:
        if self.kind == "box":
            return len(self.lower)
        return self.vertex_array.shape[1]

    @property
    def vertices(self) -> NDArray[np.float64]:
        if self.kind == "box":
            cols = [(lo, hi) if hi > lo else (lo,) for lo, hi in zip(self.lower, self.upper)]
            return np.array(list(itertools.product(*cols)), dtype=float)
        return self.vertex_array

    def edges(self) -> list[tuple[int, int, NDArray[np.float64]]]:
        """(i, j, e) triples with unit direction e from vertex i to vertex j."""
        verts = self.vertices
        if self.kind == "box":
            pairs = [
                (i, j)
                for i in range(len(verts))
                for j in range(i + 1, len(verts))
                if np.count_nonzero(verts[i] != verts[j]) == 1
            ]
        else:
            pairs = list(self.edge_pairs)
        out = []
        for i, j in pairs:
            d = verts[j] - verts[i]
            n = np.linalg.norm(d)
            if n == 0:
                raise ValueError(f"degenerate edge ({i}, {j})")
            out.append((i, j, d / n))
        return out

    def edge_directions(self) -> NDArray[np.float64]:
        """Unique unit vectors parallel to edges (sign-normalized)."""
        dirs = []
        for _, _, e in self.edges():
            e = e if (e[np.argmax(np.abs(e))] > 0) else -e
            if not any(np.allclose(e, d, atol=1e-12) for d in dirs):
                dirs.append(e)
        if not dirs:  # single-point set: no edges
            return np.empty((0, self.dim))
        return np.array(dirs)

    @property
    def centroid(self) -> NDArray[np.float64]:
        return self.vertices.mean(axis=0)

    @property
    def width(self) -> float:
        v = self.vertices
        return float(max(np.linalg.norm(a - b) for a in v for b in v)) if len(v) > 1 else 0.0

    def contains(self, u: NDArray, tol: float = 1e-9) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))
        # convex-combination feasibility via a small LP
        from scipy.optimize import linprog

        v = self.vertex_array
        k = len(v)
        a_eq = np.vstack([v.T, np.ones(k)])
        b_eq = np.concatenate([u, [1.0]])
        res = linprog(np.zeros(k), A_eq=a_eq, b_eq=b_eq, bounds=[(0, None)] * k,
                      method="highs")
        return bool(res.status == 0)

    def sample(self, rng: np.random.Generator, count: int) -> NDArray[np.float64]:
        """count feasible points, uniform for boxes, convex mixtures otherwise."""
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper, size=(count, self.dim))
        w = rng.dirichlet(np.ones(len(self.vertices)), size=count)
        return w @ self.vertices


def hamiltonian_minimizer(sigma: NDArray, control_set: Polytope) -> NDArray[np.float64]:
    """Vertex of U minimizing <sigma, v>; exact ties resolved by lowest index."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    verts = control_set.vertices
    vals = verts @ sigma
    return verts[int(np.argmin(vals))].copy()


def minimizer_margin(sigma: NDArray, control_set: Polytope) -> float:
    """Gap between the best and second-best vertex value of <sigma, .>;
    +inf when U has a single vertex."""
    vals = control_set.vertices @ np.atleast_1d(np.asarray(sigma, dtype=float))
    if len(vals) < 2:
        return float("inf")
    part = np.partition(vals, 1)
    return float(part[1] - part[0])


def normal_cone_distance(sigma: NDArray, u: NDArray, control_set: Polytope,
                         tol_active: float = 1e-9) -> float:
    """Distance from -sigma to the normal cone N_U(u).

    Exact componentwise formula for boxes.  For general polytopes at a
    vertex, the cone is spanned by the negated adjacent edge directions and
    the distance comes from a nonnegative least-squares projection.
    """
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if control_set.kind == "box":
        lo, hi = control_set.lower, control_set.upper
        scale = np.maximum(1.0, hi - lo)
        at_lo = u <= lo + tol_active * scale
        at_hi = u >= hi - tol_active * scale
        # componentwise: at lower bound the cone is (-inf, 0], at upper [0, inf),
        # in the interior {0}; a collapsed component admits everything
        viol = np.where(
            at_lo & at_hi, 0.0,
            np.where(at_lo, np.maximum(0.0, -sigma),
                     np.where(at_hi, np.maximum(0.0, sigma), np.abs(sigma))))
        return float(np.linalg.norm(viol))
    verts = control_set.vertices
    dists = np.linalg.norm(verts - u, axis=1)
    k = int(np.argmin(dists))
    if dists[k] > tol_active * max(1.0, control_set.width):
        # interior/face point: conservative fallback, cone treated as {0}
        return float(np.linalg.norm(sigma))
    gens = [-(e if i == k else -e) for i, j, e in control_set.edges() if k in (i, j)]
    if not gens:
        return float(np.linalg.norm(sigma))
    from scipy.optimize import nnls

    g = np.column_stack(gens)
    _, resid = nnls(g, -sigma)
    return float(resid)


# ---------------------------------------------------------------------------
# Finite-difference derivative fallbacks
# ---------------------------------------------------------------------------

FD_STEP_FIRST = 1e-6
FD_STEP_SECOND = 1e-4


def _fd_steps(x: NDArray, base: float) -> NDArray:
    return base * np.maximum(1.0, np.abs(x))


def fd_jacobian(fn: Callable[[float, NDArray], NDArray], t: float, x: NDArray) -> NDArray:
    """Central-difference Jacobian d fn / d x, step 1e-6 * max(1, |x_k|)."""
    x = np.asarray(x, dtype=float)
    steps = _fd_steps(x, FD_STEP_FIRST)
    cols = []
    for k in range(len(x)):
        dx = np.zeros_like(x)
        dx[k] = steps[k]
        cols.append((np.asarray(fn(t, x + dx)) - np.asarray(fn(t, x - dx))) / (2 * steps[k]))
    jac = np.stack(cols, axis=-1)
    return jac


def fd_hessian(fn: Callable[[float, NDArray], float], t: float, x: NDArray) -> NDArray:
    """Central-difference Hessian of a scalar function, symmetrized."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    steps = _fd_steps(x, FD_STEP_SECOND)
    h = np.zeros((n, n))
    f0 = fn(t, x)
    for k in range(n):
        dk = np.zeros(n)
        dk[k] = steps[k]
        h[k, k] = (fn(t, x + dk) - 2 * f0 + fn(t, x - dk)) / steps[k] ** 2
        for l in range(k + 1, n):
            dl = np.zeros(n)
            dl[l] = steps[l]
            val = (
                fn(t, x + dk + dl) - fn(t, x + dk - dl)
                - fn(t, x - dk + dl) + fn(t, x - dk - dl)
            ) / (4 * steps[k] * steps[l])
            h[k, l] = h[l, k] = val
    return h


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------


@dataclass
class ControlAffineProblem:
    """Problem data (a, B, w, s, U, x0, T) plus derivative slots.

    Derivative slots left as None fall back to central finite differences
    unless ``allow_finite_differences`` is False, in which case derivative
    access raises CapabilityError.  Instances are immutable in practice and
    safe to share across threads; all methods are pure.
    """

    name: str
    state_dim: int
    control_dim: int
    horizon: float
    initial_state: NDArray[np.float64]
    drift: Callable[[float, NDArray], NDArray]
    control_matrix: Callable[[float, NDArray], NDArray]
    cost_state: Callable[[float, NDArray], float]
    cost_control: Callable[[float, NDArray], NDArray]
    control_set: Polytope
    drift_x: Optional[Callable] = None          # a_x: (n, n)
    control_matrix_x: Optional[Callable] = None  # B_x: (n, m, n)
    cost_state_x: Optional[Callable] = None      # w_x: (n,)
    cost_control_x: Optional[Callable] = None    # s_x: (m, n)
    cost_state_xx: Optional[Callable] = None     # w_xx: (n, n)
    cost_control_xx: Optional[Callable] = None   # s_xx: (m, n, n)
    dynamics_xx: Optional[Callable] = None       # f_xx(t,x,u): (n, n, n), a + Bu combined
    trajectory_bound: Optional[float] = None     # M-bar; pilot-estimated when None
    time_invariant: bool = False
    allow_finite_differences: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.initial_state = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be positive")
        if len(self.initial_state) != self.state_dim:
            raise ValueError("initial_state dimension mismatch")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.control_set.dim != self.control_dim:
            raise ValueError("control set dimension mismatch")

    # -- dynamics and cost -------------------------------------------------

    def dynamics(self, t: float, x: NDArray, u: NDArray) -> NDArray:
        return self.drift(t, x) + self.control_matrix(t, x) @ u

    def running_cost(self, t: float, x: NDArray, u: NDArray) -> float:
        return float(self.cost_state(t, x) + self.cost_control(t, x) @ u)

    # -- first derivatives ---------------------------------------------------

    def _require_fd(self, what: str) -> None:
        if not self.allow_finite_differences:
            raise CapabilityError(
                f"problem {self.name!r} provides no {what} and finite differences are disabled"
            )

    def jac_dynamics_x(self, t: float, x: NDArray, u: NDArray) -> NDArray:
        if self.drift_x is not None and self.control_matrix_x is not None:
            bx = self.control_matrix_x(t, x)  # (n, m, n)
            if bx.shape[1] == 1:
                return self.drift_x(t, x) + bx[:, 0, :] * u[0]
            return self.drift_x(t, x) + np.tensordot(bx, u, axes=([1], [0]))
        self._require_fd("dynamics x-derivatives")
        return fd_jacobian(lambda tt, xx: self.dynamics(tt, xx, u), t, x)

    def grad_cost_x(self, t: float, x: NDArray, u: NDArray) -> NDArray:
        if self.cost_state_x is not None and self.cost_control_x is not None:
            if self.control_dim == 1:
                return self.cost_state_x(t, x) + self.cost_control_x(t, x)[0] * u[0]
            return self.cost_state_x(t, x) + self.cost_control_x(t, x).T @ u
        self._require_fd("cost x-derivatives")
        return fd_jacobian(lambda tt, xx: np.array([self.running_cost(tt, xx, u)]), t, x)[0]

    def grad_hamiltonian_x(self, t: float, x: NDArray, p: NDArray, u: NDArray) -> NDArray:
        return self.grad_cost_x(t, x, u) + self.jac_dynamics_x(t, x, u).T @ p

    # -- second derivatives --------------------------------------------------

    def hess_hamiltonian_xx(self, t: float, x: NDArray, p: NDArray, u: NDArray) -> NDArray:
        have = (self.cost_state_xx is not None and self.cost_control_xx is not None
                and self.dynamics_xx is not None)
        if have:
            if self.state_dim == 1 and self.control_dim == 1:
                h = self.cost_state_xx(t, x) + u[0] * self.cost_control_xx(t, x)[0] \
                    + p[0] * self.dynamics_xx(t, x, u)[0]
                return h
            h = self.cost_state_xx(t, x) + np.tensordot(u, self.cost_control_xx(t, x), axes=1)
            h = h + np.tensordot(p, self.dynamics_xx(t, x, u), axes=1)
            return 0.5 * (h + h.T)
        self._require_fd("second derivatives")
        h = fd_hessian(lambda tt, xx: self.running_cost(tt, xx, u)
                       + float(p @ self.dynamics(tt, xx, u)), t, x)
        return h

    def hess_hamiltonian_ux(self, t: float, x: NDArray, p: NDArray) -> NDArray:
        if self.cost_control_x is not None and self.control_matrix_x is not None:
            if self.state_dim == 1:
                return self.cost_control_x(t, x) + p[0] * self.control_matrix_x(t, x)[0]
            return self.cost_control_x(t, x) + np.tensordot(p, self.control_matrix_x(t, x), axes=1)
        self._require_fd("mixed second derivatives")
        return fd_jacobian(lambda tt, xx: self.control_matrix(tt, xx).T @ p
                           + self.cost_control(tt, xx), t, x)

    # -- bounds ---------------------------------------------------------------

    def bound(self) -> float:
        """Trajectory bound M-bar, 2x the max of |x|, |xdot|, |p|, |pdot|
        observed over constant-vertex pilot integrations."""
        if self.trajectory_bound is not None:
            return self.trajectory_bound
        from .integrate import euler_backward_adjoint, euler_forward

        grid = Grid(256, self.horizon)
        observed = 0.0
        for v in self.control_set.vertices:
            u = GridFunction(grid, np.tile(v, (grid.n_steps, 1)), PIECEWISE_CONSTANT)
            x = euler_forward(self, u, grid, guard=None)
            p = euler_backward_adjoint(self, x, u, grid, guard=None)
            for gf in (x, p):
                observed = max(observed, norm(gf, "Linf"), norm(gf.derivative(), "Linf"))
        self.trajectory_bound = 2.0 * max(observed, 1e-6)
        return self.trajectory_bound


# -- module-level operation surface ------------------------------------------


def hamiltonian(problem: ControlAffineProblem, t: float, x: NDArray, p: NDArray,
                u: NDArray) -> float:
    """H(t,x,p,u) = g(t,x,u) + <p, f(t,x,u)>; affine in u."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return problem.running_cost(t, x, u) + float(p @ problem.dynamics(t, x, u))


def switching_function(problem: ControlAffineProblem, t: float, x: NDArray,
                       p: NDArray) -> NDArray[np.float64]:
    """grad_u H = B(t,x)^T p + s(t,x); independent of u."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return problem.control_matrix(t, x).T @ p + problem.cost_control(t, x)


@dataclass(frozen=True)
class ExtremalTriple:
    """(x, p, u) on a common grid: the element of the solution space Y."""

    grid: Grid
    x: GridFunction
    p: GridFunction
    u: GridFunction

    def __post_init__(self) -> None:
        if not (self.x.kind == PIECEWISE_LINEAR and self.p.kind == PIECEWISE_LINEAR
                and self.u.kind == PIECEWISE_CONSTANT):
            raise ValueError("x, p must be piecewise-linear and u piecewise-constant")
        for gf in (self.x, self.p, self.u):
            if gf.grid != self.grid:
                raise GridMismatchError("triple components live on different grids")

    def norm_y(self) -> float:
        return norm(self.x, "W11") + norm(self.p, "W11") + norm(self.u, "L1")

    def sigma_nodes(self, problem: ControlAffineProblem) -> NDArray[np.float64]:
        """Continuous switching function sampled at every grid node."""
        t = self.grid.nodes
        out = np.empty((len(t), problem.control_dim))
        for i, ti in enumerate(t):
            out[i] = switching_function(problem, ti, self.x.values[i], self.p.values[i])
        return out

    def validate(self, problem: ControlAffineProblem, tol: float = 1e-9) -> None:
        if not np.allclose(self.x.values[0], problem.initial_state, atol=tol):
            raise ValueError("x(0) != x0")
        if not np.allclose(self.p.values[-1], 0.0, atol=tol):
            raise ValueError("transversality p(T) = 0 violated")
        for i, u in enumerate(self.u.values):
            if not problem.control_set.contains(u, tol=tol):
                raise ValueError(f"control at cell {i} outside U")


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


def _example1_validate(alpha: float, beta: float) -> None:
    if not alpha > 0:
        raise ValueError(f"example1 requires alpha > 0, got alpha={alpha}")
    if not beta > 1:
        raise ValueError(f"example1 requires beta > 1, got beta={beta}")
    if not 2 * alpha <= beta:
        raise ValueError(f"example1 requires 2*alpha <= beta, got alpha={alpha}, beta={beta}")


def example1(alpha: float = 0.5, beta: float = 2.0) -> ControlAffineProblem:
    """Scalar non-convex test problem: minimize the integral of
    -(alpha/2) x^2 - beta x + u subject to xdot = u, x(0) = 0, u in [0, 1]."""
    _example1_validate(alpha, beta)
    one = np.array([[1.0]])
    zero1 = np.zeros(1)
    zero11 = np.zeros((1, 1))
    zero111 = np.zeros((1, 1, 1))
    return ControlAffineProblem(
        name="example1",
        state_dim=1,
        control_dim=1,
        horizon=1.0,
        initial_state=np.zeros(1),
        drift=lambda t, x: zero1,
        control_matrix=lambda t, x: one,
        cost_state=lambda t, x: -0.5 * alpha * x[0] ** 2 - beta * x[0],
        cost_control=lambda t, x: np.ones(1),
        control_set=Polytope.interval(0.0, 1.0),
        drift_x=lambda t, x: zero11,
        control_matrix_x=lambda t, x: zero111,
        cost_state_x=lambda t, x: np.array([-alpha * x[0] - beta]),
        cost_control_x=lambda t, x: zero11,
        cost_state_xx=lambda t, x: np.array([[-alpha]]),
        cost_control_xx=lambda t, x: zero111,
        dynamics_xx=lambda t, x, u: zero111,
        time_invariant=True,
        metadata={"alpha": alpha, "beta": beta},
    )


def example1_solution(alpha: float = 0.5, beta: float = 2.0) -> ContinuousSolution:
    """Closed-form optimal (x, p, u) for example1.

    The switch time is the positive root of
    alpha t^2 + (beta - alpha) t - (beta - 1) = 0, the control is 1 up to
    the switch and 0 after, and the costate follows the stated piecewise
    quadratics with p(1) = 0.
    """
    _example1_validate(alpha, beta)
    tau = (-(beta - alpha) + np.sqrt((beta - alpha) ** 2 + 4 * alpha * (beta - 1))) / (2 * alpha)

    def x(t: NDArray) -> NDArray:
        return np.minimum(np.asarray(t, dtype=float), tau)[:, None]

    def p(t: NDArray) -> NDArray:
        t = np.asarray(t, dtype=float)
        left = 0.5 * alpha * (tau**2 + t**2) + beta * t - alpha * tau - beta
        right = t * (alpha * tau + beta) - alpha * tau - beta
        return np.where(t <= tau, left, right)[:, None]

    def u(t: NDArray) -> NDArray:
        return np.where(np.asarray(t, dtype=float) <= tau, 1.0, 0.0)[:, None]

    def pdot(t: NDArray) -> NDArray:
        t = np.asarray(t, dtype=float)
        return (alpha * np.minimum(t, tau) + beta)[:, None]

    return ContinuousSolution(
        horizon=1.0, x=x, p=p, u=u, xdot=u, pdot=pdot,
        breakpoints=np.array([tau]),
    )


def example1_switch_time(alpha: float = 0.5, beta: float = 2.0) -> float:
    _example1_validate(alpha, beta)
    return float((-(beta - alpha) + np.sqrt((beta - alpha) ** 2 + 4 * alpha * (beta - 1)))
                 / (2 * alpha))


CATALOG: dict[str, dict] = {
    "example1": {
        "factory": example1,
        "solution": example1_solution,
        "parameters": {"alpha": 0.5, "beta": 2.0},
        "doc": "scalar bang-bang problem with one switch and a closed-form extremal",
    },
}


def make_problem(name: str, params: Optional[dict] = None) -> ControlAffineProblem:
    """Catalog lookup by name plus key/value parameter map."""
    if name not in CATALOG:
        known = ", ".join(sorted(CATALOG))
        raise KeyError(f"unknown problem {name!r}; catalog: {known}")
    entry = CATALOG[name]
    kwargs = dict(entry["parameters"])
    kwargs.update(params or {})
    return entry["factory"](**kwargs)


def closed_form_solution(name: str, params: Optional[dict] = None) -> Optional[ContinuousSolution]:
    if name not in CATALOG or CATALOG[name].get("solution") is None:
        return None
    kwargs = dict(CATALOG[name]["parameters"])
    kwargs.update(params or {})
    return CATALOG[name]["solution"](**kwargs)
