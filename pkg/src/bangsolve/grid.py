"""Uniform time grids, piecewise interpolants, and exact L1/Linf/W11 norms.

States and costates live on grid nodes as piecewise-linear functions;
controls live on cells as piecewise-constant functions.  All norms are
computed from the interpolants themselves, not from nodal sums, so that
O(h) error measurements are not polluted by quadrature error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

PIECEWISE_LINEAR = "piecewise-linear"
PIECEWISE_CONSTANT = "piecewise-constant"

_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(5)


class GridMismatchError(ValueError):
    """Raised when two grid functions do not share a grid."""


@dataclass(frozen=True)
class Grid:
    """Uniform grid t_i = i*T/N, i = 0..N."""

    n_steps: int
    horizon: float

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ValueError(f"N must be >= 1, got {self.n_steps}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        # t_N = T exactly: nodes computed as i*T/N, never accumulated
        nodes = np.arange(self.n_steps + 1, dtype=float) * (self.horizon / self.n_steps)
        nodes[-1] = self.horizon
        object.__setattr__(self, "_nodes", nodes)

    @property
    def h(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> NDArray[np.float64]:
        return self._nodes  # type: ignore[attr-defined]

    def cell_of(self, t: NDArray | float) -> NDArray[np.int_]:
        """Index i with t in [t_i, t_{i+1}); t = T maps to the last cell."""
        idx = np.searchsorted(self.nodes, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.n_steps - 1)


def _as_2d(values: NDArray) -> NDArray[np.float64]:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2:
        raise ValueError(f"grid function values must be 1-D or 2-D, got shape {v.shape}")
    return np.ascontiguousarray(v)


@dataclass(frozen=True)
class GridFunction:
    """Values on a uniform grid with a fixed interpretation.

    Piecewise-linear functions carry N+1 node values; piecewise-constant
    functions carry N cell values, with value i on [t_i, t_{i+1}).
    """

    grid: Grid
    values: NDArray[np.float64]
    kind: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _as_2d(self.values))
        n = self.grid.n_steps
        expected = n + 1 if self.kind == PIECEWISE_LINEAR else n
        if self.kind not in (PIECEWISE_LINEAR, PIECEWISE_CONSTANT):
            raise ValueError(f"unknown interpretation {self.kind!r}")
        if len(self.values) != expected:
            raise ValueError(
                f"{self.kind} function on N={n} needs {expected} values, got {len(self.values)}"
            )

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, t: NDArray | float) -> NDArray[np.float64]:
        t_arr = np.asarray(t, dtype=float)
        scalar = t_arr.ndim == 0
        tq = np.atleast_1d(t_arr)
        if self.kind == PIECEWISE_CONSTANT:
            out = self.values[self.grid.cell_of(tq)]
        else:
            i = self.grid.cell_of(tq)
            t0 = self.grid.nodes[i]
            w = (tq - t0) / self.grid.h
            out = self.values[i] + w[:, None] * (self.values[i + 1] - self.values[i])
        return out[0] if scalar else out

    def derivative(self) -> "GridFunction":
        if self.kind != PIECEWISE_LINEAR:
            raise ValueError("derivative is defined for piecewise-linear functions only")
        dv = np.diff(self.values, axis=0) / self.grid.h
        return GridFunction(self.grid, dv, PIECEWISE_CONSTANT)

    def _check_compatible(self, other: "GridFunction") -> None:
        if self.grid != other.grid or self.kind != other.kind:
            raise GridMismatchError("operands live on different grids or interpretations")

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        return GridFunction(self.grid, self.values - other.values, self.kind)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        return GridFunction(self.grid, self.values + other.values, self.kind)

    def __mul__(self, c: float) -> "GridFunction":
        return GridFunction(self.grid, self.values * float(c), self.kind)

    __rmul__ = __mul__


def _abs_linear_integral(a: float, b: float, length: float) -> float:
    # exact integral of |linear| over a segment with endpoint values a, b
    if a * b >= 0.0:
        return 0.5 * (abs(a) + abs(b)) * length
    return 0.5 * (a * a + b * b) / abs(b - a) * length


def norm(gf: GridFunction, kind: str) -> float:
    """L1, Linf, or W11 norm of a grid function, exact for its interpolant.

    The scalar piecewise-linear L1 integral is exact even across sign
    changes; for vector values the per-cell Euclidean norm is integrated
    by 5-point Gauss (the only non-exact path, error O(h^10)).
    """
    v = gf.values
    h = gf.grid.h
    if kind == "Linf":
        return float(np.max(np.linalg.norm(v, axis=1))) if len(v) else 0.0
    if kind == "L1":
        if gf.kind == PIECEWISE_CONSTANT:
            return float(np.sum(np.linalg.norm(v, axis=1)) * h)
        if gf.dim == 1:
            a, b = v[:-1, 0], v[1:, 0]
            same = a * b >= 0.0
            out = np.where(
                same,
                0.5 * (np.abs(a) + np.abs(b)),
                0.5 * (a * a + b * b) / np.maximum(np.abs(b - a), 1e-300),
            )
            return float(np.sum(out) * h)
        # vector-valued: Gauss per cell on the Euclidean norm
        w = 0.5 * (_GAUSS_NODES + 1.0)  # cell-local coordinates in [0, 1]
        seg = v[:-1, None, :] + w[None, :, None] * (v[1:, None, :] - v[:-1, None, :])
        vals = np.linalg.norm(seg, axis=2)
        return float(np.sum(vals @ (0.5 * _GAUSS_WEIGHTS)) * h)
    if kind == "W11":
        if gf.kind != PIECEWISE_LINEAR:
            raise ValueError("W11 norm requires a piecewise-linear function")
        deriv_l1 = float(np.sum(np.linalg.norm(np.diff(gf.values, axis=0), axis=1)))
        return norm(gf, "L1") + deriv_l1
    raise ValueError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# Quadrature against dense (closed-form or reference) trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuousSolution:
    """Dense extremal (x, p, u) with derivatives and known control breakpoints.

    All callables are vectorized over a 1-D array of times and return
    arrays shaped (len(t), dim).  ``breakpoints`` lists interior times
    where u (and hence xdot/pdot) may jump; quadrature cells are split
    there so that O(h) error measurements stay clean.
    """

    horizon: float
    x: Callable[[NDArray], NDArray]
    p: Callable[[NDArray], NDArray]
    u: Callable[[NDArray], NDArray]
    xdot: Callable[[NDArray], NDArray]
    pdot: Callable[[NDArray], NDArray]
    breakpoints: NDArray[np.float64] = field(default_factory=lambda: np.empty(0))


def split_edges(edges: NDArray, breakpoints: Sequence[float] | NDArray) -> NDArray[np.float64]:
    """Merge interval edges with interior breakpoints, sorted and deduplicated."""
    edges = np.asarray(edges, dtype=float)
    bps = np.asarray(breakpoints, dtype=float)
    interior = bps[(bps > edges[0] + 1e-15) & (bps < edges[-1] - 1e-15)]
    merged = np.unique(np.concatenate([edges, interior]))
    return merged


def gauss_integrate(f: Callable[[NDArray], NDArray], edges: NDArray) -> float:
    """Integrate a vectorized scalar function over [edges[0], edges[-1]] by
    5-point Gauss on each subinterval."""
    a = edges[:-1]
    half = 0.5 * np.diff(edges)
    pts = (a + half)[:, None] + half[:, None] * _GAUSS_NODES[None, :]
    vals = f(pts.ravel()).reshape(pts.shape)
    return float(np.sum((vals @ _GAUSS_WEIGHTS) * half))


def _interval_midpoints(edges: NDArray) -> NDArray:
    return 0.5 * (edges[:-1] + edges[1:])


def control_error_l1(u_h: GridFunction, sol: ContinuousSolution) -> float:
    """Exact L1 distance between a piecewise-constant control and a dense
    control that is constant between its breakpoints."""
    if u_h.kind != PIECEWISE_CONSTANT:
        raise ValueError("control must be piecewise-constant")
    edges = split_edges(u_h.grid.nodes, sol.breakpoints)
    mids = _interval_midpoints(edges)
    diff = u_h(mids) - sol.u(mids)
    return float(np.sum(np.linalg.norm(diff, axis=1) * np.diff(edges)))


def w11_error(gf: GridFunction, ref: Callable, ref_dot: Callable,
              breakpoints: Sequence[float] | NDArray) -> float:
    """W11 distance between a piecewise-linear grid function and a dense
    reference, by per-cell Gauss quadrature with cells split at the
    reference breakpoints."""
    if gf.kind != PIECEWISE_LINEAR:
        raise ValueError("W11 error requires a piecewise-linear grid function")
    edges = split_edges(gf.grid.nodes, breakpoints)
    deriv = gf.derivative()

    def val_err(t: NDArray) -> NDArray:
        return np.linalg.norm(gf(t) - ref(t), axis=1)

    def der_err(t: NDArray) -> NDArray:
        return np.linalg.norm(deriv(t) - ref_dot(t), axis=1)

    return gauss_integrate(val_err, edges) + gauss_integrate(der_err, edges)


@dataclass(frozen=True)
class ErrorNorms:
    """The three Y-space error components and their sum."""

    x_w11: float
    p_w11: float
    u_l1: float

    @property
    def total(self) -> float:
        return self.x_w11 + self.p_w11 + self.u_l1


def continuous_distance(a: ContinuousSolution, b: ContinuousSolution,
                        n_cells: int = 2048) -> ErrorNorms:
    """Y-space distance between two dense solutions, by quadrature on a fine
    auxiliary grid split at the union of both breakpoint sets."""
    base = np.arange(n_cells + 1, dtype=float) * (a.horizon / n_cells)
    edges = split_edges(base, np.concatenate([np.atleast_1d(a.breakpoints),
                                              np.atleast_1d(b.breakpoints)]))

    def comp(fa: Callable, fb: Callable) -> float:
        return gauss_integrate(lambda t: np.linalg.norm(fa(t) - fb(t), axis=1), edges)

    x_w11 = comp(a.x, b.x) + comp(a.xdot, b.xdot)
    p_w11 = comp(a.p, b.p) + comp(a.pdot, b.pdot)
    mids = _interval_midpoints(edges)
    u_l1 = float(np.sum(np.linalg.norm(a.u(mids) - b.u(mids), axis=1) * np.diff(edges)))
    return ErrorNorms(x_w11, p_w11, u_l1)
