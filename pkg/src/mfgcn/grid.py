"""Discretization of the common noise: time mesh, increment cells, node algebra.

The horizon [0, T] is cut into ``n_steps`` equal mesh intervals, each further
cut into ``substeps`` fine simulation steps.  The noise increment over each
mesh interval is classified into one of ``n_cells`` equiprobable Gaussian
quantile cells (per-coordinate products when the noise is multivariate).
A scenario *node* is the tuple of cell indices of the completed intervals; a
*leaf* is a full-length node.  Cell indices are 1-based and ordered from the
topmost interval down (index 1 is the upper cell), with cells closed below,
so a boundary value resolves to the lower index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr, ndtri

from .errors import GridMismatchError

NodeId = tuple[int, ...]
LeafId = tuple[int, ...]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _phi(z: np.ndarray | float) -> np.ndarray | float:
    """Standard normal density, with phi(+-inf) = 0."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    finite = np.isfinite(z)
    out[finite] = np.exp(-0.5 * z[finite] ** 2) / _SQRT_2PI
    return out


def _balanced_factors(n: int, dims: int) -> tuple[int, ...]:
    """Split n into `dims` integer factors, as balanced as divisibility allows."""
    factors = []
    remaining = n
    for left in range(dims, 0, -1):
        if left == 1:
            factors.append(remaining)
            break
        target = round(remaining ** (1.0 / left))
        best = 1
        for f in range(max(target, 1), 0, -1):
            if remaining % f == 0:
                best = f
                break
        factors.append(best)
        remaining //= best
    return tuple(factors)


@dataclass(frozen=True)
class ScenarioGrid:
    """Time mesh plus the equiprobable cell partition of noise increments.

    Parameters
    ----------
    T : horizon.
    n_steps : number of mesh intervals.
    n_cells : cells per increment; for m0 > 1 factorized over coordinates.
    substeps : fine simulation steps per mesh interval.
    m0 : dimension of the common noise.
    """

    T: float
    n_steps: int
    n_cells: int
    substeps: int = 4
    m0: int = 1
    cells_per_dim: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.T <= 0 or self.n_steps < 1 or self.n_cells < 1 or self.substeps < 1:
            raise ValueError("grid parameters must be positive")
        if self.m0 < 1:
            raise ValueError("m0 must be >= 1")
        if self.cells_per_dim is None:
            dims = _balanced_factors(self.n_cells, self.m0)
            object.__setattr__(self, "cells_per_dim", dims)
        if len(self.cells_per_dim) != self.m0:
            raise ValueError("cells_per_dim length must equal m0")
        if int(np.prod(self.cells_per_dim)) != self.n_cells:
            raise ValueError("cells_per_dim must multiply to n_cells")

    # --- time bookkeeping -------------------------------------------------
    @property
    def mesh_dt(self) -> float:
        return self.T / self.n_steps

    @property
    def fine_dt(self) -> float:
        return self.T / (self.n_steps * self.substeps)

    @property
    def n_fine(self) -> int:
        return self.n_steps * self.substeps

    @property
    def mesh_times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.mesh_dt

    @property
    def fine_times(self) -> np.ndarray:
        return np.arange(self.n_fine + 1) * self.fine_dt

    @property
    def n_leaves(self) -> int:
        return self.n_cells**self.n_steps

    def floor_n(self, t: float) -> float:
        """Largest mesh time <= t; t must lie in [0, T]."""
        if t < -1e-12 or t > self.T * (1 + 1e-12):
            raise ValueError(f"t={t} outside [0, {self.T}]")
        k = int(np.floor((t + 1e-12 * self.T) / self.mesh_dt))
        return min(k, self.n_steps) * self.mesh_dt

    def depth_at_time(self, t: float) -> int:
        return int(round(self.floor_n(t) / self.mesh_dt))

    def depth_at_fine(self, j: int) -> int:
        """Node depth active at fine index j (number of completed intervals)."""
        if j < 0 or j > self.n_fine:
            raise ValueError(f"fine index {j} out of range")
        return j // self.substeps

    def is_mesh_index(self, j: int) -> bool:
        return j % self.substeps == 0

    # --- cell geometry ----------------------------------------------------
    @lru_cache(maxsize=None)
    def _z_boundaries(self, dim: int) -> np.ndarray:
        """Ascending standard-normal quantile boundaries for one coordinate."""
        k = self.cells_per_dim[dim]
        return ndtri(np.arange(1, k) / k)

    @property
    def cell_probs(self) -> np.ndarray:
        """Wiener probability of each composite cell (equiprobable by design)."""
        return np.full(self.n_cells, 1.0 / self.n_cells)

    def _strides(self) -> tuple[int, ...]:
        strides = []
        acc = 1
        for k in reversed(self.cells_per_dim):
            strides.append(acc)
            acc *= k
        return tuple(reversed(strides))

    def _split_cell(self, cell: int) -> tuple[int, ...]:
        """Composite 1-based cell index -> per-coordinate descending indices."""
        if not 1 <= cell <= self.n_cells:
            raise ValueError(f"cell {cell} out of range")
        rem = cell - 1
        out = []
        for stride, k in zip(self._strides(), self.cells_per_dim):
            q, rem = divmod(rem, stride)
            out.append(q + 1)
        return tuple(out)

    def _join_cell(self, per_dim: tuple[int, ...]) -> int:
        return 1 + sum((i - 1) * s for i, s in zip(per_dim, self._strides()))

    def cell_u_range(self, cell: int) -> list[tuple[float, float]]:
        """Per-coordinate CDF range (u_lo, u_hi) covered by a composite cell."""
        out = []
        for dim, i in enumerate(self._split_cell(cell)):
            k = self.cells_per_dim[dim]
            out.append(((k - i) / k, (k - i + 1) / k))
        return out

    def cell_bounds(self, cell: int, dt: float) -> list[tuple[float, float]]:
        """Per-coordinate (lo, hi) bounds of the cell for increments of variance dt."""
        s = math.sqrt(dt)
        out = []
        for u1, u2 in self.cell_u_range(cell):
            lo = -np.inf if u1 <= 0.0 else ndtri(u1) * s
            hi = np.inf if u2 >= 1.0 else ndtri(u2) * s
            out.append((lo, hi))
        return out

    def cell_mean(self, cell: int, dt: float) -> np.ndarray:
        """E[increment | cell] for a N(0, dt I) increment (truncated-normal mean)."""
        means = []
        for u1, u2 in self.cell_u_range(cell):
            z1 = -np.inf if u1 <= 0 else ndtri(u1)
            z2 = np.inf if u2 >= 1 else ndtri(u2)
            means.append(math.sqrt(dt) * (_phi(z1) - _phi(z2)) / (u2 - u1))
        return np.array(means)

    def cell_var(self, cell: int, dt: float) -> np.ndarray:
        """Var[increment | cell] per coordinate (truncated-normal variance)."""
        out = []
        for u1, u2 in self.cell_u_range(cell):
            z1 = -np.inf if u1 <= 0 else ndtri(u1)
            z2 = np.inf if u2 >= 1 else ndtri(u2)
            p = u2 - u1
            t1 = (z1 * _phi(z1) if np.isfinite(z1) else 0.0) - (
                z2 * _phi(z2) if np.isfinite(z2) else 0.0
            )
            m = (_phi(z1) - _phi(z2)) / p
            out.append(dt * (1.0 + t1 / p - m * m))
        return np.array(out)

    # --- classification ---------------------------------------------------
    def classify_increment(self, z: np.ndarray, dt: float | None = None) -> int:
        """Composite cell index of one increment vector (closed-below cells)."""
        dt = self.mesh_dt if dt is None else dt
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.shape != (self.m0,):
            raise GridMismatchError(f"increment has shape {z.shape}, expected ({self.m0},)")
        s = math.sqrt(dt)
        per_dim = []
        for dim in range(self.m0):
            q = self._z_boundaries(dim) * s
            k = self.cells_per_dim[dim]
            j0 = int(np.searchsorted(q, z[dim], side="right"))
            per_dim.append(k - j0)
        return self._join_cell(tuple(per_dim))

    def classify_path(self, increments: np.ndarray) -> LeafId:
        """Leaf id of a path given its n_steps mesh-interval increments."""
        increments = np.asarray(increments, dtype=float)
        if increments.ndim == 1:
            increments = increments[:, None]
        if increments.shape != (self.n_steps, self.m0):
            raise GridMismatchError(
                f"expected {self.n_steps} increments of dim {self.m0}, got {increments.shape}"
            )
        return tuple(self.classify_increment(increments[i]) for i in range(self.n_steps))

    def classify_paths(self, increments: np.ndarray) -> np.ndarray:
        """Vectorized classify_path: (n_paths, n_steps, m0) -> (n_paths, n_steps) int."""
        increments = np.asarray(increments, dtype=float)
        if increments.ndim == 2:
            increments = increments[..., None]
        n_paths = increments.shape[0]
        s = math.sqrt(self.mesh_dt)
        out = np.zeros((n_paths, self.n_steps), dtype=np.int64)
        strides = self._strides()
        for dim in range(self.m0):
            q = self._z_boundaries(dim) * s
            k = self.cells_per_dim[dim]
            j0 = np.searchsorted(q, increments[:, :, dim], side="right")
            out += (k - j0 - 1) * strides[dim]
        return out + 1

    def node_of(self, leaf: LeafId, t: float) -> NodeId:
        """Prefix of `leaf` observable at time t (the active scenario node)."""
        self._check_node(leaf, self.n_steps)
        return tuple(leaf[: self.depth_at_time(t)])

    def _check_node(self, node: NodeId, depth: int | None = None) -> None:
        if depth is not None and len(node) != depth:
            raise GridMismatchError(f"node {node} does not have depth {depth}")
        if any(not 1 <= c <= self.n_cells for c in node):
            raise GridMismatchError(f"node {node} has cell index outside [1, {self.n_cells}]")

    # --- node enumeration ---------------------------------------------------
    def nodes_at_depth(self, depth: int) -> list[NodeId]:
        return [tuple(p) for p in itertools.product(range(1, self.n_cells + 1), repeat=depth)]

    def node_index(self, node: NodeId) -> int:
        """Position of `node` in the lexicographic enumeration of its depth."""
        idx = 0
        for c in node:
            idx = idx * self.n_cells + (c - 1)
        return idx

    def all_nodes(self) -> list[NodeId]:
        out: list[NodeId] = []
        for depth in range(self.n_steps + 1):
            out.extend(self.nodes_at_depth(depth))
        return out

    @staticmethod
    def node_name(node: NodeId) -> str:
        return "root" if len(node) == 0 else ".".join(str(c) for c in node)

    @staticmethod
    def node_from_name(name: str) -> NodeId:
        if name == "root" or name == "":
            return ()
        return tuple(int(s) for s in name.split("."))

    def fine_indices_of_node(self, node: NodeId) -> range:
        """Global fine indices whose active node is `node`."""
        k = len(node)
        if k == self.n_steps:
            return range(self.n_fine, self.n_fine + 1)
        return range(k * self.substeps, (k + 1) * self.substeps)

    # --- delayed interpolation ---------------------------------------------
    def hat_interpolate(self, path: np.ndarray) -> np.ndarray:
        """Delayed piecewise-linear interpolation of a mesh-time path.

        Input has one value per mesh time (n_steps + 1 rows); output is sampled
        on the fine grid.  On each mesh interval the value ramps from the state
        one interval earlier to the state at the interval's left edge, so the
        value at mesh time t_{i+1} equals the input at t_i.
        """
        path = np.asarray(path, dtype=float)
        squeeze = path.ndim == 1
        if squeeze:
            path = path[:, None]
        if path.shape[0] != self.n_steps + 1:
            raise ValueError(f"path must have {self.n_steps + 1} mesh values")
        out = np.empty((self.n_fine + 1, path.shape[1]))
        for j in range(self.n_fine + 1):
            i = min(j // self.substeps, self.n_steps - 1)
            lam = (j - i * self.substeps) / self.substeps
            out[j] = lam * path[i] + (1.0 - lam) * path[max(i - 1, 0)]
        return out[:, 0] if squeeze else out

    # --- conditional sampling -----------------------------------------------
    def conditional_increment_sampler(
        self, cell: int, dt: float, rng: np.random.Generator | int, size: int | None = None
    ) -> np.ndarray:
        """Gaussian N(0, dt I) increment conditioned to lie in `cell`.

        Inverse-CDF on the cell's quantile box, so acceptance is exact.
        Returns shape (m0,) or (size, m0).
        """
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        n = 1 if size is None else size
        out = np.empty((n, self.m0))
        s = math.sqrt(dt)
        for dim, (u1, u2) in enumerate(self.cell_u_range(cell)):
            u = rng.uniform(u1, u2, size=n)
            out[:, dim] = ndtri(u) * s
        return out[0] if size is None else out

    def bridge_substeps(self, total: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Split a mesh-interval increment into `substeps` fine increments.

        Exact conditional decomposition: i.i.d. N(0, fine_dt) draws recentred
        so they sum to `total` (Brownian-bridge increments).
        """
        s = self.substeps
        total = np.atleast_1d(np.asarray(total, dtype=float))
        if s == 1:
            return total[None, :]
        eta = rng.normal(0.0, math.sqrt(self.fine_dt), size=(s, total.shape[0]))
        return eta - eta.mean(axis=0, keepdims=True) + total[None, :] / s


# --- refinement relations ----------------------------------------------------

def cell_parent_map(fine: ScenarioGrid, coarse: ScenarioGrid) -> np.ndarray:
    """Exact fine-cell -> coarse-cell map for nested quantile cells.

    Requires identical time meshes and per-coordinate cell counts of the fine
    grid that are integer multiples of the coarse grid's.  Entry [i-1] is the
    coarse cell containing fine cell i.
    """
    if fine.n_steps != coarse.n_steps or abs(fine.T - coarse.T) > 1e-12:
        raise GridMismatchError("cell refinement requires identical time meshes")
    ratios = []
    for kf, kc in zip(fine.cells_per_dim, coarse.cells_per_dim):
        if kf % kc != 0:
            raise GridMismatchError("fine cell counts must be multiples of coarse counts")
        ratios.append(kf // kc)
    out = np.zeros(fine.n_cells, dtype=np.int64)
    for cell in range(1, fine.n_cells + 1):
        per = fine._split_cell(cell)
        coarse_per = tuple(-(-i // r) for i, r in zip(per, ratios))  # ceil(i / r)
        out[cell - 1] = coarse._join_cell(coarse_per)
    return out


def _pair_cell_probs_1d(
    z_fine: np.ndarray, k_f: int, z_coarse: np.ndarray, k_c: int, dt_f: float, dt_c: float
) -> np.ndarray:
    """P(coarse cell of x+y | fine cells of x and y) for one coordinate.

    x, y ~ N(0, dt_f) independent; dt_c = 2 dt_f.  Indices are descending.
    Returns array (k_f, k_f, k_c).
    """
    sf = math.sqrt(dt_f)
    sc = math.sqrt(dt_c)
    fine_edges = np.concatenate(([-np.inf], z_fine * sf, [np.inf]))
    coarse_edges = np.concatenate(([-np.inf], z_coarse * sc, [np.inf]))

    def asc_bounds(edges, j):  # ascending interval j (1-based)
        return edges[j - 1], edges[j]

    table = np.zeros((k_f, k_f, k_c))
    for ia in range(1, k_f + 1):  # descending index of x
        a_lo, a_hi = asc_bounds(fine_edges, k_f + 1 - ia)
        pa = 1.0 / k_f
        for ib in range(1, k_f + 1):
            b_lo, b_hi = asc_bounds(fine_edges, k_f + 1 - ib)
            for ic in range(1, k_c + 1):
                c_lo, c_hi = asc_bounds(coarse_edges, k_c + 1 - ic)

                def integrand(x, b_lo=b_lo, b_hi=b_hi, c_lo=c_lo, c_hi=c_hi):
                    lo = max(b_lo, c_lo - x)
                    hi = min(b_hi, c_hi - x)
                    if hi <= lo:
                        return 0.0
                    return (
                        math.exp(-0.5 * (x / sf) ** 2)
                        / (sf * _SQRT_2PI)
                        * (ndtr(hi / sf) - ndtr(lo / sf))
                    )

                lo_x = a_lo if np.isfinite(a_lo) else -8.0 * sf
                hi_x = a_hi if np.isfinite(a_hi) else 8.0 * sf
                val, _ = quad(integrand, lo_x, hi_x, limit=200)
                table[ia - 1, ib - 1, ic - 1] = val / (pa / k_f)
    # normalize rows (conditional distributions)
    table /= table.sum(axis=2, keepdims=True)
    return table


def time_parent_table(fine: ScenarioGrid, coarse: ScenarioGrid) -> np.ndarray:
    """Most-probable coarse cell given the two fine cells of its half-intervals.

    Supports n_steps doubling with equal cell structure.  Ties resolve to the
    lower cell index.  Entry [a-1, b-1] is the coarse cell assigned to fine
    cell pair (a, b).  This is a modeling choice: the coarse cell of a summed
    increment is not a deterministic function of the halves' cells, so the
    pushforward uses the maximum-probability assignment.
    """
    if fine.n_steps != 2 * coarse.n_steps or abs(fine.T - coarse.T) > 1e-12:
        raise GridMismatchError("time refinement requires doubled n_steps")
    if fine.cells_per_dim != coarse.cells_per_dim:
        raise GridMismatchError("time refinement requires equal cell structure")
    tables = [
        _pair_cell_probs_1d(
            fine._z_boundaries(dim),
            fine.cells_per_dim[dim],
            coarse._z_boundaries(dim),
            coarse.cells_per_dim[dim],
            fine.mesh_dt,
            coarse.mesh_dt,
        )
        for dim in range(fine.m0)
    ]
    out = np.zeros((fine.n_cells, fine.n_cells), dtype=np.int64)
    for a in range(1, fine.n_cells + 1):
        pa = fine._split_cell(a)
        for b in range(1, fine.n_cells + 1):
            pb = fine._split_cell(b)
            per_dim = []
            for dim in range(fine.m0):
                probs = tables[dim][pa[dim] - 1, pb[dim] - 1]
                # round away quadrature noise so exact ties go to the lower index
                best = int(np.argmax(np.round(probs, 8)))
                per_dim.append(best + 1)
            out[a - 1, b - 1] = coarse._join_cell(tuple(per_dim))
    return out
