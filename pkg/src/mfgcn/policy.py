"""Feedback policies on (fine time, state cell, scenario node) and state grids."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError
from .grid import NodeId, ScenarioGrid


@dataclass(frozen=True)
class StateGrid:
    """Uniform tensor grid on a truncation box; grid points double as cells."""

    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        axes = tuple(np.asarray(ax, dtype=float) for ax in self.axes)
        for ax in axes:
            if ax.ndim != 1 or ax.shape[0] < 2:
                raise ValueError("each state-grid axis needs at least two points")
            if not np.all(np.diff(ax) > 0):
                raise ValueError("state-grid axes must be strictly increasing")
            ax.flags.writeable = False
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, lo, hi, n_points) -> "StateGrid":
        lo = np.atleast_1d(np.asarray(lo, float))
        hi = np.atleast_1d(np.asarray(hi, float))
        if np.isscalar(n_points) or np.asarray(n_points).ndim == 0:
            n_points = [int(n_points)] * len(lo)
        return cls(tuple(np.linspace(l, h, n) for l, h, n in zip(lo, hi, n_points)))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(ax) for ax in self.axes)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        """All grid points, flattened in C order: (n_points, dim)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_of(self, x: np.ndarray) -> np.ndarray:
        """Nearest grid point (flat index) per row of x, clipped to the box."""
        x = np.atleast_2d(np.asarray(x, float))
        flat = np.zeros(x.shape[0], dtype=np.int64)
        for dim, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            idx = np.clip(np.rint((x[:, dim] - ax[0]) / h).astype(np.int64), 0, len(ax) - 1)
            flat = flat * len(ax) + idx
        return flat

    def interp(self, values: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, int]:
        """Multilinear interpolation clamped at the box.

        Returns (interpolated values, number of clamped query rows).
        """
        x = np.atleast_2d(np.asarray(x, float))
        clamped = 0
        if self.dim == 1:
            ax = self.axes[0]
            clamped = int(np.count_nonzero((x[:, 0] < ax[0]) | (x[:, 0] > ax[-1])))
            return np.interp(x[:, 0], ax, values), clamped
        xq = np.empty_like(x)
        out_mask = np.zeros(x.shape[0], dtype=bool)
        for dim, ax in enumerate(self.axes):
            out_mask |= (x[:, dim] < ax[0]) | (x[:, dim] > ax[-1])
            xq[:, dim] = np.clip(x[:, dim], ax[0], ax[-1])
        clamped = int(np.count_nonzero(out_mask))
        vals = values.reshape(self.shape)
        out = np.zeros(x.shape[0])
        lo_idx = []
        frac = []
        for dim, ax in enumerate(self.axes):
            i = np.clip(np.searchsorted(ax, xq[:, dim], side="right") - 1, 0, len(ax) - 2)
            lo_idx.append(i)
            frac.append((xq[:, dim] - ax[i]) / (ax[i + 1] - ax[i]))
        for corner in range(2**self.dim):
            w = np.ones(x.shape[0])
            idx = []
            for dim in range(self.dim):
                hi = (corner >> dim) & 1
                w *= frac[dim] if hi else (1.0 - frac[dim])
                idx.append(lo_idx[dim] + hi)
            out += w * vals[tuple(idx)]
        return out, clamped


class FeedbackPolicy:
    """Per (fine time index, state cell, scenario node) control law.

    `tables[j]` has shape (n_state, n_nodes_at_depth(j), n_actions) for a
    relaxed policy (rows are probability vectors) or (n_state,
    n_nodes_at_depth(j)) integer action indices for a strict one.
    """

    def __init__(self, kind: str, grid: ScenarioGrid, state_grid: StateGrid,
                 actions: np.ndarray, tables: list[np.ndarray]):
        if kind not in ("relaxed", "strict"):
            raise ValueError("kind must be 'relaxed' or 'strict'")
        if len(tables) != grid.n_fine:
            raise ValueError(f"need one table per fine step ({grid.n_fine})")
        actions = np.asarray(actions, dtype=float)
        if actions.ndim == 1:
            actions = actions[:, None]
        for j, tab in enumerate(tables):
            n_nodes = grid.n_cells ** grid.depth_at_fine(j)
            want = (state_grid.n_points, n_nodes) + ((actions.shape[0],) if kind == "relaxed" else ())
            if tab.shape != want:
                raise ValueError(f"table {j} has shape {tab.shape}, expected {want}")
            if kind == "relaxed" and np.any(np.abs(tab.sum(axis=2) - 1.0) > 1e-12):
                raise ValueError("relaxed policy rows must sum to 1 within 1e-12")
            if kind == "strict" and (tab.min() < 0 or tab.max() >= actions.shape[0]):
                raise ValueError("strict policy action index outside A_grid")
        self.kind = kind
        self.grid = grid
        self.state_grid = state_grid
        self.actions = actions
        self.tables = tables
        self.diagnostics: dict = {}

    @classmethod
    def constant(cls, grid: ScenarioGrid, state_grid: StateGrid, actions: np.ndarray,
                 action_idx: int) -> "FeedbackPolicy":
        actions = np.asarray(actions, float)
        n_act = actions.shape[0] if actions.ndim > 1 else len(actions)
        if not 0 <= action_idx < n_act:
            raise ValueError("action index outside A_grid")
        tables = []
        for j in range(grid.n_fine):
            n_nodes = grid.n_cells ** grid.depth_at_fine(j)
            tables.append(np.full((state_grid.n_points, n_nodes), action_idx, dtype=np.int64))
        return cls("strict", grid, state_grid, actions, tables)

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    def _node_col(self, j: int, node: NodeId) -> int:
        if len(node) != self.grid.depth_at_fine(j):
            raise GridMismatchError(f"node {node} has wrong depth for fine index {j}")
        return self.grid.node_index(node)

    def weights_at(self, j: int, cells: np.ndarray, node: NodeId) -> np.ndarray:
        """Mixture weights (N, n_actions) for state-cells `cells` at (j, node)."""
        col = self._node_col(j, node)
        if self.kind == "relaxed":
            return self.tables[j][cells, col, :]
        idx = self.tables[j][cells, col]
        out = np.zeros((len(cells), self.n_actions))
        out[np.arange(len(cells)), idx] = 1.0
        return out

    def action_index_at(self, j: int, cells: np.ndarray, node: NodeId) -> np.ndarray:
        if self.kind != "strict":
            raise ValueError("action_index_at requires a strict policy")
        return self.tables[j][cells, self._node_col(j, node)]

    # --- serialization ------------------------------------------------------
    def to_csv(self, path: str) -> None:
        g = self.grid
        pts = self.state_grid.points()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["# kind", self.kind, "T", g.T, "n_steps", g.n_steps,
                             "n_cells", g.n_cells, "substeps", g.substeps, "m0", g.m0])
            writer.writerow(["# actions"] + [repr(float(v)) for v in self.actions.ravel()])
            writer.writerow(["# state_axes"] + [repr(float(v)) for ax in self.state_grid.axes for v in ax]
                            + ["# dims"] + [str(len(ax)) for ax in self.state_grid.axes])
            header = ["time_index", "node"] + [f"x{i + 1}" for i in range(pts.shape[1])]
            if self.kind == "strict":
                header += ["action_index"]
            else:
                header += [f"w{k}" for k in range(self.n_actions)]
            writer.writerow(header)
            for j, tab in enumerate(self.tables):
                depth = g.depth_at_fine(j)
                for node in g.nodes_at_depth(depth):
                    col = g.node_index(node)
                    for c in range(pts.shape[0]):
                        row = [j, ScenarioGrid.node_name(node)] + [repr(float(v)) for v in pts[c]]
                        if self.kind == "strict":
                            row.append(int(tab[c, col]))
                        else:
                            row.extend(repr(float(w)) for w in tab[c, col])
                        writer.writerow(row)

    @classmethod
    def from_csv(cls, path: str) -> "FeedbackPolicy":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        meta = rows[0]
        kind = meta[1]
        grid = ScenarioGrid(T=float(meta[3]), n_steps=int(meta[5]), n_cells=int(meta[7]),
                            substeps=int(meta[9]), m0=int(meta[11]))
        actions = np.array([float(v) for v in rows[1][1:]])
        ax_row = rows[2]
        split = ax_row.index("# dims")
        flat = [float(v) for v in ax_row[1:split]]
        dims = [int(v) for v in ax_row[split + 1:]]
        axes, pos = [], 0
        for n in dims:
            axes.append(np.array(flat[pos:pos + n]))
            pos += n
        sg = StateGrid(tuple(axes))
        tables: list[np.ndarray] = []
        n_act = len(actions)
        for j in range(grid.n_fine):
            n_nodes = grid.n_cells ** grid.depth_at_fine(j)
            if kind == "strict":
                tables.append(np.zeros((sg.n_points, n_nodes), dtype=np.int64))
            else:
                tables.append(np.zeros((sg.n_points, n_nodes, n_act)))
        pt_index = {tuple(np.round(p, 12)): i for i, p in enumerate(sg.points())}
        d = sg.dim
        for row in rows[4:]:
            j = int(row[0])
            node = ScenarioGrid.node_from_name(row[1])
            col = grid.node_index(node)
            c = pt_index[tuple(np.round([float(v) for v in row[2:2 + d]], 12))]
            if kind == "strict":
                tables[j][c, col] = int(row[2 + d])
            else:
                tables[j][c, col, :] = [float(v) for v in row[2 + d:]]
        return cls(kind, grid, sg, actions, tables)
