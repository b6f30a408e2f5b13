"""Relaxed controls on a fine time mesh: distribution-valued control paths.

A relaxed control assigns each fine time step a probability vector over the
discretized action set; its induced measure on [0, T] x A has Lebesgue time
marginal by construction (piecewise-constant density one).  A strict control
is the point-mass special case.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import GridMismatchError

TIME_MARGINAL_TOL = 1e-12


@dataclass(frozen=True)
class RelaxedControl:
    """Per-step probability vectors over a finite action grid.

    times : (n_t,) left endpoints of the fine steps (uniform mesh).
    actions : (n_a, dim_A) action grid.
    weights : (n_t, n_a); each row should sum to 1 (see check_time_marginal —
    construction does not enforce it so invalid rows can be detected).
    """

    times: np.ndarray
    actions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        a = np.asarray(self.actions, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (t.shape[0], a.shape[0]):
            raise ValueError(f"weights shape {w.shape} != (n_t={t.shape[0]}, n_a={a.shape[0]})")
        if np.any(w < -1e-15):
            raise ValueError("weights must be nonnegative")
        for arr in (t, a, w):
            arr.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "weights", w)

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def dim_a(self) -> int:
        return self.actions.shape[1]

    @property
    def horizon(self) -> float:
        dt = self.times[1] - self.times[0] if self.n_steps > 1 else 1.0
        return float(self.times[-1] + dt)

    def step_dt(self) -> float:
        return self.horizon / self.n_steps

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_index", "action_index", "weight"])
            for i in range(self.n_steps):
                for k in range(self.actions.shape[0]):
                    writer.writerow([i, k, repr(float(self.weights[i, k]))])


@dataclass(frozen=True)
class StrictControl:
    """One action-grid element per fine step."""

    times: np.ndarray
    actions: np.ndarray
    action_idx: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.action_idx, dtype=int)
        a = np.asarray(self.actions, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if np.any(idx < 0) or np.any(idx >= a.shape[0]):
            raise ValueError("action index outside the action grid")
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "action_idx", idx)

    def path(self) -> np.ndarray:
        return self.actions[self.action_idx]

    def as_relaxed(self) -> RelaxedControl:
        w = np.zeros((len(self.action_idx), self.actions.shape[0]))
        w[np.arange(len(self.action_idx)), self.action_idx] = 1.0
        return RelaxedControl(self.times, self.actions, w)


def check_time_marginal(q: RelaxedControl) -> bool:
    """True iff every per-step vector sums to 1 within 1e-12 (Lebesgue marginal)."""
    return bool(np.all(np.abs(q.weights.sum(axis=1) - 1.0) <= TIME_MARGINAL_TOL))


def _require_same_mesh(q1: RelaxedControl, q2: RelaxedControl) -> None:
    if q1.times.shape != q2.times.shape or not np.allclose(q1.times, q2.times):
        raise GridMismatchError("relaxed controls live on different time meshes")
    if q1.dim_a != q2.dim_a:
        raise GridMismatchError("relaxed controls have different action dimensions")


def relaxed_distance(q1: RelaxedControl, q2: RelaxedControl, p: float = 1.0) -> float:
    """Exact W_p between q1/T and q2/T as measures on [0, T] x A.

    Each control is atomized at (step midpoint, action) with weight
    row_weight * dt / T; the ground metric is Euclidean on the concatenated
    (t, a) vector and the optimum is computed by a transport LP on the finite
    joint support.
    """
    _require_same_mesh(q1, q2)
    if not (check_time_marginal(q1) and check_time_marginal(q2)):
        raise ValueError("relaxed controls must have unit row sums")

    def atoms(q: RelaxedControl):
        dt = q.step_dt()
        mids = q.times + dt / 2.0
        pts = np.concatenate(
            [np.repeat(mids, q.actions.shape[0])[:, None],
             np.tile(q.actions, (q.n_steps, 1))],
            axis=1,
        )
        w = (q.weights * (dt / q.horizon)).ravel()
        keep = w > 0
        return pts[keep], w[keep]

    xs, xw = atoms(q1)
    ys, yw = atoms(q2)
    xw = xw / xw.sum()
    yw = yw / yw.sum()
    cost = np.linalg.norm(xs[:, None, :] - ys[None, :, :], axis=2) ** p
    n, m = len(xw), len(yw)
    rows = np.zeros((n, n * m))
    for i in range(n):
        rows[i, i * m : (i + 1) * m] = 1.0
    cols = np.tile(np.eye(m), (1, n))
    a_eq = np.vstack([rows, cols[:-1]])
    b_eq = np.concatenate([xw, yw[:-1]])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"relaxed-control transport LP failed: {res.message}")
    return float(res.fun) ** (1.0 / p)


def snap_to_grid(values: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest action-grid indices for a batch of points; ties snap to the
    higher index.  Returns (indices, distances)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1:
        actions = actions[:, None]
    d = np.linalg.norm(values[:, None, :] - actions[None, :, :], axis=2)
    rev_idx = np.argmin(d[:, ::-1], axis=1)
    idx = actions.shape[0] - 1 - rev_idx
    return idx, d[np.arange(len(values)), idx]


def barycenter(q: RelaxedControl, convex: bool = True) -> tuple[StrictControl, np.ndarray]:
    """Replace each per-step mixture by its mean action, snapped to the grid.

    Requires a convex action set (flag passed by the caller from the model);
    returns the strict control and the per-step snapping error.
    """
    if not convex:
        raise ValueError("barycenter projection requires a convex action set flag")
    if not check_time_marginal(q):
        raise ValueError("relaxed control has invalid time marginal")
    means = q.weights @ q.actions
    idx, err = snap_to_grid(means, q.actions)
    return StrictControl(q.times, q.actions, idx), err
