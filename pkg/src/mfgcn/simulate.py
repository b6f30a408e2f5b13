"""Euler particle simulation of the controlled state equation on the scenario tree.

The tree simulator advances one shared particle population along every
scenario branch: at each mesh boundary the population is cloned per child
cell and each clone receives that cell's conditional common-noise increments
(drawn as a cell-conditioned interval total split into Brownian-bridge
substeps).  Initial states and idiosyncratic increments are keyed by
(seed, particle, step) only, so  leaves sharing a node prefix share the
entire history up to that node — states at a node are identical across the
leaves extending it, which is exactly the common-noise sharing contract.
All draws are keyed streams: the same seed reproduces a run bit for bit,
and the fixed-point map built on top of this simulator is deterministic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError
from .grid import LeafId, NodeId, ScenarioGrid
from .measures import MeasureFlow
from .model import ModelSpec
from .policy import FeedbackPolicy
from .seeding import TAG_COMMON, TAG_IDIO, TAG_X0, rng_for


def _apply_vol(s: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Volatility times increment; s is (d, m) constant or (N, d, m) batched."""
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        return dz @ s.T
    return np.einsum("ndm,nm->nd", s, dz)


def _apply_vol_shared(s: np.ndarray, dz: np.ndarray, n: int) -> np.ndarray:
    """Volatility times a shared (common) increment vector dz of shape (m0,)."""
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        return np.broadcast_to(s @ dz, (n, s.shape[0]))
    return np.einsum("ndm,m->nd", s, dz)


def _mixture_drift(model: ModelSpec, t: float, x: np.ndarray, mu, weights: np.ndarray,
                   actions: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for k in range(actions.shape[0]):
        wk = weights[:, k]
        if np.any(wk > 0.0):
            out += wk[:, None] * model.b(t, x, mu, actions[k])
    return out


def _strict_drift(model: ModelSpec, t: float, x: np.ndarray, mu, idx: np.ndarray,
                  actions: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for k in np.unique(idx):
        mask = idx == k
        out[mask] = model.b(t, x[mask], mu, actions[k])
    return out


def _check_flow_grid(flow: MeasureFlow, grid: ScenarioGrid) -> None:
    g = flow.grid
    if not (
        g.n_steps == grid.n_steps
        and g.n_cells == grid.n_cells
        and g.substeps == grid.substeps
        and g.cells_per_dim == grid.cells_per_dim
        and abs(g.T - grid.T) < 1e-12
    ):
        raise GridMismatchError("flow grid does not match the simulation grid")


def common_increments(grid: ScenarioGrid, seed: int, node: NodeId) -> np.ndarray:
    """Substep common-noise increments for `node`'s newest interval, (s, m0).

    Keyed by (seed, node), so any simulation touching this node sees the same
    draws; the interval total is conditioned to the node's last cell and the
    split is an exact Brownian-bridge decomposition.
    """
    rng = rng_for(seed, TAG_COMMON, *node)
    total = grid.conditional_increment_sampler(node[-1], grid.mesh_dt, rng)
    return grid.bridge_substeps(total, rng)


@dataclass
class ParticleBatch:
    """Particle paths along one leaf: states (N, n_fine + 1, d).

    `act_cells[:, j]` is the state-grid cell each particle acted from at fine
    step j; with the policy it recovers the applied control law exactly.
    """

    states: np.ndarray
    leaf: LeafId
    act_cells: np.ndarray
    weight: float
    grid: ScenarioGrid
    policy: FeedbackPolicy
    flow: MeasureFlow

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]

    def control_moment(self, gamma: float) -> float:
        """Mean over particles of the time integral of |a|^gamma d(control law)."""
        a_pow = np.linalg.norm(self.policy.actions, axis=1) ** gamma
        total = np.zeros(self.n_particles)
        for j in range(self.grid.n_fine):
            node = tuple(self.leaf[: self.grid.depth_at_fine(j)])
            w = self.policy.weights_at(j, self.act_cells[:, j], node)
            total += (w @ a_pow) * self.grid.fine_dt
        return float(total.mean())


@dataclass
class TreeBatch:
    """One tree simulation: per node, the states over its newest interval."""

    grid: ScenarioGrid
    policy: FeedbackPolicy
    flow: MeasureFlow
    seed: int
    x0: np.ndarray
    node_states: dict[NodeId, np.ndarray] = field(default_factory=dict)
    node_act_cells: dict[NodeId, np.ndarray] = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return self.x0.shape[0]

    def states_at(self, node: NodeId, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(points, weights) of the conditional population at (node, fine j).

        At interior fine times the measure pools the node's children with the
        cell probabilities, because the current interval's cell is not yet in
        the observable filtration.
        """
        g = self.grid
        k = g.depth_at_fine(j)
        if len(node) != k:
            raise GridMismatchError(f"node {node} has wrong depth for fine index {j}")
        n = self.n_particles
        s = g.substeps
        if k == g.n_steps:
            pts = self.node_states[node][:, -1, :]
            return pts, np.full(n, 1.0 / n)
        if j == k * s:
            pts = self.x0 if k == 0 else self.node_states[node][:, -1, :]
            return pts, np.full(n, 1.0 / n)
        parts, weights = [], []
        for c in range(1, g.n_cells + 1):
            child = node + (c,)
            parts.append(self.node_states[child][:, j - k * s - 1, :])
            weights.append(np.full(n, g.cell_probs[c - 1] / n))
        return np.concatenate(parts, axis=0), np.concatenate(weights)

    def leaf_weight(self, leaf: LeafId) -> float:
        return float(np.prod([self.grid.cell_probs[c - 1] for c in leaf]))

    def leaf_batch(self, leaf: LeafId) -> ParticleBatch:
        g = self.grid
        states = [self.x0[:, None, :]]
        cells = []
        for depth in range(1, g.n_steps + 1):
            node = tuple(leaf[:depth])
            states.append(self.node_states[node])
            cells.append(self.node_act_cells[node])
        return ParticleBatch(
            states=np.concatenate(states, axis=1),
            leaf=tuple(leaf),
            act_cells=np.concatenate(cells, axis=1),
            weight=self.leaf_weight(leaf),
            grid=g,
            policy=self.policy,
            flow=self.flow,
        )


def _advance_segment(model, flow, policy, grid, parent: NodeId, child: NodeId,
                     x_start: np.ndarray, dw: np.ndarray, db_subs: np.ndarray):
    """Euler steps across one mesh interval along `child` (policy sees `parent`)."""
    s = grid.substeps
    dt = grid.fine_dt
    n = x_start.shape[0]
    states = np.empty((n, s, model.d))
    act_cells = np.empty((n, s), dtype=np.int64)
    x = x_start
    k = len(parent)
    for local in range(s):
        j = k * s + local
        t = j * dt
        mu = flow.at(parent, j)
        cells = policy.state_grid.cell_of(x)
        act_cells[:, local] = cells
        if policy.kind == "strict":
            drift = _strict_drift(model, t, x, mu, policy.action_index_at(j, cells, parent),
                                  policy.actions)
        else:
            drift = _mixture_drift(model, t, x, mu, policy.weights_at(j, cells, parent),
                                   policy.actions)
        x = (
            x
            + drift * dt
            + _apply_vol(model.sigma(t, x, mu), dw[:, local, :])
            + _apply_vol_shared(model.sigma0(t, x, mu), db_subs[local], n)
        )
        if not np.all(np.isfinite(x)):
            raise RuntimeError(
                f"non-finite state at fine step {j}, node {ScenarioGrid.node_name(child)}"
            )
        states[:, local, :] = x
    return states, act_cells


def simulate_tree(model: ModelSpec, flow: MeasureFlow, policy: FeedbackPolicy,
                  grid: ScenarioGrid, N: int, seed: int, workers: int = 1) -> TreeBatch:
    """Simulate the whole scenario tree with N particles per leaf."""
    _check_flow_grid(flow, grid)
    rng_x0 = rng_for(seed, TAG_X0)
    x0 = model.lambda_sampler(rng_x0, N)
    if x0.shape != (N, model.d):
        raise ValueError("lambda_sampler must return shape (N, d)")
    dw_all = rng_for(seed, TAG_IDIO).normal(0.0, math.sqrt(grid.fine_dt),
                                            size=(N, grid.n_fine, model.m))
    batch = TreeBatch(grid=grid, policy=policy, flow=flow, seed=seed, x0=x0)

    frontier: list[tuple[NodeId, np.ndarray]] = [((), x0)]
    for depth in range(grid.n_steps):
        s = grid.substeps
        dw_seg = dw_all[:, depth * s : (depth + 1) * s, :]

        def run(job):
            parent, x_start, cell = job
            child = parent + (cell,)
            db = common_increments(grid, seed, child)
            states, cells = _advance_segment(model, flow, policy, grid, parent, child,
                                             x_start, dw_seg, db)
            return child, states, cells

        jobs = [(parent, x_start, c)
                for parent, x_start in frontier
                for c in range(1, grid.n_cells + 1)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, jobs))
        else:
            results = [run(job) for job in jobs]
        next_frontier = []
        for child, states, cells in sorted(results, key=lambda r: r[0]):
            batch.node_states[child] = states
            batch.node_act_cells[child] = cells
            next_frontier.append((child, states[:, -1, :]))
        frontier = next_frontier
    return batch


def simulate_node_particles(model: ModelSpec, flow: MeasureFlow, policy: FeedbackPolicy,
                            grid: ScenarioGrid, leaf: LeafId, N: int, seed: int) -> ParticleBatch:
    """Simulate N particles along a single leaf.

    Uses the same keyed noise streams as `simulate_tree`, so the result equals
    the tree's view of that leaf exactly.
    """
    _check_flow_grid(flow, grid)
    leaf = tuple(leaf)
    if len(leaf) != grid.n_steps:
        raise GridMismatchError(f"leaf {leaf} must have length {grid.n_steps}")
    x0 = model.lambda_sampler(rng_for(seed, TAG_X0), N)
    dw_all = rng_for(seed, TAG_IDIO).normal(0.0, math.sqrt(grid.fine_dt),
                                            size=(N, grid.n_fine, model.m))
    states = [x0[:, None, :]]
    cells = []
    x = x0
    s = grid.substeps
    for depth in range(grid.n_steps):
        child = leaf[: depth + 1]
        db = common_increments(grid, seed, child)
        seg, seg_cells = _advance_segment(
            model, flow, policy, grid, leaf[:depth], child, x,
            dw_all[:, depth * s : (depth + 1) * s, :], db,
        )
        states.append(seg)
        cells.append(seg_cells)
        x = seg[:, -1, :]
    weight = float(np.prod([grid.cell_probs[c - 1] for c in leaf]))
    return ParticleBatch(
        states=np.concatenate(states, axis=1), leaf=leaf,
        act_cells=np.concatenate(cells, axis=1), weight=weight,
        grid=grid, policy=policy, flow=flow,
    )


@dataclass
class BinnedBatch:
    """Unconditional simulation: every particle carries its own noise path."""

    states: np.ndarray
    leaves: np.ndarray  # (N, n_steps) cell indices
    act_cells: np.ndarray
    grid: ScenarioGrid
    policy: FeedbackPolicy
    flow: MeasureFlow

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]


def simulate_binned(model: ModelSpec, flow: MeasureFlow, policy: FeedbackPolicy,
                    grid: ScenarioGrid, N: int, seed: int) -> BinnedBatch:
    """Simulate with unconditioned common noise and classify paths afterwards.

    Cross-validates the tree mode: matches the conditional construction in
    law but wastes samples on rare leaves.
    """
    _check_flow_grid(flow, grid)
    x0 = model.lambda_sampler(rng_for(seed, TAG_X0), N)
    dw_all = rng_for(seed, TAG_IDIO).normal(0.0, math.sqrt(grid.fine_dt),
                                            size=(N, grid.n_fine, model.m))
    db_all = rng_for(seed, TAG_COMMON).normal(0.0, math.sqrt(grid.fine_dt),
                                              size=(N, grid.n_fine, grid.m0))
    mesh_inc = db_all.reshape(N, grid.n_steps, grid.substeps, grid.m0).sum(axis=2)
    leaves = grid.classify_paths(mesh_inc)

    states = np.empty((N, grid.n_fine + 1, model.d))
    states[:, 0, :] = x0
    act_cells = np.empty((N, grid.n_fine), dtype=np.int64)
    x = x0
    dt = grid.fine_dt
    for j in range(grid.n_fine):
        t = j * dt
        depth = grid.depth_at_fine(j)
        cells = policy.state_grid.cell_of(x)
        act_cells[:, j] = cells
        new_x = np.empty_like(x)
        if depth == 0:
            groups = {(): np.arange(N)}
        else:
            codes = (leaves[:, :depth] - 1) @ (grid.n_cells ** np.arange(depth - 1, -1, -1))
            depth_nodes = grid.nodes_at_depth(depth)
            groups = {}
            for code in np.unique(codes):
                groups[depth_nodes[int(code)]] = np.where(codes == code)[0]
        for node, members in groups.items():
            xm = x[members]
            mu = flow.at(node, j)
            cm = cells[members]
            if policy.kind == "strict":
                drift = _strict_drift(model, t, xm, mu,
                                      policy.action_index_at(j, cm, node), policy.actions)
            else:
                drift = _mixture_drift(model, t, xm, mu,
                                       policy.weights_at(j, cm, node), policy.actions)
            vol = _apply_vol(model.sigma(t, xm, mu), dw_all[members, j, :])
            cvol = _apply_vol(model.sigma0(t, xm, mu), db_all[members, j, :])
            new_x[members] = xm + drift * dt + vol + cvol
        x = new_x
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite state at fine step {j} in binned simulation")
        states[:, j + 1, :] = x
    return BinnedBatch(states=states, leaves=leaves, act_cells=act_cells,
                       grid=grid, policy=policy, flow=flow)


def moment_check(batch: ParticleBatch, gamma: float, model: ModelSpec, c4: float):
    """Check the pathwise moment bound on a simulated batch.

    Verifies  E max_t |X_t|^gamma <= c4 (1 + flow moment + control moment).
    The flow term uses the largest marginal moment along the batch's leaf,
    which understates the pathwise moment of the flow, so a pass here is
    conservative.  Returns (ok, report).
    """
    if not model.p <= gamma <= model.p_prime:
        raise ValueError("gamma must lie in [p, p']")
    norms = np.linalg.norm(batch.states, axis=2)
    lhs = float(np.mean(norms.max(axis=1) ** gamma))
    flow_term = 0.0
    from .measures import empirical_moment  # local import avoids cycle at module load

    for j in range(batch.grid.n_fine + 1):
        mu = batch.flow.at_leaf(batch.leaf, j)
        flow_term = max(flow_term, empirical_moment(mu, gamma))
    control_term = batch.control_moment(gamma)
    rhs = c4 * (1.0 + flow_term + control_term)
    report = {
        "lhs": lhs,
        "rhs": rhs,
        "c4": c4,
        "flow_term": flow_term,
        "control_term": control_term,
        "gamma": gamma,
    }
    return lhs <= rhs, report
