import math

import numpy as np
import pytest

from mfgcn.errors import GridMismatchError
from mfgcn.grid import ScenarioGrid, cell_parent_map, time_parent_table

from oracles import truncated_normal_mean


def grid(T=1.0, n_steps=4, n_cells=2, substeps=2, m0=1):
    return ScenarioGrid(T=T, n_steps=n_steps, n_cells=n_cells, substeps=substeps, m0=m0)


class TestFloor:
    def test_zero(self):
        assert grid().floor_n(0.0) == 0.0

    def test_interior(self):
        assert grid(T=1.0, n_steps=4).floor_n(0.3) == pytest.approx(0.25)

    def test_terminal(self):
        g = grid()
        assert g.floor_n(g.T) == pytest.approx(g.T)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            grid().floor_n(1.5)
        with pytest.raises(ValueError):
            grid().floor_n(-0.1)


class TestClassify:
    def test_sign_cells(self):
        g = grid()
        # two cells split at 0, cell 1 = [0, inf) by the descending/closed-below rule
        leaf = g.classify_path(np.array([0.4, -0.2, 0.1, 2.0]))
        assert leaf == (1, 2, 1, 1)

    def test_boundary_lower_index(self):
        g = grid()
        assert g.classify_increment(np.array([0.0])) == 1

    def test_single_cell(self):
        g = grid(n_cells=1)
        rng = np.random.default_rng(0)
        leaf = g.classify_path(rng.normal(size=(4, 1)))
        assert leaf == (1, 1, 1, 1)

    def test_three_quantile_middle(self):
        g = grid(n_cells=3, n_steps=1)
        # increment exactly at the median of N(0, dt) is the middle cell
        assert g.classify_increment(np.array([0.0])) == 2

    def test_vectorized_agrees(self):
        g = grid(n_cells=3)
        rng = np.random.default_rng(5)
        inc = rng.normal(0, math.sqrt(g.mesh_dt), size=(50, g.n_steps, 1))
        fast = g.classify_paths(inc)
        for i in range(50):
            assert tuple(fast[i]) == g.classify_path(inc[i])

    def test_m0_2_orthants(self):
        g = grid(n_cells=4, m0=2)
        assert g.cells_per_dim == (2, 2)
        # both coordinates positive -> per-dim descending index (1, 1) -> composite 1
        assert g.classify_increment(np.array([0.5, 0.5])) == 1
        assert g.classify_increment(np.array([-0.5, -0.5])) == 4


class TestNodes:
    def test_node_of_root(self):
        g = grid()
        leaf = (1, 2, 1, 1)
        assert g.node_of(leaf, 0.1) == ()

    def test_node_of_terminal(self):
        g = grid()
        leaf = (1, 2, 1, 1)
        assert g.node_of(leaf, g.T) == leaf

    def test_prefix_monotone(self):
        g = grid()
        leaf = (2, 1, 2, 1)
        prev = ()
        for t in np.linspace(0, g.T, 17):
            node = g.node_of(leaf, t)
            assert node[: len(prev)] == prev
            prev = node

    def test_names(self):
        assert ScenarioGrid.node_name(()) == "root"
        assert ScenarioGrid.node_name((2, 1, 3)) == "2.1.3"
        assert ScenarioGrid.node_from_name("2.1.3") == (2, 1, 3)
        assert ScenarioGrid.node_from_name("root") == ()

    def test_node_index_order(self):
        g = grid(n_cells=3)
        nodes = g.nodes_at_depth(2)
        for i, node in enumerate(nodes):
            assert g.node_index(node) == i


class TestHatInterpolate:
    def test_constant(self):
        g = grid()
        path = np.full(g.n_steps + 1, 2.5)
        out = g.hat_interpolate(path)
        assert np.allclose(out, 2.5)

    def test_delay_exact(self):
        g = grid(n_steps=4, substeps=3)
        rng = np.random.default_rng(2)
        path = rng.normal(size=g.n_steps + 1)
        out = g.hat_interpolate(path)
        for i in range(g.n_steps):
            j = (i + 1) * g.substeps
            if j <= g.n_fine:
                assert out[j] == path[i]  # exact, not approximate

    def test_sup_bound(self):
        g = grid(n_steps=8, substeps=4)
        rng = np.random.default_rng(3)
        for _ in range(200):
            path = rng.normal(size=g.n_steps + 1) * rng.uniform(0.1, 5)
            out = g.hat_interpolate(path)
            assert np.max(np.abs(out)) <= np.max(np.abs(path)) + 1e-15


class TestCells:
    def test_equiprobable(self):
        for k in (1, 2, 3, 5, 8):
            g = grid(n_cells=k)
            probs = g.cell_probs
            assert np.all(np.abs(probs - 1.0 / k) < 1e-12)
            assert abs(probs.sum() - 1.0) < 1e-12

    def test_cell_mean_against_quadrature(self):
        g = grid(n_cells=3)
        dt = 0.7
        for cell in (1, 2, 3):
            (lo, hi), = g.cell_bounds(cell, dt)
            ref = truncated_normal_mean(lo, hi, dt)
            assert g.cell_mean(cell, dt)[0] == pytest.approx(ref, abs=1e-9)

    def test_halfline_mean_value(self):
        g = grid(n_cells=2)
        # cell 1 = [0, inf): conditional mean of N(0,1) is sqrt(2/pi)
        assert g.cell_mean(1, 1.0)[0] == pytest.approx(math.sqrt(2 / math.pi), abs=1e-12)

    def test_cell_var_sanity(self):
        g = grid(n_cells=2)
        v = g.cell_var(1, 1.0)[0]
        # half-normal variance 1 - 2/pi
        assert v == pytest.approx(1 - 2 / math.pi, abs=1e-12)


class TestConditionalSampler:
    def test_single_cell_unconditioned(self):
        g = grid(n_cells=1)
        rng = np.random.default_rng(11)
        x = g.conditional_increment_sampler(1, 1.0, rng, size=200_000)
        assert abs(x.mean()) < 4 / math.sqrt(200_000)

    def test_halfline_mean(self):
        g = grid(n_cells=2)
        rng = np.random.default_rng(13)
        n = 100_000
        x = g.conditional_increment_sampler(1, 1.0, rng, size=n)
        assert np.all(x >= 0)
        sd = math.sqrt(1 - 2 / math.pi)
        assert abs(x.mean() - math.sqrt(2 / math.pi)) < 4 * sd / math.sqrt(n)

    def test_mixture_reproduces_unconditional(self):
        g = grid(n_cells=2)
        rng = np.random.default_rng(17)
        n = 100_000
        parts = [g.conditional_increment_sampler(c, 0.25, rng, size=n // 2) for c in (1, 2)]
        x = np.concatenate(parts)
        assert abs(x.mean()) < 4 * 0.5 / math.sqrt(n)
        assert abs(x.var() - 0.25) < 4 * 0.25 * math.sqrt(2.0 / n)

    def test_bridge_sums_to_total(self):
        g = grid(substeps=4)
        rng = np.random.default_rng(19)
        total = np.array([0.37])
        sub = g.bridge_substeps(total, rng)
        assert sub.shape == (4, 1)
        assert np.allclose(sub.sum(axis=0), total)


class TestLeafFrequencies:
    def test_multinomial_match(self):
        g = grid(n_steps=3, n_cells=2)
        rng = np.random.default_rng(23)
        n = 100_000
        inc = rng.normal(0, math.sqrt(g.mesh_dt), size=(n, g.n_steps, 1))
        leaves = g.classify_paths(inc)
        # composite leaf label -> counts
        codes = (leaves - 1) @ (g.n_cells ** np.arange(g.n_steps - 1, -1, -1))
        counts = np.bincount(codes, minlength=g.n_leaves)
        p = 1.0 / g.n_leaves
        tol = 4 * math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= tol)


class TestRefinement:
    def test_cell_parent_exact(self):
        coarse = grid(n_cells=2)
        fine = grid(n_cells=4)
        parent = cell_parent_map(fine, coarse)
        rng = np.random.default_rng(29)
        inc = rng.normal(0, math.sqrt(fine.mesh_dt), size=(500, fine.n_steps, 1))
        leaves_f = fine.classify_paths(inc)
        leaves_c = coarse.classify_paths(inc)
        # coarse classification is a deterministic function of the fine one
        assert np.array_equal(parent[leaves_f - 1], leaves_c)

    def test_cell_parent_requires_nesting(self):
        with pytest.raises(GridMismatchError):
            cell_parent_map(grid(n_cells=3), grid(n_cells=2))

    def test_time_parent_table(self):
        coarse = grid(n_steps=2, n_cells=2)
        fine = grid(n_steps=4, n_cells=2)
        table = time_parent_table(fine, coarse)
        # same-sign halves force the sign of the sum; mixed pairs tie -> lower index
        assert table[0, 0] == 1
        assert table[1, 1] == 2
        assert table[0, 1] == 1
        assert table[1, 0] == 1

    def test_time_parent_table_majority(self):
        # with 3 cells the (top, top) pair must map to the top coarse cell
        coarse = grid(n_steps=2, n_cells=3)
        fine = grid(n_steps=4, n_cells=3)
        table = time_parent_table(fine, coarse)
        assert table[0, 0] == 1
        assert table[2, 2] == 3
