import numpy as np
import pytest

from mfgcn.errors import GridMismatchError
from mfgcn.grid import ScenarioGrid
from mfgcn.measures import (
    EmpiricalMeasure,
    MeasureFlow,
    empirical_moment,
    flow_distance,
    mix,
    mix_measures,
    wasserstein_p,
)

from oracles import assignment_wasserstein, rational_weights


def dirac(x):
    return EmpiricalMeasure.dirac(x)


def random_measure_1d(rng, max_support=8, denom=12):
    n = rng.integers(1, max_support + 1)
    pts = rng.normal(size=n) * rng.uniform(0.5, 3.0)
    w = rational_weights(rng, n, denom)
    return EmpiricalMeasure(pts[:, None], w)


class TestEmpiricalMeasure:
    def test_invariants(self):
        with pytest.raises(ValueError):
            EmpiricalMeasure(np.array([[0.0]]), np.array([0.5]))
        with pytest.raises(ValueError):
            EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([1.0]))
        with pytest.raises(ValueError):
            EmpiricalMeasure(np.array([[np.inf]]), np.array([1.0]))
        with pytest.raises(ValueError):
            EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([1.5, -0.5]))

    def test_immutable(self):
        m = dirac(0.0)
        with pytest.raises(ValueError):
            m.points[0, 0] = 1.0

    def test_compress_merges_duplicates(self):
        m = EmpiricalMeasure(np.array([0.0, 0.0, 1.0]), np.array([0.25, 0.25, 0.5]))
        c = m.compress()
        assert c.size == 2
        assert np.isclose(c.weights.sum(), 1.0)
        assert wasserstein_p(m, c, 1) < 1e-12

    def test_compress_prunes(self):
        w = np.array([1e-16, 1.0 - 1e-16])
        m = EmpiricalMeasure(np.array([5.0, 0.0]), w)
        c = m.compress()
        assert c.size == 1
        assert c.points[0, 0] == 0.0

    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        m = EmpiricalMeasure(rng.normal(size=(5, 2)), rational_weights(rng, 5))
        path = tmp_path / "m.csv"
        m.to_csv(str(path))
        back = EmpiricalMeasure.from_csv(str(path))
        assert np.array_equal(back.points, m.points)
        assert np.array_equal(back.weights, m.weights)


class TestWasserstein:
    def test_identical_diracs(self):
        assert wasserstein_p(dirac(0.0), dirac(0.0), 2) == 0.0

    def test_two_point_masses(self):
        assert np.isclose(wasserstein_p(dirac(0.0), dirac(1.0), 1), 1.0)

    def test_split_mass(self):
        # oracle: transport 1/2 mass to 1 and 1/2 to 3, cost 0.5*1 + 0.5*3 = 2
        nu = EmpiricalMeasure(np.array([1.0, 3.0]), np.array([0.5, 0.5]))
        assert np.isclose(wasserstein_p(dirac(0.0), nu, 1), 2.0)

    def test_dimension_mismatch(self):
        with pytest.raises(GridMismatchError):
            wasserstein_p(dirac(0.0), dirac([0.0, 1.0]), 1)

    def test_quantile_matches_assignment_oracle_1d(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            mu = random_measure_1d(rng)
            nu = random_measure_1d(rng)
            p = float(rng.choice([1.0, 2.0, 3.0]))
            ours = wasserstein_p(mu, nu, p)
            ref = assignment_wasserstein(mu.points, mu.weights, nu.points, nu.weights, p)
            assert abs(ours - ref) < 1e-9

    def test_lp_matches_assignment_oracle_2d(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            n, m = rng.integers(1, 7, size=2)
            mu = EmpiricalMeasure(rng.normal(size=(n, 2)), rational_weights(rng, n))
            nu = EmpiricalMeasure(rng.normal(size=(m, 2)), rational_weights(rng, m))
            p = float(rng.choice([1.0, 2.0]))
            ours = wasserstein_p(mu, nu, p)
            ref = assignment_wasserstein(mu.points, mu.weights, nu.points, nu.weights, p)
            assert abs(ours - ref) < 1e-9

    def test_metric_axioms_1d(self):
        rng = np.random.default_rng(17)
        for _ in range(60):
            a, b, c = (random_measure_1d(rng) for _ in range(3))
            dab = wasserstein_p(a, b, 2)
            dba = wasserstein_p(b, a, 2)
            assert dab == pytest.approx(dba, abs=1e-12)
            assert wasserstein_p(a, b, 2) <= wasserstein_p(a, c, 2) + wasserstein_p(c, b, 2) + 1e-9
            assert wasserstein_p(a, a, 2) == pytest.approx(0.0, abs=1e-12)

    def test_order_monotonicity(self):
        # W_p <= W_q for p <= q (Jensen on the optimal coupling)
        rng = np.random.default_rng(19)
        for _ in range(50):
            a, b = random_measure_1d(rng), random_measure_1d(rng)
            assert wasserstein_p(a, b, 1) <= wasserstein_p(a, b, 2) + 1e-9

    def test_mixture_metric_compatibility(self):
        # W_p^p((1-t) mu + t nu, mu) <= t W_p^p(mu, nu): couple the common part by identity
        rng = np.random.default_rng(23)
        for _ in range(50):
            mu, nu = random_measure_1d(rng), random_measure_1d(rng)
            t = rng.uniform()
            p = float(rng.choice([1.0, 2.0]))
            lhs = wasserstein_p(mix_measures(mu, nu, t), mu, p) ** p
            rhs = t * wasserstein_p(mu, nu, p) ** p
            assert lhs <= rhs + 1e-9

    def test_sliced_is_labeled_path(self):
        rng = np.random.default_rng(29)
        pts = rng.normal(size=(80, 3))
        mu = EmpiricalMeasure.from_samples(pts)
        nu = EmpiricalMeasure.from_samples(pts + 1.0)
        # sliced approximation of a pure translation: close to |shift| but approximate
        val = wasserstein_p(mu, nu, 2)
        assert 0.5 * np.sqrt(3) < val < 1.5 * np.sqrt(3)


class TestMoments:
    def test_dirac_zero(self):
        assert empirical_moment(dirac(0.0), 2.0) == 0.0

    def test_scalar_mean(self):
        m = EmpiricalMeasure(np.array([1.0, 3.0]), np.array([0.5, 0.5]))
        assert empirical_moment(m, 1.0) == pytest.approx(2.0)

    def test_r2_moment(self):
        m = EmpiricalMeasure(np.array([[3.0, 4.0], [0.0, 0.0]]), np.array([0.5, 0.5]))
        assert empirical_moment(m, 2.0) == pytest.approx(12.5)


def small_grid(n_steps=2, n_cells=2, substeps=2, T=1.0):
    return ScenarioGrid(T=T, n_steps=n_steps, n_cells=n_cells, substeps=substeps)


def constant_flow(grid, x):
    return MeasureFlow.constant(grid, dirac(x))


class TestMeasureFlow:
    def test_flow_distance_zero_on_same(self):
        g = small_grid()
        f = constant_flow(g, 0.0)
        assert flow_distance(f, f, 1) == 0.0

    def test_flow_distance_single_node_difference(self):
        g = small_grid()
        a = constant_flow(g, 0.0)
        data = {node: list(ms) for node, ms in a._measures.items()}
        data[(1,)] = tuple([dirac(1.0)] * len(data[(1,)]))
        b = MeasureFlow(g, {k: tuple(v) for k, v in data.items()})
        assert flow_distance(a, b, 1) == pytest.approx(1.0)

    def test_flow_distance_is_max(self):
        g = small_grid()
        a = constant_flow(g, 0.0)
        data = {node: list(ms) for node, ms in a._measures.items()}
        data[(1,)] = tuple([dirac(0.5)] * len(data[(1,)]))
        data[(2,)] = tuple([dirac(2.0)] * len(data[(2,)]))
        b = MeasureFlow(g, {k: tuple(v) for k, v in data.items()})
        assert flow_distance(a, b, 1) == pytest.approx(2.0)

    def test_mix_endpoints_exact(self):
        g = small_grid()
        a, b = constant_flow(g, 0.0), constant_flow(g, 1.0)
        assert mix(a, b, 0.0) is a
        assert mix(a, b, 1.0) is b

    def test_mix_quarter(self):
        g = small_grid()
        a, b = constant_flow(g, 0.0), constant_flow(g, 1.0)
        m = mix(a, b, 0.25)
        for node, j, mu in m.items():
            assert mu.size == 2
            assert np.isclose(mu.weights[0], 0.75)
            assert np.isclose(mu.weights[1], 0.25)
        with pytest.raises(ValueError):
            mix(a, b, 1.5)

    def test_mix_contracts_distance(self):
        g = small_grid()
        rng = np.random.default_rng(31)
        data_a, data_b = {}, {}
        for node in g.all_nodes():
            k = len(g.fine_indices_of_node(node))
            data_a[node] = tuple(random_measure_1d(rng) for _ in range(k))
            data_b[node] = tuple(random_measure_1d(rng) for _ in range(k))
        a, b = MeasureFlow(g, data_a), MeasureFlow(g, data_b)
        base = flow_distance(a, b, 1)
        for theta in (0.0, 0.25, 0.5, 0.75, 1.0):
            assert flow_distance(mix(a, b, theta), a, 1) <= base + 1e-9

    def test_adaptedness_layout(self):
        g = small_grid()
        f = constant_flow(g, 0.0)
        # measure at a fine time inside interval 1 is keyed by the root only
        assert f.at((), 0) is f.at((), 1)
        with pytest.raises(GridMismatchError):
            f.at((1,), 0)  # wrong depth for fine index 0

    def test_flow_dir_roundtrip(self, tmp_path):
        g = small_grid()
        rng = np.random.default_rng(37)
        data = {
            node: tuple(random_measure_1d(rng) for _ in g.fine_indices_of_node(node))
            for node in g.all_nodes()
        }
        f = MeasureFlow(g, data)
        f.to_dir(str(tmp_path / "flow"))
        back = MeasureFlow.from_dir(str(tmp_path / "flow"))
        assert flow_distance(f, back, 1) < 1e-12

    def test_grid_mismatch(self):
        a = constant_flow(small_grid(), 0.0)
        b = constant_flow(small_grid(n_steps=4), 0.0)
        with pytest.raises(GridMismatchError):
            flow_distance(a, b, 1)
