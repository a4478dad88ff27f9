import math

import numpy as np
import pytest
from scipy import optimize

from cli.instances import KRule, generate_instance, instance_suite
from core.distances import chernoff_distance, kl_distance
from core.model import Criterion, GaussianPair, ProblemInstance, SelectionMatrix, SubspaceBasis, UncertaintyModel
from models.evaluation import exhaustive_opt
from models.fixtures import SimpleGraph, hardness_instance
from models.rounding import (
    Ellipsoid,
    drifted_pair,
    project_to_selection,
    qcqp_min_quadratic,
    r_c,
    r_kl,
    refine,
    refine_with_trace,
    selection_evaluator,
    worst_case_c,
    worst_case_c_objective,
    worst_case_kl,
    worst_case_means,
    worst_case_problem,
)


def _random_pair(rng, n):
    A, B = rng.standard_normal((n, n)), rng.standard_normal((n, n))
    return GaussianPair(
        m0=rng.standard_normal(n), m1=rng.standard_normal(n),
        S0=A @ A.T + 0.1 * n * np.eye(n), S1=B @ B.T + 0.1 * n * np.eye(n),
    )


@pytest.fixture
def rounding_setup():
    """Set up pairs and uncertainty models for the rounding phase."""
    rng = np.random.default_rng(5)
    return {
        "diag": GaussianPair(m0=np.zeros(3), m1=[1.0, 0.0, 0.0], S0=np.eye(3), S1=np.diag([1.0, 2.0, 4.0])),
        "scalar": GaussianPair(m0=[0.0], m1=[3.0], S0=[[1.0]], S1=[[1.0]]),
        "random": _random_pair(rng, 8),
        "robust": UncertaintyModel(k0=4.0, k1=4.0),
        "rng": rng,
    }


def test_project_to_selection_columns():
    """Test project_to_selection with canonical columns."""
    E = np.zeros((6, 2))
    E[1, 0] = E[4, 1] = 1.0
    assert project_to_selection(E, 2).indices == (2, 5)


def test_project_to_selection_tie():
    """Test project_to_selection breaks ties toward the lowest index."""
    E = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
    assert project_to_selection(E[:, None], 1).indices == (1,)


def test_project_to_selection_weights():
    """Test project_to_selection keeps the largest diagonal entries of E E^T."""
    weights = np.array([0.9, 0.05, 0.8, 0.25])
    E = np.zeros((4, 2))
    E[:, 0] = np.sqrt(weights)
    assert project_to_selection(E, 2).indices == (1, 3)


def test_qcqp_unit_balls():
    """Test qcqp_min_quadratic on two unit balls three apart."""
    e0 = Ellipsoid(center=[0.0, 0.0], shape=np.eye(2))
    e1 = Ellipsoid(center=[3.0, 0.0], shape=np.eye(2))
    result = qcqp_min_quadratic(e0, e1, np.eye(2))
    assert result.value == pytest.approx(1.0, rel=1e-8)
    assert np.allclose(result.m0, [1.0, 0.0], atol=1e-6)
    assert np.allclose(result.m1, [2.0, 0.0], atol=1e-6)


def test_qcqp_overlapping():
    """Test qcqp_min_quadratic on intersecting ellipsoids."""
    e0 = Ellipsoid(center=[0.0, 0.0], shape=np.diag([1.0, 4.0]))
    e1 = Ellipsoid(center=[1.5, 0.0], shape=np.eye(2))
    assert qcqp_min_quadratic(e0, e1, np.diag([1.0, 3.0])).value == 0.0


def test_qcqp_against_multistart(rounding_setup):
    """Test qcqp_min_quadratic on a random 3-dim problem against SLSQP from random starts."""
    rng = rounding_setup["rng"]
    G0, G1, W = (rng.standard_normal((3, 3)) for _ in range(3))
    shape0, shape1 = G0 @ G0.T + np.eye(3), G1 @ G1.T + np.eye(3)
    metric = W @ W.T + 0.5 * np.eye(3)
    c0, c1 = np.zeros(3), np.array([4.0, -3.0, 2.0])
    result = qcqp_min_quadratic(Ellipsoid(center=c0, shape=shape0), Ellipsoid(center=c1, shape=shape1), metric)

    def objective(w):
        d = w[3:] - w[:3]
        return d @ metric @ d

    constraints = [
        {"type": "ineq", "fun": lambda w: 1.0 - (w[:3] - c0) @ shape0 @ (w[:3] - c0)},
        {"type": "ineq", "fun": lambda w: 1.0 - (w[3:] - c1) @ shape1 @ (w[3:] - c1)},
    ]
    best = np.inf
    for _ in range(100):
        start = np.concatenate([c0, c1]) + 0.1 * rng.standard_normal(6)
        fit = optimize.minimize(objective, start, method="SLSQP", constraints=constraints,
                                options={"ftol": 1e-14, "maxiter": 500})
        if fit.success and min(c["fun"](fit.x) for c in constraints) >= -1e-9:
            best = min(best, fit.fun)
    assert result.value == pytest.approx(best, rel=1e-6, abs=1e-8)


def test_worst_case_kl_exact(rounding_setup):
    """Test worst_case_kl with exact means equals kl_distance."""
    pair = rounding_setup["random"]
    basis = SelectionMatrix(n=8, indices=[2, 5, 7])
    assert worst_case_kl(basis, pair, UncertaintyModel.exact()) == pytest.approx(kl_distance(pair, basis), abs=1e-10)


def test_worst_case_scalar(rounding_setup):
    """Test worst-case KL and Chernoff on the scalar interval example."""
    pair, uncertainty = rounding_setup["scalar"], rounding_setup["robust"]
    assert worst_case_kl(np.ones(1), pair, uncertainty) == pytest.approx(2.0, rel=1e-8)
    result = worst_case_c(np.ones(1), pair, uncertainty)
    assert result.value == pytest.approx(0.5, rel=1e-8)
    assert result.s_star == pytest.approx(0.5, abs=1e-6)


def test_worst_case_c_exact(rounding_setup):
    """Test worst_case_c with exact means equals chernoff_distance."""
    pair = rounding_setup["random"]
    basis = SelectionMatrix(n=8, indices=[1, 4])
    robust = worst_case_c(basis, pair, UncertaintyModel.exact())
    assert robust.value == pytest.approx(chernoff_distance(pair, basis).value, abs=1e-8)


def test_worst_case_c_equal_covariances(rounding_setup):
    """Test worst_case_c for equal covariances is the worst squared gap over 8."""
    pair = GaussianPair(m0=[0.0, 0.0], m1=[3.0, 4.0], S0=np.eye(2), S1=np.eye(2))
    uncertainty = UncertaintyModel(k0=1.0, k1=1.0)
    # two unit balls five apart leave a gap of three
    assert worst_case_c(np.eye(2), pair, uncertainty).value == pytest.approx(9.0 / 8.0, rel=1e-7)


def test_worst_case_below_nominal(rounding_setup):
    """Test worst-case distances never exceed the nominal ones."""
    rng = rounding_setup["rng"]
    for _ in range(200):
        pair = _random_pair(rng, 3)
        uncertainty = UncertaintyModel(k0=rng.uniform(0.5, 20.0), k1=rng.uniform(0.5, 20.0))
        E = SubspaceBasis(cols=np.linalg.qr(rng.standard_normal((3, 2)))[0])
        assert worst_case_kl(E, pair, uncertainty) <= kl_distance(pair, E) + 1e-10


def test_worst_case_means_inside_regions(rounding_setup):
    """Test worst_case_means stay in the uncertainty ellipsoids and attain the worst case."""
    pair, uncertainty = rounding_setup["random"], rounding_setup["robust"]
    basis = SelectionMatrix(n=8, indices=[3, 6])
    m0, m1 = worst_case_means(basis, pair, uncertainty)
    for m, m_hat, S, k in ((m0, pair.m0, pair.S0, 4.0), (m1, pair.m1, pair.S1, 4.0)):
        r = m - m_hat
        assert r @ np.linalg.solve(S, r) <= 1.0 / k + 1e-8
    drifted = drifted_pair(basis, pair, uncertainty)
    assert kl_distance(drifted, basis) == pytest.approx(worst_case_kl(basis, pair, uncertainty), rel=1e-6)


def test_refine_fixed_point(rounding_setup):
    """Test refine leaves an optimal single sensor unchanged."""
    pair = rounding_setup["diag"]
    start = SelectionMatrix(n=3, indices=[3])
    assert refine(start, pair, UncertaintyModel.exact()) == start


def test_refine_improves(rounding_setup):
    """Test refine moves from sensor 1 to sensor 3 on the diagonal pair."""
    pair = rounding_setup["diag"]
    result = refine(SelectionMatrix(n=3, indices=[1]), pair, UncertaintyModel.exact())
    assert result.indices == (3,)


def test_refine_trace_monotone(rounding_setup):
    """Test refine_with_trace records a non-decreasing objective."""
    pair, uncertainty = rounding_setup["random"], rounding_setup["robust"]
    evaluate = selection_evaluator(pair, uncertainty, Criterion.KL)
    start = SelectionMatrix(n=8, indices=[1, 2])
    result = refine_with_trace(start, evaluate)
    assert len(result.trace) == 3
    assert all(b >= a for a, b in zip(result.trace, result.trace[1:]))
    assert result.objective >= evaluate([0, 1])


def test_r_kl_full_selection(rounding_setup):
    """Test r_kl with p = n returns every sensor."""
    pair = rounding_setup["diag"]
    result = r_kl(ProblemInstance(pair=pair, p=3))
    assert result.selection.indices == (1, 2, 3)
    assert result.objective == pytest.approx(kl_distance(pair), rel=1e-9)


def test_r_kl_clique_instance():
    """Test r_kl on the complete graph K4 with p = 2."""
    result = r_kl(hardness_instance(SimpleGraph.complete(4), 2))
    assert result.objective == pytest.approx(1.0 / 7.0, abs=1e-9)


def test_r_c_result_fields(rounding_setup):
    """Test r_c reports its phases, refinement trace and exponent."""
    instance = ProblemInstance(pair=rounding_setup["random"], uncertainty=rounding_setup["robust"], p=2)
    result = r_c(instance)
    assert [record.phase for record in result.phase_trace] == ["relaxation", "projection", "refinement"]
    assert result.phase("refinement").objective == result.objective
    assert result.objective >= result.phase("projection").objective
    assert 0.0 <= result.s_star <= 1.0
    assert result.to_dict()["algorithm"] == "R-C"


@pytest.mark.slow
@pytest.mark.parametrize("n", [10, 12])
@pytest.mark.parametrize("solver, criterion, floor", [(r_kl, Criterion.KL, 0.85), (r_c, Criterion.C, 0.90)])
def test_robust_pipelines_near_oracle(n, solver, criterion, floor):
    """Test the robust pipelines against the exhaustive optimum on a fixed drift-rule suite."""
    ratios = []
    for _, instance in instance_suite(n, 3, 50, seed=2024, k_rule=KRule.DRIFT):
        best = exhaustive_opt(instance, criterion).value
        ratios.append(solver(instance).objective / best if best > 0 else 1.0)
    assert max(ratios) == pytest.approx(1.0, abs=1e-6)
    assert min(ratios) >= 0.5
    assert np.mean(ratios) >= floor
    assert max(ratios) <= 1.0 + 1e-9


def _rotation(angle):
    return np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])


def _touching_ellipsoids(shape0, shape1, normal, q0, delta):
    """Ellipsoids whose closest points are q0 and q0 + delta * normal."""
    q1 = q0 + delta * normal
    w0, w1 = np.linalg.solve(shape0, normal), np.linalg.solve(shape1, normal)
    c0 = q0 - w0 / math.sqrt(normal @ w0)
    c1 = q1 + w1 / math.sqrt(normal @ w1)
    return Ellipsoid(center=c0, shape=shape0), Ellipsoid(center=c1, shape=shape1)


@pytest.mark.parametrize("delta", [1e-2, 1e-4, 1e-6])
def test_qcqp_nearly_touching(delta):
    """Test qcqp_min_quadratic on elongated ellipsoids a tiny distance apart."""
    normal = np.array([math.cos(0.35), math.sin(0.35)])
    R0, R1 = _rotation(0.9), _rotation(-0.5)
    shape0 = R0 @ np.diag([0.25, 9.0]) @ R0.T
    shape1 = R1 @ np.diag([1.0 / 9.0, 4.0]) @ R1.T
    e0, e1 = _touching_ellipsoids(shape0, shape1, normal, np.array([0.4, -0.2]), delta)
    result = qcqp_min_quadratic(e0, e1, np.eye(2))
    assert result.value == pytest.approx(delta ** 2, abs=1e-10)
    assert result.value >= delta ** 2 * (1.0 - 1e-9)
    assert e0.contains(result.m0, tol=1e-9)
    assert e1.contains(result.m1, tol=1e-9)


def test_qcqp_nearly_touching_weighted_metric():
    """Test qcqp_min_quadratic on nearly touching ellipsoids under a diagonal metric."""
    metric = np.diag([2.0, 0.5, 1.5])
    root = np.sqrt(np.diag(metric))
    rng = np.random.default_rng(31)
    G0, G1 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    shape0, shape1 = G0 @ G0.T + 0.05 * np.eye(3), G1 @ G1.T + 0.05 * np.eye(3)
    normal = rng.standard_normal(3)
    normal /= np.linalg.norm(normal)
    # touching construction in the metric frame, mapped back
    scaled0 = np.diag(1.0 / root) @ shape0 @ np.diag(1.0 / root)
    scaled1 = np.diag(1.0 / root) @ shape1 @ np.diag(1.0 / root)
    f0, f1 = _touching_ellipsoids(scaled0, scaled1, normal, np.zeros(3), 1e-4)
    e0 = Ellipsoid(center=f0.center / root, shape=shape0)
    e1 = Ellipsoid(center=f1.center / root, shape=shape1)
    assert qcqp_min_quadratic(e0, e1, metric).value == pytest.approx(1e-8, abs=1e-10)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [4213262152, 94054834])
def test_chernoff_oracle_nearly_touching_regions(seed):
    """Test the Chernoff oracle completes on drift-rule instances with nearly touching regions."""
    instance = generate_instance(12, seed, KRule.DRIFT, p=3)
    oracle = exhaustive_opt(instance, Criterion.C)
    assert np.all(np.isfinite(oracle.values))
    assert r_c(instance).objective <= oracle.value + 1e-9


def test_worst_case_large_k_matches_exact(rounding_setup):
    """Test worst-case distances with k = 1e16 against the exact-means distances."""
    pair = _random_pair(rounding_setup["rng"], 6)
    tight = UncertaintyModel(k0=1e16, k1=1e16)
    exact = UncertaintyModel.exact()
    for criterion in Criterion:
        loose = exhaustive_opt(ProblemInstance(pair=pair, uncertainty=tight, p=2), criterion)
        known = exhaustive_opt(ProblemInstance(pair=pair, uncertainty=exact, p=2), criterion)
        assert loose.selection.indices == known.selection.indices
        assert np.allclose(loose.values, known.values, rtol=1e-6, atol=1e-9)
    basis = SelectionMatrix(n=6, indices=[2, 5])
    assert worst_case_kl(basis, pair, tight) == pytest.approx(kl_distance(pair, basis), rel=1e-6)
    assert worst_case_c(basis, pair, tight).value == pytest.approx(chernoff_distance(pair, basis).value, rel=1e-6)


def test_single_direction_minimax_exchange():
    """Test max over s of min over means equals min over means of max over s for one direction."""
    rng = np.random.default_rng(44)
    s_grid = np.linspace(0.0, 1.0, 202)[1:-1]
    for _ in range(10):
        pair = _random_pair(rng, 4)
        uncertainty = UncertaintyModel(k0=rng.uniform(2.0, 10.0), k1=rng.uniform(2.0, 10.0))
        e = rng.standard_normal(4)
        e /= np.linalg.norm(e)
        a0, a1 = e @ pair.S0 @ e, e @ pair.S1 @ e
        d = abs(e @ (pair.m1 - pair.m0))
        radius = math.sqrt(a0 / uncertainty.k0) + math.sqrt(a1 / uncertainty.k1)
        D = np.linspace(d - radius, d + radius, 200)[None, :]
        s = s_grid[:, None]
        F = 0.5 * (s * (1.0 - s) * D ** 2 / (s * a0 + (1.0 - s) * a1)
                   - (1.0 - s) * np.log(a1 / a0) + np.log(s + (1.0 - s) * a1 / a0))
        maximin = F.min(axis=1).max()
        minimax = F.max(axis=0).min()
        assert maximin <= minimax + 1e-12
        assert minimax - maximin <= 2e-3
        assert worst_case_c(e[:, None], pair, uncertainty).value == pytest.approx(maximin, abs=2e-3)


def test_worst_case_c_concave_in_s():
    """Test the worst-case Chernoff objective is concave in s on drift-rule instances."""
    s = np.linspace(0.05, 0.95, 21)
    for seed in range(5):
        instance = generate_instance(6, seed, KRule.DRIFT, p=2)
        problem = worst_case_problem(SelectionMatrix(n=6, indices=[1, 4]), instance.pair, instance.uncertainty)
        values = np.array([worst_case_c_objective(t, problem) for t in s])
        midpoints = 0.5 * (values[:-2] + values[2:])
        assert np.all(values[1:-1] >= midpoints - 1e-8 * np.maximum(1.0, np.abs(values[1:-1])))
