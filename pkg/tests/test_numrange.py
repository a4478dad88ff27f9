import numpy as np
import pytest
from scipy.spatial import ConvexHull

from core.errors import ObjectiveError
from models.numrange import (
    INTERPOLATED,
    VERTEX,
    boundary_sample,
    maximize_over_boundary,
    reconstruct_generator,
)
from models.relax_robust import psi_kl


def _random_unit(rng, count, n):
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1)[:, None]


@pytest.fixture
def range_setup():
    """Set up matrix pairs for boundary sampling."""
    b = np.ones(3) / np.sqrt(3.0)
    return {
        "zero_form": (np.diag([2.0, 3.0, 5.0]), np.zeros((3, 3))),
        "rank_one": (np.diag([1.0, 2.0, 3.0]), np.outer(b, b)),
        "rng": np.random.default_rng(11),
    }


def test_boundary_sample_identity_first_form(range_setup):
    """Test boundary_sample with A = I: every vertex has x = 1."""
    rng = range_setup["rng"]
    B = rng.standard_normal((4, 4))
    sample = boundary_sample(np.eye(4), B + B.T, K=200)
    assert np.allclose(sample.x[sample.is_vertex], 1.0)


def test_boundary_sample_zero_second_form(range_setup):
    """Test boundary_sample with B = 0: vertices at the extreme eigenvalues, gaps bridged."""
    A, B = range_setup["zero_form"]
    sample = boundary_sample(A, B, K=100, J=10)
    vx = sample.x[sample.is_vertex]
    assert np.allclose(sample.y, 0.0)
    assert np.all(np.isclose(vx, 2.0) | np.isclose(vx, 5.0))
    inner = sample.x[~sample.is_vertex]
    assert inner.size > 0
    assert np.all((inner > 2.0) & (inner < 5.0))


def test_boundary_sample_ordered_by_parameter(range_setup):
    """Test boundary_sample orders vertices by t = (k - 1) 2 pi / K."""
    A, B = range_setup["rank_one"]
    sample = boundary_sample(A, B, K=64)
    t = sample.t[sample.is_vertex]
    assert np.allclose(t, np.arange(64) * 2 * np.pi / 64)
    assert np.all(np.diff(sample.t) >= 0)


def test_boundary_sample_vertex_generators(range_setup):
    """Test that vertex generators reproduce their points."""
    A, B = range_setup["rank_one"]
    sample = boundary_sample(A, B, K=64)
    for point in sample.points:
        if point.source == VERTEX:
            v = point.generator
            assert abs(np.linalg.norm(v) - 1.0) <= 1e-10
            assert abs(v @ A @ v - point.x) <= 1e-8 * (1 + abs(point.x))
            assert abs(v @ B @ v - point.y) <= 1e-8 * (1 + abs(point.y))


def test_boundary_sample_encloses_random_points(range_setup):
    """Test that random range points lie inside the hull of the boundary sample."""
    A, B = range_setup["rank_one"]
    sample = boundary_sample(A, B)
    hull = ConvexHull(np.column_stack([sample.x, sample.y]))
    V = _random_unit(range_setup["rng"], 100_000, 3)
    points = np.column_stack([np.einsum("ki,ij,kj->k", V, A, V), np.einsum("ki,ij,kj->k", V, B, V)])
    offsets = points @ hull.equations[:, :2].T + hull.equations[:, 2]
    assert np.max(offsets) <= 1e-3


def test_boundary_sample_supporting_lines(range_setup):
    """Test that each vertex minimizes its direction over random range points."""
    A, B = range_setup["rank_one"]
    sample = boundary_sample(A, B, K=32)
    V = _random_unit(range_setup["rng"], 5000, 3)
    xs = np.einsum("ki,ij,kj->k", V, A, V)
    ys = np.einsum("ki,ij,kj->k", V, B, V)
    for i in np.flatnonzero(sample.is_vertex):
        c, s = np.cos(sample.t[i]), np.sin(sample.t[i])
        assert np.min(c * xs + s * ys) >= c * sample.x[i] + s * sample.y[i] - 1e-9


def test_boundary_sample_small_dimension_warns(caplog):
    """Test boundary_sample of a 2-dimensional pair adds canonical points and warns."""
    sample = boundary_sample(np.diag([1.0, 2.0]), np.diag([0.0, 1.0]), K=16)
    assert "coverage" in caplog.text
    assert np.sum(sample.is_vertex) == 18


def test_maximize_over_boundary_zero_form(range_setup):
    """Test maximize_over_boundary of y and of x with B = 0."""
    A, B = range_setup["zero_form"]
    sample = boundary_sample(A, B, K=100)
    assert maximize_over_boundary(sample, lambda x, y: y).y == 0.0
    assert maximize_over_boundary(sample, lambda x, y: x).x == pytest.approx(5.0, abs=1e-6)


def test_maximize_over_boundary_non_finite(range_setup):
    """Test maximize_over_boundary with an objective that is NaN somewhere."""
    A, B = range_setup["zero_form"]
    sample = boundary_sample(A, B, K=100)
    with pytest.raises(ObjectiveError):
        maximize_over_boundary(sample, lambda x, y: np.where(x > 4.0, np.nan, x))


@pytest.mark.slow
def test_maximize_over_boundary_beats_sphere_sampling(range_setup):
    """Test the boundary maximum of psi_kl against random unit vectors."""
    rng = range_setup["rng"]
    G = rng.standard_normal((5, 5))
    S = G @ G.T + 0.5 * np.eye(5)
    m = rng.standard_normal(5)
    M = np.outer(m, m)
    best = maximize_over_boundary(boundary_sample(S, M), psi_kl)
    oracle = -np.inf
    for _ in range(10):
        V = _random_unit(rng, 100_000, 5)
        xs = np.einsum("ki,ij,kj->k", V, S, V)
        ys = (V @ m) ** 2
        oracle = max(oracle, float(np.max(psi_kl(xs, ys))))
    assert psi_kl(best.x, best.y) >= oracle - 1e-4


def test_reconstruct_generator_vertex(range_setup):
    """Test reconstruct_generator returns a vertex generator unchanged."""
    A, B = range_setup["rank_one"]
    sample = boundary_sample(A, B, K=64)
    point = sample.point(int(np.flatnonzero(sample.is_vertex)[5]))
    result = reconstruct_generator(A, B, point, sample)
    assert not result.approximate
    assert np.array_equal(result.vector, point.generator)


def test_reconstruct_generator_on_segment(range_setup):
    """Test reconstruct_generator of the interpolated point (3.5, 0) with B = 0."""
    A, B = range_setup["zero_form"]
    sample = boundary_sample(A, B, K=100, J=10)
    index = int(np.flatnonzero(~sample.is_vertex & np.isclose(sample.x, 3.5))[0])
    point = sample.point(index)
    assert point.source == INTERPOLATED
    result = reconstruct_generator(A, B, point, sample)
    v = result.vector
    assert not result.approximate
    assert v[0] ** 2 == pytest.approx(0.5, abs=1e-6)
    assert v @ A @ v == pytest.approx(3.5, abs=1e-6)


def test_reconstruct_generator_residuals(range_setup):
    """Test reconstruct_generator on every interpolated point of a random 4-dim pair."""
    rng = range_setup["rng"]
    G, H = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    A, B = G + G.T, H + H.T
    sample = boundary_sample(A, B, K=24, J=4)
    for point in sample.points:
        if point.source == INTERPOLATED:
            v = reconstruct_generator(A, B, point, sample).vector
            assert abs(v @ A @ v - point.x) <= 1e-6
            assert abs(v @ B @ v - point.y) <= 1e-6


def test_boundary_optimum_nondecreasing_in_grid_size(range_setup):
    """Test the sampled optimum of a convex objective never drops when the angle grid doubles."""
    rng = range_setup["rng"]
    for _ in range(10):
        G = rng.standard_normal((5, 5))
        d = rng.standard_normal(5)
        A, B = G @ G.T + 0.5 * np.eye(5), np.outer(d, d)
        best = [
            maximize_over_boundary(boundary_sample(A, B, K=K), lambda x, y: x - np.log(x) + y)
            for K in (250, 500, 1000, 2000)
        ]
        values = [point.x - np.log(point.x) + point.y for point in best]
        assert all(later >= earlier - 1e-10 for earlier, later in zip(values, values[1:]))
