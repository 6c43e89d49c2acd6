import numpy as np
import pytest
from scipy.sparse import lil_matrix
from scipy.sparse.csgraph import shortest_path

from latent_response.error_handler import DataError, UsageError
from latent_response.geometry import MapKind, ScalarMap
from latent_response.interp import (
    NEIGHBOR_OFFSETS,
    PathMethod,
    ambient_metrics,
    curvature_path,
    densify,
    node_weights,
    straight_path,
    write_path_csv,
)
from latent_response.vae import constant_decoder_vae


def _curvature(values, ranges=((0.0, 15.0), (0.0, 15.0))):
    values = np.asarray(values, dtype=np.float64)
    return ScalarMap(values, MapKind.MEAN_CURVATURE, (0, 1), [0.0, 0.0], ranges)


def _reference_cost(curvature, gamma, start, goal):
    """用 scipy 在独立构造的 8 邻接图上求最短路代价"""
    weights = node_weights(curvature, gamma)
    size = weights.shape[0]
    spacing = curvature.spacing
    graph = lil_matrix((size * size, size * size))
    for i in range(size):
        for j in range(size):
            for di, dj in NEIGHBOR_OFFSETS:
                ni, nj = i + di, j + dj
                if 0 <= ni < size and 0 <= nj < size:
                    step = np.hypot(di * spacing[0], dj * spacing[1])
                    graph[i * size + j, ni * size + nj] = step * 0.5 * (weights[i, j] + weights[ni, nj])
    dist = shortest_path(graph.tocsr(), method="D", directed=True, indices=start[0] * size + start[1])
    return dist[goal[0] * size + goal[1]]


def test_straight_path_endpoints_and_midpoint():
    path = straight_path([0.0, 0.0], [2.0, -4.0], count=3)
    assert path.method is PathMethod.STRAIGHT
    assert np.array_equal(path.waypoints, [[0.0, 0.0], [1.0, -2.0], [2.0, -4.0]])
    assert path.latent_length == pytest.approx(np.hypot(2.0, 4.0))
    assert len(straight_path([1.0], [2.0], count=2)) == 2


def test_straight_path_degenerate_inputs():
    path = straight_path([1.0, 1.0], [1.0, 1.0], count=5)
    assert path.latent_length == 0.0
    with pytest.raises(UsageError):
        straight_path([0.0], [1.0], count=1)
    with pytest.raises(DataError):
        straight_path([0.0, 1.0], [1.0], count=4)


def test_uniform_curvature_gives_chebyshev_path():
    path = curvature_path(_curvature(np.zeros((16, 16))), [0.0, 0.0], [15.0, 7.0])
    assert path.cost == pytest.approx(7 * np.sqrt(2) + 8)
    assert path.nodes[0] == (0, 0) and path.nodes[-1] == (15, 7)
    assert np.array_equal(path.waypoints[0], [0.0, 0.0])
    assert np.array_equal(path.waypoints[-1], [15.0, 7.0])


def test_zero_gamma_ignores_curvature():
    values = np.random.default_rng(0).normal(size=(16, 16))
    path = curvature_path(_curvature(values), [0.0, 0.0], [15.0, 7.0], gamma=0.0)
    assert path.cost == pytest.approx(7 * np.sqrt(2) + 8)


def test_path_detours_around_negative_curvature_wall():
    values = np.zeros((16, 16))
    values[8, :13] = -5.0
    path = curvature_path(_curvature(values), [2.0, 2.0], [14.0, 2.0], gamma=2.0)
    assert all(j >= 13 for i, j in path.nodes if i == 8)
    straight_cost = 12.0
    assert path.latent_length > straight_cost


def test_cost_matches_reference_shortest_path():
    rng = np.random.default_rng(3)
    curvature = _curvature(rng.normal(size=(12, 12)), ranges=((0.0, 11.0), (0.0, 5.5)))
    for gamma in (0.5, 2.0):
        path = curvature_path(curvature, [1.0, 0.5], [10.0, 5.0], gamma=gamma)
        reference = _reference_cost(curvature, gamma, path.nodes[0], path.nodes[-1])
        assert path.cost == pytest.approx(reference, rel=1e-12)


def test_guided_path_never_shorter_than_unweighted():
    rng = np.random.default_rng(4)
    curvature = _curvature(rng.normal(size=(16, 16)))
    baseline = curvature_path(curvature, [1.0, 2.0], [14.0, 12.0], gamma=0.0).latent_length
    for gamma in (1.0, 2.0, 4.0):
        assert curvature_path(curvature, [1.0, 2.0], [14.0, 12.0], gamma=gamma).latent_length >= baseline - 1e-12


def test_curvature_path_is_deterministic():
    curvature = _curvature(np.random.default_rng(5).normal(size=(16, 16)))
    first = curvature_path(curvature, [0.3, 0.0], [12.2, 9.9])
    second = curvature_path(curvature, [0.3, 0.0], [12.2, 9.9])
    assert np.array_equal(first.waypoints, second.waypoints)
    assert first.nodes == second.nodes
    # 端点不在节点上时补上精确端点
    assert np.array_equal(first.waypoints[0], [0.3, 0.0])
    assert np.array_equal(first.waypoints[-1], [12.2, 9.9])


def test_off_slice_coordinates_follow_arc_length():
    curvature = _curvature(np.zeros((16, 16)))
    path = curvature_path(curvature, [0.0, 0.0, 0.0], [4.0, 0.0, 2.0])
    third = path.waypoints[:, 2]
    assert third[0] == 0.0 and third[-1] == 2.0
    assert np.all(np.diff(third) >= 0)
    assert np.allclose(third, path.waypoints[:, 0] / 2.0)


def test_same_endpoints_give_single_point():
    path = curvature_path(_curvature(np.zeros((16, 16))), [3.0, 3.0], [3.0, 3.0])
    assert len(path) == 1
    assert path.cost == 0.0


def test_endpoint_outside_grid_rejected():
    with pytest.raises(DataError):
        curvature_path(_curvature(np.zeros((16, 16))), [0.0, 0.0], [16.5, 3.0])
    with pytest.raises(UsageError):
        curvature_path(_curvature(np.zeros((16, 16))), [0.0, 0.0], [1.0, 1.0], gamma=-1.0)


def test_ambient_metrics_for_trivial_paths():
    model = constant_decoder_vae(2, np.array([1.0, 2.0]))
    single = ambient_metrics(model, curvature_path(_curvature(np.zeros((16, 16))), [3.0, 3.0], [3.0, 3.0]))
    assert (single.total_length, single.max_jump) == (0.0, 0.0)
    flat = ambient_metrics(model, straight_path([0.0, 0.0], [5.0, 5.0], count=10))
    assert (flat.total_length, flat.max_jump) == (0.0, 0.0)


def test_ambient_metrics_for_identity_decoder(identity_model):
    metrics = ambient_metrics(identity_model, straight_path([0.0, 0.0], [3.0, 4.0], count=6))
    assert metrics.total_length == pytest.approx(5.0)
    assert metrics.max_jump == pytest.approx(1.0)


def test_path_csv_layout(tmp_path, identity_model):
    path = straight_path([0.0, 0.0], [1.0, 0.0], count=3)
    out = tmp_path / "path.csv"
    write_path_csv(str(out), path, ambient_metrics(identity_model, path))
    lines = out.read_text().splitlines()
    assert lines[0] == "z1,z2,x1,x2,jump"
    assert lines[1] == "0,0,0,0,0"
    assert lines[2] == "0.5,0,0.5,0,0.5"
    assert len(lines) == 4


def test_densify_bounds_step_and_keeps_waypoints():
    path = curvature_path(_curvature(np.zeros((16, 16))), [0.3, 0.2], [15.0, 7.0])
    dense = densify(path, 0.25)
    steps = np.linalg.norm(np.diff(dense.waypoints, axis=0), axis=1)
    assert steps.max() <= 0.25 + 1e-12
    assert len(dense) > len(path)
    assert np.array_equal(dense.waypoints[0], path.waypoints[0])
    assert np.array_equal(dense.waypoints[-1], path.waypoints[-1])
    assert all(any(np.array_equal(w, v) for v in dense.waypoints) for w in path.waypoints)
    assert dense.cost == path.cost
    assert dense.method is PathMethod.CURVATURE_GUIDED
    assert dense.latent_length == pytest.approx(path.latent_length)


def test_densify_degenerate_inputs():
    single = curvature_path(_curvature(np.zeros((16, 16))), [2.0, 2.0], [2.0, 2.0])
    assert len(densify(single, 0.1)) == 1
    with pytest.raises(UsageError):
        densify(straight_path([0.0], [1.0], count=2), 0.0)
