import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from hoiprior.lib import grouping
from hoiprior.lib.error import ConfigError, DatasetTooSmallError, DimensionMismatchError, ValidationError
from hoiprior.lib.grouping import (
    CRITERIA,
    GroupingConfig,
    NeighborSets,
    brute_force_topk,
    build_clusters,
    cluster_spread,
    ground_truth_neighbors,
    knn_group,
    pairwise_distances,
    random_neighbors,
    ray_pair_distance,
    recall_at_k,
    rep_distance,
)
from hoiprior.lib.projection import rep25d_from_3d
from hoiprior.lib.synthetic import SyntheticFamilyConfig, synth_generate

coordinate = st.floats(-2.0, 2.0, allow_nan=False)
vector = st.tuples(coordinate, coordinate, coordinate)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def index(tiny_dataset):
    return tiny_dataset.index()


def test_skew_parallel_and_meeting_rays():
    x, y = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    assert ray_pair_distance(x, np.zeros(3), y, np.array([0.0, 0.0, 1.0])) == pytest.approx(1.0)
    assert ray_pair_distance(x, np.zeros(3), x, np.array([0.0, 2.0, 0.0])) == pytest.approx(2.0)
    assert ray_pair_distance(x, np.zeros(3), -x, np.array([0.0, 2.0, 0.0])) == pytest.approx(2.0)
    assert ray_pair_distance(x, np.zeros(3), y, np.array([3.0, -1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)


def _closest_point_distance(d, t, d2, t2):
    """Distance between two lines from their closest points, solved per row."""
    w = t - t2
    b = np.sum(d * d2, axis=1)
    dd = np.sum(d * w, axis=1)
    e = np.sum(d2 * w, axis=1)
    s = (b * e - dd) / (1 - b**2)
    u = (e - b * dd) / (1 - b**2)
    return np.linalg.norm(w + s[:, None] * d - u[:, None] * d2, axis=1)


def test_ray_distance_matches_the_closest_points_on_random_rays(rng):
    d = rng.standard_normal((10_200, 3))
    d2 = rng.standard_normal((10_200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    skew = np.linalg.norm(np.cross(d, d2), axis=1) > 0.05
    d, d2 = d[skew][:10_000], d2[skew][:10_000]
    t, t2 = rng.uniform(-2.0, 2.0, (2, 10_000, 3))
    assert len(d) == 10_000

    expected = _closest_point_distance(d, t, d2, t2)
    computed = np.array([ray_pair_distance(*ray) for ray in zip(d, t, d2, t2, strict=True)])
    assert np.max(np.abs(computed - expected)) < 1e-9


@given(vector, vector, vector, vector, vector)
@settings(max_examples=60)
def test_ray_distance_is_symmetric_and_rigidly_invariant(d, t, d2, t2, rotvec):
    assume(np.linalg.norm(d) > 0.1 and np.linalg.norm(d2) > 0.1)
    d, d2 = _unit(d), _unit(d2)
    assume(np.linalg.norm(np.cross(d, d2)) > 1e-3)
    t, t2 = np.asarray(t), np.asarray(t2)
    distance = ray_pair_distance(d, t, d2, t2)
    assert distance >= 0
    assert ray_pair_distance(d2, t2, d, t) == pytest.approx(distance, abs=1e-9)

    rotation = Rotation.from_rotvec(rotvec).as_matrix()
    shift = np.array([0.5, -1.0, 2.0])
    moved = ray_pair_distance(rotation @ d, rotation @ t + shift, rotation @ d2, rotation @ t2 + shift)
    assert moved == pytest.approx(distance, abs=1e-8)


def test_views_of_the_same_points_are_at_distance_zero(model, scene):
    points = model.keypoints(scene).points
    a = rep25d_from_3d(points, torch.tensor([0.0, 0.2, 3.0]))
    b = rep25d_from_3d(points, torch.tensor([2.5, 0.1, -1.5]))
    assert rep_distance(a, b) == pytest.approx(0.0, abs=1e-10)

    shifted = rep25d_from_3d(points + torch.tensor([0.0, 0.3, 0.0]), torch.tensor([2.5, 0.1, -1.5]))
    assert rep_distance(a, shifted) > 0.01
    with pytest.raises(DimensionMismatchError):
        rep_distance(a, rep25d_from_3d(points[:5], torch.tensor([0.0, 0.0, 5.0])))


def test_one_ray_missing_by_a_meter_of_four():
    points = torch.tensor([[0.2, 0.1, 3.0], [-0.3, 0.2, 5.0], [0.1, -0.4, 4.5], [0.0, 0.0, 4.0]])
    displaced = points.clone()
    displaced[3] = torch.tensor([0.0, 1.0, 4.0])
    a = rep25d_from_3d(points, torch.zeros(3))
    # the camera sits level with the displaced point, so its ray runs along -x at height y=1
    b = rep25d_from_3d(displaced, torch.tensor([3.0, 1.0, 4.0]))
    assert rep_distance(a, b) == pytest.approx(0.25, abs=1e-9)


def test_pairwise_distances_match_rep_distance(index):
    distances = pairwise_distances(index, chunk_size=4)
    assert distances.shape == (len(index), len(index))
    assert np.allclose(distances, distances.T)
    assert np.all(np.diag(distances) == 0)
    assert distances[0, 7] == pytest.approx(rep_distance(index.items[0].rep, index.items[7].rep))


def test_brute_force_finds_the_family(index):
    exact = brute_force_topk(index, 5)
    families = np.asarray(index.families)
    assert np.all(families[exact.neighbors] == families[:, None])
    assert exact.is_consistent()
    with pytest.raises(DatasetTooSmallError):
        brute_force_topk(index, len(index))


def _spread(neighbors, distances, criterion="cluster"):
    return float(np.mean([cluster_spread(distances, p, row, criterion) for p, row in enumerate(neighbors)]))


def test_knn_group_tightens_the_neighbor_sets(index):
    cfg = GroupingConfig(k=5, n_iter=10, criterion="cluster", rng_seed=3)
    approx = knn_group(index, cfg)
    assert approx.neighbors.shape == (len(index), 5)
    assert len(approx.swaps) == 10
    assert approx.is_consistent()

    distances = pairwise_distances(index)
    start = random_neighbors(len(index), 5, np.random.Generator(np.random.Philox(3)))
    assert _spread(approx.neighbors, distances) < _spread(start, distances)

    for p, row in enumerate(approx.neighbors):
        assert p not in row
        assert np.all(np.diff(distances[p, row]) >= 0)


def test_anchor_criterion_recovers_the_exact_neighbors(index):
    approx = knn_group(index, GroupingConfig(k=5, n_iter=10, criterion="anchor", rng_seed=5))
    assert recall_at_k(approx, brute_force_topk(index, 5)) >= 0.8


@pytest.mark.parametrize("criterion", CRITERIA)
def test_accepted_swaps_never_increase_the_spread(index, monkeypatch, criterion):
    distances = pairwise_distances(index)
    try_swap = grouping._GroupingState.try_swap
    changes = []

    def recorded_swap(state, p, q, sim_threshold):
        before = cluster_spread(distances, p, state.neighbors[p], criterion)
        accepted = try_swap(state, p, q, sim_threshold)
        if accepted:
            changes.append(cluster_spread(distances, p, state.neighbors[p], criterion) - before)
        return accepted

    monkeypatch.setattr(grouping._GroupingState, "try_swap", recorded_swap)
    approx = knn_group(index, GroupingConfig(k=4, n_iter=3, criterion=criterion, rng_seed=4))
    assert len(changes) == sum(approx.swaps) > 0
    assert max(changes) < 0


@pytest.mark.parametrize("criterion", CRITERIA)
def test_identical_distances_keep_the_initial_sets(index, criterion):
    distances = np.ones((len(index), len(index))) - np.eye(len(index))
    cfg = GroupingConfig(k=4, n_iter=3, criterion=criterion, rng_seed=9)
    approx = knn_group(index, cfg, distances)
    assert approx.swaps == [0, 0, 0]
    start = random_neighbors(len(index), 4, np.random.Generator(np.random.Philox(9)))
    assert np.array_equal(approx.neighbors, np.sort(start, axis=1))


def test_every_other_item_as_neighbor_is_brute_force(index):
    k = len(index) - 1
    approx = knn_group(index, GroupingConfig(k=k, n_iter=2))
    assert np.array_equal(approx.neighbors, brute_force_topk(index, k).neighbors)
    assert approx.swaps == [0, 0]


def test_knn_group_is_deterministic(index):
    cfg = GroupingConfig(k=4, n_iter=3, rng_seed=11)
    assert np.array_equal(knn_group(index, cfg).neighbors, knn_group(index, cfg).neighbors)


def test_tiny_similarity_threshold_blocks_every_swap(index):
    approx = knn_group(index, GroupingConfig(k=4, n_iter=2, sim_threshold=1e-9))
    assert approx.swaps == [0, 0]


def test_ground_truth_neighbors(index):
    neighbors = ground_truth_neighbors(index, 5)
    families = np.asarray(index.families)
    assert np.all(families[neighbors.neighbors] == families[:, None])
    padded = ground_truth_neighbors(index, 7)
    assert np.all(families[padded.neighbors[:, :5]] == families[:, None])
    assert np.all(families[padded.neighbors[:, 5:]] != families[:, None])


def test_recall_at_k():
    exact = NeighborSets.from_neighbors([[1, 2], [0, 2], [0, 1], [0, 1]])
    approx = NeighborSets.from_neighbors([[2, 1], [2, 0], [1, 0], [1, 0]])
    assert recall_at_k(approx, exact) == 1.0
    half = NeighborSets.from_neighbors([[1, 3], [0, 3], [0, 3], [0, 2]])
    assert recall_at_k(half, exact) == pytest.approx(0.5)
    with pytest.raises(DimensionMismatchError):
        recall_at_k(NeighborSets.from_neighbors([[1], [0], [0], [0]]), exact)


def test_neighbor_sets_validate_rows():
    with pytest.raises(ValidationError, match="own neighbor"):
        NeighborSets.from_neighbors([[0, 1], [0, 2], [0, 1]])
    with pytest.raises(ValidationError, match="repeated"):
        NeighborSets.from_neighbors([[1, 1], [0, 2], [0, 1]])
    ns = NeighborSets.from_neighbors([[1, 2], [2, 0], [0, 1]])
    assert ns.reverse[0] == frozenset({1, 2})
    assert NeighborSets.from_dict(ns.to_dict()).reverse == ns.reverse


def test_random_neighbors_exclude_the_item(rng):
    neighbors = random_neighbors(10, 9, rng)
    for p, row in enumerate(neighbors):
        assert sorted(row.tolist()) == [i for i in range(10) if i != p]


def test_build_clusters_drops_far_neighbors(index):
    neighbors = brute_force_topk(index, 7)
    clusters = build_clusters(index, neighbors, drop_distance=1e3)
    assert all(len(cluster.entries) == 7 for cluster in clusters)
    assert all(np.all(np.diff([e.distance for e in c.entries]) >= 0) for c in clusters)
    assert clusters[3].image_id == index.items[3].image_id
    assert all(cluster.is_empty for cluster in build_clusters(index, neighbors, drop_distance=1e-12))


def test_grouping_config_validation():
    with pytest.raises(ConfigError, match="criterion"):
        GroupingConfig(criterion="nearest")
    with pytest.raises(ConfigError):
        GroupingConfig(k=0)


@pytest.mark.slow
def test_recall_on_a_full_synthetic_suite(body, template):
    cfg = SyntheticFamilyConfig(n_scenes=25, views_per_scene=20, mask_resolution=0, rng_seed=1)
    index = synth_generate(cfg, body, template).index()
    approx = knn_group(index, GroupingConfig(k=8, n_iter=10, rng_seed=2))
    assert recall_at_k(approx, brute_force_topk(index, 8)) >= 0.9
