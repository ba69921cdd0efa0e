import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    RankDeficientError,
    ZeroAreaMeshError,
)
from hoiprior.lib.evaluation import (
    CHAMFER_CONVENTION,
    EvalConfig,
    MetricReport,
    PointCloud,
    aggregate,
    chamfer,
    evaluate,
    object_translation_error,
    procrustes_align,
    sample_surface,
    summary_table,
)
from hoiprior.lib.models import Mesh, ObjectPose, SceneParams
from hoiprior.lib.util import rotation_about_axis

FAST = EvalConfig(n_samples=500)


def test_procrustes_recovers_a_similarity(rng):
    source = PointCloud(rng.normal(size=(40, 3)))
    rotation = Rotation.from_euler("zyx", [40.0, -20.0, 75.0], degrees=True).as_matrix()
    target = PointCloud(1.7 * source.points @ rotation.T + [0.3, -1.0, 2.0])

    alignment = procrustes_align(source, target, with_scale=True)
    assert alignment.scale == pytest.approx(1.7)
    assert np.allclose(alignment.rotation, rotation)
    assert np.allclose(alignment.apply(source).points, target.points)
    assert procrustes_align(source, target).scale == 1.0


def test_procrustes_never_reflects(rng):
    source = PointCloud(rng.normal(size=(20, 3)))
    mirrored = PointCloud(source.points * [1.0, 1.0, -1.0])
    alignment = procrustes_align(source, mirrored)
    assert np.linalg.det(alignment.rotation) == pytest.approx(1.0)


def test_procrustes_needs_corresponding_spread_points():
    line = PointCloud(np.outer(np.arange(5.0), [1.0, 2.0, 3.0]))
    with pytest.raises(RankDeficientError):
        procrustes_align(line, line)
    with pytest.raises(DimensionMismatchError):
        procrustes_align(PointCloud(np.zeros((4, 3))), PointCloud(np.zeros((5, 3))))


def test_chamfer_is_symmetric_and_in_centimeters():
    a = PointCloud([[0.0, 0.0, 0.0]])
    b = PointCloud([[0.01, 0.0, 0.0], [0.0, 0.03, 0.0]])
    # a to b: 1 cm; b to a: mean of 1 and 3 cm
    assert chamfer(a, b) == pytest.approx((1.0 + 2.0) / 2)
    assert chamfer(b, a) == pytest.approx(chamfer(a, b))
    assert chamfer(b, b) == 0.0
    with pytest.raises(EmptyInputError):
        chamfer(a, PointCloud(np.zeros((0, 3))))


def test_surface_samples_follow_the_area(rng):
    vertices = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]]
    mesh = Mesh(torch.tensor(vertices, dtype=DTYPE), [[0, 1, 2], [1, 3, 4]])
    cloud = sample_surface(mesh, 4000, rng)
    assert np.all(cloud.points[:, 2] == 0.0)
    small_share = np.mean(cloud.points.sum(axis=1) <= 1.0)
    assert small_share == pytest.approx(0.5 / 3.5, abs=0.03)
    with pytest.raises(ZeroAreaMeshError):
        sample_surface(Mesh(torch.zeros(3, 3), [[0, 1, 2]]), 10, rng)


@pytest.mark.parametrize("mode", ["wildhoi", "behave"])
def test_ground_truth_scores_zero(model, scene, mode):
    report = evaluate(scene, scene, model, mode, FAST)
    assert report.mode == mode
    assert report.smpl_chamfer_cm == pytest.approx(0.0, abs=1e-9)
    assert report.object_chamfer_cm == pytest.approx(0.0, abs=1e-9)
    assert report.rotation_error_deg == pytest.approx(0.0, abs=1e-6)
    assert report.translation_error_cm == pytest.approx(0.0, abs=1e-9)
    assert (report.smpl_chamfer_scaled_cm is None) == (mode == "wildhoi")


def test_object_errors(model, scene):
    pose = scene.object
    shift = torch.tensor([0.1, 0.0, 0.0], dtype=DTYPE)
    rotation = rotation_about_axis("x", 30.0) @ pose.rotation
    moved = SceneParams(scene.body, ObjectPose(rotation, pose.translation + shift))
    report = evaluate(moved, scene, model, cfg=FAST)
    assert report.rotation_error_deg == pytest.approx(30.0)
    assert report.translation_error_cm == pytest.approx(10.0)
    assert report.smpl_chamfer_cm == pytest.approx(0.0, abs=1e-9)
    assert report.object_chamfer_cm > 1.0
    assert object_translation_error(moved, scene) == pytest.approx(10.0)
    # the same shift of the root point cancels the object shift
    assert object_translation_error(moved, scene, shift, torch.zeros(3)) == pytest.approx(0.0, abs=1e-12)

    aligned = evaluate(moved, scene, model, "behave", FAST)
    assert aligned.object_chamfer_cm == pytest.approx(0.0, abs=1e-6)


def test_aggregate_and_table():
    reports = [
        MetricReport(1.0, 2.0, 10.0, 5.0),
        MetricReport(3.0, 4.0, 20.0, 7.0),
        MetricReport(8.0, 6.0, 60.0, 9.0),
    ]
    summary = aggregate(reports)
    assert summary["count"] == 3
    assert summary["chamfer_convention"] == CHAMFER_CONVENTION
    assert summary["smpl_chamfer_cm"] == {"mean": 4.0, "median": 3.0}
    assert "smpl_chamfer_scaled_cm" not in summary
    assert len(summary_table(summary).rows) == 4
    assert MetricReport.from_dict(reports[0].to_dict()) == reports[0]
    with pytest.raises(EmptyInputError):
        aggregate([])


def test_eval_config_validation():
    with pytest.raises(ConfigError, match="mode"):
        EvalConfig(mode="aligned")
    with pytest.raises(ConfigError):
        EvalConfig(n_samples=0)


def test_aligned_chamfer_ignores_rigid_motion(rng):
    source = PointCloud(rng.normal(size=(200, 3)))
    target = PointCloud(source.points + rng.normal(scale=0.01, size=(200, 3)))
    rotation = Rotation.from_rotvec([0.4, -1.1, 0.7]).as_matrix()
    moved = PointCloud(source.points @ rotation.T + [2.0, -0.5, 1.0])

    def aligned(cloud):
        return chamfer(procrustes_align(cloud, target).apply(cloud), target)

    assert aligned(moved) == pytest.approx(aligned(source), abs=1e-9)
