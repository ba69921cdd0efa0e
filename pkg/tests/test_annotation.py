import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from hoiprior.lib.annotation import (
    ContactPairAnnotation,
    ContactRegions,
    PartKeypointAnnotation,
    SolverConfig,
    annotation_from_pose,
    region_chamfer,
    region_gap,
    softmin_objective,
    solve_object_pose,
    solve_object_pose_softmin,
    solve_relative_pose,
)
from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import (
    ConfigError,
    DimensionMismatchError,
    EmptyPairsError,
    InsufficientAnnotationsError,
    NoConvergenceError,
    ValidationError,
)
from hoiprior.lib.kinematics import transform_object_points
from hoiprior.lib.models import Intrinsics
from hoiprior.lib.projection import to_camera_frame
from hoiprior.lib.util import geodesic_angle_deg

ROTATION = Rotation.from_euler("xyz", [20.0, -30.0, 15.0], degrees=True).as_matrix()
TRANSLATION = np.array([0.1, -0.05, 2.0])
WRIST_RING = 20  # ring around the right wrist
FRONT_FACE = 0  # the +x face of the box


@pytest.fixture
def annotation(template, intr):
    return annotation_from_pose(template, ROTATION, TRANSLATION, intr)


def test_part_keypoints_recover_the_pose(template, intr, annotation):
    solution = solve_object_pose(template, annotation, intr)
    assert solution.residual < 1e-3
    assert geodesic_angle_deg(solution.rotation, ROTATION) < 0.1
    assert np.allclose(solution.translation, TRANSLATION, atol=1e-4)
    assert solution.history[-1] == pytest.approx(solution.residual)
    assert all(b <= a + 1e-9 for a, b in zip(solution.history, solution.history[1:], strict=False))


def test_solution_in_the_body_frame(template, intr, annotation, front_camera):
    solution = solve_object_pose(template, annotation, intr)
    pose = solution.to_object_pose(front_camera)
    in_camera = to_camera_frame(transform_object_points(template.keypoints_local, pose), front_camera)
    expected = template.keypoints_local.numpy() @ ROTATION.T + TRANSLATION
    assert np.allclose(in_camera.numpy(), expected, atol=1e-4)


def test_softmin_solver_agrees(template, intr, annotation):
    solution = solve_object_pose_softmin(template, annotation, intr)
    assert geodesic_angle_deg(solution.rotation, ROTATION) < 1.0
    assert np.allclose(solution.translation, TRANSLATION, atol=1e-2)


def test_softmin_is_below_the_hard_min(template, intr, annotation):
    rotvec = torch.as_tensor(Rotation.from_matrix(ROTATION).as_rotvec(), dtype=DTYPE)
    value = softmin_objective(rotvec, torch.as_tensor(TRANSLATION, dtype=DTYPE), template, annotation, intr, 10.0)
    assert float(value) <= 0.0


def test_unfittable_annotations_do_not_converge(template, intr):
    rng = np.random.default_rng(0)
    ann = PartKeypointAnnotation(rng.uniform(-400, 400, (20, 2)), rng.integers(0, 6, 20))
    with pytest.raises(NoConvergenceError):
        solve_object_pose(template, ann, intr, SolverConfig(starts=2, max_alternations=5))


def test_annotations_are_checked(template, intr):
    with pytest.raises(InsufficientAnnotationsError):
        solve_object_pose(template, PartKeypointAnnotation(np.zeros((3, 2)), [0, 1, 2]), intr)
    with pytest.raises(ValidationError, match="Part labels"):
        solve_object_pose(template, PartKeypointAnnotation(np.zeros((4, 2)), [0, 1, 2, 6]), intr)
    with pytest.raises(DimensionMismatchError):
        PartKeypointAnnotation(np.zeros((4, 2)), [0, 1])


def test_annotation_dict_round_trip(annotation):
    loaded = PartKeypointAnnotation.from_dict(annotation.to_dict())
    assert np.array_equal(loaded.points, annotation.points)
    assert len(loaded) == 30


@pytest.fixture
def body_mesh(model, scene):
    return model.geometry(scene)[1]


@pytest.fixture
def regions(body, template):
    return ContactRegions.from_models(body, template)


def test_contact_labels_pull_the_regions_together(body_mesh, template, regions):
    pairs = ContactPairAnnotation([(WRIST_RING, FRONT_FACE)])
    cfg = SolverConfig(relative_steps=150)
    start = solve_relative_pose(body_mesh, template, regions, pairs, cfg=SolverConfig(relative_steps=0))
    fitted = solve_relative_pose(body_mesh, template, regions, pairs, cfg=cfg)
    before = region_gap(body_mesh, template, start, regions, pairs)
    after = region_gap(body_mesh, template, fitted, regions, pairs)
    assert after < 0.5 * before


def test_region_chamfer_is_zero_for_shared_points(regions):
    vertices = torch.zeros(400, 3, dtype=DTYPE)
    pairs = ContactPairAnnotation([(0, 0)])
    same = ContactRegions([np.array([0, 1])], [np.array([0, 1])])
    assert float(region_chamfer(vertices, vertices, same, pairs)) == 0.0
    with pytest.raises(EmptyPairsError):
        region_chamfer(vertices, vertices, regions, ContactPairAnnotation([]))


def test_contact_pairs_are_checked(body_mesh, template, regions):
    with pytest.raises(EmptyPairsError):
        solve_relative_pose(body_mesh, template, regions, ContactPairAnnotation([]))
    with pytest.raises(ValidationError, match="out of range"):
        solve_relative_pose(body_mesh, template, regions, ContactPairAnnotation([(99, 0)]))
    assert ContactPairAnnotation([(1, 2)]).transposed().pairs == [(2, 1)]
    assert regions.transposed().human[0].tolist() == regions.object[0].tolist()
    with pytest.raises(ValidationError, match="nonempty"):
        ContactRegions([np.array([], dtype=int)], [np.array([0])])


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(starts=0)
    with pytest.raises(ConfigError):
        SolverConfig(softmin_temp=0.0)
    assert SolverConfig.from_dict({"STARTS": 3}).starts == 3


def test_annotations_scale_with_the_focal_length(template):
    near = annotation_from_pose(template, ROTATION, TRANSLATION, Intrinsics(500.0))
    far = annotation_from_pose(template, ROTATION, TRANSLATION, Intrinsics(1000.0))
    assert np.allclose(far.points, 2 * near.points)


@pytest.mark.slow
def test_random_poses_are_recovered_with_and_without_noise(template, intr):
    rng = np.random.Generator(np.random.Philox(21))
    clean_ok, noisy_errors = 0, []
    for _ in range(50):
        rotation = Rotation.random(random_state=rng).as_matrix()
        translation = np.array([*rng.uniform(-0.3, 0.3, 2), rng.uniform(1.5, 4.0)])
        clean = annotation_from_pose(template, rotation, translation, intr)
        solution = solve_object_pose(template, clean, intr)
        rotation_ok = geodesic_angle_deg(solution.rotation, rotation) < 0.5
        translation_ok = np.linalg.norm(solution.translation - translation) < 0.01 * np.linalg.norm(translation)
        clean_ok += rotation_ok and translation_ok

        noisy = PartKeypointAnnotation(clean.points + rng.normal(0.0, 1.0, clean.points.shape), clean.labels)
        noisy_errors.append(geodesic_angle_deg(solve_object_pose(template, noisy, intr).rotation, rotation))
    assert clean_ok == 50
    assert np.median(noisy_errors) < 2.0
