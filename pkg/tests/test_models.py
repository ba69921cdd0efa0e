import numpy as np
import pytest
import torch

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import DimensionMismatchError, GeometryError, ValidationError
from hoiprior.lib.models import (
    BodyParams,
    CameraPose,
    Intrinsics,
    KeypointSet,
    Keypoints2D,
    Mesh,
    ObjectPose,
    Rep25D,
    SceneParams,
)
from hoiprior.lib.projection import to_camera_frame
from hoiprior.lib.util import rotation_about_axis


def test_object_pose_rejects_improper_rotations_and_bad_scales():
    with pytest.raises(GeometryError):
        ObjectPose(2 * torch.eye(3, dtype=DTYPE), torch.zeros(3))
    with pytest.raises(GeometryError):
        ObjectPose(torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=DTYPE)), torch.zeros(3))
    with pytest.raises(ValidationError, match="scale"):
        ObjectPose(torch.eye(3), torch.zeros(3), 0.0)
    with pytest.raises(DimensionMismatchError):
        ObjectPose(torch.eye(2), torch.zeros(3))


def test_look_at_puts_the_target_on_the_optical_axis():
    cam = CameraPose.look_at((1.0, 0.5, 3.0), (0.0, 0.0, 0.0))
    target = to_camera_frame(torch.zeros(1, 3), cam)[0]
    assert torch.allclose(target[:2], torch.zeros(2, dtype=DTYPE), atol=1e-12)
    assert float(target[2]) == pytest.approx(float(np.linalg.norm([1.0, 0.5, 3.0])))


def test_look_at_image_v_points_down(front_camera):
    above = to_camera_frame(torch.tensor([[0.0, 1.0, 0.0]], dtype=DTYPE), front_camera)[0]
    right = to_camera_frame(torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE), front_camera)[0]
    assert float(above[1]) < 0
    assert float(right[0]) > 0


def test_camera_from_body_pose_matches_the_body_transform():
    body_rotation = rotation_about_axis("y", 25.0) @ rotation_about_axis("x", -10.0)
    body_translation = torch.tensor([0.1, -0.2, 4.0], dtype=DTYPE)
    cam = CameraPose.from_body_pose(body_rotation, body_translation)
    points = torch.tensor([[0.3, 0.2, -0.1], [0.0, 1.0, 0.5]], dtype=DTYPE)
    expected = points @ body_rotation.T + body_translation
    assert torch.allclose(to_camera_frame(points, cam), expected, atol=1e-12)


def test_keypoint_set_counts_must_add_up():
    points = torch.zeros(5, 3, dtype=DTYPE)
    kps = KeypointSet(points, 3, 2)
    assert kps.n == 5
    assert kps.human.shape == (3, 3)
    assert kps.object.shape == (2, 3)
    with pytest.raises(DimensionMismatchError):
        KeypointSet(points, 3, 3)


def test_body_params_validate_their_shape():
    with pytest.raises(DimensionMismatchError):
        BodyParams(torch.zeros(10), torch.zeros(4))
    with pytest.raises(ValidationError, match="finite"):
        BodyParams(torch.tensor([np.nan]), torch.zeros(3))


def test_keypoints_2d_must_be_finite_pairs():
    assert Keypoints2D([[1.0, 2.0]]).n == 1
    with pytest.raises(DimensionMismatchError):
        Keypoints2D(torch.zeros(4, 3))
    with pytest.raises(ValidationError):
        Keypoints2D([[np.inf, 0.0]])


def test_rep25d_needs_unit_directions():
    with pytest.raises(ValidationError, match="unit"):
        Rep25D(torch.tensor([[2.0, 0.0, 0.0]], dtype=DTYPE), torch.zeros(3))


def test_rep25d_from_flat_normalises_directions():
    flat = torch.tensor([3.0, 0.0, 4.0, 0.0, 2.0, 0.0, 1.0, 2.0, 3.0], dtype=DTYPE)
    rep = Rep25D.from_flat(flat)
    assert rep.n == 2
    assert rep.dim == 9
    assert torch.allclose(rep.directions[0], torch.tensor([0.6, 0.0, 0.8], dtype=DTYPE))
    assert torch.equal(rep.cam_translation, torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE))
    assert torch.allclose(Rep25D.from_flat(rep.flatten()).flatten(), rep.flatten())
    with pytest.raises(DimensionMismatchError):
        Rep25D.from_flat(torch.zeros(8))


def test_mesh_face_areas_and_index_checks():
    mesh = Mesh(torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]), [[0, 1, 2]])
    assert mesh.num_vertices == 3
    assert mesh.face_areas() == pytest.approx([1.0])
    with pytest.raises(ValidationError, match="out of range"):
        Mesh(torch.zeros(3, 3), [[0, 1, 3]])


def test_intrinsics():
    intr = Intrinsics(1000.0, 640, 480)
    assert intr.diagonal == pytest.approx(800.0)
    assert intr.scaled_to(320, 240) == Intrinsics(500.0, 320, 240)
    with pytest.raises(ValidationError):
        Intrinsics(0.0)


def test_scene_detached_drops_the_graph(scene):
    theta = scene.body.theta.clone().requires_grad_(True)
    live = SceneParams(BodyParams(scene.body.beta, theta * 2), scene.object)
    detached = live.detached()
    assert not detached.body.theta.requires_grad
    assert SceneParams.from_dict(detached.to_dict()).to_dict() == detached.to_dict()
