import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import DimensionMismatchError, ValidationError
from hoiprior.lib.kinematics import (
    DEFAULT_REST_OFFSETS,
    BodyModel,
    InteractionModel,
    ObjectTemplate,
    StickBodyModel,
    body_model_from_dict,
    object_keypoints,
    transform_object_points,
)
from hoiprior.lib.models import BodyParams, ObjectPose
from hoiprior.lib.util import axis_angle_to_matrix, rotation_about_axis

small = st.floats(-0.5, 0.5, allow_nan=False)


def test_default_body_model(body, rest_body):
    assert isinstance(body, BodyModel)
    assert body.joint_count == 22
    assert body.num_articulated == 21
    joints, mesh = body.evaluate(rest_body)
    assert joints.shape == (22, 3)
    assert torch.equal(joints[0], torch.zeros(3, dtype=DTYPE))
    assert torch.allclose(joints[1], torch.tensor(DEFAULT_REST_OFFSETS[1], dtype=DTYPE))
    assert mesh.num_vertices == body.num_vertices
    assert (mesh.face_areas() > 0).all()


def test_wrong_parameter_counts_are_refused(body):
    with pytest.raises(DimensionMismatchError, match="pose"):
        body.evaluate(BodyParams(torch.zeros(body.num_betas), torch.zeros(60)))
    with pytest.raises(DimensionMismatchError, match="shape"):
        body.evaluate(BodyParams(torch.zeros(3), torch.zeros(63)))


@given(st.tuples(small, small, small), st.tuples(small, small, small))
@settings(max_examples=20, deadline=None)
def test_root_pose_moves_the_body_rigidly(body, orient, transl):
    params = BodyParams(0.3 * torch.ones(body.num_betas), 0.1 * torch.ones(3 * body.num_articulated))
    joints, mesh = body.evaluate(params)
    orient, transl = torch.tensor(orient, dtype=DTYPE), torch.tensor(transl, dtype=DTYPE)
    moved_joints, moved_mesh = body.evaluate(params, orient, transl)
    rotation = axis_angle_to_matrix(orient)
    assert torch.allclose(moved_joints, joints @ rotation.T + transl, atol=1e-10)
    assert torch.allclose(moved_mesh.vertices, mesh.vertices @ rotation.T + transl, atol=1e-10)


def test_bending_a_joint_keeps_bone_lengths(body, rest_body):
    theta = torch.zeros(3 * body.num_articulated, dtype=DTYPE)
    theta[3 * 16 : 3 * 17] = torch.tensor([0.0, 0.0, 1.2])  # right shoulder
    joints, _ = body.evaluate(BodyParams(rest_body.beta, theta))
    rest_joints, _ = body.evaluate(rest_body)
    for joint in (19, 21):
        parent = body.parents[joint]
        assert float(torch.linalg.norm(joints[joint] - joints[parent])) == pytest.approx(
            float(torch.linalg.norm(rest_joints[joint] - rest_joints[parent])),
        )
    assert not torch.allclose(joints[21], rest_joints[21])


def test_contact_regions_are_the_tube_rings(body):
    regions = body.contact_regions()
    assert len(regions) == body.num_articulated
    assert all(len(region) == body.tube_sides for region in regions)
    assert np.concatenate(regions).max() < body.num_vertices


def test_body_model_validates_its_tree():
    offsets = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    basis = np.zeros((2, 3, 1))
    with pytest.raises(ValidationError, match="tree"):
        StickBodyModel(offsets, (-1, 1), basis)
    with pytest.raises(DimensionMismatchError):
        StickBodyModel(offsets, (-1, 0), np.zeros((3, 3, 1)))
    with pytest.raises(ValidationError, match="Unknown"):
        body_model_from_dict({"kind": "mesh"})


def test_body_model_json_round_trip(tmp_path, body):
    path = tmp_path / "body.json"
    body.to_json(path)
    loaded = StickBodyModel.from_json(path)
    params = BodyParams(0.2 * torch.ones(body.num_betas), 0.05 * torch.ones(3 * body.num_articulated))
    assert torch.allclose(loaded.evaluate(params)[0], body.evaluate(params)[0])
    assert np.array_equal(loaded.faces, body.faces)


def test_box_template(template):
    assert template.num_keypoints == 8
    assert len(template.parts) == 6
    assert len(template.contact_regions) == 6
    corners = np.sort(np.abs(template.keypoints_local.numpy()), axis=0)
    assert np.allclose(corners, np.tile([0.2, 0.15, 0.1], (8, 1)))
    assert torch.allclose(template.part_points(0).mean(dim=0), torch.tensor([0.2, 0.0, 0.0], dtype=DTYPE))
    with pytest.raises(ValidationError, match="odd"):
        ObjectTemplate.box(grid=4)


def test_template_from_dict_accepts_single_vertex_keypoints(template):
    values = template.to_dict()
    values["keypoints"] = [k[0] for k in values["keypoints"]]
    loaded = ObjectTemplate.from_dict(values)
    assert torch.allclose(loaded.keypoints_local, template.keypoints_local)
    values["parts"] = [[10_000]]
    with pytest.raises(ValidationError, match="part set 0"):
        ObjectTemplate.from_dict(values)


def test_object_pose_is_scale_rotate_translate(template):
    pose = ObjectPose(rotation_about_axis("z", 90.0), torch.tensor([1.0, 2.0, 3.0]), 2.0)
    moved = transform_object_points(torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE), pose)
    assert torch.allclose(moved, torch.tensor([[1.0, 4.0, 3.0]], dtype=DTYPE), atol=1e-12)
    assert object_keypoints(template, pose).shape == (8, 3)


def test_interaction_model_keypoints(model, scene):
    kps = model.keypoints(scene)
    assert model.n_keypoints == 30
    assert (kps.n_human, kps.n_object) == (22, 8)
    geometry_kps, _, mesh_o = model.geometry(scene)
    assert torch.equal(geometry_kps.points, kps.points)
    assert mesh_o.num_vertices == model.template.mesh.num_vertices
    assert InteractionModel.from_dict(model.to_dict()).n_keypoints == 30
