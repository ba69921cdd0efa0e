import numpy as np
import pytest
import torch

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import DimensionMismatchError, EmptyInputError, EmptyProjectionError, ValidationError
from hoiprior.lib.models import CameraPose, Intrinsics, Mesh
from hoiprior.lib.render import (
    MeanOcclusionMap,
    OcclusionConfig,
    OcclusionMap,
    contact_candidates,
    mask_iou,
    mean_occlusion_map,
    occlusion_map,
    render_masks,
)
from hoiprior.lib.util import rotation_about_axis

QUAD = [[0, 1, 2], [0, 2, 3]]
RESOLUTION = 100


def _quad(x0, x1, y0, y1, z, extra=()):
    corners = [[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]]
    return Mesh(torch.tensor(corners + list(extra), dtype=DTYPE), QUAD)


@pytest.fixture
def camera():
    return CameraPose(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))


@pytest.fixture
def small_intr():
    return Intrinsics(100.0, RESOLUTION, RESOLUTION)


@pytest.fixture
def near_quad():
    """The human: a 1 m square at 2 m, covering pixel columns and rows 25 to 74.

    Vertex 4 lies on the square, vertex 5 is far behind it.
    """
    return _quad(-0.5, 0.5, -0.5, 0.5, 2.0, extra=[[0.1, 0.0, 2.0], [0.2, 0.0, 6.0]])


@pytest.fixture
def far_quad():
    """The object: a strip at 4 m, covering columns 50 to 99 and rows 40 to 59.

    Vertex 4 lies on the strip, vertex 5 is far behind it.
    """
    return _quad(0.0, 3.0, -0.4, 0.4, 4.0, extra=[[0.2, 0.0, 4.0], [0.4, 0.0, 8.0]])


def test_two_quads_render_the_expected_buffers(near_quad, far_quad, camera, small_intr):
    render = render_masks(near_quad, far_quad, camera, small_intr, RESOLUTION)
    assert render.depth_h[50, 50] == pytest.approx(2.0)
    assert render.depth_o[50, 80] == pytest.approx(4.0)
    assert render.silhouette_h.sum() == 50 * 50
    assert render.silhouette_o.sum() == 50 * 20
    assert render.occlusion_region.sum() == 25 * 20
    assert np.array_equal(render.person_mask, render.silhouette_h)
    assert render.object_mask.sum() == 25 * 20
    assert not render.object_mask[50, 60]
    assert render.object_mask[50, 80]


def test_render_scales_the_intrinsics(near_quad, far_quad, camera, small_intr):
    render = render_masks(near_quad, far_quad, camera, small_intr, (50, 40))
    assert render.depth_h.shape == (40, 50)
    assert render.intrinsics == Intrinsics(50.0, 50, 40)


def test_meshes_behind_the_camera_are_refused(near_quad, far_quad, small_intr):
    facing_away = CameraPose(rotation_about_axis("y", 180.0), torch.zeros(3, dtype=DTYPE))
    with pytest.raises(EmptyProjectionError):
        render_masks(near_quad, far_quad, facing_away, small_intr, RESOLUTION)


def test_occlusion_rules_with_rendered_masks(near_quad, far_quad, camera, small_intr):
    occ = occlusion_map(near_quad, far_quad, camera, small_intr, RESOLUTION)
    # human: on-surface vertex is visible, the hidden one behind is on in the person mask
    assert occ.human.tolist() == [0, 0, 0, 0, 0, 1]
    assert occ.human_front[4]
    assert not occ.human_front[5]
    # object: on-surface vertex is hidden by the human, the one behind is off in the object mask
    assert occ.object[4:].tolist() == [1, 0]
    assert occ.object[1:4].tolist() == [0, 0, 0]


def test_observed_masks_replace_the_rendered_ones(near_quad, far_quad, camera, small_intr):
    person = np.zeros((RESOLUTION, RESOLUTION), dtype=bool)
    obj = np.ones((RESOLUTION, RESOLUTION), dtype=bool)
    occ = occlusion_map(near_quad, far_quad, camera, small_intr, RESOLUTION, person, obj)
    assert occ.human[4:].tolist() == [1, 0]
    assert occ.object[4:].tolist() == [0, 1]
    with pytest.raises(DimensionMismatchError, match="person"):
        occlusion_map(near_quad, far_quad, camera, small_intr, RESOLUTION, person[:50], obj)


def test_occlusion_map_of_a_scene(model, scene, front_camera, intr):
    _, mesh_h, mesh_o = model.geometry(scene)
    occ = occlusion_map(mesh_h, mesh_o, front_camera, intr, 64)
    assert occ.human.shape == (mesh_h.num_vertices,)
    assert occ.object.shape == (mesh_o.num_vertices,)
    assert set(np.unique(occ.human)) <= {0.0, 1.0}


def test_occlusion_map_entries_are_binary():
    with pytest.raises(ValidationError):
        OcclusionMap(np.array([0.0, 0.5]), np.array([1.0]))


def test_mean_occlusion_map():
    maps = [
        OcclusionMap(np.array([1, 0, 1]), np.array([0, 0])),
        OcclusionMap(np.array([1, 0, 0]), np.array([1, 0])),
    ]
    mean = mean_occlusion_map(maps)
    assert mean.human.tolist() == [1.0, 0.0, 0.5]
    assert mean.object.tolist() == [0.5, 0.0]
    assert mean.count == 2
    assert MeanOcclusionMap.from_dict(mean.to_dict()).human.tolist() == mean.human.tolist()
    with pytest.raises(EmptyInputError):
        mean_occlusion_map([])
    with pytest.raises(DimensionMismatchError):
        mean_occlusion_map([*maps, OcclusionMap(np.array([1]), np.array([0, 0]))])


def test_contact_candidates_threshold_the_product():
    occ = OcclusionMap(np.array([1, 1, 0, 1]), np.array([1, 0, 1]))
    mean = MeanOcclusionMap(np.array([0.9, 0.2, 1.0, 0.3]), np.array([0.5, 1.0, 0.8]), 4)
    human, obj = contact_candidates(occ, mean, 0.3)
    assert human.tolist() == [0]
    assert obj.tolist() == [0, 2]
    human, _ = contact_candidates(occ, mean, 0.0)
    assert human.tolist() == [0, 1, 3]
    with pytest.raises(DimensionMismatchError):
        contact_candidates(occ, MeanOcclusionMap(np.zeros(2), np.zeros(3), 1), 0.3)


def test_mask_iou():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    assert mask_iou(a, b) == 1.0
    a[:2] = True
    b[1:3] = True
    assert mask_iou(a, b) == pytest.approx(4 / 12)


def test_occlusion_config():
    assert OcclusionConfig.from_dict({"RESOLUTION": 128}).resolution == 128
    with pytest.raises(ValidationError):
        OcclusionConfig(resolution=0)
