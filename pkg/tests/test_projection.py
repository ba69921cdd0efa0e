import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoiprior.lib.custom_types import DTYPE
from hoiprior.lib.error import BehindCameraError, DegenerateRayError, DimensionMismatchError
from hoiprior.lib.models import CameraPose, Intrinsics
from hoiprior.lib.projection import (
    centered_to_pixel,
    pixel_to_centered,
    point_ray_distance,
    project,
    project_points,
    rep25d_from_2d,
    rep25d_from_3d,
)

coordinates = st.floats(-1.0, 1.0, allow_nan=False)
points_in_front = st.lists(st.tuples(coordinates, coordinates, coordinates), min_size=1, max_size=12)
azimuths = st.floats(0.0, 6.28)


def test_origin_projects_to_the_principal_point(front_camera, intr):
    uv = project_points(torch.zeros(1, 3), front_camera, intr)
    assert torch.allclose(uv, torch.zeros(1, 2, dtype=DTYPE), atol=1e-12)


def test_projection_follows_the_pinhole_model(front_camera, intr):
    # 0.3 m right of the origin, seen from 3 m
    uv = project_points(torch.tensor([[0.3, 0.0, 0.0]]), front_camera, intr)
    assert float(uv[0, 0]) == pytest.approx(100.0)
    assert float(uv[0, 1]) == pytest.approx(0.0, abs=1e-12)


def test_points_behind_the_camera_are_refused(front_camera, intr):
    points = torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, 5.0]])
    with pytest.raises(BehindCameraError) as info:
        project(points, front_camera, intr)
    assert info.value.index == 1
    clipped = project_points(points, front_camera, intr, clip_depth=True)
    assert torch.isfinite(clipped).all()


@given(points_in_front, azimuths)
@settings(max_examples=40, deadline=None)
def test_rays_from_2d_match_rays_from_3d(points, azimuth):
    center = (3.0 * math.sin(azimuth), 0.3, 3.0 * math.cos(azimuth))
    cam = CameraPose.look_at(center, (0.0, 0.0, 0.0))
    intr = Intrinsics(800.0, 640, 480)
    points = torch.tensor(points, dtype=DTYPE)
    from_2d = rep25d_from_2d(project(points, cam, intr), cam, intr)
    from_3d = rep25d_from_3d(points, cam.translation)
    assert torch.allclose(from_2d.directions, from_3d.directions, atol=1e-10)
    assert torch.allclose(point_ray_distance(points, from_2d), torch.zeros(len(points), dtype=DTYPE), atol=1e-9)


def test_point_ray_distance_is_the_perpendicular_offset():
    rep = rep25d_from_3d(torch.tensor([[0.0, 0.0, 2.0]]), torch.zeros(3))
    distance = point_ray_distance(torch.tensor([[0.25, 0.0, 7.0]]), rep)
    assert float(distance[0]) == pytest.approx(0.25)
    with pytest.raises(DimensionMismatchError):
        point_ray_distance(torch.zeros(2, 3), rep)


def test_keypoint_at_the_camera_center_is_degenerate():
    with pytest.raises(DegenerateRayError) as info:
        rep25d_from_3d(torch.tensor([[0.0, 0.0, 1.0], [1.0, 2.0, 3.0]]), torch.tensor([1.0, 2.0, 3.0]))
    assert info.value.index == 1


def test_centered_and_pixel_coordinates_are_inverse(intr):
    uv = torch.tensor([[-500.0, -500.0], [12.5, 40.0]], dtype=DTYPE)
    pixels = centered_to_pixel(uv, intr)
    assert torch.allclose(pixels[0], torch.zeros(2, dtype=DTYPE))
    assert torch.allclose(pixel_to_centered(pixels, intr), uv)
