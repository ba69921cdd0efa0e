"""Perspective camera and the 2.5D ray-bundle representation.

Image coordinates are centered: the principal point is the origin, u grows to
the right and v grows down. A camera-frame point x_c maps to the body frame
as R_cam x_c + t_cam, so a body-frame point x maps to the camera frame as
R_cam^T (x - t_cam).
"""

import torch

from hoiprior.lib.custom_types import ArrayLike, Tensor, as_tensor
from hoiprior.lib.error import BehindCameraError, DegenerateRayError, DimensionMismatchError
from hoiprior.lib.models import CameraPose, Intrinsics, KeypointSet, Keypoints2D, Rep25D

EPS_DEPTH = 1e-6
EPS_RAY = 1e-9


def to_camera_frame(points: ArrayLike, cam: CameraPose) -> Tensor:
    """Move body-frame points into the camera frame.

    Parameters
    ----------
    points : ArrayLike
        The (n, 3) points in the body-local frame.
    cam : CameraPose
        The camera.

    Returns
    -------
    Tensor
        The (n, 3) camera-frame points.

    """
    points = as_tensor(points).reshape(-1, 3)
    return (points - cam.translation) @ cam.rotation


def project_points(points: ArrayLike, cam: CameraPose, intr: Intrinsics, *, clip_depth: bool = False) -> Tensor:
    """Project body-frame points to centered pixel coordinates.

    Parameters
    ----------
    points : ArrayLike
        The (n, 3) points in the body-local frame.
    cam : CameraPose
        The camera.
    intr : Intrinsics
        The intrinsics.
    clip_depth : bool
        Clamp depths to the near plane instead of raising, used inside
        optimisation loops.

    Returns
    -------
    Tensor
        The (n, 2) pixel coordinates.

    """
    camera_points = to_camera_frame(points, cam)
    depth = camera_points[:, 2]
    if clip_depth:
        depth = torch.clamp(depth, min=EPS_DEPTH)
    else:
        behind = torch.nonzero(depth.detach() <= EPS_DEPTH)
        if behind.numel():
            raise BehindCameraError(int(behind[0, 0]))
    return intr.focal * camera_points[:, :2] / depth[:, None]


def project(points: ArrayLike, cam: CameraPose, intr: Intrinsics) -> Keypoints2D:
    """Project keypoints into an image.

    Parameters
    ----------
    points : ArrayLike
        The (n, 3) keypoints in the body-local frame.
    cam : CameraPose
        The camera.
    intr : Intrinsics
        The intrinsics.

    Returns
    -------
    Keypoints2D
        The projected keypoints.

    """
    return Keypoints2D(project_points(points, cam, intr))


def rep25d_from_2d(kps: Keypoints2D, cam: CameraPose, intr: Intrinsics) -> Rep25D:
    """Build the 2.5D representation from 2D keypoints and their camera.

    Parameters
    ----------
    kps : Keypoints2D
        The 2D keypoints.
    cam : CameraPose
        The camera the keypoints were seen from.
    intr : Intrinsics
        The intrinsics.

    Returns
    -------
    Rep25D
        Unit rays R_cam (u, v, f) plus the camera center.

    """
    points = kps.points
    focal = torch.full_like(points[:, :1], float(intr.focal))
    rays = torch.cat([points, focal], dim=1) @ cam.rotation.T
    return Rep25D(rays / torch.linalg.norm(rays, dim=1, keepdim=True), cam.translation)


def rep25d_from_3d(kps: KeypointSet | ArrayLike, t_cam: ArrayLike) -> Rep25D:
    """Build the 2.5D representation from 3D keypoints and a camera center.

    Parameters
    ----------
    kps : KeypointSet | ArrayLike
        The 3D keypoints in the body-local frame.
    t_cam : ArrayLike
        The camera center.

    Returns
    -------
    Rep25D
        Unit rays from the camera center to each keypoint.

    """
    points = kps.points if isinstance(kps, KeypointSet) else as_tensor(kps).reshape(-1, 3)
    t_cam = as_tensor(t_cam).reshape(3)
    offsets = points - t_cam
    norms = torch.linalg.norm(offsets, dim=1, keepdim=True)
    degenerate = torch.nonzero(norms.detach()[:, 0] <= EPS_RAY)
    if degenerate.numel():
        raise DegenerateRayError(int(degenerate[0, 0]))
    return Rep25D(offsets / norms, t_cam)


def point_ray_distance(points: ArrayLike, rep: Rep25D) -> Tensor:
    """Get the distance of each point from its ray in a representation.

    Parameters
    ----------
    points : ArrayLike
        The (n, 3) points.
    rep : Rep25D
        The rays, one per point.

    Returns
    -------
    Tensor
        The (n,) perpendicular distances.

    """
    points = as_tensor(points).reshape(-1, 3)
    if points.shape[0] != rep.n:
        msg = f"Got {points.shape[0]} points for {rep.n} rays"
        raise DimensionMismatchError(msg)
    offsets = points - rep.cam_translation
    along = (offsets * rep.directions).sum(dim=1, keepdim=True)
    return torch.linalg.norm(offsets - along * rep.directions, dim=1)


# Image coordinate converters ---------------------------------------------------


def centered_to_pixel(uv: ArrayLike, intr: Intrinsics) -> Tensor:
    """Convert centered coordinates to top-left pixel coordinates (column, row)."""
    uv = as_tensor(uv)
    return uv + torch.tensor([intr.width / 2, intr.height / 2], dtype=uv.dtype)


def pixel_to_centered(pixels: ArrayLike, intr: Intrinsics) -> Tensor:
    """Convert top-left pixel coordinates (column, row) to centered coordinates."""
    pixels = as_tensor(pixels)
    return pixels - torch.tensor([intr.width / 2, intr.height / 2], dtype=pixels.dtype)
