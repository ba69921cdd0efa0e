"""Silhouette rendering and occlusion maps.

Meshes are rasterised with a z-buffer at pixel centers, using edge functions
for coverage and perspective-correct interpolation of depth. Triangles with a
vertex on or behind the near plane are skipped. The occlusion map marks the
vertices of each mesh which sit in the overlap of the two silhouettes and
which the front/back rules say are hidden by, or hide behind, the other mesh.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import Array, IndexArray, as_array
from hoiprior.lib.error import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    EmptyProjectionError,
    ValidationError,
)
from hoiprior.lib.models import CameraPose, Intrinsics, Mesh
from hoiprior.lib.projection import EPS_DEPTH
from hoiprior.lib.util import config_from_dict

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

EPS_FRONT = 1e-3
EPS_BARYCENTRIC = 1e-12

Resolution = int | tuple[int, int]


@dataclass(frozen=True)
class OcclusionConfig:
    """Settings for occlusion maps.

    Attributes
    ----------
    resolution : int
        Width and height of the square render, default 256.
    eps_front : float
        Depth tolerance of the front-surface test in meters, default 1e-3.

    """

    resolution: int = 256
    eps_front: float = EPS_FRONT

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.resolution < 1 or self.eps_front < 0:
            msg = "resolution must be positive and eps_front nonnegative"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> OcclusionConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)


@dataclass(frozen=True)
class RenderResult:
    """The buffers of a two-mesh render.

    The depth buffers hold camera-frame depth and are infinite where the
    mesh does not cover a pixel. The person mask is where the human covers
    the pixel and is not behind the object, and the object mask the reverse.
    """

    depth_h: Array
    depth_o: Array
    person_mask: Array
    object_mask: Array
    occlusion_region: Array
    intrinsics: Intrinsics

    @property
    def silhouette_h(self) -> Array:
        """Pixels covered by the human."""
        return np.isfinite(self.depth_h)

    @property
    def silhouette_o(self) -> Array:
        """Pixels covered by the object."""
        return np.isfinite(self.depth_o)


@dataclass(frozen=True)
class OcclusionMap:
    """Per-vertex binary occlusion of the human and object meshes.

    The front arrays record which vertices were classed as front-surface, so
    the occluded vertices can be split into front and back sets.
    """

    human: Array
    object: Array
    human_front: Array | None = field(default=None, repr=False)
    object_front: Array | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        """Store the maps as 0/1 float arrays."""
        object.__setattr__(self, "human", np.asarray(self.human, dtype=np.float64))
        object.__setattr__(self, "object", np.asarray(self.object, dtype=np.float64))
        if not np.isin(self.human, (0.0, 1.0)).all() or not np.isin(self.object, (0.0, 1.0)).all():
            msg = "Occlusion map entries must be 0 or 1"
            raise ValidationError(msg)


@dataclass(frozen=True)
class MeanOcclusionMap:
    """Per-vertex occlusion frequency over a set of images."""

    human: Array
    object: Array
    count: int

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"human": self.human.tolist(), "object": self.object.tolist(), "count": int(self.count)}

    @classmethod
    def from_dict(cls, values: dict) -> MeanOcclusionMap:
        """Create from a dict written by to_dict."""
        return cls(
            np.asarray(values["human"], dtype=np.float64),
            np.asarray(values["object"], dtype=np.float64),
            int(values["count"]),
        )


# Rasterisation -------------------------------------------------------------------


def _resolution(resolution: Resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    return int(resolution[0]), int(resolution[1])


def _edge(a: Array, b: Array, px: Array, py: Array) -> Array:
    return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])


def rasterize_depth(points_cam: Array, faces: IndexArray, intr: Intrinsics) -> tuple[Array, int]:
    """Rasterise a mesh given in camera coordinates into a depth buffer.

    Parameters
    ----------
    points_cam : Array
        The (V, 3) camera-frame vertices.
    faces : IndexArray
        The (F, 3) triangles.
    intr : Intrinsics
        The intrinsics of the render, setting its size.

    Returns
    -------
    tuple[Array, int]
        The (height, width) depth buffer, infinite where uncovered, and the
        number of triangles in front of the camera.

    """
    width, height = intr.width, intr.height
    zbuf = np.full((height, width), np.inf)
    if faces.size == 0:
        return zbuf, 0
    triangles = points_cam[faces]
    depths = triangles[..., 2]
    in_front = np.all(depths > EPS_DEPTH, axis=1)
    triangles, depths = triangles[in_front], depths[in_front]
    screen = intr.focal * triangles[..., :2] / depths[..., None] + np.array([width / 2, height / 2])

    for corners, z in zip(screen, depths, strict=True):
        low, high = corners.min(axis=0), corners.max(axis=0)
        col_min, col_max = max(math.ceil(low[0] - 0.5), 0), min(math.floor(high[0] - 0.5), width - 1)
        row_min, row_max = max(math.ceil(low[1] - 0.5), 0), min(math.floor(high[1] - 0.5), height - 1)
        if col_min > col_max or row_min > row_max:
            continue
        area = _edge(corners[0], corners[1], corners[2][0], corners[2][1])
        if abs(area) < EPS_BARYCENTRIC:
            continue
        px, py = np.meshgrid(np.arange(col_min, col_max + 1) + 0.5, np.arange(row_min, row_max + 1) + 0.5)
        l0 = _edge(corners[1], corners[2], px, py) / area
        l1 = _edge(corners[2], corners[0], px, py) / area
        l2 = _edge(corners[0], corners[1], px, py) / area
        inside = (l0 >= -EPS_BARYCENTRIC) & (l1 >= -EPS_BARYCENTRIC) & (l2 >= -EPS_BARYCENTRIC)
        if not inside.any():
            continue
        inverse_depth = l0 / z[0] + l1 / z[1] + l2 / z[2]
        depth = np.where(inside, 1.0 / np.where(inside, inverse_depth, 1.0), np.inf)
        block = zbuf[row_min : row_max + 1, col_min : col_max + 1]
        np.minimum(block, depth, out=block)

    return zbuf, int(in_front.sum())


def _camera_points(mesh: Mesh, cam: CameraPose) -> Array:
    return (as_array(mesh.vertices) - as_array(cam.translation)) @ as_array(cam.rotation)


def render_masks(
    mesh_h: Mesh,
    mesh_o: Mesh,
    cam: CameraPose,
    intr: Intrinsics,
    resolution: Resolution = 256,
) -> RenderResult:
    """Render the human and object silhouettes, masks and depth buffers.

    Parameters
    ----------
    mesh_h : Mesh
        The human mesh, body-local frame.
    mesh_o : Mesh
        The object mesh, body-local frame.
    cam : CameraPose
        The camera.
    intr : Intrinsics
        The intrinsics of the full image; the render is the same view at the
        given resolution.
    resolution : Resolution
        The render size, an int for a square or (width, height).

    Returns
    -------
    RenderResult
        The buffers.

    """
    width, height = _resolution(resolution)
    render_intr = intr.scaled_to(width, height)
    depth_h, front_h = rasterize_depth(_camera_points(mesh_h, cam), mesh_h.faces, render_intr)
    depth_o, front_o = rasterize_depth(_camera_points(mesh_o, cam), mesh_o.faces, render_intr)
    if front_h == 0 or front_o == 0:
        msg = "Every triangle of a mesh is behind the camera"
        raise EmptyProjectionError(msg)

    silhouette_h, silhouette_o = np.isfinite(depth_h), np.isfinite(depth_o)
    return RenderResult(
        depth_h=depth_h,
        depth_o=depth_o,
        person_mask=silhouette_h & (depth_h <= depth_o),
        object_mask=silhouette_o & (depth_o < depth_h),
        occlusion_region=silhouette_h & silhouette_o,
        intrinsics=render_intr,
    )


# Occlusion -----------------------------------------------------------------------


def _vertex_occlusion(
    points_cam: Array,
    own_depth: Array,
    visible_mask: Array,
    occlusion_region: Array,
    intr: Intrinsics,
    eps_front: float,
) -> tuple[Array, Array]:
    """Apply the front/back rules to the vertices of one mesh.

    Returns
    -------
    tuple[Array, Array]
        The occluded and front-surface flags.

    """
    occluded = np.zeros(points_cam.shape[0], dtype=bool)
    front = np.zeros(points_cam.shape[0], dtype=bool)
    depth = points_cam[:, 2]
    ahead = depth > EPS_DEPTH
    safe_depth = np.where(ahead, depth, 1.0)
    cols = np.floor(intr.focal * points_cam[:, 0] / safe_depth + intr.width / 2)
    rows = np.floor(intr.focal * points_cam[:, 1] / safe_depth + intr.height / 2)
    inside = ahead & (cols >= 0) & (cols < intr.width) & (rows >= 0) & (rows < intr.height)

    index = np.flatnonzero(inside)
    r, c = rows[index].astype(np.int64), cols[index].astype(np.int64)
    is_front = depth[index] <= own_depth[r, c] + eps_front
    in_region = occlusion_region[r, c]
    visible = visible_mask[r, c]
    occluded[index] = in_region & np.where(is_front, ~visible, visible)
    front[index] = is_front
    return occluded, front


def occlusion_map(  # noqa: PLR0913
    mesh_h: Mesh,
    mesh_o: Mesh,
    cam: CameraPose,
    intr: Intrinsics,
    resolution: Resolution = 256,
    person_mask: Array | None = None,
    object_mask: Array | None = None,
    eps_front: float = EPS_FRONT,
) -> OcclusionMap:
    """Get the per-vertex occlusion maps of a human and an object.

    A front-surface vertex, one at the depth of its own mesh's z-buffer, is
    occluded when its pixel is in the silhouette overlap and its own mask is
    off there. A back-surface vertex is occluded when its pixel is in the
    overlap and its own mask is on. Vertices outside the image are never
    occluded.

    Parameters
    ----------
    mesh_h : Mesh
        The human mesh.
    mesh_o : Mesh
        The object mesh.
    cam : CameraPose
        The camera.
    intr : Intrinsics
        The intrinsics of the full image.
    resolution : Resolution
        The render size.
    person_mask : Array | None
        An observed person mask at the render resolution to use in place of
        the rendered one.
    object_mask : Array | None
        An observed object mask at the render resolution to use in place of
        the rendered one.
    eps_front : float
        The front-surface depth tolerance, meters.

    Returns
    -------
    OcclusionMap
        The binary maps.

    """
    render = render_masks(mesh_h, mesh_o, cam, intr, resolution)
    shape = render.depth_h.shape
    for name, mask in (("person", person_mask), ("object", object_mask)):
        if mask is not None and np.shape(mask) != shape:
            msg = f"Observed {name} mask has shape {np.shape(mask)}, the render is {shape}"
            raise DimensionMismatchError(msg)
    person = render.person_mask if person_mask is None else np.asarray(person_mask, dtype=bool)
    obj = render.object_mask if object_mask is None else np.asarray(object_mask, dtype=bool)

    human, human_front = _vertex_occlusion(
        _camera_points(mesh_h, cam),
        render.depth_h,
        person,
        render.occlusion_region,
        render.intrinsics,
        eps_front,
    )
    object_occluded, object_front = _vertex_occlusion(
        _camera_points(mesh_o, cam),
        render.depth_o,
        obj,
        render.occlusion_region,
        render.intrinsics,
        eps_front,
    )
    return OcclusionMap(human, object_occluded, human_front, object_front)


def mean_occlusion_map(maps: list[OcclusionMap]) -> MeanOcclusionMap:
    """Average occlusion maps over images.

    Parameters
    ----------
    maps : list[OcclusionMap]
        The per-image maps, all over the same meshes.

    Returns
    -------
    MeanOcclusionMap
        The fraction of images each vertex is occluded in.

    """
    if not maps:
        msg = "Cannot average an empty list of occlusion maps"
        raise EmptyInputError(msg)
    if len({(m.human.shape, m.object.shape) for m in maps}) > 1:
        msg = "Occlusion maps have different vertex counts"
        raise DimensionMismatchError(msg)
    human = np.sum([m.human for m in maps], axis=0) / len(maps)
    obj = np.sum([m.object for m in maps], axis=0) / len(maps)
    return MeanOcclusionMap(human, obj, len(maps))


def contact_candidates(occ: OcclusionMap, mean: MeanOcclusionMap, eta: float) -> tuple[IndexArray, IndexArray]:
    """Get the contact candidate vertices of the human and the object.

    Parameters
    ----------
    occ : OcclusionMap
        The occlusion map of the image.
    mean : MeanOcclusionMap
        The mean occlusion map.
    eta : float
        The threshold on the product of the two maps.

    Returns
    -------
    tuple[IndexArray, IndexArray]
        The human and object vertex indices with c * c_mean > eta.

    """
    if occ.human.shape != mean.human.shape or occ.object.shape != mean.object.shape:
        msg = "Occlusion map and mean occlusion map have different vertex counts"
        raise DimensionMismatchError(msg)
    return np.flatnonzero(occ.human * mean.human > eta), np.flatnonzero(occ.object * mean.object > eta)


def mask_iou(mask_a: Array, mask_b: Array) -> float:
    """Get the intersection over union of two binary masks, 1 when both are empty."""
    mask_a, mask_b = np.asarray(mask_a, dtype=bool), np.asarray(mask_b, dtype=bool)
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)
