"""Reconstruction metrics.

Chamfer distances are the mean of the two directed mean nearest-neighbor
distances, (mean_a min_b |a - b| + mean_b min_a |a - b|) / 2, in
centimeters. Surfaces are compared through area-weighted samples drawn once
on the ground truth topology and placed with the same barycentric
coordinates on both meshes, so the samples correspond and can be aligned.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from prettytable import PrettyTable
from scipy.spatial import cKDTree

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import Array, ArrayLike, IndexArray, as_array
from hoiprior.lib.error import (
    ConfigError,
    DimensionMismatchError,
    EmptyInputError,
    RankDeficientError,
    TemplateMismatchError,
    ZeroAreaMeshError,
)
from hoiprior.lib.kinematics import InteractionModel
from hoiprior.lib.models import Mesh, SceneParams
from hoiprior.lib.util import config_from_dict, geodesic_angle_deg

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

MODES = ("wildhoi", "behave")
METRICS = (
    "smpl_chamfer_cm",
    "object_chamfer_cm",
    "rotation_error_deg",
    "translation_error_cm",
    "smpl_chamfer_scaled_cm",
    "object_chamfer_scaled_cm",
)
RANK_TOLERANCE = 1e-9
CHAMFER_CONVENTION = "(mean_a min_b |a-b| + mean_b min_a |a-b|) / 2, cm"


@dataclass(frozen=True)
class EvalConfig:
    """Settings of the metrics.

    Attributes
    ----------
    mode : str
        "wildhoi" roots both scenes at the pelvis and compares without
        alignment; "behave" aligns each mesh by Procrustes first. Default
        "wildhoi".
    n_samples : int
        Surface samples per mesh, default 10000.
    rng_seed : int
        Seed of the surface samples, default 0.
    pelvis_joint : int
        Index of the root joint, default 0.

    """

    mode: str = "wildhoi"
    n_samples: int = 10000
    rng_seed: int = 0
    pelvis_joint: int = 0

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.mode not in MODES:
            msg = f"mode must be one of {MODES}, got '{self.mode}'"
            raise ConfigError(msg)
        if self.n_samples < 1 or self.pelvis_joint < 0:
            msg = "n_samples must be positive and pelvis_joint nonnegative"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> EvalConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)


@dataclass(frozen=True)
class PointCloud:
    """An (N, 3) set of points in meters."""

    points: Array

    def __post_init__(self) -> None:
        """Store the points as an (N, 3) array."""
        object.__setattr__(self, "points", as_array(self.points).reshape(-1, 3))

    @property
    def n(self) -> int:
        """The number of points."""
        return int(self.points.shape[0])


@dataclass(frozen=True)
class Alignment:
    """A similarity transform x -> s x R^T + t."""

    rotation: Array
    translation: Array
    scale: float = 1.0

    def apply(self, cloud: PointCloud) -> PointCloud:
        """Transform a point cloud."""
        return PointCloud(self.scale * cloud.points @ self.rotation.T + self.translation)


@dataclass
class MetricReport:
    """The metrics of one scene.

    The scaled chamfer fields are only filled in by the aligned mode.
    """

    smpl_chamfer_cm: float
    object_chamfer_cm: float
    rotation_error_deg: float
    translation_error_cm: float
    smpl_chamfer_scaled_cm: float | None = None
    object_chamfer_scaled_cm: float | None = None
    mode: str = "wildhoi"
    image_id: str = ""

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> MetricReport:
        """Create from a dict written by to_dict."""
        return cls(**values)


# Sampling ----------------------------------------------------------------------


def sample_barycentric(mesh: Mesh, n: int, rng: np.random.Generator) -> tuple[IndexArray, Array]:
    """Draw area-weighted surface locations as faces and barycentric coordinates.

    Parameters
    ----------
    mesh : Mesh
        The mesh.
    n : int
        The number of samples.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    tuple[IndexArray, Array]
        The (n,) face indices and (n, 3) barycentric coordinates.

    """
    areas = mesh.face_areas()
    total = float(areas.sum())
    if not total > 0:
        msg = "Cannot sample a mesh with zero surface area"
        raise ZeroAreaMeshError(msg)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1, r2 = rng.random(n), rng.random(n)
    root = np.sqrt(r1)
    bary = np.stack([1.0 - root, root * (1.0 - r2), root * r2], axis=1)
    return faces.astype(np.int64), bary


def points_on_surface(vertices: ArrayLike, faces: IndexArray, face_index: IndexArray, bary: Array) -> PointCloud:
    """Place barycentric samples on a mesh."""
    triangles = as_array(vertices)[faces[face_index]]
    return PointCloud(np.einsum("nk,nkd->nd", bary, triangles))


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Draw points uniformly from the surface of a mesh.

    Parameters
    ----------
    mesh : Mesh
        The mesh.
    n : int
        The number of points.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    PointCloud
        The samples.

    """
    face_index, bary = sample_barycentric(mesh, n, rng)
    return points_on_surface(mesh.vertices, mesh.faces, face_index, bary)


# Alignment and distance ----------------------------------------------------------


def procrustes_align(source: PointCloud, target: PointCloud, *, with_scale: bool = False) -> Alignment:
    """Find the least squares transform of corresponding points onto a target.

    Parameters
    ----------
    source : PointCloud
        The points to move.
    target : PointCloud
        The points to move onto, in the same order.
    with_scale : bool
        Also fit a uniform scale.

    Returns
    -------
    Alignment
        The rotation, translation and scale minimising |s a R^T + t - b|^2.

    """
    if source.n != target.n:
        msg = f"Procrustes needs corresponding points, got {source.n} and {target.n}"
        raise DimensionMismatchError(msg)
    a_mean, b_mean = source.points.mean(axis=0), target.points.mean(axis=0)
    a, b = source.points - a_mean, target.points - b_mean
    if source.n < 3 or np.linalg.matrix_rank(a, tol=RANK_TOLERANCE) < 2:  # noqa: PLR2004
        msg = "Procrustes alignment needs at least three non-collinear points"
        raise RankDeficientError(msg)

    u, sigma, vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ vt))
    correction = np.diag([1.0, 1.0, d])
    rotation = u @ correction @ vt
    scale = float((sigma * np.diag(correction)).sum() / (a**2).sum()) if with_scale else 1.0
    translation = b_mean - scale * a_mean @ rotation.T
    return Alignment(rotation, translation, scale)


def chamfer(cloud_a: PointCloud, cloud_b: PointCloud) -> float:
    """Get the symmetric chamfer distance between two clouds, in centimeters.

    Parameters
    ----------
    cloud_a : PointCloud
        The first cloud.
    cloud_b : PointCloud
        The second cloud.

    Returns
    -------
    float
        The mean of the two directed mean nearest-neighbor distances.

    """
    if cloud_a.n == 0 or cloud_b.n == 0:
        msg = "Cannot take the chamfer distance of an empty point cloud"
        raise EmptyInputError(msg)
    a_to_b, _ = cKDTree(cloud_b.points).query(cloud_a.points, k=1)
    b_to_a, _ = cKDTree(cloud_a.points).query(cloud_b.points, k=1)
    return 100.0 * (float(np.mean(a_to_b)) + float(np.mean(b_to_a))) / 2.0


# Scene metrics -----------------------------------------------------------------


def _check_meshes(mesh: Mesh, gt_mesh: Mesh, name: str) -> None:
    if mesh.num_vertices != gt_mesh.num_vertices or mesh.faces.shape != gt_mesh.faces.shape:
        msg = f"The {name} meshes of prediction and ground truth do not share a template"
        raise TemplateMismatchError(msg)


def _aligned_chamfer(mesh: Mesh, gt_mesh: Mesh, face_index: IndexArray, bary: Array, *, with_scale: bool) -> float:
    """Align a mesh onto its ground truth on vertex correspondences, then compare samples."""
    alignment = procrustes_align(PointCloud(mesh.vertices), PointCloud(gt_mesh.vertices), with_scale=with_scale)
    samples = alignment.apply(points_on_surface(mesh.vertices, gt_mesh.faces, face_index, bary))
    return chamfer(samples, points_on_surface(gt_mesh.vertices, gt_mesh.faces, face_index, bary))


def evaluate(
    scene: SceneParams,
    gt_scene: SceneParams,
    model: InteractionModel,
    mode: str | None = None,
    cfg: EvalConfig | None = None,
) -> MetricReport:
    """Compare a reconstructed scene with the ground truth.

    Parameters
    ----------
    scene : SceneParams
        The reconstruction.
    gt_scene : SceneParams
        The ground truth.
    model : InteractionModel
        The body model and object template both scenes use.
    mode : str | None
        "wildhoi" or "behave", the config's mode if None.
    cfg : EvalConfig | None
        The settings, defaults if None.

    Returns
    -------
    MetricReport
        The chamfer distances of both meshes and the object pose errors.

    """
    cfg = cfg or EvalConfig()
    mode = mode or cfg.mode
    if mode not in MODES:
        msg = f"mode must be one of {MODES}, got '{mode}'"
        raise ConfigError(msg)

    keypoints, mesh_h, mesh_o = model.geometry(scene.detached())
    gt_keypoints, gt_mesh_h, gt_mesh_o = model.geometry(gt_scene.detached())
    _check_meshes(mesh_h, gt_mesh_h, "body")
    _check_meshes(mesh_o, gt_mesh_o, "object")

    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    body_samples = sample_barycentric(gt_mesh_h, cfg.n_samples, rng)
    object_samples = sample_barycentric(gt_mesh_o, cfg.n_samples, rng)

    pelvis = as_array(keypoints.human[cfg.pelvis_joint])
    gt_pelvis = as_array(gt_keypoints.human[cfg.pelvis_joint])
    rotation_error = geodesic_angle_deg(gt_scene.object.rotation, scene.object.rotation)
    translation_error = object_translation_error(scene, gt_scene, pelvis, gt_pelvis)

    if mode == "behave":
        return MetricReport(
            smpl_chamfer_cm=_aligned_chamfer(mesh_h, gt_mesh_h, *body_samples, with_scale=False),
            object_chamfer_cm=_aligned_chamfer(mesh_o, gt_mesh_o, *object_samples, with_scale=False),
            rotation_error_deg=rotation_error,
            translation_error_cm=translation_error,
            smpl_chamfer_scaled_cm=_aligned_chamfer(mesh_h, gt_mesh_h, *body_samples, with_scale=True),
            object_chamfer_scaled_cm=_aligned_chamfer(mesh_o, gt_mesh_o, *object_samples, with_scale=True),
            mode=mode,
        )

    def rooted(mesh: Mesh, gt_mesh: Mesh, samples: tuple[IndexArray, Array]) -> float:
        cloud = points_on_surface(as_array(mesh.vertices) - pelvis, gt_mesh.faces, *samples)
        gt_cloud = points_on_surface(as_array(gt_mesh.vertices) - gt_pelvis, gt_mesh.faces, *samples)
        return chamfer(cloud, gt_cloud)

    return MetricReport(
        smpl_chamfer_cm=rooted(mesh_h, gt_mesh_h, body_samples),
        object_chamfer_cm=rooted(mesh_o, gt_mesh_o, object_samples),
        rotation_error_deg=rotation_error,
        translation_error_cm=translation_error,
        mode=mode,
    )


def aggregate(reports: list[MetricReport]) -> dict:
    """Get the mean and median of every metric over scenes.

    Parameters
    ----------
    reports : list[MetricReport]
        The per-scene reports.

    Returns
    -------
    dict[str, dict[str, float]]
        For each metric present in every report, its mean and median.

    """
    if not reports:
        msg = "No reports to aggregate"
        raise EmptyInputError(msg)
    summary = {"chamfer_convention": CHAMFER_CONVENTION, "count": len(reports)}
    for metric in METRICS:
        values = [getattr(r, metric) for r in reports]
        if any(v is None for v in values):
            continue
        summary[metric] = {"mean": float(np.mean(values)), "median": float(np.median(values))}
    return summary


def summary_table(summary: dict) -> PrettyTable:
    """Format an aggregate summary as a console table."""
    table = PrettyTable()
    table.field_names = ["Metric", "Mean", "Median"]
    for metric in METRICS:
        if metric in summary:
            table.add_row([metric, f"{summary[metric]['mean']:.3f}", f"{summary[metric]['median']:.3f}"])
    table.align["Metric"] = "l"
    return table


def object_translation_error(
    scene: SceneParams,
    gt_scene: SceneParams,
    root: ArrayLike | None = None,
    gt_root: ArrayLike | None = None,
) -> float:
    """Get the object translation error in centimeters.

    Parameters
    ----------
    scene : SceneParams
        The estimated scene.
    gt_scene : SceneParams
        The ground truth scene.
    root : ArrayLike | None
        The point of the estimated scene the translation is taken from, the
        body-local origin when None.
    gt_root : ArrayLike | None
        The same point of the ground truth scene.

    Returns
    -------
    float
        100 |(t - root) - (t_gt - gt_root)|.

    """
    translation = as_array(scene.object.translation) - (0.0 if root is None else as_array(root))
    gt_translation = as_array(gt_scene.object.translation) - (0.0 if gt_root is None else as_array(gt_root))
    return 100.0 * float(np.linalg.norm(translation - gt_translation))
