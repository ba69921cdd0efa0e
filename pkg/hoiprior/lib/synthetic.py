"""Synthetic multi-view interaction datasets.

Each family is a base scene, a posed body holding an object near the right
wrist, seen from cameras on a jittered ring. Every view of a family gets a
small jitter of the body pose and object pose, so the views of a family have
near-identical 2.5D representations while views of different families do not.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import as_array
from hoiprior.lib.dataset import Dataset, DatasetRecord, write_dataset
from hoiprior.lib.error import ConfigError
from hoiprior.lib.kinematics import JOINT_NAMES, BodyModel, InteractionModel, ObjectTemplate, body_keypoints
from hoiprior.lib.models import BodyParams, CameraPose, Intrinsics, ObjectPose, SceneParams
from hoiprior.lib.projection import project
from hoiprior.lib.render import render_masks
from hoiprior.lib.util import config_from_dict

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

HOLDING_JOINT = "right_wrist"


@dataclass(frozen=True)
class SyntheticFamilyConfig:
    """Settings of the synthetic dataset generator.

    Attributes
    ----------
    n_scenes : int
        Number of families, default 8.
    views_per_scene : int
        Views of each family, default 20.
    ring_radius : float
        Distance of the cameras from the pelvis in meters, default 3.0.
    ring_jitter : float
        Std of the camera center jitter in meters, default 0.1.
    camera_height : float
        Height of the ring above the pelvis in meters, default 0.2.
    pose_spread : float
        Std of the base body pose in radians, default 0.15.
    shape_spread : float
        Std of the base body shape coefficients, default 0.5.
    object_spread : float
        Std of the object offset from the wrist in meters, default 0.1.
    body_jitter : float
        Std of the per-view body pose jitter in radians, default 0.02.
    object_jitter : float
        Std of the per-view object jitter, radians and meters, default 0.01.
    noise_sigma : float
        Std of the keypoint pixel noise, default 0.
    focal : float
        Focal length in pixels, default 1000.
    image_size : int
        Width and height of the images, default 1000.
    mask_resolution : int
        Size of the rendered masks, 0 for no masks, default 128.
    rng_seed : int
        Seed of the generator, default 0.

    """

    n_scenes: int = 8
    views_per_scene: int = 20
    ring_radius: float = 3.0
    ring_jitter: float = 0.1
    camera_height: float = 0.2
    pose_spread: float = 0.15
    shape_spread: float = 0.5
    object_spread: float = 0.1
    body_jitter: float = 0.02
    object_jitter: float = 0.01
    noise_sigma: float = 0.0
    focal: float = 1000.0
    image_size: int = 1000
    mask_resolution: int = 128
    rng_seed: int = 0

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.n_scenes < 1 or self.views_per_scene < 1 or self.image_size < 1:
            msg = "n_scenes, views_per_scene and image_size must be positive"
            raise ConfigError(msg)
        if self.ring_radius <= 0 or self.focal <= 0:
            msg = "ring_radius and focal must be positive"
            raise ConfigError(msg)
        spreads = (
            self.ring_jitter,
            self.pose_spread,
            self.shape_spread,
            self.object_spread,
            self.body_jitter,
            self.object_jitter,
            self.noise_sigma,
        )
        if min(spreads) < 0 or self.mask_resolution < 0:
            msg = "Jitters, spreads, noise and mask_resolution must be nonnegative"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> SyntheticFamilyConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)

    @property
    def intrinsics(self) -> Intrinsics:
        """The intrinsics of every image."""
        return Intrinsics(self.focal, self.image_size, self.image_size)


# Scenes ------------------------------------------------------------------------


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.from_quat(rng.standard_normal(4)).as_matrix()


def _holding_joint(body: BodyModel) -> int:
    if body.joint_count == len(JOINT_NAMES):
        return JOINT_NAMES.index(HOLDING_JOINT)
    return body.joint_count - 1


def sample_base_scene(cfg: SyntheticFamilyConfig, body: BodyModel, rng: np.random.Generator) -> SceneParams:
    """Draw the base scene of a family.

    Parameters
    ----------
    cfg : SyntheticFamilyConfig
        The settings.
    body : BodyModel
        The body model.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    SceneParams
        A body in a random pose holding a randomly rotated object.

    """
    params = BodyParams(
        cfg.shape_spread * rng.standard_normal(body.num_betas),
        cfg.pose_spread * rng.standard_normal(3 * (body.joint_count - 1)),
    )
    wrist = as_array(body_keypoints(body, params))[_holding_joint(body)]
    translation = wrist + cfg.object_spread * rng.standard_normal(3)
    return SceneParams(params, ObjectPose(_random_rotation(rng), translation))


def jitter_scene(
    scene: SceneParams,
    body_sigma: float,
    object_sigma: float,
    rng: np.random.Generator,
) -> SceneParams:
    """Apply small Gaussian jitter to the body pose and the object pose.

    Parameters
    ----------
    scene : SceneParams
        The scene.
    body_sigma : float
        Std of the joint rotations in radians.
    object_sigma : float
        Std of the object rotation vector in radians and its translation in
        meters.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    SceneParams
        The jittered scene, the same scene when both stds are 0.

    """
    if body_sigma == 0 and object_sigma == 0:
        return scene.detached()
    theta = as_array(scene.body.theta) + body_sigma * rng.standard_normal(scene.body.theta.shape[0])
    delta = Rotation.from_rotvec(object_sigma * rng.standard_normal(3)).as_matrix()
    translation = as_array(scene.object.translation) + object_sigma * rng.standard_normal(3)
    return SceneParams(
        BodyParams(scene.body.beta.detach().clone(), theta),
        ObjectPose(delta @ as_array(scene.object.rotation), translation, scene.object.scale.detach().clone()),
    )


def perturb_scene(
    scene: SceneParams,
    rotation_deg: float,
    translation: float,
    rng: np.random.Generator,
) -> SceneParams:
    """Move the object by an exact rotation angle and translation distance.

    The rotation axis and translation direction are uniformly random.

    Parameters
    ----------
    scene : SceneParams
        The scene.
    rotation_deg : float
        The rotation angle in degrees.
    translation : float
        The translation distance in meters.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    SceneParams
        The perturbed scene, with the body unchanged.

    """
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    delta = Rotation.from_rotvec(math.radians(rotation_deg) * axis).as_matrix()
    scene = scene.detached()
    return SceneParams(
        scene.body,
        ObjectPose(
            delta @ as_array(scene.object.rotation),
            as_array(scene.object.translation) + translation * direction,
            scene.object.scale,
        ),
    )


# Views -------------------------------------------------------------------------


def ring_cameras(cfg: SyntheticFamilyConfig, count: int, rng: np.random.Generator) -> list[CameraPose]:
    """Place cameras on a jittered ring around the pelvis, all looking at it.

    Parameters
    ----------
    cfg : SyntheticFamilyConfig
        The settings.
    count : int
        The number of cameras.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    list[CameraPose]
        Cameras at evenly spaced azimuths with a random phase.

    """
    phase = rng.uniform(0, 2 * np.pi)
    cameras = []
    for view in range(count):
        azimuth = phase + 2 * np.pi * view / count
        center = np.array([cfg.ring_radius * np.sin(azimuth), cfg.camera_height, cfg.ring_radius * np.cos(azimuth)])
        center += cfg.ring_jitter * rng.standard_normal(3)
        cameras.append(CameraPose.look_at(center, np.zeros(3)))
    return cameras


def render_record(  # noqa: PLR0913
    image_id: str,
    scene: SceneParams,
    cam: CameraPose,
    model: InteractionModel,
    cfg: SyntheticFamilyConfig,
    rng: np.random.Generator,
    family: int | None = None,
) -> DatasetRecord:
    """Project and render one view of a scene into a record.

    Parameters
    ----------
    image_id : str
        The id of the image.
    scene : SceneParams
        The ground truth scene.
    cam : CameraPose
        The camera.
    model : InteractionModel
        The body model and object template.
    cfg : SyntheticFamilyConfig
        The settings.
    rng : np.random.Generator
        The random generator of the keypoint noise.
    family : int | None
        The family label.

    Returns
    -------
    DatasetRecord
        The record, with unit confidences and the ground truth scene.

    """
    intr = cfg.intrinsics
    kps, mesh_h, mesh_o = model.geometry(scene)
    points = as_array(project(kps.points.detach(), cam, intr).points)
    if cfg.noise_sigma > 0:
        points = points + cfg.noise_sigma * rng.standard_normal(points.shape)

    person_mask = object_mask = None
    if cfg.mask_resolution > 0:
        render = render_masks(mesh_h, mesh_o, cam, intr, cfg.mask_resolution)
        person_mask, object_mask = render.person_mask, render.object_mask

    return DatasetRecord(
        image_id=image_id,
        intrinsics=intr,
        camera=cam,
        human_keypoints=points[: kps.n_human],
        human_confidence=np.ones(kps.n_human),
        object_keypoints=points[kps.n_human :],
        object_confidence=np.ones(kps.n_object),
        person_mask=person_mask,
        object_mask=object_mask,
        gt_scene=scene,
        family=family,
    )


def family_records(
    base: SceneParams,
    family: int,
    model: InteractionModel,
    cfg: SyntheticFamilyConfig,
    rng: np.random.Generator,
) -> list[DatasetRecord]:
    """Get the records of every view of one family.

    Parameters
    ----------
    base : SceneParams
        The base scene.
    family : int
        The family label, also used in the image ids.
    model : InteractionModel
        The body model and object template.
    cfg : SyntheticFamilyConfig
        The settings.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    list[DatasetRecord]
        views_per_scene records.

    """
    records = []
    for view, cam in enumerate(ring_cameras(cfg, cfg.views_per_scene, rng)):
        scene = jitter_scene(base, cfg.body_jitter, cfg.object_jitter, rng)
        records.append(render_record(f"f{family:03d}_v{view:03d}", scene, cam, model, cfg, rng, family))
    return records


def synth_generate(
    cfg: SyntheticFamilyConfig,
    body: BodyModel,
    template: ObjectTemplate,
    out_dir: str | Path | None = None,
) -> Dataset:
    """Generate a synthetic dataset and optionally write it.

    Parameters
    ----------
    cfg : SyntheticFamilyConfig
        The settings.
    body : BodyModel
        The body model.
    template : ObjectTemplate
        The object template.
    out_dir : str | Path | None
        The dataset directory to write, nothing is written when None.

    Returns
    -------
    Dataset
        n_scenes * views_per_scene records with ground truth.

    """
    model = InteractionModel(body, template)
    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    records = []
    with torch.no_grad():
        for family in range(cfg.n_scenes):
            base = sample_base_scene(cfg, body, rng)
            records += family_records(base, family, model, cfg, rng)
    LOGGER.info("Generated %d families of %d views", cfg.n_scenes, cfg.views_per_scene)

    dataset = Dataset(model, records)
    if out_dir is not None:
        write_dataset(dataset, out_dir)
    return dataset

