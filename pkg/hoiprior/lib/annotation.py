"""Solvers behind sparse interaction annotations.

Two kinds of label are turned into poses here. Part keypoint labels are 2D
clicks tagged with the object part they lie on, from which the 6D pose of the
object in the camera frame is recovered. Contact pair labels say which body
region touches which object region, and are used to place the object
relative to a fixed body.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import torch
from scipy.spatial.transform import Rotation

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import DTYPE, ArrayLike, IndexArray, Tensor, as_array, as_tensor
from hoiprior.lib.error import (
    ConfigError,
    DimensionMismatchError,
    EmptyPairsError,
    InsufficientAnnotationsError,
    NoConvergenceError,
    ValidationError,
)
from hoiprior.lib.kinematics import BodyModel, ObjectTemplate, transform_object_points
from hoiprior.lib.losses import Observations, keypoint_reprojection_loss
from hoiprior.lib.models import CameraPose, Intrinsics, Mesh, ObjectPose
from hoiprior.lib.projection import EPS_DEPTH
from hoiprior.lib.util import axis_angle_to_matrix, config_from_dict, matrix_to_axis_angle

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

MIN_ANNOTATIONS = 4


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the annotation solvers.

    Attributes
    ----------
    starts : int
        Random starting rotations of the part keypoint solve, default 16.
    max_alternations : int
        Assignment/refinement rounds per start, default 50.
    residual_threshold : float
        RMS pixel residual above which the solve has failed, default 5.
    softmin_temp : float
        Temperature of the softmin variant in squared pixels, default 10.
    rng_seed : int
        Seed of the starting rotations, default 0.
    relative_steps : int
        Adam steps of the contact solve, default 300.
    relative_lr : float
        Adam step size of the contact solve, default 0.01.
    lambda_contact : float
        Weight of the region chamfer in the contact solve, default 1.
    lambda_coor : float
        Weight of the object reprojection loss in the contact solve,
        default 0.1.
    lambda_norm : float
        Weight of the log-scale regulariser in the contact solve, default 0.1.

    """

    starts: int = 16
    max_alternations: int = 50
    residual_threshold: float = 5.0
    softmin_temp: float = 10.0
    rng_seed: int = 0
    relative_steps: int = 300
    relative_lr: float = 0.01
    lambda_contact: float = 1.0
    lambda_coor: float = 0.1
    lambda_norm: float = 0.1

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.starts < 1 or self.max_alternations < 1 or self.relative_steps < 0:
            msg = "starts and max_alternations must be positive and relative_steps nonnegative"
            raise ConfigError(msg)
        if self.residual_threshold <= 0 or self.softmin_temp <= 0 or self.relative_lr <= 0:
            msg = "residual_threshold, softmin_temp and relative_lr must be positive"
            raise ConfigError(msg)
        if min(self.lambda_contact, self.lambda_coor, self.lambda_norm) < 0:
            msg = "Contact solve weights must be nonnegative"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> SolverConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)


# Annotations -------------------------------------------------------------------


@dataclass(frozen=True)
class PartKeypointAnnotation:
    """2D keypoints, centered pixels, each tagged with an object part."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        """Store as arrays and check they pair up."""
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(-1))
        if self.points.shape[0] != self.labels.shape[0]:
            msg = f"Got {self.points.shape[0]} points for {self.labels.shape[0]} labels"
            raise DimensionMismatchError(msg)

    def __len__(self) -> int:
        """The number of annotated keypoints."""
        return int(self.labels.shape[0])

    def check(self, template: ObjectTemplate) -> None:
        """Check the labels name parts of a template and there are enough of them."""
        if len(self) < MIN_ANNOTATIONS:
            msg = f"Need at least {MIN_ANNOTATIONS} annotated keypoints, got {len(self)}"
            raise InsufficientAnnotationsError(msg)
        if self.labels.min() < 0 or self.labels.max() >= len(template.parts):
            msg = f"Part labels must be in [0, {len(template.parts)})"
            raise ValidationError(msg)

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"points": self.points.tolist(), "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, values: dict) -> PartKeypointAnnotation:
        """Create from a dict written by to_dict."""
        return cls(values["points"], values["labels"])


@dataclass(frozen=True)
class ContactPairAnnotation:
    """Pairs of (human region, object region) indices in contact."""

    pairs: list[tuple[int, int]]

    def __post_init__(self) -> None:
        """Store the pairs as int tuples."""
        object.__setattr__(self, "pairs", [(int(i), int(j)) for i, j in self.pairs])

    def transposed(self) -> ContactPairAnnotation:
        """Get the pairs with the roles swapped."""
        return ContactPairAnnotation([(j, i) for i, j in self.pairs])


@dataclass(frozen=True)
class ContactRegions:
    """The vertex sets contacts can be labelled on, per mesh."""

    human: list[IndexArray]
    object: list[IndexArray]

    def __post_init__(self) -> None:
        """Check no region is empty."""
        object.__setattr__(self, "human", [np.asarray(r, dtype=np.int64) for r in self.human])
        object.__setattr__(self, "object", [np.asarray(r, dtype=np.int64) for r in self.object])
        if any(r.size == 0 for r in self.human + self.object):
            msg = "Contact regions must be nonempty"
            raise ValidationError(msg)

    @classmethod
    def from_models(cls, body: BodyModel, template: ObjectTemplate) -> ContactRegions:
        """Get the regions a body model and an object template define."""
        return cls(body.contact_regions(), template.contact_regions)

    def transposed(self) -> ContactRegions:
        """Get the regions with the roles swapped."""
        return ContactRegions(self.object, self.human)

    def check(self, pairs: ContactPairAnnotation, num_human: int, num_object: int) -> None:
        """Check pair indices and region vertices are in range."""
        if not pairs.pairs:
            msg = "No contact pairs were annotated"
            raise EmptyPairsError(msg)
        for i, j in pairs.pairs:
            if not (0 <= i < len(self.human) and 0 <= j < len(self.object)):
                msg = f"Contact pair ({i}, {j}) is out of range"
                raise ValidationError(msg)
        if max(r.max() for r in self.human) >= num_human or max(r.max() for r in self.object) >= num_object:
            msg = "A contact region indexes past the end of its mesh"
            raise ValidationError(msg)


# Part keypoint pose ------------------------------------------------------------


@dataclass
class PoseSolution:
    """An object pose in the camera frame, x_c = R x + t, with its fit.

    residual is the RMS pixel error of the annotations at the pose and
    history the residual after each alternation of the winning start.
    """

    rotation: np.ndarray
    translation: np.ndarray
    residual: float
    start: int = 0
    history: list[float] = field(default_factory=list)

    def to_object_pose(self, cam: CameraPose, scale: float = 1.0) -> ObjectPose:
        """Express the pose in the body-local frame of a camera.

        Parameters
        ----------
        cam : CameraPose
            The camera the annotations were made in.
        scale : float
            The object scale the solve used.

        Returns
        -------
        ObjectPose
            R_cam R, R_cam t + t_cam and the scale.

        """
        rotation = as_array(cam.rotation) @ self.rotation
        translation = as_array(cam.rotation) @ self.translation + as_array(cam.translation)
        return ObjectPose(rotation, translation, scale)


def _project(points: np.ndarray, focal: float) -> np.ndarray:
    depth = np.maximum(points[:, 2], EPS_DEPTH)
    return focal * points[:, :2] / depth[:, None]


def _random_rotations(rng: np.random.Generator, count: int) -> Rotation:
    """Draw rotations uniformly from normalised Gaussian quaternions."""
    quaternions = rng.standard_normal((count, 4))
    return Rotation.from_quat(quaternions / np.linalg.norm(quaternions, axis=1, keepdims=True))


def _transform(params: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ Rotation.from_rotvec(params[:3]).as_matrix().T + params[3:]


class _PartSolver:
    """Shared state of one part keypoint solve."""

    def __init__(self, template: ObjectTemplate, ann: PartKeypointAnnotation, intr: Intrinsics, scale: float) -> None:
        self.ann = ann
        self.focal = float(intr.focal)
        self.parts = [scale * as_array(template.part_points(label)) for label in range(len(template.parts))]
        self.candidates = [self.parts[label] for label in ann.labels]
        self.extent = float(np.ptp(np.concatenate(self.parts), axis=0).max())

    def errors(self, params: np.ndarray) -> list[np.ndarray]:
        """Get the squared pixel error of every candidate point of every annotation."""
        return [
            ((_project(_transform(params, points), self.focal) - target) ** 2).sum(axis=1)
            for points, target in zip(self.candidates, self.ann.points, strict=True)
        ]

    def assign(self, params: np.ndarray) -> tuple[np.ndarray, float]:
        """Pick the best point of each annotation's part and get the mean squared error."""
        errors = self.errors(params)
        choice = np.array([int(np.argmin(e)) for e in errors])
        cost = float(np.mean([e[c] for e, c in zip(errors, choice, strict=True)]))
        return choice, cost

    def refine(self, params: np.ndarray, choice: np.ndarray) -> np.ndarray:
        """Take a damped least squares step on fixed correspondences."""
        points = np.stack([cand[c] for cand, c in zip(self.candidates, choice, strict=True)])

        def residuals(x: np.ndarray) -> np.ndarray:
            return (_project(_transform(x, points), self.focal) - self.ann.points).ravel()

        result = scipy.optimize.least_squares(residuals, params, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12)
        return result.x

    def start_translation(self) -> np.ndarray:
        """Place the object on the ray through the annotation centroid at a depth matching its image size."""
        spread = float(np.ptp(self.ann.points, axis=0).max())
        depth = self.focal * self.extent / max(spread, 1.0)
        center = self.ann.points.mean(axis=0)
        return np.array([center[0] * depth / self.focal, center[1] * depth / self.focal, depth])

    def solve_from(self, rotation: Rotation, max_alternations: int) -> tuple[np.ndarray, float, list[float]]:
        """Alternate assignment and refinement from one starting rotation."""
        params = np.concatenate([rotation.as_rotvec(), self.start_translation()])
        choice, cost = self.assign(params)
        history = [cost]
        for _ in range(max_alternations):
            candidate = self.refine(params, choice)
            new_choice, new_cost = self.assign(candidate)
            if not np.isfinite(new_cost) or new_cost > cost:
                break
            params, cost = candidate, new_cost
            history.append(cost)
            if np.array_equal(new_choice, choice):
                break
            choice = new_choice
        return params, cost, history


def solve_object_pose(
    template: ObjectTemplate,
    ann: PartKeypointAnnotation,
    intr: Intrinsics,
    cfg: SolverConfig | None = None,
    scale: float | None = None,
) -> PoseSolution:
    """Recover the camera-frame pose of an object from part keypoint labels.

    Each annotation is matched to the point of its part which projects
    nearest to it. From each random starting rotation the solver alternates
    that assignment with a Levenberg-Marquardt refinement of the pose on the
    assigned points, until the assignment stops changing. The start with the
    lowest residual wins, ties going to the earlier start.

    Parameters
    ----------
    template : ObjectTemplate
        The object template.
    ann : PartKeypointAnnotation
        The annotations.
    intr : Intrinsics
        The intrinsics of the image.
    cfg : SolverConfig | None
        The settings, defaults if None.
    scale : float | None
        The object scale, the template default if None.

    Returns
    -------
    PoseSolution
        The best pose with its RMS pixel residual.

    """
    cfg = cfg or SolverConfig()
    ann.check(template)
    scale = template.default_scale if scale is None else float(scale)
    solver = _PartSolver(template, ann, intr, scale)
    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    rotations = _random_rotations(rng, cfg.starts)

    best: PoseSolution | None = None
    for start in range(cfg.starts):
        params, cost, history = solver.solve_from(rotations[start], cfg.max_alternations)
        residual = math.sqrt(cost)
        LOGGER.debug("Start %d: residual %.4f px after %d rounds", start, residual, len(history) - 1)
        if best is None or residual < best.residual:
            rotation = Rotation.from_rotvec(params[:3]).as_matrix()
            best = PoseSolution(rotation, params[3:].copy(), residual, start, [math.sqrt(c) for c in history])

    if best.residual > cfg.residual_threshold:
        msg = f"Best residual {best.residual:.2f} px is above {cfg.residual_threshold} px after {cfg.starts} starts"
        raise NoConvergenceError(msg)
    LOGGER.info(
        "Solved object pose from %d keypoints: residual %.4f px (start %d)",
        len(ann),
        best.residual,
        best.start,
    )
    return best


def softmin_objective(
    rotvec: Tensor,
    translation: Tensor,
    template: ObjectTemplate,
    ann: PartKeypointAnnotation,
    intr: Intrinsics,
    temperature: float,
    scale: float = 1.0,
) -> Tensor:
    """Get the annotation error with the min over part points relaxed to a softmin.

    Each annotation contributes -T log sum exp(-e_p / T) over the squared
    pixel errors e_p of its part's points; the result is the mean.
    """
    rotation = axis_angle_to_matrix(rotvec)
    terms = []
    for point, label in zip(ann.points, ann.labels, strict=True):
        camera_points = scale * template.part_points(int(label)) @ rotation.T + translation
        depth = torch.clamp(camera_points[:, 2], min=EPS_DEPTH)
        projected = intr.focal * camera_points[:, :2] / depth[:, None]
        errors = ((projected - as_tensor(point)) ** 2).sum(dim=1)
        terms.append(-temperature * torch.logsumexp(-errors / temperature, dim=0))
    return torch.stack(terms).mean()


def solve_object_pose_softmin(
    template: ObjectTemplate,
    ann: PartKeypointAnnotation,
    intr: Intrinsics,
    cfg: SolverConfig | None = None,
    scale: float | None = None,
) -> PoseSolution:
    """Recover the object pose by L-BFGS on the softmin objective.

    Uses the same starts as solve_object_pose, so the two can be compared.
    The reported residual is the hard-min RMS pixel error.

    Parameters
    ----------
    template : ObjectTemplate
        The object template.
    ann : PartKeypointAnnotation
        The annotations.
    intr : Intrinsics
        The intrinsics of the image.
    cfg : SolverConfig | None
        The settings, defaults if None.
    scale : float | None
        The object scale, the template default if None.

    Returns
    -------
    PoseSolution
        The best pose with its RMS pixel residual.

    """
    cfg = cfg or SolverConfig()
    ann.check(template)
    scale = template.default_scale if scale is None else float(scale)
    solver = _PartSolver(template, ann, intr, scale)
    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    rotations = _random_rotations(rng, cfg.starts)

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        variables = torch.as_tensor(x, dtype=DTYPE).requires_grad_(True)
        value = softmin_objective(variables[:3], variables[3:], template, ann, intr, cfg.softmin_temp, scale)
        (grad,) = torch.autograd.grad(value, variables)
        return float(value), grad.numpy()

    best: PoseSolution | None = None
    for start in range(cfg.starts):
        x0 = np.concatenate([rotations[start].as_rotvec(), solver.start_translation()])
        result = scipy.optimize.minimize(objective, x0, jac=True, method="L-BFGS-B")
        _, cost = solver.assign(result.x)
        residual = math.sqrt(cost)
        if best is None or residual < best.residual:
            best = PoseSolution(Rotation.from_rotvec(result.x[:3]).as_matrix(), result.x[3:].copy(), residual, start)

    if best.residual > cfg.residual_threshold:
        msg = f"Best softmin residual {best.residual:.2f} px is above {cfg.residual_threshold} px"
        raise NoConvergenceError(msg)
    return best


# Contact pose ------------------------------------------------------------------


def _nearest(a: Tensor, b: Tensor) -> Tensor:
    """Get the distance from each row of a to its nearest row of b, with a zero gradient at zero."""
    squared = ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1).min(dim=1).values
    positive = squared > 0
    root = torch.sqrt(torch.where(positive, squared, torch.ones_like(squared)))
    return torch.where(positive, root, torch.zeros_like(squared))


def region_chamfer(
    vertices_h: Tensor,
    vertices_o: Tensor,
    regions: ContactRegions,
    pairs: ContactPairAnnotation,
) -> Tensor:
    """Get the region-level chamfer distance of the labelled contacts.

    Parameters
    ----------
    vertices_h : Tensor
        The (V_h, 3) human vertices.
    vertices_o : Tensor
        The (V_o, 3) object vertices.
    regions : ContactRegions
        The contact regions of both meshes.
    pairs : ContactPairAnnotation
        The labelled (human region, object region) pairs.

    Returns
    -------
    Tensor
        The sum over pairs of the mean nearest distance from the human region
        to the object region plus the same the other way.

    """
    if not pairs.pairs:
        msg = "No contact pairs were annotated"
        raise EmptyPairsError(msg)
    total = torch.zeros((), dtype=DTYPE)
    for i, j in pairs.pairs:
        human = vertices_h[torch.as_tensor(regions.human[i])]
        obj = vertices_o[torch.as_tensor(regions.object[j])]
        total = total + _nearest(human, obj).mean() + _nearest(obj, human).mean()
    return total


def _start_pose(
    body_mesh: Mesh,
    template: ObjectTemplate,
    regions: ContactRegions,
    pairs: ContactPairAnnotation,
) -> ObjectPose:
    """Put the object, unrotated, on the centroid of the labelled human regions."""
    indices = np.concatenate([regions.human[i] for i, _ in pairs.pairs])
    center = body_mesh.vertices.detach()[torch.as_tensor(indices)].mean(dim=0)
    return ObjectPose(torch.eye(3, dtype=DTYPE), center, template.default_scale)


def solve_relative_pose(  # noqa: PLR0913
    body_mesh: Mesh,
    template: ObjectTemplate,
    regions: ContactRegions,
    pairs: ContactPairAnnotation,
    obs: Observations | None = None,
    cfg: SolverConfig | None = None,
    init: ObjectPose | None = None,
) -> ObjectPose:
    """Place the object against a fixed body from contact labels.

    Minimises the region chamfer of the labelled pairs together with the
    object keypoint reprojection loss, when observations are given, and a
    log-scale regulariser, by Adam on the axis-angle rotation, translation
    and log scale. The lowest objective seen is returned.

    Parameters
    ----------
    body_mesh : Mesh
        The posed body mesh, body-local frame.
    template : ObjectTemplate
        The object template.
    regions : ContactRegions
        The contact regions of both meshes.
    pairs : ContactPairAnnotation
        The labelled contacts.
    obs : Observations | None
        Object keypoint detections with their camera, None to skip the
        reprojection term.
    cfg : SolverConfig | None
        The settings, defaults if None.
    init : ObjectPose | None
        The starting pose, e.g. from solve_object_pose. Without one the
        object starts on the labelled body regions.

    Returns
    -------
    ObjectPose
        The fitted pose in the body-local frame.

    """
    cfg = cfg or SolverConfig()
    regions.check(pairs, body_mesh.num_vertices, template.mesh.num_vertices)
    init = init or _start_pose(body_mesh, template, regions, pairs)
    vertices_h = body_mesh.vertices.detach()
    log_scale_init = torch.log(init.scale.detach())

    rotvec = matrix_to_axis_angle(init.rotation.detach()).clone().requires_grad_(True)
    translation = init.translation.detach().clone().requires_grad_(True)
    log_scale = log_scale_init.clone().requires_grad_(True)
    optimizer = torch.optim.Adam([rotvec, translation, log_scale], lr=cfg.relative_lr)

    best_pose, best_loss = init, math.inf
    for step in range(cfg.relative_steps + 1):
        optimizer.zero_grad()
        pose = ObjectPose(axis_angle_to_matrix(rotvec), translation, torch.exp(log_scale))
        loss = cfg.lambda_contact * region_chamfer(
            vertices_h,
            transform_object_points(template.mesh.vertices, pose),
            regions,
            pairs,
        )
        if obs is not None and cfg.lambda_coor:
            points = transform_object_points(template.keypoints_local, pose)
            loss = loss + cfg.lambda_coor * keypoint_reprojection_loss(
                points,
                obs.object_keypoints,
                obs.object_confidence,
                obs.camera,
                obs.intrinsics,
            )
        if cfg.lambda_norm:
            loss = loss + cfg.lambda_norm * (log_scale - log_scale_init) ** 2
        if not torch.isfinite(loss):
            LOGGER.error("Contact solve diverged at step %d, keeping the best pose", step)
            break
        if float(loss) < best_loss:
            best_loss = float(loss)
            fitted = ObjectPose(pose.rotation.detach(), pose.translation.detach(), pose.scale.detach())
            best_pose = init if step == 0 else fitted
        if step < cfg.relative_steps:
            loss.backward()
            optimizer.step()

    LOGGER.info("Contact solve done: objective %.6g over %d pairs", best_loss, len(pairs.pairs))
    return best_pose


def region_gap(
    body_mesh: Mesh,
    template: ObjectTemplate,
    pose: ObjectPose,
    regions: ContactRegions,
    pairs: ContactPairAnnotation,
) -> float:
    """Get the mean over pairs of the closest distance between the two labelled regions, meters."""
    vertices_o = transform_object_points(template.mesh.vertices, pose).detach()
    vertices_h = body_mesh.vertices.detach()
    gaps = []
    for i, j in pairs.pairs:
        human = vertices_h[torch.as_tensor(regions.human[i])]
        obj = vertices_o[torch.as_tensor(regions.object[j])]
        gaps.append(float(_nearest(human, obj).min()))
    return float(np.mean(gaps))


def annotation_from_pose(
    template: ObjectTemplate,
    rotation: ArrayLike,
    translation: ArrayLike,
    intr: Intrinsics,
    scale: float = 1.0,
) -> PartKeypointAnnotation:
    """Annotate every part point of a posed object at its exact projection."""
    rotation, translation = as_array(rotation), as_array(translation)
    points, labels = [], []
    for label in range(len(template.parts)):
        camera_points = scale * as_array(template.part_points(label)) @ rotation.T + translation
        points.append(_project(camera_points, float(intr.focal)))
        labels += [label] * camera_points.shape[0]
    return PartKeypointAnnotation(np.concatenate(points), np.asarray(labels))
