"""Loss terms of the refinement objective.

Every term is a differentiable scalar tensor which is nonnegative and exactly
zero on its own perfect configuration. The prior term lives with the
optimiser, as it needs the flow and the virtual cameras.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from hoiprior.lib.custom_types import DTYPE, ArrayLike, IndexArray, Tensor, as_tensor
from hoiprior.lib.error import ConfigError, DimensionMismatchError
from hoiprior.lib.kinematics import InteractionModel, body_keypoints, object_keypoints
from hoiprior.lib.models import CameraPose, Intrinsics, SceneParams
from hoiprior.lib.projection import project_points
from hoiprior.lib.render import MeanOcclusionMap, OcclusionMap
from hoiprior.lib.util import config_from_dict

LOSS_TERMS = ("reproj_human", "reproj_object", "regularization", "prior", "contact")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the refinement objective.

    The defaults are the in-the-wild values. lambda_norm has no published
    value and defaults to 0.1.

    Attributes
    ----------
    lambda_j : float
        Weight of the human keypoint reprojection loss, default 0.01.
    lambda_coor : float
        Weight of the object keypoint reprojection loss, default 0.1.
    lambda_norm : float
        Weight of the pose and scale regularisation, default 0.1.
    lambda_prior : float
        Weight of the multi-view prior loss, default 0.1.
    lambda_contact : float
        Weight of the contact loss, default 1.0.
    eta : float
        Contact threshold on the product of the occlusion maps, default 0.3.

    """

    lambda_j: float = 0.01
    lambda_coor: float = 0.1
    lambda_norm: float = 0.1
    lambda_prior: float = 0.1
    lambda_contact: float = 1.0
    eta: float = 0.3

    def __post_init__(self) -> None:
        """Validate the weights."""
        if min(self.lambda_j, self.lambda_coor, self.lambda_norm, self.lambda_prior, self.lambda_contact) < 0:
            msg = "Loss weights must be nonnegative"
            raise ConfigError(msg)
        if not 0 <= self.eta <= 1:
            msg = f"eta must be in [0, 1], got {self.eta}"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> LossWeights:
        """Create from a config file section."""
        return config_from_dict(cls, values)

    @classmethod
    def studio(cls) -> LossWeights:
        """Get the preset used for studio captures, which has no contact term."""
        return cls(lambda_j=0.1, lambda_coor=0.1, lambda_prior=1.0, lambda_contact=0.0)

    @classmethod
    def zeros(cls) -> LossWeights:
        """Get weights which switch every term off."""
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def as_dict(self) -> dict[str, float]:
        """Get the weight of each named loss term."""
        return {
            "reproj_human": self.lambda_j,
            "reproj_object": self.lambda_coor,
            "regularization": self.lambda_norm,
            "prior": self.lambda_prior,
            "contact": self.lambda_contact,
        }


# Reprojection ------------------------------------------------------------------


def keypoint_reprojection_loss(
    points: Tensor,
    detections: ArrayLike,
    confidence: ArrayLike | None,
    cam: CameraPose,
    intr: Intrinsics,
) -> Tensor:
    """Get the confidence weighted squared pixel error of projected keypoints.

    Parameters
    ----------
    points : Tensor
        The (n, 3) keypoints in the body-local frame.
    detections : ArrayLike
        The (n, 2) detected keypoints in centered pixels.
    confidence : ArrayLike | None
        The (n,) detection confidences, all ones when None.
    cam : CameraPose
        The camera of the image.
    intr : Intrinsics
        The intrinsics of the image.

    Returns
    -------
    Tensor
        The mean of c_i |pi(x_i) - x2d_i|^2 divided by the squared image
        diagonal.

    """
    detections = as_tensor(detections).reshape(-1, 2)
    if detections.shape[0] != points.shape[0]:
        msg = f"Got {detections.shape[0]} detections for {points.shape[0]} keypoints"
        raise DimensionMismatchError(msg)
    if points.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    weights = torch.ones(points.shape[0], dtype=DTYPE) if confidence is None else as_tensor(confidence).reshape(-1)
    projected = project_points(points, cam, intr, clip_depth=True)
    squared = ((projected - detections) ** 2).sum(dim=1)
    return (weights * squared).mean() / intr.diagonal**2


def reprojection_loss_human(
    scene: SceneParams,
    obs: Observations,
    cam_main: CameraPose,
    intr: Intrinsics,
    model: InteractionModel,
) -> Tensor:
    """Get the reprojection loss of the body keypoints.

    Parameters
    ----------
    scene : SceneParams
        The scene.
    obs : Observations
        The image observations.
    cam_main : CameraPose
        The camera of the image.
    intr : Intrinsics
        The intrinsics of the image.
    model : InteractionModel
        The body model and object template.

    Returns
    -------
    Tensor
        The scalar loss.

    """
    points = body_keypoints(model.body, scene.body)
    return keypoint_reprojection_loss(points, obs.human_keypoints, obs.human_confidence, cam_main, intr)


def reprojection_loss_object(
    scene: SceneParams,
    obs: Observations,
    cam_main: CameraPose,
    intr: Intrinsics,
    model: InteractionModel,
) -> Tensor:
    """Get the reprojection loss of the object keypoints.

    This stands in for a dense correspondence loss, with the same job of
    aligning the posed object with the image.

    Parameters
    ----------
    scene : SceneParams
        The scene.
    obs : Observations
        The image observations.
    cam_main : CameraPose
        The camera of the image.
    intr : Intrinsics
        The intrinsics of the image.
    model : InteractionModel
        The body model and object template.

    Returns
    -------
    Tensor
        The scalar loss.

    """
    points = object_keypoints(model.template, scene.object)
    return keypoint_reprojection_loss(points, obs.object_keypoints, obs.object_confidence, cam_main, intr)


# Regularisation ----------------------------------------------------------------


def regularization(scene: SceneParams, init_scene: SceneParams) -> Tensor:
    """Get the pose and scale regulariser.

    Parameters
    ----------
    scene : SceneParams
        The current scene.
    init_scene : SceneParams
        The initial scene.

    Returns
    -------
    Tensor
        |theta - theta_0|^2 + |beta|^2 + (log s - log s_0)^2.

    """
    theta = ((scene.body.theta - init_scene.body.theta.detach()) ** 2).sum()
    beta = (scene.body.beta**2).sum()
    log_scale = (torch.log(scene.object.scale) - torch.log(init_scene.object.scale.detach())) ** 2
    return theta + beta + log_scale


# Contact -----------------------------------------------------------------------


def _safe_norm(vectors: Tensor) -> Tensor:
    """Get vector norms along the last axis with a zero gradient at zero."""
    squared = (vectors**2).sum(dim=-1)
    positive = squared > 0
    root = torch.sqrt(torch.where(positive, squared, torch.ones_like(squared)))
    return torch.where(positive, root, torch.zeros_like(squared))


def contact_weights(occ: OcclusionMap, mean: MeanOcclusionMap) -> tuple[Tensor, Tensor]:
    """Get the per-vertex contact weights c * c_mean of the human and the object."""
    return as_tensor(occ.human * mean.human), as_tensor(occ.object * mean.object)


def contact_loss(  # noqa: PLR0913
    vertices_h: Tensor,
    vertices_o: Tensor,
    candidates_h: IndexArray,
    candidates_o: IndexArray,
    occ: OcclusionMap,
    mean: MeanOcclusionMap,
    *,
    weight_inside_min: bool = True,
) -> Tensor:
    """Get the weighted chamfer distance between the contact candidates.

    With w_ij = [c_h c_mean_h]_i [c_o c_mean_o]_j, each human candidate is
    paired with the object candidate minimising w_ij |p_i - p_j| and the
    other way round; the two directions are averaged over their candidate
    counts and summed.

    Parameters
    ----------
    vertices_h : Tensor
        The (V_h, 3) human vertices.
    vertices_o : Tensor
        The (V_o, 3) object vertices.
    candidates_h : IndexArray
        The human candidate indices.
    candidates_o : IndexArray
        The object candidate indices.
    occ : OcclusionMap
        The occlusion map of the image.
    mean : MeanOcclusionMap
        The mean occlusion map.
    weight_inside_min : bool
        Pair on the weighted distance when True, otherwise pair on the plain
        distance and weight the chosen pair.

    Returns
    -------
    Tensor
        The scalar loss, 0 when either candidate set is empty.

    """
    candidates_h = torch.as_tensor(candidates_h, dtype=torch.int64).reshape(-1)
    candidates_o = torch.as_tensor(candidates_o, dtype=torch.int64).reshape(-1)
    if candidates_h.numel() == 0 or candidates_o.numel() == 0:
        return torch.zeros((), dtype=DTYPE)

    weight_h, weight_o = contact_weights(occ, mean)
    points_h = vertices_h[candidates_h]
    points_o = vertices_o[candidates_o]
    weights = weight_h[candidates_h][:, None] * weight_o[candidates_o][None, :]
    distances = _safe_norm(points_h[:, None, :] - points_o[None, :, :])
    weighted = weights * distances

    if weight_inside_min:
        human_to_object = weighted.min(dim=1).values
        object_to_human = weighted.min(dim=0).values
    else:
        nearest_o = distances.argmin(dim=1, keepdim=True)
        nearest_h = distances.argmin(dim=0, keepdim=True)
        human_to_object = weighted.gather(1, nearest_o)[:, 0]
        object_to_human = weighted.gather(0, nearest_h)[0]

    return human_to_object.mean() + object_to_human.mean()


# Observations ------------------------------------------------------------------


@dataclass(frozen=True)
class Observations:
    """What is known about one image before refinement.

    Attributes
    ----------
    human_keypoints : Tensor
        The (n_human, 2) detected body keypoints, centered pixels.
    human_confidence : Tensor
        The (n_human,) detection confidences.
    object_keypoints : Tensor
        The (t_kp, 2) detected object keypoints, centered pixels.
    object_confidence : Tensor
        The (t_kp,) detection confidences.
    camera : CameraPose
        The camera of the image, from the initial body estimate.
    intrinsics : Intrinsics
        The intrinsics of the image.
    condition : Tensor | None
        The condition vector of the flow.
    person_mask : np.ndarray | None
        The observed person mask, (H, W) bool.
    object_mask : np.ndarray | None
        The observed object mask, (H, W) bool, same shape as person_mask.

    """

    human_keypoints: Tensor
    human_confidence: Tensor
    object_keypoints: Tensor
    object_confidence: Tensor
    camera: CameraPose
    intrinsics: Intrinsics
    condition: Tensor | None = None
    person_mask: np.ndarray | None = None
    object_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        """Check the shapes agree."""
        object.__setattr__(self, "human_keypoints", as_tensor(self.human_keypoints).reshape(-1, 2))
        object.__setattr__(self, "object_keypoints", as_tensor(self.object_keypoints).reshape(-1, 2))
        object.__setattr__(self, "human_confidence", as_tensor(self.human_confidence).reshape(-1))
        object.__setattr__(self, "object_confidence", as_tensor(self.object_confidence).reshape(-1))
        if self.human_confidence.shape[0] != self.human_keypoints.shape[0]:
            msg = "Need one confidence per human keypoint"
            raise DimensionMismatchError(msg)
        if self.object_confidence.shape[0] != self.object_keypoints.shape[0]:
            msg = "Need one confidence per object keypoint"
            raise DimensionMismatchError(msg)
        if (self.person_mask is None) != (self.object_mask is None):
            msg = "Give both observed masks or neither"
            raise DimensionMismatchError(msg)
        if self.person_mask is not None and self.person_mask.shape != self.object_mask.shape:
            msg = f"Mask shapes differ: {self.person_mask.shape} and {self.object_mask.shape}"
            raise DimensionMismatchError(msg)

    @property
    def has_masks(self) -> bool:
        """Whether observed masks are available."""
        return self.person_mask is not None
