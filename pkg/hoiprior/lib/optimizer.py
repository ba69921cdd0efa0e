"""Refine a human-object scene against the learned prior.

The objective is a weighted sum of the body and object reprojection losses,
the pose and scale regulariser, the prior loss over a set of virtual cameras
and the contact loss. The first phase moves only the object; the second
frees the body shape and pose and the virtual camera translations too.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import DTYPE, ArrayLike, ConditionVector, IndexArray, Tensor, as_array, as_tensor
from hoiprior.lib.error import (
    ConfigError,
    DimensionMismatchError,
    EmptyProjectionError,
    GeometryError,
    NumericalDivergenceError,
    ValidationError,
)
from hoiprior.lib.flow import ConditionalFlow, log_prob_flat, sample_flat
from hoiprior.lib.kinematics import InteractionModel
from hoiprior.lib.losses import (
    LOSS_TERMS,
    LossWeights,
    Observations,
    contact_loss,
    regularization,
    reprojection_loss_human,
    reprojection_loss_object,
)
from hoiprior.lib.models import BodyParams, KeypointSet, ObjectPose, SceneParams
from hoiprior.lib.projection import rep25d_from_3d
from hoiprior.lib.render import (
    EPS_FRONT,
    MeanOcclusionMap,
    OcclusionMap,
    contact_candidates,
    mask_iou,
    occlusion_map,
    render_masks,
)
from hoiprior.lib.util import axis_angle_to_matrix, config_from_dict, matrix_to_axis_angle

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))


@dataclass(frozen=True)
class VirtualCameraSet:
    """The translations of the virtual cameras, (m, 3) meters."""

    translations: Tensor

    def __post_init__(self) -> None:
        """Check there is at least one camera."""
        object.__setattr__(self, "translations", as_tensor(self.translations).reshape(-1, 3))
        if self.translations.shape[0] < 1:
            msg = "A virtual camera set needs at least one camera"
            raise ValidationError(msg)

    @property
    def m(self) -> int:
        """The number of cameras."""
        return int(self.translations.shape[0])

    def detached(self) -> VirtualCameraSet:
        """Get a copy detached from the autograd graph."""
        return VirtualCameraSet(self.translations.detach().clone())


@dataclass(frozen=True)
class OptimConfig:
    """Settings of the scene refinement.

    Attributes
    ----------
    m : int
        Number of virtual cameras, default 8.
    phase1_steps : int
        Adam steps on the object pose and scale alone, default 200.
    phase2_steps : int
        Adam steps on every variable, default 300.
    lr : float
        Adam step size, default 0.01.
    rng_seed : int
        Seed of the virtual camera draw, default 0.
    weights : LossWeights
        The loss weights, given as a nested section in the config file.
    weight_inside_min : bool
        Pair contact candidates on the weighted distance, default True.
    resolution : int
        Render size used for occlusion maps when no observed masks are
        given, default 256.
    eps_front : float
        Front-surface depth tolerance of the occlusion rules, default 1e-3.

    """

    m: int = 8
    phase1_steps: int = 200
    phase2_steps: int = 300
    lr: float = 0.01
    rng_seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    weight_inside_min: bool = True
    resolution: int = 256
    eps_front: float = EPS_FRONT

    def __post_init__(self) -> None:
        """Validate the settings and build the nested weights."""
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights.from_dict(self.weights))
        if self.m < 1:
            msg = f"m must be at least 1, got {self.m}"
            raise ConfigError(msg)
        if self.phase1_steps < 1 or self.phase2_steps < 1:
            msg = "Both phases need a positive number of steps"
            raise ConfigError(msg)
        if self.lr <= 0 or self.resolution < 1 or self.eps_front < 0:
            msg = "lr and resolution must be positive and eps_front nonnegative"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> OptimConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


@dataclass
class OptimDiagnostics:
    """What happened during one refinement.

    The trace has one row per evaluated step with the phase, the weighted
    total, every unweighted term and the log-score.
    """

    trace: list[dict] = field(default_factory=list)
    final_terms: dict[str, float] = field(default_factory=dict)
    initial_loss: float = math.nan
    best_loss: float = math.nan
    diverged: bool = False
    log_score: float = math.nan
    n_contact_human: int = 0
    n_contact_object: int = 0
    iou_before: float | None = None
    iou_after: float | None = None
    cameras: VirtualCameraSet | None = None

    def to_dict(self) -> dict:
        """Convert the summary, without the trace, to a JSON serialisable dict."""
        return {
            "final_terms": self.final_terms,
            "initial_loss": _finite_or_none(self.initial_loss),
            "best_loss": _finite_or_none(self.best_loss),
            "diverged": self.diverged,
            "log_score": _finite_or_none(self.log_score),
            "n_contact_human": self.n_contact_human,
            "n_contact_object": self.n_contact_object,
            "iou_before": self.iou_before,
            "iou_after": self.iou_after,
            "cameras": None if self.cameras is None else as_array(self.cameras.translations).tolist(),
        }


# Prior -------------------------------------------------------------------------


def _translations(cams: VirtualCameraSet | ArrayLike) -> Tensor:
    if isinstance(cams, VirtualCameraSet):
        return cams.translations
    return as_tensor(cams).reshape(-1, 3)


def virtual_log_probs(
    keypoints: KeypointSet,
    cams: VirtualCameraSet | ArrayLike,
    flow: ConditionalFlow,
    f: ConditionVector | None,
) -> Tensor:
    """Get the log density of the keypoints seen from each virtual camera.

    Parameters
    ----------
    keypoints : KeypointSet
        The scene keypoints.
    cams : VirtualCameraSet | ArrayLike
        The virtual cameras, or an (m, 3) array of their translations.
    flow : ConditionalFlow
        The prior.
    f : ConditionVector | None
        The condition vector of the image.

    Returns
    -------
    Tensor
        The (m,) log densities.

    """
    translations = _translations(cams)
    if translations.shape[0] == 0:
        return torch.zeros(0, dtype=DTYPE)
    expected = 3 * (keypoints.n + 1)
    if flow.cfg.input_dim != expected:
        msg = f"The flow takes {flow.cfg.input_dim} inputs, the scene has {keypoints.n} keypoints ({expected})"
        raise DimensionMismatchError(msg)
    flat = torch.stack([rep25d_from_3d(keypoints, t).flatten() for t in translations])
    return log_prob_flat(flow, flat, f)


def log_score_from_log_probs(log_probs: Tensor) -> Tensor:
    """Get the log of the mean of exp(log_probs)."""
    return torch.logsumexp(log_probs, dim=0) - math.log(log_probs.shape[0])


def score(
    scene: SceneParams,
    flow: ConditionalFlow,
    f: ConditionVector | None,
    cams: VirtualCameraSet,
    model: InteractionModel,
) -> Tensor:
    """Get the Monte-Carlo plausibility score of a scene.

    Parameters
    ----------
    scene : SceneParams
        The scene.
    flow : ConditionalFlow
        The prior.
    f : ConditionVector | None
        The condition vector of the image.
    cams : VirtualCameraSet
        The virtual cameras.
    model : InteractionModel
        The body model and object template.

    Returns
    -------
    Tensor
        The mean over cameras of the prior density; higher is more
        plausible.

    """
    return torch.exp(log_score(scene, flow, f, cams, model))


def log_score(
    scene: SceneParams,
    flow: ConditionalFlow,
    f: ConditionVector | None,
    cams: VirtualCameraSet,
    model: InteractionModel,
) -> Tensor:
    """Get the log of score, computed without leaving log space."""
    return log_score_from_log_probs(virtual_log_probs(model.keypoints(scene), cams, flow, f))


def prior_loss(
    scene: SceneParams,
    cams: VirtualCameraSet | ArrayLike,
    flow: ConditionalFlow,
    f: ConditionVector | None,
    model: InteractionModel,
) -> Tensor:
    """Get the negative log density summed over the virtual cameras.

    Parameters
    ----------
    scene : SceneParams
        The scene.
    cams : VirtualCameraSet | ArrayLike
        The virtual cameras; with no cameras the loss is 0.
    flow : ConditionalFlow
        The prior.
    f : ConditionVector | None
        The condition vector of the image.
    model : InteractionModel
        The body model and object template.

    Returns
    -------
    Tensor
        The scalar loss, differentiable in the scene and the camera
        translations.

    """
    return -virtual_log_probs(model.keypoints(scene), cams, flow, f).sum()


def init_virtual_cameras(
    flow: ConditionalFlow,
    f: ConditionVector | None,
    m: int,
    rng: np.random.Generator,
) -> VirtualCameraSet:
    """Draw the starting virtual cameras from the prior.

    Parameters
    ----------
    flow : ConditionalFlow
        The prior.
    f : ConditionVector | None
        The condition vector of the image.
    m : int
        The number of cameras.
    rng : np.random.Generator
        The random generator.

    Returns
    -------
    VirtualCameraSet
        The camera translation block of m flow samples.

    """
    if m < 1:
        msg = f"m must be at least 1, got {m}"
        raise ConfigError(msg)
    samples = sample_flat(flow, f, rng, m)
    return VirtualCameraSet(samples[:, -3:].clone())


# Objective ---------------------------------------------------------------------


@dataclass
class ContactSetup:
    """The contact candidates, fixed for a whole refinement."""

    occlusion: OcclusionMap
    mean: MeanOcclusionMap
    candidates_h: IndexArray
    candidates_o: IndexArray


def _render_resolution(obs: Observations, resolution: int) -> int | tuple[int, int]:
    if obs.has_masks:
        height, width = obs.person_mask.shape
        return width, height
    return resolution


def prepare_contacts(
    init: SceneParams,
    obs: Observations,
    mean_maps: MeanOcclusionMap | None,
    cfg: OptimConfig,
    model: InteractionModel,
) -> ContactSetup | None:
    """Find the contact candidates of the initial scene.

    Parameters
    ----------
    init : SceneParams
        The initial scene.
    obs : Observations
        The image observations; observed masks take part in the occlusion
        rules when present.
    mean_maps : MeanOcclusionMap | None
        The mean occlusion map of the object category.
    cfg : OptimConfig
        The settings.
    model : InteractionModel
        The body model and object template.

    Returns
    -------
    ContactSetup | None
        The candidates, or None when the contact term is off or cannot be
        set up.

    """
    if mean_maps is None or cfg.weights.lambda_contact == 0:
        return None
    _, mesh_h, mesh_o = model.geometry(init.detached())
    try:
        occ = occlusion_map(
            mesh_h,
            mesh_o,
            obs.camera,
            obs.intrinsics,
            _render_resolution(obs, cfg.resolution),
            obs.person_mask,
            obs.object_mask,
            cfg.eps_front,
        )
    except EmptyProjectionError:
        LOGGER.warning("The initial scene does not render, the contact term is off")
        return None
    candidates_h, candidates_o = contact_candidates(occ, mean_maps, cfg.weights.eta)
    return ContactSetup(occ, mean_maps, candidates_h, candidates_o)


class RefinementProblem:
    """The refinement objective with everything but the variables fixed.

    The variables are beta, theta, the object rotation as an axis-angle
    vector, the translation, the log of the scale and the (m, 3) virtual
    camera translations.

    Parameters
    ----------
    init : SceneParams
        The initial scene, which anchors the regulariser.
    obs : Observations
        The image observations.
    flow : ConditionalFlow | None
        The prior, None to switch the prior term off.
    contacts : ContactSetup | None
        The contact candidates, None to switch the contact term off.
    cfg : OptimConfig
        The settings.
    model : InteractionModel
        The body model and object template.

    """

    def __init__(  # noqa: PLR0913
        self,
        init: SceneParams,
        obs: Observations,
        flow: ConditionalFlow | None,
        contacts: ContactSetup | None,
        cfg: OptimConfig,
        model: InteractionModel,
    ) -> None:
        """Store the fixed inputs."""
        self.init = init.detached()
        self.obs = obs
        self.flow = flow
        self.contacts = contacts
        self.cfg = cfg
        self.model = model
        self.weights = cfg.weights.as_dict()

    @staticmethod
    def scene_from_variables(
        beta: Tensor,
        theta: Tensor,
        rotvec: Tensor,
        translation: Tensor,
        log_scale: Tensor,
    ) -> SceneParams:
        """Build a scene from the free variables."""
        return SceneParams(
            BodyParams(beta, theta),
            ObjectPose(axis_angle_to_matrix(rotvec), translation, torch.exp(log_scale)),
        )

    def variables_from_scene(self, scene: SceneParams) -> list[Tensor]:
        """Get fresh leaf tensors for the variables of a scene."""
        return [
            scene.body.beta.detach().clone(),
            scene.body.theta.detach().clone(),
            matrix_to_axis_angle(scene.object.rotation.detach()).clone(),
            scene.object.translation.detach().clone(),
            torch.log(scene.object.scale.detach()).clone(),
        ]

    def terms(self, scene: SceneParams, cams: Tensor | None) -> tuple[dict[str, Tensor], Tensor | None]:
        """Evaluate every active loss term.

        Terms with a zero weight are not evaluated and read as zero.

        Returns
        -------
        tuple[dict[str, Tensor], Tensor | None]
            The unweighted terms and the log-score, None without a prior.

        """
        zero = torch.zeros((), dtype=DTYPE)
        terms = dict.fromkeys(LOSS_TERMS, zero)
        obs, intr = self.obs, self.obs.intrinsics
        if self.weights["reproj_human"]:
            terms["reproj_human"] = reprojection_loss_human(scene, obs, obs.camera, intr, self.model)
        if self.weights["reproj_object"]:
            terms["reproj_object"] = reprojection_loss_object(scene, obs, obs.camera, intr, self.model)
        if self.weights["regularization"]:
            terms["regularization"] = regularization(scene, self.init)

        score_value = None
        needs_mesh = self.weights["contact"] and self.contacts is not None
        if needs_mesh:
            keypoints, mesh_h, mesh_o = self.model.geometry(scene)
        else:
            keypoints = self.model.keypoints(scene)
        if self.weights["prior"] and self.flow is not None and cams is not None:
            log_probs = virtual_log_probs(keypoints, cams, self.flow, obs.condition)
            terms["prior"] = -log_probs.sum()
            score_value = log_score_from_log_probs(log_probs.detach())
        if needs_mesh:
            terms["contact"] = contact_loss(
                mesh_h.vertices,
                mesh_o.vertices,
                self.contacts.candidates_h,
                self.contacts.candidates_o,
                self.contacts.occlusion,
                self.contacts.mean,
                weight_inside_min=self.cfg.weight_inside_min,
            )
        return terms, score_value

    def total(self, terms: dict[str, Tensor]) -> Tensor:
        """Get the weighted sum of the terms."""
        total = torch.zeros((), dtype=DTYPE)
        for name, value in terms.items():
            if self.weights[name]:
                total = total + self.weights[name] * value
        return total

    def loss(  # noqa: PLR0913
        self,
        beta: Tensor,
        theta: Tensor,
        rotvec: Tensor,
        translation: Tensor,
        log_scale: Tensor,
        cams: Tensor | None = None,
    ) -> Tensor:
        """Get the total objective as a function of the variables."""
        scene = self.scene_from_variables(beta, theta, rotvec, translation, log_scale)
        terms, _ = self.terms(scene, cams)
        return self.total(terms)


def _object_iou(scene: SceneParams, obs: Observations, model: InteractionModel) -> float | None:
    if not obs.has_masks:
        return None
    _, mesh_h, mesh_o = model.geometry(scene.detached())
    try:
        render = render_masks(mesh_h, mesh_o, obs.camera, obs.intrinsics, _render_resolution(obs, 0))
    except EmptyProjectionError:
        return 0.0
    return mask_iou(render.object_mask, obs.object_mask)


# Refinement --------------------------------------------------------------------


def optimize(  # noqa: PLR0913, PLR0915
    init: SceneParams,
    obs: Observations,
    flow: ConditionalFlow | None,
    mean_maps: MeanOcclusionMap | None,
    cfg: OptimConfig,
    model: InteractionModel,
) -> tuple[SceneParams, OptimDiagnostics]:
    """Refine a scene in two phases of Adam steps.

    Phase one optimises the object rotation, translation and scale. Phase two
    adds the body shape and pose and the virtual camera translations. The
    contact candidates are found once, on the initial scene. The scene with
    the lowest objective seen is returned, so a run which diverges hands back
    the best scene before the divergence with the diverged flag set.

    Parameters
    ----------
    init : SceneParams
        The initial scene.
    obs : Observations
        The image observations.
    flow : ConditionalFlow | None
        The prior, None to run without the prior term.
    mean_maps : MeanOcclusionMap | None
        The mean occlusion map, None to run without the contact term.
    cfg : OptimConfig
        The settings.
    model : InteractionModel
        The body model and object template.

    Returns
    -------
    tuple[SceneParams, OptimDiagnostics]
        The refined scene and what happened.

    """
    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    diagnostics = OptimDiagnostics()
    init = init.detached()
    use_prior = flow is not None and cfg.weights.lambda_prior > 0

    contacts = prepare_contacts(init, obs, mean_maps, cfg, model)
    if contacts is not None:
        diagnostics.n_contact_human = len(contacts.candidates_h)
        diagnostics.n_contact_object = len(contacts.candidates_o)
    problem = RefinementProblem(init, obs, flow, contacts, cfg, model)

    beta, theta, rotvec, translation, log_scale = problem.variables_from_scene(init)
    cams = init_virtual_cameras(flow, obs.condition, cfg.m, rng).translations.clone() if use_prior else None
    object_variables = [rotvec, translation, log_scale]
    body_variables = [beta, theta]
    camera_variables = [] if cams is None else [cams]
    phases = (
        ("object", object_variables, cfg.phase1_steps),
        ("all", body_variables + object_variables + camera_variables, cfg.phase2_steps),
    )

    best_scene, best_loss = init, math.inf
    best_cams = cams
    flow_grads = []
    if flow is not None:
        flow_grads = [p.requires_grad for p in flow.parameters()]
        flow.requires_grad_(False)

    def evaluate(phase: str, step: int) -> Tensor:
        nonlocal best_scene, best_loss, best_cams
        scene = problem.scene_from_variables(beta, theta, rotvec, translation, log_scale)
        terms, score_value = problem.terms(scene, cams)
        total = problem.total(terms)
        if not torch.isfinite(total):
            msg = f"Non-finite objective in phase '{phase}' at step {step}"
            raise NumericalDivergenceError(msg)
        row = {"phase": phase, "step": step, "total": float(total)}
        row.update({name: float(value) for name, value in terms.items()})
        row["log_score"] = math.nan if score_value is None else float(score_value)
        diagnostics.trace.append(row)
        if float(total) < best_loss:
            best_loss = float(total)
            best_scene = init if len(diagnostics.trace) == 1 else scene.detached()
            best_cams = None if cams is None else cams.detach().clone()
            diagnostics.final_terms = {name: float(value) for name, value in terms.items()}
            diagnostics.log_score = row["log_score"]
        return total

    try:
        for phase, variables, steps in phases:
            for tensor in body_variables + object_variables + camera_variables:
                tensor.requires_grad_(any(tensor is v for v in variables))
            optimizer = torch.optim.Adam(variables, lr=cfg.lr)
            for step in range(steps):
                optimizer.zero_grad()
                total = evaluate(phase, step)
                if total.requires_grad:
                    total.backward()
                    optimizer.step()
            LOGGER.info("Phase '%s' done after %d steps, best objective %.6g", phase, steps, best_loss)
        with torch.no_grad():
            evaluate("final", cfg.phase1_steps + cfg.phase2_steps)
    except (NumericalDivergenceError, GeometryError):
        LOGGER.exception("Refinement diverged, returning the best scene so far")
        diagnostics.diverged = True
    finally:
        if flow is not None:
            for parameter, requires_grad in zip(flow.parameters(), flow_grads, strict=True):
                parameter.requires_grad_(requires_grad)

    if diagnostics.trace:
        diagnostics.initial_loss = diagnostics.trace[0]["total"]
    diagnostics.best_loss = best_loss
    diagnostics.cameras = None if best_cams is None else VirtualCameraSet(best_cams)
    diagnostics.iou_before = _object_iou(init, obs, model)
    diagnostics.iou_after = _object_iou(best_scene, obs, model)
    return best_scene, diagnostics
