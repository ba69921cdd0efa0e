"""Models/classes used through hoiprior.

These classes are used to marshal geometry between the modules. They are
immutable value objects; tensors inside them may carry an autograd graph when
they are built from optimisation variables, in which case the invariant checks
are made on detached values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from hoiprior.lib.custom_types import DTYPE, ArrayLike, IndexArray, Tensor, as_array, as_tensor
from hoiprior.lib.error import DimensionMismatchError, GeometryError, ValidationError

ORTHONORMAL_TOLERANCE = 1e-9
UNIT_TOLERANCE = 1e-9


def _check_rotation(rotation: Tensor, name: str) -> None:
    if rotation.shape != (3, 3):
        msg = f"{name} must be 3x3, got {tuple(rotation.shape)}"
        raise DimensionMismatchError(msg)
    matrix = rotation.detach()
    error = (matrix.T @ matrix - torch.eye(3, dtype=matrix.dtype)).abs().max()
    if error >= ORTHONORMAL_TOLERANCE or torch.linalg.det(matrix) <= 0:
        msg = f"{name} is not a proper rotation (orthonormality error {float(error):.3g})"
        raise GeometryError(msg)


# Geometry --------------------------------------------------------------------


@dataclass(frozen=True)
class Mesh:
    """A triangle mesh.

    Attributes
    ----------
    vertices : Tensor
        Vertex positions, (V, 3), in meters.
    faces : IndexArray
        Vertex indices of each triangle, (F, 3).

    """

    vertices: Tensor
    faces: IndexArray

    def __post_init__(self) -> None:
        """Check the face indices are in range."""
        object.__setattr__(self, "vertices", as_tensor(self.vertices))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:  # noqa: PLR2004
            msg = f"Mesh vertices must be (V, 3), got {tuple(self.vertices.shape)}"
            raise DimensionMismatchError(msg)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.vertices.shape[0]):
            msg = "Mesh face indices are out of range"
            raise ValidationError(msg)

    @property
    def num_vertices(self) -> int:
        """The number of vertices."""
        return int(self.vertices.shape[0])

    def face_areas(self) -> np.ndarray:
        """Get the area of each face in square meters.

        Returns
        -------
        np.ndarray
            The (F,) face areas.

        """
        vertices = as_array(self.vertices)
        tri = vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


@dataclass(frozen=True)
class KeypointSet:
    """3D human-object keypoints, human keypoints first.

    Attributes
    ----------
    points : Tensor
        The (n, 3) keypoints in the body-local frame.
    n_human : int
        The number of human keypoints.
    n_object : int
        The number of object keypoints.

    """

    points: Tensor
    n_human: int
    n_object: int

    def __post_init__(self) -> None:
        """Check the counts add up."""
        if self.points.shape[0] != self.n_human + self.n_object:
            total = self.n_human + self.n_object
            msg = f"KeypointSet has {self.points.shape[0]} points but n_human + n_object = {total}"
            raise DimensionMismatchError(msg)

    @property
    def n(self) -> int:
        """The total number of keypoints."""
        return self.n_human + self.n_object

    @property
    def human(self) -> Tensor:
        """The human keypoints."""
        return self.points[: self.n_human]

    @property
    def object(self) -> Tensor:
        """The object keypoints."""
        return self.points[self.n_human :]


# Parameters ------------------------------------------------------------------


@dataclass(frozen=True)
class BodyParams:
    """Body shape and pose coefficients.

    Attributes
    ----------
    beta : Tensor
        Shape coefficients.
    theta : Tensor
        Flattened per-joint axis-angle rotations of the non-root joints, in
        radians.

    """

    beta: Tensor
    theta: Tensor

    def __post_init__(self) -> None:
        """Check the coefficients are finite vectors."""
        object.__setattr__(self, "beta", as_tensor(self.beta).reshape(-1))
        object.__setattr__(self, "theta", as_tensor(self.theta).reshape(-1))
        if self.theta.shape[0] % 3:
            msg = f"theta length must be a multiple of 3, got {self.theta.shape[0]}"
            raise DimensionMismatchError(msg)
        if not (torch.isfinite(self.beta.detach()).all() and torch.isfinite(self.theta.detach()).all()):
            msg = "Body parameters must be finite"
            raise ValidationError(msg)

    @classmethod
    def zeros(cls, num_betas: int, num_articulated: int) -> BodyParams:
        """Get the rest pose with the mean shape.

        Parameters
        ----------
        num_betas : int
            The number of shape coefficients.
        num_articulated : int
            The number of posed (non-root) joints.

        Returns
        -------
        BodyParams
            The zero parameters.

        """
        return cls(torch.zeros(num_betas, dtype=DTYPE), torch.zeros(3 * num_articulated, dtype=DTYPE))

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"beta": as_array(self.beta).tolist(), "theta": as_array(self.theta).tolist()}

    @classmethod
    def from_dict(cls, values: dict) -> BodyParams:
        """Create from a dict written by to_dict."""
        return cls(values["beta"], values["theta"])


@dataclass(frozen=True)
class ObjectPose:
    """Rotation, translation and scale of an object in the body-local frame.

    Attributes
    ----------
    rotation : Tensor
        The 3x3 rotation matrix R.
    translation : Tensor
        The translation t, in meters.
    scale : Tensor
        The positive scale s.

    """

    rotation: Tensor
    translation: Tensor
    scale: Tensor = field(default_factory=lambda: torch.tensor(1.0, dtype=DTYPE))

    def __post_init__(self) -> None:
        """Check the rotation is proper and the scale positive."""
        object.__setattr__(self, "rotation", as_tensor(self.rotation))
        object.__setattr__(self, "translation", as_tensor(self.translation).reshape(3))
        object.__setattr__(self, "scale", as_tensor(self.scale).reshape(()))
        _check_rotation(self.rotation, "Object rotation")
        if self.scale.detach() <= 0:
            msg = f"Object scale must be positive, got {float(self.scale)}"
            raise ValidationError(msg)

    @classmethod
    def identity(cls) -> ObjectPose:
        """Get the identity pose with unit scale."""
        return cls(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), torch.tensor(1.0, dtype=DTYPE))

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {
            "rotation": as_array(self.rotation).tolist(),
            "translation": as_array(self.translation).tolist(),
            "scale": float(self.scale),
        }

    @classmethod
    def from_dict(cls, values: dict) -> ObjectPose:
        """Create from a dict written by to_dict."""
        return cls(values["rotation"], values["translation"], values["scale"])


@dataclass(frozen=True)
class SceneParams:
    """The optimised state: body shape and pose, object pose and scale."""

    body: BodyParams
    object: ObjectPose

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"body": self.body.to_dict(), "object": self.object.to_dict()}

    @classmethod
    def from_dict(cls, values: dict) -> SceneParams:
        """Create from a dict written by to_dict."""
        return cls(BodyParams.from_dict(values["body"]), ObjectPose.from_dict(values["object"]))

    def detached(self) -> SceneParams:
        """Get a copy with every tensor detached from the autograd graph."""
        return SceneParams(
            BodyParams(self.body.beta.detach().clone(), self.body.theta.detach().clone()),
            ObjectPose(
                self.object.rotation.detach().clone(),
                self.object.translation.detach().clone(),
                self.object.scale.detach().clone(),
            ),
        )


# Cameras -----------------------------------------------------------------------


@dataclass(frozen=True)
class CameraPose:
    """Camera rotation and center expressed in the body-local frame.

    A camera-frame point x_c maps to the body frame as R_cam x_c + t_cam.

    Attributes
    ----------
    rotation : Tensor
        The camera rotation R_cam.
    translation : Tensor
        The camera center t_cam, in meters.

    """

    rotation: Tensor
    translation: Tensor

    def __post_init__(self) -> None:
        """Check the rotation is proper."""
        object.__setattr__(self, "rotation", as_tensor(self.rotation))
        object.__setattr__(self, "translation", as_tensor(self.translation).reshape(3))
        _check_rotation(self.rotation, "Camera rotation")

    @classmethod
    def from_body_pose(cls, body_rotation: ArrayLike, body_translation: ArrayLike) -> CameraPose:
        """Get the camera pose from the global pose of the body in camera space.

        R_cam = R_body^-1 and t_cam = -R_body^-1 t_body.

        Parameters
        ----------
        body_rotation : ArrayLike
            The body's global rotation in the camera frame.
        body_translation : ArrayLike
            The body's global translation in the camera frame.

        Returns
        -------
        CameraPose
            The camera pose in the body-local frame.

        """
        rotation = as_tensor(body_rotation).T
        return cls(rotation, -rotation @ as_tensor(body_translation).reshape(3))

    @classmethod
    def look_at(cls, center: ArrayLike, target: ArrayLike, up: ArrayLike = (0.0, 1.0, 0.0)) -> CameraPose:
        """Get the camera at a center looking at a target.

        The camera's z axis points at the target and its y axis points down
        the image, i.e. away from the up direction.

        Parameters
        ----------
        center : ArrayLike
            The camera center.
        target : ArrayLike
            The point to look at.
        up : ArrayLike
            The world up direction.

        Returns
        -------
        CameraPose
            The camera pose.

        """
        center, target, up = as_tensor(center), as_tensor(target), as_tensor(up)
        forward = target - center
        forward = forward / torch.linalg.norm(forward)
        down = -(up - (up @ forward) * forward)
        down = down / torch.linalg.norm(down)
        right = torch.linalg.cross(down, forward)
        return cls(torch.stack([right, down, forward], dim=1), center)

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"rotation": as_array(self.rotation).tolist(), "translation": as_array(self.translation).tolist()}

    @classmethod
    def from_dict(cls, values: dict) -> CameraPose:
        """Create from a dict written by to_dict."""
        return cls(values["rotation"], values["translation"])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with the principal point at the image center.

    Attributes
    ----------
    focal : float
        The focal length f, in pixels.
    width : int
        The image width, in pixels.
    height : int
        The image height, in pixels.

    """

    focal: float = 1000.0
    width: int = 1000
    height: int = 1000

    def __post_init__(self) -> None:
        """Check the focal length is positive."""
        if self.focal <= 0:
            msg = f"Focal length must be positive, got {self.focal}"
            raise ValidationError(msg)

    @property
    def diagonal(self) -> float:
        """The image diagonal, in pixels."""
        return float(np.hypot(self.width, self.height))

    def scaled_to(self, width: int, height: int) -> Intrinsics:
        """Get the intrinsics of the same camera at another resolution.

        Parameters
        ----------
        width : int
            The new width.
        height : int
            The new height.

        Returns
        -------
        Intrinsics
            The rescaled intrinsics.

        """
        return Intrinsics(self.focal * width / self.width, width, height)

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"focal": float(self.focal), "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, values: dict) -> Intrinsics:
        """Create from a dict written by to_dict."""
        return cls(float(values["focal"]), int(values["width"]), int(values["height"]))


@dataclass(frozen=True)
class Keypoints2D:
    """2D keypoints in centered pixel coordinates, ordered like KeypointSet.

    Attributes
    ----------
    points : Tensor
        The (n, 2) keypoints (u, v).

    """

    points: Tensor

    def __post_init__(self) -> None:
        """Check the keypoints are a finite (n, 2) array."""
        object.__setattr__(self, "points", as_tensor(self.points))
        if self.points.ndim != 2 or self.points.shape[1] != 2:  # noqa: PLR2004
            msg = f"2D keypoints must be (n, 2), got {tuple(self.points.shape)}"
            raise DimensionMismatchError(msg)
        if not torch.isfinite(self.points.detach()).all():
            msg = "2D keypoints must be finite"
            raise ValidationError(msg)

    @property
    def n(self) -> int:
        """The number of keypoints."""
        return int(self.points.shape[0])


@dataclass(frozen=True)
class Rep25D:
    """The 2.5D ray bundle: unit viewing rays plus the camera center.

    Attributes
    ----------
    directions : Tensor
        The (n, 3) unit ray directions.
    cam_translation : Tensor
        The camera center, in meters.

    """

    directions: Tensor
    cam_translation: Tensor

    def __post_init__(self) -> None:
        """Check every direction has unit length."""
        object.__setattr__(self, "directions", as_tensor(self.directions))
        object.__setattr__(self, "cam_translation", as_tensor(self.cam_translation).reshape(3))
        norms = torch.linalg.norm(self.directions.detach(), dim=1)
        if (norms - 1.0).abs().max() > UNIT_TOLERANCE:
            msg = "Rep25D directions must have unit length"
            raise ValidationError(msg)

    @property
    def n(self) -> int:
        """The number of rays."""
        return int(self.directions.shape[0])

    @property
    def dim(self) -> int:
        """The length of the flattened representation, 3(n + 1)."""
        return 3 * (self.n + 1)

    def flatten(self) -> Tensor:
        """Flatten into (d_1, ..., d_n, t_cam)."""
        return torch.cat([self.directions.reshape(-1), self.cam_translation])

    @classmethod
    def from_flat(cls, flat: ArrayLike) -> Rep25D:
        """Build from a flattened vector, re-normalising the direction blocks.

        Parameters
        ----------
        flat : ArrayLike
            A vector of length 3(n + 1).

        Returns
        -------
        Rep25D
            The representation.

        """
        flat = as_tensor(flat).reshape(-1)
        if flat.shape[0] % 3:
            msg = f"Flattened Rep25D length must be a multiple of 3, got {flat.shape[0]}"
            raise DimensionMismatchError(msg)
        directions = flat[:-3].reshape(-1, 3)
        directions = directions / torch.linalg.norm(directions, dim=1, keepdim=True)
        return cls(directions, flat[-3:])
