"""Body and object kinematics.

Maps body and object parameters to 3D keypoints and meshes in the body-local
frame. The body model is pluggable through the BodyModel protocol; the
shipped StickBodyModel is an articulated kinematic tree with a linear shape
basis and a tube mesh around each bone. Points are rows throughout, so a
rotation R acts on a point set X as X R^T.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import DTYPE, IndexArray, Tensor, as_array, as_tensor
from hoiprior.lib.error import DimensionMismatchError, ValidationError
from hoiprior.lib.models import BodyParams, KeypointSet, Mesh, ObjectPose, SceneParams
from hoiprior.lib.util import axis_angle_to_matrix, read_json_with_backup, write_json

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

JOINT_NAMES = (
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
)

DEFAULT_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# Parent-relative rest offsets in meters, y up and z forward
DEFAULT_REST_OFFSETS = (
    (0.000, 0.000, 0.000),
    (0.090, -0.050, 0.000),
    (-0.090, -0.050, 0.000),
    (0.000, 0.110, -0.010),
    (0.010, -0.380, 0.000),
    (-0.010, -0.380, 0.000),
    (0.000, 0.130, 0.010),
    (0.000, -0.400, -0.030),
    (0.000, -0.400, -0.030),
    (0.000, 0.060, 0.020),
    (0.000, -0.060, 0.120),
    (0.000, -0.060, 0.120),
    (0.000, 0.220, -0.020),
    (0.080, 0.120, 0.000),
    (-0.080, 0.120, 0.000),
    (0.000, 0.090, 0.040),
    (0.110, 0.030, -0.010),
    (-0.110, 0.030, -0.010),
    (0.260, 0.000, -0.020),
    (-0.260, 0.000, -0.020),
    (0.250, 0.010, 0.000),
    (-0.250, 0.010, 0.000),
)

DEFAULT_NUM_BETAS = 10

# Joints each default shape direction stretches along their rest offsets
_SHAPE_GROUPS = (
    tuple(range(1, 22)),  # stature
    (4, 5, 7, 8),  # leg length
    (3, 6, 9, 12),  # torso length
    (16, 17, 18, 19, 20, 21),  # arm length
    (1, 2),  # hip width
    (13, 14),  # shoulder width
    (10, 11),  # foot length
    (15,),  # head size
    (20, 21),  # forearm length
    (12, 15),  # neck and head
)
_SHAPE_STEP = 0.05


@runtime_checkable
class BodyModel(Protocol):
    """The interface of a parametric body model.

    Implementations are deterministic and express keypoints in the body-local
    frame, with the root joint at the origin for zero parameters.
    """

    joint_count: int
    num_betas: int

    def evaluate(
        self,
        params: BodyParams,
        global_orient: Tensor | None = None,
        transl: Tensor | None = None,
    ) -> tuple[Tensor, Mesh]:
        """Get the joint positions and the mesh for a set of parameters."""
        ...

    def contact_regions(self) -> list[IndexArray]:
        """Get the vertex-index sets a contact may be labelled on."""
        ...

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        ...


# Body model ------------------------------------------------------------------


def _perpendicular_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Get two unit vectors perpendicular to a direction and to each other."""
    direction = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])  # noqa: PLR2004
    first = np.cross(direction, helper)
    first /= np.linalg.norm(first)
    return first, np.cross(direction, first)


class StickBodyModel:
    """An articulated stick figure body model.

    Joint j sits at its parent's position plus the parent's global rotation
    applied to the shaped offset of j; the pose of the root is given
    separately by global_orient and transl. Each bone is wrapped in a closed
    tube so the model has a surface to render and sample.

    Parameters
    ----------
    rest_offsets : np.ndarray
        The (J, 3) parent-relative rest offsets, in meters. The root offset
        is ignored.
    parents : Sequence[int]
        The parent of each joint, -1 for the root.
    shape_basis : np.ndarray
        The (J, 3, B) linear displacement basis applied to the offsets.
    tube_radius : float
        The radius of the bone tubes, in meters.
    tube_sides : int
        The number of sides of each tube.

    """

    def __init__(
        self,
        rest_offsets: np.ndarray,
        parents: tuple[int, ...] | list[int],
        shape_basis: np.ndarray,
        tube_radius: float = 0.04,
        tube_sides: int = 8,
    ) -> None:
        """Initialise the model and check the kinematic tree."""
        self.rest_offsets = np.asarray(rest_offsets, dtype=np.float64)
        self.parents = tuple(int(p) for p in parents)
        self.shape_basis = np.asarray(shape_basis, dtype=np.float64)
        self.tube_radius = float(tube_radius)
        self.tube_sides = int(tube_sides)
        self.joint_count = len(self.parents)
        self.num_betas = int(self.shape_basis.shape[2])

        if self.rest_offsets.shape != (self.joint_count, 3):
            msg = f"rest_offsets must be ({self.joint_count}, 3), got {self.rest_offsets.shape}"
            raise DimensionMismatchError(msg)
        if self.shape_basis.shape[:2] != (self.joint_count, 3):
            msg = f"shape_basis must be ({self.joint_count}, 3, B), got {self.shape_basis.shape}"
            raise DimensionMismatchError(msg)
        if self.parents[0] != -1 or any(not 0 <= p < j for j, p in enumerate(self.parents) if j > 0):
            msg = "Joint parents must form a tree rooted at joint 0 with parents listed before children"
            raise ValidationError(msg)
        if np.any(np.linalg.norm(self.rest_offsets[1:], axis=1) <= 0):
            msg = "Every non-root joint needs a nonzero rest offset"
            raise ValidationError(msg)
        if self.tube_radius <= 0 or self.tube_sides < 3:  # noqa: PLR2004
            msg = "Tube radius must be positive with at least 3 sides"
            raise ValidationError(msg)

        self._offsets = torch.as_tensor(self.rest_offsets, dtype=DTYPE)
        self._basis = torch.as_tensor(self.shape_basis, dtype=DTYPE)
        self._rings = self._build_rings()
        self.faces = self._build_faces()

    @classmethod
    def default(cls) -> StickBodyModel:
        """Get the built-in 22 joint body model.

        Returns
        -------
        StickBodyModel
            The default model.

        """
        offsets = np.asarray(DEFAULT_REST_OFFSETS, dtype=np.float64)
        basis = np.zeros((len(DEFAULT_PARENTS), 3, DEFAULT_NUM_BETAS))
        for k, joints in enumerate(_SHAPE_GROUPS):
            for j in joints:
                basis[j, :, k] = _SHAPE_STEP * offsets[j]
        return cls(offsets, DEFAULT_PARENTS, basis)

    @property
    def num_articulated(self) -> int:
        """The number of posed joints, i.e. every joint but the root."""
        return self.joint_count - 1

    @property
    def num_vertices(self) -> int:
        """The number of mesh vertices."""
        return self.num_articulated * (2 * self.tube_sides + 2)

    def _build_rings(self) -> np.ndarray:
        """Get the tube ring offsets of each bone in its parent's frame.

        Returns
        -------
        np.ndarray
            A (J - 1, sides, 3) array.

        """
        angles = 2 * np.pi * np.arange(self.tube_sides) / self.tube_sides
        rings = []
        for j in range(1, self.joint_count):
            first, second = _perpendicular_basis(self.rest_offsets[j])
            rings.append(self.tube_radius * (np.outer(np.cos(angles), first) + np.outer(np.sin(angles), second)))
        return np.asarray(rings)

    def _build_faces(self) -> IndexArray:
        """Get the triangles of every bone tube, sides and end caps."""
        sides = self.tube_sides
        per_bone = 2 * sides + 2
        faces = []
        for bone in range(self.num_articulated):
            base = bone * per_bone
            near_cap, far_cap = base + 2 * sides, base + 2 * sides + 1
            for i in range(sides):
                a, b = base + i, base + (i + 1) % sides
                c, d = base + sides + i, base + sides + (i + 1) % sides
                faces += [(a, b, d), (a, d, c), (near_cap, b, a), (far_cap, c, d)]
        return np.asarray(faces, dtype=np.int64)

    def _check_params(self, params: BodyParams) -> None:
        if params.beta.shape[0] != self.num_betas:
            msg = f"Expected {self.num_betas} shape coefficients, got {params.beta.shape[0]}"
            raise DimensionMismatchError(msg)
        if params.theta.shape[0] != 3 * self.num_articulated:
            msg = f"Expected {3 * self.num_articulated} pose coefficients, got {params.theta.shape[0]}"
            raise DimensionMismatchError(msg)

    def evaluate(
        self,
        params: BodyParams,
        global_orient: Tensor | None = None,
        transl: Tensor | None = None,
    ) -> tuple[Tensor, Mesh]:
        """Run forward kinematics and build the tube mesh.

        Parameters
        ----------
        params : BodyParams
            The shape and pose coefficients.
        global_orient : Tensor | None
            Optional axis-angle rotation of the root.
        transl : Tensor | None
            Optional translation of the root.

        Returns
        -------
        tuple[Tensor, Mesh]
            The (J, 3) joint positions and the posed mesh.

        """
        self._check_params(params)
        offsets = self._offsets + self._basis @ params.beta
        local_rotations = axis_angle_to_matrix(params.theta.reshape(-1, 3))

        root_rotation = (
            torch.eye(3, dtype=DTYPE) if global_orient is None else axis_angle_to_matrix(as_tensor(global_orient))
        )
        root_position = torch.zeros(3, dtype=DTYPE) if transl is None else as_tensor(transl).reshape(3)

        rotations = [root_rotation]
        positions = [root_position]
        for j in range(1, self.joint_count):
            parent = self.parents[j]
            positions.append(positions[parent] + rotations[parent] @ offsets[j])
            rotations.append(rotations[parent] @ local_rotations[j - 1])
        joints = torch.stack(positions)

        rings = torch.as_tensor(self._rings, dtype=DTYPE)
        vertices = []
        for j in range(1, self.joint_count):
            parent = self.parents[j]
            ring = rings[j - 1] @ rotations[parent].T
            vertices += [positions[parent] + ring, positions[j] + ring, positions[parent][None], positions[j][None]]
        return joints, Mesh(torch.cat(vertices), self.faces)

    def contact_regions(self) -> list[IndexArray]:
        """Get one contact region per joint: the tube ring around its end.

        Returns
        -------
        list[IndexArray]
            Region j - 1 holds the vertices of the ring at joint j.

        """
        per_bone = 2 * self.tube_sides + 2
        return [
            np.arange(bone * per_bone + self.tube_sides, bone * per_bone + 2 * self.tube_sides, dtype=np.int64)
            for bone in range(self.num_articulated)
        ]

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {
            "kind": "stick",
            "parents": list(self.parents),
            "rest_offsets": self.rest_offsets.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "tube_radius": self.tube_radius,
            "tube_sides": self.tube_sides,
        }

    @classmethod
    def from_dict(cls, values: dict) -> StickBodyModel:
        """Create from a dict written by to_dict."""
        return cls(
            np.asarray(values["rest_offsets"]),
            values["parents"],
            np.asarray(values["shape_basis"]),
            values["tube_radius"],
            values["tube_sides"],
        )

    def to_json(self, path: str | Path) -> None:
        """Write the model to a JSON file."""
        write_json(path, self.to_dict())

    @classmethod
    def from_json(cls, path: str | Path) -> StickBodyModel:
        """Load a model from a JSON file written by to_json."""
        return cls.from_dict(read_json_with_backup(path))


# Object template ---------------------------------------------------------------


@dataclass(frozen=True)
class ObjectTemplate:
    """A rigid object: mesh, keypoints, annotation parts and contact regions.

    Attributes
    ----------
    mesh : Mesh
        The canonical mesh.
    keypoint_indices : list[list[int]]
        For each keypoint, the vertices it is the mean of.
    parts : list[IndexArray]
        Vertex-index sets used by part keypoint annotation.
    contact_regions : list[IndexArray]
        Vertex-index sets a contact may be labelled on.
    default_scale : float
        The scale the object has in the world.
    keypoints_local : Tensor
        The (t_kp, 3) canonical keypoints, derived from the mesh.

    """

    mesh: Mesh
    keypoint_indices: list[list[int]]
    parts: list[IndexArray]
    contact_regions: list[IndexArray]
    default_scale: float = 1.0
    keypoints_local: Tensor = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Check every index set and derive the keypoints."""
        num_vertices = self.mesh.num_vertices
        named_sets = (("keypoint", self.keypoint_indices), ("part", self.parts), ("contact", self.contact_regions))
        for name, sets in named_sets:
            for i, index_set in enumerate(sets):
                indices = np.asarray(index_set)
                if indices.size == 0 or indices.min() < 0 or indices.max() >= num_vertices:
                    msg = f"Object {name} set {i} is empty or out of the vertex range"
                    raise ValidationError(msg)
        if self.default_scale <= 0:
            msg = "Object default scale must be positive"
            raise ValidationError(msg)
        object.__setattr__(self, "parts", [np.asarray(p, dtype=np.int64) for p in self.parts])
        object.__setattr__(self, "contact_regions", [np.asarray(r, dtype=np.int64) for r in self.contact_regions])
        object.__setattr__(
            self,
            "keypoints_local",
            torch.stack([self.mesh.vertices[list(indices)].mean(dim=0) for indices in self.keypoint_indices]),
        )

    @classmethod
    def box(cls, size: tuple[float, float, float] = (0.4, 0.3, 0.2), grid: int = 5) -> ObjectTemplate:
        """Build a box shaped template.

        Each face is a separate grid of grid x grid vertices. The keypoints are
        the eight corners, each part is one face's edge midpoints and center,
        and each contact region is the interior of one face.

        Parameters
        ----------
        size : tuple[float, float, float]
            The edge lengths along x, y and z, in meters.
        grid : int
            The number of vertices along each face edge, odd and at least 3.

        Returns
        -------
        ObjectTemplate
            The box template.

        """
        if grid < 3 or grid % 2 == 0:  # noqa: PLR2004
            msg = f"Box grid must be odd and at least 3, got {grid}"
            raise ValidationError(msg)
        half = np.asarray(size, dtype=np.float64) / 2
        steps = np.linspace(-1.0, 1.0, grid)
        mid, last = grid // 2, grid - 1

        vertices, faces, parts, regions = [], [], [], []
        corners: dict[tuple[int, int, int], list[int]] = {}
        for axis in range(3):
            u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
            for sign in (1.0, -1.0):
                base = len(vertices)
                for i in range(grid):
                    for j in range(grid):
                        point = np.zeros(3)
                        point[axis] = sign
                        point[u_axis] = steps[i]
                        point[v_axis] = steps[j]
                        vertices.append(point * half)
                        if i in (0, last) and j in (0, last):
                            corners.setdefault(tuple(int(c) for c in np.sign(point)), []).append(base + i * grid + j)
                for i in range(grid - 1):
                    for j in range(grid - 1):
                        a = base + i * grid + j
                        faces += [(a, a + grid, a + grid + 1), (a, a + grid + 1, a + 1)]
                part = (mid, mid * grid, mid * grid + mid, mid * grid + last, last * grid + mid)
                parts.append([base + index for index in part])
                regions.append([base + i * grid + j for i in range(1, last) for j in range(1, last)])

        mesh = Mesh(torch.as_tensor(np.asarray(vertices), dtype=DTYPE), np.asarray(faces, dtype=np.int64))
        keypoints = [corners[key] for key in sorted(corners)]
        return cls(mesh, keypoints, parts, regions, 1.0)

    @property
    def num_keypoints(self) -> int:
        """The number of object keypoints."""
        return len(self.keypoint_indices)

    def part_points(self, label: int) -> Tensor:
        """Get the canonical 3D points of a part.

        Parameters
        ----------
        label : int
            The part index.

        Returns
        -------
        Tensor
            The (P, 3) points.

        """
        return self.mesh.vertices[self.parts[label]]

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {
            "vertices": as_array(self.mesh.vertices).tolist(),
            "faces": self.mesh.faces.tolist(),
            "keypoints": [list(map(int, k)) for k in self.keypoint_indices],
            "parts": [p.tolist() for p in self.parts],
            "contact_regions": [r.tolist() for r in self.contact_regions],
            "default_scale": float(self.default_scale),
        }

    @classmethod
    def from_dict(cls, values: dict) -> ObjectTemplate:
        """Create from a dict written by to_dict.

        A keypoint may be given as a single vertex index or a list of them.
        """
        keypoints = [[k] if isinstance(k, int) else list(k) for k in values["keypoints"]]
        return cls(
            Mesh(values["vertices"], values["faces"]),
            keypoints,
            values["parts"],
            values.get("contact_regions", []),
            float(values.get("default_scale", 1.0)),
        )

    def to_json(self, path: str | Path) -> None:
        """Write the template to a JSON file."""
        write_json(path, self.to_dict())

    @classmethod
    def from_json(cls, path: str | Path) -> ObjectTemplate:
        """Load a template from a JSON file written by to_json."""
        return cls.from_dict(read_json_with_backup(path))


def body_model_from_dict(values: dict) -> StickBodyModel:
    """Load a body model from its serialised form.

    Parameters
    ----------
    values : dict
        The dict written by the model's to_dict.

    Returns
    -------
    StickBodyModel
        The model.

    """
    kind = values.get("kind", "stick")
    if kind != "stick":
        msg = f"Unknown body model kind '{kind}'"
        raise ValidationError(msg)
    return StickBodyModel.from_dict(values)


# Keypoints ---------------------------------------------------------------------


def body_keypoints(model: BodyModel, params: BodyParams) -> Tensor:
    """Get the body keypoints in the body-local frame.

    Parameters
    ----------
    model : BodyModel
        The body model.
    params : BodyParams
        The shape and pose coefficients.

    Returns
    -------
    Tensor
        The (joint_count, 3) keypoints.

    """
    joints, _ = model.evaluate(params)
    return joints


def transform_object_points(points: Tensor, pose: ObjectPose) -> Tensor:
    """Apply an object pose to canonical object points, s X R^T + t.

    Parameters
    ----------
    points : Tensor
        The (N, 3) canonical points.
    pose : ObjectPose
        The object pose.

    Returns
    -------
    Tensor
        The (N, 3) posed points.

    """
    return pose.scale * (as_tensor(points) @ pose.rotation.T) + pose.translation


def object_keypoints(template: ObjectTemplate, pose: ObjectPose) -> Tensor:
    """Get the object keypoints in the body-local frame.

    Parameters
    ----------
    template : ObjectTemplate
        The object template.
    pose : ObjectPose
        The object pose.

    Returns
    -------
    Tensor
        The (t_kp, 3) keypoints.

    """
    return transform_object_points(template.keypoints_local, pose)


def object_mesh(template: ObjectTemplate, pose: ObjectPose) -> Mesh:
    """Get the posed object mesh."""
    return Mesh(transform_object_points(template.mesh.vertices, pose), template.mesh.faces)


def assemble_keypoints(human: Tensor, object_points: Tensor) -> KeypointSet:
    """Stack human and object keypoints, human first.

    Parameters
    ----------
    human : Tensor
        The (n_human, 3) human keypoints.
    object_points : Tensor
        The (n_object, 3) object keypoints, may be empty.

    Returns
    -------
    KeypointSet
        The combined keypoints.

    """
    human = as_tensor(human).reshape(-1, 3)
    object_points = as_tensor(object_points).reshape(-1, 3)
    return KeypointSet(torch.cat([human, object_points]), human.shape[0], object_points.shape[0])


def scene_geometry(model: BodyModel, template: ObjectTemplate, scene: SceneParams) -> tuple[KeypointSet, Mesh, Mesh]:
    """Get the keypoints and both meshes of a scene.

    Parameters
    ----------
    model : BodyModel
        The body model.
    template : ObjectTemplate
        The object template.
    scene : SceneParams
        The scene.

    Returns
    -------
    tuple[KeypointSet, Mesh, Mesh]
        The combined keypoints, the body mesh and the object mesh.

    """
    joints, body_mesh = model.evaluate(scene.body)
    keypoints = assemble_keypoints(joints, object_keypoints(template, scene.object))
    return keypoints, body_mesh, object_mesh(template, scene.object)


@dataclass(frozen=True)
class InteractionModel:
    """A body model paired with an object template."""

    body: BodyModel
    template: ObjectTemplate

    @property
    def n_keypoints(self) -> int:
        """The number of human plus object keypoints."""
        return self.body.joint_count + self.template.num_keypoints

    def keypoints(self, scene: SceneParams) -> KeypointSet:
        """Get the combined keypoints of a scene."""
        return assemble_keypoints(body_keypoints(self.body, scene.body), object_keypoints(self.template, scene.object))

    def geometry(self, scene: SceneParams) -> tuple[KeypointSet, Mesh, Mesh]:
        """Get the keypoints and both meshes of a scene."""
        return scene_geometry(self.body, self.template, scene)

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {"body_model": self.body.to_dict(), "object_template": self.template.to_dict()}

    @classmethod
    def from_dict(cls, values: dict) -> InteractionModel:
        """Create from a dict written by to_dict."""
        return cls(body_model_from_dict(values["body_model"]), ObjectTemplate.from_dict(values["object_template"]))

    @classmethod
    def default(cls) -> InteractionModel:
        """Get the built-in body model with the default box."""
        return cls(StickBodyModel.default(), ObjectTemplate.box())
