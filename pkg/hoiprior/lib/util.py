"""Various utility functions used through hoiprior."""

import dataclasses
import hashlib
import json
import logging
import shutil
import zlib
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import DTYPE, ArrayLike, Tensor, as_tensor
from hoiprior.lib.error import ConfigError

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

ConfigT = TypeVar("ConfigT")


# Rotations ---------------------------------------------------------------------


def skew(vector: Tensor) -> Tensor:
    """Build the cross-product matrix of one or more 3-vectors.

    Parameters
    ----------
    vector : Tensor
        Vectors of shape (..., 3).

    Returns
    -------
    Tensor
        Skew-symmetric matrices of shape (..., 3, 3).

    """
    zero = torch.zeros_like(vector[..., 0])
    x, y, z = vector[..., 0], vector[..., 1], vector[..., 2]
    rows = [
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def axis_angle_to_matrix(axis_angle: ArrayLike) -> Tensor:
    """Convert axis-angle vectors into rotation matrices via the exponential map.

    Parameters
    ----------
    axis_angle : ArrayLike
        Axis-angle vectors of shape (..., 3), in radians.

    Returns
    -------
    Tensor
        Rotation matrices of shape (..., 3, 3).

    """
    return torch.linalg.matrix_exp(skew(as_tensor(axis_angle)))


def matrix_to_axis_angle(rotation: ArrayLike) -> Tensor:
    """Convert rotation matrices into axis-angle vectors.

    This is not differentiable and is only used to seed optimisation variables.

    Parameters
    ----------
    rotation : ArrayLike
        Rotation matrices of shape (..., 3, 3).

    Returns
    -------
    Tensor
        Axis-angle vectors of shape (..., 3).

    """
    matrices = np.asarray(as_tensor(rotation).detach().numpy())
    return as_tensor(Rotation.from_matrix(matrices.reshape(-1, 3, 3)).as_rotvec().reshape(*matrices.shape[:-2], 3))


def rotation_about_axis(axis: str, degrees: float) -> Tensor:
    """Get the rotation matrix for a rotation about a coordinate axis.

    Parameters
    ----------
    axis : str
        One of x, y or z.
    degrees : float
        The rotation angle in degrees.

    Returns
    -------
    Tensor
        The 3x3 rotation matrix.

    """
    vector = torch.zeros(3, dtype=DTYPE)
    vector["xyz".index(axis)] = np.deg2rad(degrees)
    return axis_angle_to_matrix(vector)


def geodesic_angle_deg(rotation_a: ArrayLike, rotation_b: ArrayLike) -> float:
    """Get the geodesic angle between two rotations, in degrees.

    Parameters
    ----------
    rotation_a : ArrayLike
        The first rotation.
    rotation_b : ArrayLike
        The second rotation.

    Returns
    -------
    float
        arccos((tr(R_a R_b^T) - 1) / 2), in degrees.

    """
    rot_a = np.asarray(as_tensor(rotation_a).detach().numpy())
    rot_b = np.asarray(as_tensor(rotation_b).detach().numpy())
    cosine = (np.trace(rot_a @ rot_b.T) - 1.0) / 2.0
    return float(np.rad2deg(np.arccos(np.clip(cosine, -1.0, 1.0))))


# Randomness --------------------------------------------------------------------


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Get the random generator for a pipeline stage.

    Each stage gets its own counter-based stream keyed by the global seed and
    the stage name, so adding or skipping a stage never shifts the random
    numbers of another.

    Parameters
    ----------
    seed : int
        The global seed.
    stage : str
        The name of the stage.

    Returns
    -------
    np.random.Generator
        A Philox backed generator.

    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stage.encode("utf-8"))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    """Derive a seeded torch generator from a numpy generator.

    Parameters
    ----------
    rng : np.random.Generator
        The generator to draw the seed from.

    Returns
    -------
    torch.Generator
        The seeded torch generator.

    """
    generator = torch.Generator()
    generator.manual_seed(int(rng.integers(0, 2**62)))
    return generator


# Serialisation -----------------------------------------------------------------


def canonical_json(obj: Any) -> str:  # noqa: ANN401
    """Encode an object as canonical JSON.

    Keys are sorted and separators compact, so encoding the same content twice
    always gives the same bytes.

    Parameters
    ----------
    obj : Any
        A JSON serialisable object.

    Returns
    -------
    str
        The encoded string.

    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(obj: Any) -> str:  # noqa: ANN401
    """Get the sha256 of the canonical JSON encoding of an object.

    Parameters
    ----------
    obj : Any
        A JSON serialisable object.

    Returns
    -------
    str
        The hex digest.

    """
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_hash(path: str | Path) -> str:
    """Get the sha256 of a file's bytes.

    Parameters
    ----------
    path : str | Path
        The file to hash.

    Returns
    -------
    str
        The hex digest.

    """
    digest = hashlib.sha256()
    with Path(path).open("rb") as file_in:
        for chunk in iter(lambda: file_in.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_with_backup(path: str | Path, writer: Callable[[Path], None]) -> None:
    """Write a file, keeping a backup of any previous version.

    The existing file is copied to <name>.bak first and restored if the write
    fails.

    Parameters
    ----------
    path : str | Path
        The file to write.
    writer : Callable[[Path], None]
        A function which writes the new content to the path it is given.

    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    backup = path.with_name(path.name + ".bak")
    had_previous = path.exists()
    if had_previous:
        shutil.copy2(path, backup)
    try:
        writer(path)
    except BaseException:
        if had_previous:
            shutil.move(backup, path)
        raise


def read_json_with_backup(path: str | Path) -> Any:  # noqa: ANN401
    """Read a JSON file, falling back to its backup if it is corrupt.

    Parameters
    ----------
    path : str | Path
        The file to read.

    Returns
    -------
    Any
        The decoded JSON.

    """
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as file_in:
            return json.load(file_in)
    except json.JSONDecodeError:
        backup = path.with_name(path.name + ".bak")
        if not backup.exists():
            raise
        LOGGER.warning("%s is corrupt, restoring it from %s", path, backup)
        shutil.copy2(backup, path)
        with path.open(encoding="utf-8") as file_in:
            return json.load(file_in)


def write_json(path: str | Path, obj: Any) -> None:  # noqa: ANN401
    """Write canonical JSON to a file, keeping a backup of the old version.

    Parameters
    ----------
    path : str | Path
        The file to write.
    obj : Any
        A JSON serialisable object.

    """

    def _write(target: Path) -> None:
        target.write_text(canonical_json(obj) + "\n", encoding="utf-8")

    write_with_backup(path, _write)


# Config dataclasses ------------------------------------------------------------


def config_from_dict(cls: type[ConfigT], values: dict | None) -> ConfigT:
    """Build a config dataclass from a config file section.

    Keys are matched case-insensitively against the dataclass fields; a key
    which does not name a field is an error so typos do not pass silently.

    Parameters
    ----------
    cls : type
        The config dataclass.
    values : dict | None
        The section read from the config file.

    Returns
    -------
    ConfigT
        The populated config object.

    """
    fields = {field.name: field for field in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in (values or {}).items():
        name = key.lower()
        if name not in fields:
            msg = f"Unknown key '{key}' for {cls.__name__}"
            raise ConfigError(msg)
        kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(config: Any) -> dict:  # noqa: ANN401
    """Convert a config dataclass into a plain dict.

    Parameters
    ----------
    config : Any
        A config dataclass instance.

    Returns
    -------
    dict
        The field values.

    """
    return dataclasses.asdict(config)
