"""Reading and writing keypoint datasets.

A dataset is a directory holding header.json, which carries the body model,
the object template and the keypoint counts, and records.ndjson, one JSON
record per image. Masks are run-length encoded. Everything is written as
canonical JSON so a read followed by a write reproduces the same bytes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_types import Array, as_array
from hoiprior.lib.error import DatasetFormatError
from hoiprior.lib.flow import condition_from_keypoints
from hoiprior.lib.grouping import DatasetIndex, DatasetItem
from hoiprior.lib.kinematics import InteractionModel
from hoiprior.lib.losses import Observations
from hoiprior.lib.models import CameraPose, Intrinsics, Keypoints2D, SceneParams
from hoiprior.lib.projection import rep25d_from_2d
from hoiprior.lib.util import canonical_json, file_hash, read_json_with_backup, write_json, write_with_backup

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

DATASET_FORMAT = "hoiprior-dataset"
DATASET_VERSION = 1
HEADER_FILE = "header.json"
RECORDS_FILE = "records.ndjson"


# Masks -------------------------------------------------------------------------


def encode_mask(mask: np.ndarray) -> dict:
    """Run-length encode a binary mask in row-major order.

    Parameters
    ----------
    mask : np.ndarray
        The (H, W) mask.

    Returns
    -------
    dict
        The shape, the value of the first run and the run lengths.

    """
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return {"shape": list(np.shape(mask)), "start": 0, "counts": []}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    return {"shape": list(np.shape(mask)), "start": int(flat[0]), "counts": np.diff(bounds).tolist()}


def decode_mask(encoded: dict) -> np.ndarray:
    """Decode a mask written by encode_mask.

    Parameters
    ----------
    encoded : dict
        The encoded mask.

    Returns
    -------
    np.ndarray
        The (H, W) bool mask.

    """
    shape = tuple(int(s) for s in encoded["shape"])
    counts = np.asarray(encoded["counts"], dtype=np.int64)
    if counts.sum() != int(np.prod(shape)):
        msg = f"Mask run lengths add up to {counts.sum()}, not {int(np.prod(shape))}"
        raise DatasetFormatError(msg)
    values = (np.arange(counts.size) + int(encoded["start"])) % 2 == 1
    return np.repeat(values, counts).reshape(shape)


# Records -----------------------------------------------------------------------


@dataclass
class DatasetRecord:
    """Everything known about one image.

    Attributes
    ----------
    image_id : str
        The unique id of the image.
    intrinsics : Intrinsics
        The intrinsics.
    camera : CameraPose
        The camera pose in the body-local frame.
    human_keypoints : Array
        The (n_human, 2) body keypoints, centered pixels.
    human_confidence : Array
        Their confidences.
    object_keypoints : Array
        The (n_object, 2) object keypoints, centered pixels.
    object_confidence : Array
        Their confidences.
    person_mask : np.ndarray | None
        The (H, W) person mask.
    object_mask : np.ndarray | None
        The (H, W) object mask.
    condition : Array | None
        The condition vector, derived from the keypoints when None.
    init_scene : SceneParams | None
        An initial estimate of the scene from an external predictor.
    gt_scene : SceneParams | None
        The ground truth scene, synthetic data only.
    family : int | None
        The synthetic family the image belongs to.

    """

    image_id: str
    intrinsics: Intrinsics
    camera: CameraPose
    human_keypoints: Array
    human_confidence: Array
    object_keypoints: Array
    object_confidence: Array
    person_mask: np.ndarray | None = None
    object_mask: np.ndarray | None = None
    condition: Array | None = None
    init_scene: SceneParams | None = None
    gt_scene: SceneParams | None = None
    family: int | None = None

    def __post_init__(self) -> None:
        """Store the keypoints as arrays."""
        self.human_keypoints = as_array(self.human_keypoints).reshape(-1, 2)
        self.object_keypoints = as_array(self.object_keypoints).reshape(-1, 2)
        self.human_confidence = as_array(self.human_confidence).reshape(-1)
        self.object_confidence = as_array(self.object_confidence).reshape(-1)
        if self.condition is not None:
            self.condition = as_array(self.condition).reshape(-1)

    @property
    def keypoints(self) -> Keypoints2D:
        """The human then object keypoints."""
        return Keypoints2D(np.concatenate([self.human_keypoints, self.object_keypoints]))

    def condition_vector(self) -> Array:
        """Get the condition vector, the stored one or the keypoint default."""
        if self.condition is not None:
            return self.condition
        return as_array(condition_from_keypoints(self.keypoints, self.intrinsics))

    def to_item(self) -> DatasetItem:
        """Get the grouping view of the record."""
        kps = self.keypoints
        return DatasetItem(
            self.image_id,
            rep25d_from_2d(kps, self.camera, self.intrinsics),
            kps,
            self.camera,
            self.intrinsics,
            self.family,
        )

    def observations(self) -> Observations:
        """Get the refinement inputs of the record."""
        return Observations(
            human_keypoints=self.human_keypoints,
            human_confidence=self.human_confidence,
            object_keypoints=self.object_keypoints,
            object_confidence=self.object_confidence,
            camera=self.camera,
            intrinsics=self.intrinsics,
            condition=self.condition_vector(),
            person_mask=self.person_mask,
            object_mask=self.object_mask,
        )

    def to_dict(self) -> dict:
        """Convert to a JSON serialisable dict."""
        return {
            "image_id": self.image_id,
            "intrinsics": self.intrinsics.to_dict(),
            "camera": self.camera.to_dict(),
            "human_keypoints": self.human_keypoints.tolist(),
            "human_confidence": self.human_confidence.tolist(),
            "object_keypoints": self.object_keypoints.tolist(),
            "object_confidence": self.object_confidence.tolist(),
            "person_mask": None if self.person_mask is None else encode_mask(self.person_mask),
            "object_mask": None if self.object_mask is None else encode_mask(self.object_mask),
            "condition": None if self.condition is None else self.condition.tolist(),
            "init_scene": None if self.init_scene is None else self.init_scene.to_dict(),
            "gt_scene": None if self.gt_scene is None else self.gt_scene.to_dict(),
            "family": self.family,
        }

    @classmethod
    def from_dict(cls, values: dict) -> DatasetRecord:
        """Create from a dict written by to_dict."""
        try:
            return cls(
                image_id=str(values["image_id"]),
                intrinsics=Intrinsics.from_dict(values["intrinsics"]),
                camera=CameraPose.from_dict(values["camera"]),
                human_keypoints=values["human_keypoints"],
                human_confidence=values["human_confidence"],
                object_keypoints=values["object_keypoints"],
                object_confidence=values["object_confidence"],
                person_mask=None if values.get("person_mask") is None else decode_mask(values["person_mask"]),
                object_mask=None if values.get("object_mask") is None else decode_mask(values["object_mask"]),
                condition=values.get("condition"),
                init_scene=None if values.get("init_scene") is None else SceneParams.from_dict(values["init_scene"]),
                gt_scene=None if values.get("gt_scene") is None else SceneParams.from_dict(values["gt_scene"]),
                family=values.get("family"),
            )
        except KeyError as exc:
            msg = f"Dataset record is missing the field {exc}"
            raise DatasetFormatError(msg) from exc


# Dataset -----------------------------------------------------------------------


@dataclass
class Dataset:
    """A header, which fixes the templates, plus the image records."""

    model: InteractionModel
    records: list[DatasetRecord]

    def __post_init__(self) -> None:
        """Check the records agree with the templates and ids are unique."""
        n_human, n_object = self.model.body.joint_count, self.model.template.num_keypoints
        seen = set()
        for record in self.records:
            if record.human_keypoints.shape[0] != n_human or record.object_keypoints.shape[0] != n_object:
                msg = (
                    f"Record '{record.image_id}' has {record.human_keypoints.shape[0]} + "
                    f"{record.object_keypoints.shape[0]} keypoints, the templates have {n_human} + {n_object}"
                )
                raise DatasetFormatError(msg)
            if record.image_id in seen:
                msg = f"Duplicate image id '{record.image_id}'"
                raise DatasetFormatError(msg)
            seen.add(record.image_id)

    def __len__(self) -> int:
        """The number of records."""
        return len(self.records)

    def header(self) -> dict:
        """Get the header dict."""
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "n_human": self.model.body.joint_count,
            "n_object": self.model.template.num_keypoints,
            **self.model.to_dict(),
        }

    def index(self) -> DatasetIndex:
        """Get the grouping view of every record."""
        return DatasetIndex([record.to_item() for record in self.records])

    def by_id(self) -> dict[str, DatasetRecord]:
        """Get the records keyed by image id."""
        return {record.image_id: record for record in self.records}


def write_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write a dataset directory.

    Parameters
    ----------
    dataset : Dataset
        The dataset.
    directory : str | Path
        The directory, created if missing.

    """
    directory = Path(directory)
    write_json(directory / HEADER_FILE, dataset.header())

    def _write(target: Path) -> None:
        with target.open("w", encoding="utf-8") as file_out:
            for record in dataset.records:
                file_out.write(canonical_json(record.to_dict()) + "\n")

    write_with_backup(directory / RECORDS_FILE, _write)
    LOGGER.info("Wrote %d records to %s", len(dataset), directory)


def read_dataset(directory: str | Path) -> Dataset:
    """Read a dataset directory written by write_dataset.

    Parameters
    ----------
    directory : str | Path
        The directory.

    Returns
    -------
    Dataset
        The dataset.

    """
    directory = Path(directory)
    header = read_json_with_backup(directory / HEADER_FILE)
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        msg = f"{directory} is not a version {DATASET_VERSION} {DATASET_FORMAT} directory"
        raise DatasetFormatError(msg)
    model = InteractionModel.from_dict(header)

    records = []
    with (directory / RECORDS_FILE).open(encoding="utf-8") as file_in:
        for line_number, line in enumerate(file_in, start=1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                msg = f"Line {line_number} of {directory / RECORDS_FILE} is not valid JSON"
                raise DatasetFormatError(msg) from exc
    return Dataset(model, records)


def dataset_hash(directory: str | Path) -> dict[str, str]:
    """Get the content hashes of a dataset's files, used for stage skipping."""
    directory = Path(directory)
    return {name: file_hash(directory / name) for name in (HEADER_FILE, RECORDS_FILE)}
