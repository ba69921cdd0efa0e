"""The end-to-end pipeline: group, train-prior, occlusion, optimize and eval.

Each stage reads the dataset and the outputs of the stages it needs, and
writes its own outputs to the run directory. A manifest records, for every
completed stage, a hash of its inputs and the hashes of its output files. A
stage is skipped when its input hash and output files are unchanged and none
of the stages it needs ran.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from hoiprior.lib.config import AppConfig
from hoiprior.lib.dataset import Dataset, DatasetRecord, dataset_hash, read_dataset
from hoiprior.lib.error import (
    ConfigError,
    EmptyInputError,
    EmptyProjectionError,
    StageError,
    ValidationError,
)
from hoiprior.lib.evaluation import EvalConfig, MetricReport, aggregate, evaluate
from hoiprior.lib.flow import FlowConfig, load_checkpoint, save_checkpoint, train
from hoiprior.lib.grouping import GroupingConfig, NeighborSets, build_clusters, ground_truth_neighbors, knn_group
from hoiprior.lib.losses import LOSS_TERMS
from hoiprior.lib.models import SceneParams
from hoiprior.lib.optimizer import OptimConfig, optimize
from hoiprior.lib.render import MeanOcclusionMap, OcclusionConfig, mean_occlusion_map, occlusion_map
from hoiprior.lib.synthetic import perturb_scene
from hoiprior.lib.util import (
    config_from_dict,
    config_to_dict,
    content_hash,
    file_hash,
    read_json_with_backup,
    stage_rng,
    write_json,
    write_with_backup,
)

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = 1
NEIGHBORS_FILE = "neighbors.json"
FLOW_FILE = "flow.json"
TRAINING_FILE = "training.json"
MEAN_OCCLUSION_FILE = "mean_occlusion.json"
SCENES_FILE = "scenes.json"
REPORTS_FILE = "reports.json"
TRACE_FILE = "traces.csv"
TRACE_COLUMNS = ("image_id", "phase", "step", "total", *LOSS_TERMS, "log_score")
METRICS_FILE = "metrics.csv"
METRIC_COLUMNS = ("image_id", "scene", *(item.name for item in fields(MetricReport) if item.name != "image_id"))


@dataclass(frozen=True)
class PipelineConfig:
    """Settings of the pipeline itself.

    Attributes
    ----------
    dataset : str
        The dataset directory, <out_dir>/dataset when empty.
    n_test : int
        Number of images to refine and evaluate, spread evenly over the
        dataset, default 20.
    perturb_rotation_deg : float
        Rotation of the object in the initial scenes of records without an
        initial estimate, default 20.
    perturb_translation : float
        Translation of the object in those initial scenes in meters,
        default 0.3.
    ground_truth_grouping : bool
        Group by the family labels instead of the approximate grouping,
        default False.

    """

    dataset: str = ""
    n_test: int = 20
    perturb_rotation_deg: float = 20.0
    perturb_translation: float = 0.3
    ground_truth_grouping: bool = False

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.n_test < 1:
            msg = f"n_test must be positive, got {self.n_test}"
            raise ConfigError(msg)
        if self.perturb_rotation_deg < 0 or self.perturb_translation < 0:
            msg = "Perturbations must be nonnegative"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, values: dict | None) -> PipelineConfig:
        """Create from a config file section."""
        return config_from_dict(cls, values)


@dataclass(frozen=True)
class RunConfig:
    """Every setting a pipeline run depends on."""

    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_app_config(cls) -> RunConfig:
        """Build from the loaded config file."""
        return cls(
            seed=AppConfig.get_config("SEED"),
            pipeline=PipelineConfig.from_dict(AppConfig.get_config("PIPELINE")),
            grouping=GroupingConfig.from_dict(AppConfig.get_config("GROUPING")),
            flow=FlowConfig.from_dict(AppConfig.get_config("FLOW")),
            occlusion=OcclusionConfig.from_dict(AppConfig.get_config("OCCLUSION")),
            optim=OptimConfig.from_dict(AppConfig.get_config("OPTIM")),
            evaluation=EvalConfig.from_dict(AppConfig.get_config("EVAL")),
        )

    def stage_seed(self, stage: str) -> int:
        """Get the seed of a stage, split from the run seed."""
        return int(stage_rng(self.seed, stage).integers(2**31))


# Shared helpers ----------------------------------------------------------------


def initial_scene(record: DatasetRecord, seed: int, pcfg: PipelineConfig) -> SceneParams:
    """Get the scene a refinement of a record starts from.

    Parameters
    ----------
    record : DatasetRecord
        The record.
    seed : int
        The run seed.
    pcfg : PipelineConfig
        The perturbation settings.

    Returns
    -------
    SceneParams
        The record's initial estimate, or its ground truth with the object
        perturbed.

    """
    if record.init_scene is not None:
        return record.init_scene
    if record.gt_scene is None:
        msg = f"Record '{record.image_id}' has neither an initial nor a ground truth scene"
        raise ValidationError(msg)
    rng = stage_rng(seed, f"init/{record.image_id}")
    return perturb_scene(record.gt_scene, pcfg.perturb_rotation_deg, pcfg.perturb_translation, rng)


def evaluation_records(dataset: Dataset, n_test: int) -> list[DatasetRecord]:
    """Pick up to n_test records spread evenly over the dataset."""
    count = min(n_test, len(dataset))
    if count == 0:
        msg = "The dataset has no records"
        raise EmptyInputError(msg)
    picks = np.unique(np.linspace(0, len(dataset) - 1, count).round().astype(int))
    return [dataset.records[i] for i in picks]


def _blank(value: object) -> object:
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else value


def write_csv(path: str | Path, columns: tuple[str, ...], rows: list[dict]) -> None:
    """Write rows as CSV, blank where a value is missing or undefined."""

    def _write(target: Path) -> None:
        with target.open("w", encoding="utf-8", newline="") as file_out:
            writer = csv.DictWriter(file_out, fieldnames=columns, restval="", lineterminator="\n")
            writer.writeheader()
            writer.writerows({key: _blank(value) for key, value in row.items()} for row in rows)

    write_with_backup(path, _write)


def write_trace_csv(path: str | Path, rows: list[dict]) -> None:
    """Write optimisation trace rows as CSV."""
    write_csv(path, TRACE_COLUMNS, rows)


def _init_settings(pcfg: PipelineConfig) -> dict:
    return {"rotation_deg": pcfg.perturb_rotation_deg, "translation": pcfg.perturb_translation}


def _record_resolution(record: DatasetRecord, resolution: int) -> int | tuple[int, int]:
    if record.person_mask is None:
        return resolution
    height, width = record.person_mask.shape
    return width, height


# Stages ------------------------------------------------------------------------


@dataclass
class PipelineContext:
    """What every stage can see."""

    dataset: Dataset
    config: RunConfig
    out_dir: Path

    def path(self, name: str) -> Path:
        """Get the path of an artifact in the run directory."""
        return self.out_dir / name


def stage_group(ctx: PipelineContext) -> None:
    """Group every image with its neighbors and write the neighbor sets."""
    cfg = replace(ctx.config.grouping, rng_seed=ctx.config.stage_seed("group"))
    index = ctx.dataset.index()
    if ctx.config.pipeline.ground_truth_grouping:
        neighbors = ground_truth_neighbors(index, cfg.k)
    else:
        neighbors = knn_group(index, cfg)
    write_json(ctx.path(NEIGHBORS_FILE), neighbors.to_dict())


def stage_train_prior(ctx: PipelineContext) -> None:
    """Train the flow on the clusters and write the checkpoint."""
    index = ctx.dataset.index()
    neighbors = NeighborSets.from_dict(read_json_with_backup(ctx.path(NEIGHBORS_FILE)))
    clusters = build_clusters(index, neighbors, ctx.config.grouping.drop_distance)
    conditions = [record.condition_vector() for record in ctx.dataset.records]
    cfg = replace(ctx.config.flow, rng_seed=ctx.config.stage_seed("train-prior"))
    result = train(list(zip(conditions, clusters, strict=True)), cfg)
    save_checkpoint(result.flow, ctx.path(FLOW_FILE))
    write_json(ctx.path(TRAINING_FILE), {"diverged": result.diverged, "loss_curve": result.loss_curve})


def stage_occlusion(ctx: PipelineContext) -> None:
    """Average the occlusion maps of the initial scenes and write the mean map."""
    cfg = ctx.config.occlusion
    model = ctx.dataset.model
    maps = []
    for record in ctx.dataset.records:
        _, mesh_h, mesh_o = model.geometry(initial_scene(record, ctx.config.seed, ctx.config.pipeline))
        try:
            maps.append(
                occlusion_map(
                    mesh_h,
                    mesh_o,
                    record.camera,
                    record.intrinsics,
                    _record_resolution(record, cfg.resolution),
                    record.person_mask,
                    record.object_mask,
                    cfg.eps_front,
                ),
            )
        except EmptyProjectionError:
            LOGGER.warning("Skipping '%s', its initial scene does not render", record.image_id)
    LOGGER.info("Averaging the occlusion maps of %d images", len(maps))
    write_json(ctx.path(MEAN_OCCLUSION_FILE), mean_occlusion_map(maps).to_dict())


def stage_optimize(ctx: PipelineContext) -> None:
    """Refine the test images and write the initial and refined scenes."""
    flow = load_checkpoint(ctx.path(FLOW_FILE))
    mean = MeanOcclusionMap.from_dict(read_json_with_backup(ctx.path(MEAN_OCCLUSION_FILE)))
    cfg = replace(ctx.config.optim, rng_seed=ctx.config.stage_seed("optimize"))
    scenes, traces = {}, []
    for record in evaluation_records(ctx.dataset, ctx.config.pipeline.n_test):
        init = initial_scene(record, ctx.config.seed, ctx.config.pipeline)
        refined, diagnostics = optimize(init, record.observations(), flow, mean, cfg, ctx.dataset.model)
        LOGGER.info(
            "Refined '%s': objective %.6g -> %.6g%s",
            record.image_id,
            diagnostics.initial_loss,
            diagnostics.best_loss,
            " (diverged)" if diagnostics.diverged else "",
        )
        scenes[record.image_id] = {
            "init": init.to_dict(),
            "refined": refined.to_dict(),
            "diagnostics": diagnostics.to_dict(),
        }
        traces += [{"image_id": record.image_id, **row} for row in diagnostics.trace]
    write_json(ctx.path(SCENES_FILE), scenes)
    write_trace_csv(ctx.path(TRACE_FILE), traces)


def stage_eval(ctx: PipelineContext) -> None:
    """Compare the initial and refined scenes with the ground truth.

    Writes the aggregated reports as JSON and one CSV row per image and scene.
    """
    scenes = read_json_with_backup(ctx.path(SCENES_FILE))
    records = ctx.dataset.by_id()
    cfg = ctx.config.evaluation
    before, after, rows = [], [], []
    for image_id in sorted(scenes):
        gt_scene = records[image_id].gt_scene
        if gt_scene is None:
            LOGGER.warning("Not evaluating '%s', it has no ground truth scene", image_id)
            continue
        for scene_key, reports in (("init", before), ("refined", after)):
            scene = SceneParams.from_dict(scenes[image_id][scene_key])
            report = replace(evaluate(scene, gt_scene, ctx.dataset.model, cfg=cfg), image_id=image_id)
            reports.append(report)
            rows.append({"scene": scene_key, **report.to_dict()})
    if not after:
        msg = "None of the refined images has a ground truth scene"
        raise EmptyInputError(msg)
    write_json(
        ctx.path(REPORTS_FILE),
        {
            "before": aggregate(before),
            "after": aggregate(after),
            "reports": [report.to_dict() for report in after],
        },
    )
    write_csv(ctx.path(METRICS_FILE), METRIC_COLUMNS, rows)


@dataclass(frozen=True)
class Stage:
    """A pipeline stage: what it needs, what it writes and its settings."""

    name: str
    needs: tuple[str, ...]
    outputs: tuple[str, ...]
    run: Callable[[PipelineContext], None]
    settings: Callable[[RunConfig], dict]


STAGES = (
    Stage(
        "group",
        (),
        (NEIGHBORS_FILE,),
        stage_group,
        lambda c: {
            "grouping": config_to_dict(c.grouping),
            "ground_truth": c.pipeline.ground_truth_grouping,
        },
    ),
    Stage(
        "train-prior",
        ("group",),
        (FLOW_FILE, TRAINING_FILE),
        stage_train_prior,
        lambda c: {"flow": config_to_dict(c.flow), "drop_distance": c.grouping.drop_distance},
    ),
    Stage(
        "occlusion",
        (),
        (MEAN_OCCLUSION_FILE,),
        stage_occlusion,
        lambda c: {"occlusion": config_to_dict(c.occlusion), "init": _init_settings(c.pipeline)},
    ),
    Stage(
        "optimize",
        ("train-prior", "occlusion"),
        (SCENES_FILE, TRACE_FILE),
        stage_optimize,
        lambda c: {
            "optim": config_to_dict(c.optim),
            "init": _init_settings(c.pipeline),
            "n_test": c.pipeline.n_test,
        },
    ),
    Stage(
        "eval",
        ("optimize",),
        (REPORTS_FILE, METRICS_FILE),
        stage_eval,
        lambda c: {"evaluation": config_to_dict(c.evaluation)},
    ),
)
STAGE_NAMES = tuple(stage.name for stage in STAGES)


# Manifest ----------------------------------------------------------------------


def read_manifest(out_dir: str | Path) -> dict:
    """Read the manifest of a run directory, empty when there is none."""
    path = Path(out_dir) / MANIFEST_FILE
    if not path.exists():
        return {"version": MANIFEST_VERSION, "stages": {}}
    manifest = read_json_with_backup(path)
    if manifest.get("version") != MANIFEST_VERSION:
        LOGGER.warning("Ignoring a manifest of version %s", manifest.get("version"))
        return {"version": MANIFEST_VERSION, "stages": {}}
    return manifest


def stage_key(stage: Stage, ctx: PipelineContext, data_hash: dict, manifest: dict) -> str:
    """Hash everything a stage's outputs depend on."""
    return content_hash(
        {
            "stage": stage.name,
            "seed": ctx.config.seed,
            "settings": stage.settings(ctx.config),
            "dataset": data_hash,
            "needs": {need: manifest["stages"].get(need, {}).get("outputs") for need in stage.needs},
        },
    )


def _outputs_intact(stage: Stage, ctx: PipelineContext, entry: dict) -> bool:
    recorded = entry.get("outputs", {})
    for name in stage.outputs:
        path = ctx.path(name)
        if not path.exists() or recorded.get(name) != file_hash(path):
            return False
    return True


def run_stages(
    ctx: PipelineContext,
    dataset_dir: str | Path,
    only: tuple[str, ...] | None = None,
    *,
    force: bool = False,
) -> list[str]:
    """Run the stages which are out of date.

    Parameters
    ----------
    ctx : PipelineContext
        The dataset, settings and run directory.
    dataset_dir : str | Path
        The dataset directory, hashed as an input of every stage.
    only : tuple[str, ...] | None
        Run only these stages, in pipeline order, all stages when None.
    force : bool
        Run the selected stages even when they are up to date.

    Returns
    -------
    list[str]
        The stages which ran.

    """
    unknown = set(only or ()) - set(STAGE_NAMES)
    if unknown:
        msg = f"Unknown stages {sorted(unknown)}, expected some of {STAGE_NAMES}"
        raise ConfigError(msg)

    data_hash = dataset_hash(dataset_dir)
    manifest = read_manifest(ctx.out_dir)
    ran: list[str] = []
    for stage in STAGES:
        if only is not None and stage.name not in only:
            continue
        key = stage_key(stage, ctx, data_hash, manifest)
        entry = manifest["stages"].get(stage.name, {})
        upstream_ran = any(need in ran for need in stage.needs)
        if not (force or upstream_ran) and entry.get("key") == key and _outputs_intact(stage, ctx, entry):
            LOGGER.info("Skipping stage '%s', its inputs are unchanged", stage.name)
            continue

        LOGGER.info("Running stage '%s'", stage.name)
        try:
            stage.run(ctx)
        except Exception as exc:  # noqa: BLE001
            LOGGER.exception("Stage '%s' failed", stage.name)
            raise StageError(stage.name, exc) from exc
        manifest["stages"][stage.name] = {
            "key": key,
            "outputs": {name: file_hash(ctx.path(name)) for name in stage.outputs},
        }
        write_json(ctx.path(MANIFEST_FILE), manifest)
        ran.append(stage.name)
    return ran


def resolve_dataset_dir(config: RunConfig, out_dir: str | Path) -> Path:
    """Get the dataset directory of a run, <out_dir>/dataset unless configured."""
    return Path(config.pipeline.dataset) if config.pipeline.dataset else Path(out_dir) / "dataset"


def run_pipeline(
    config: RunConfig,
    out_dir: str | Path,
    only: tuple[str, ...] | None = None,
    *,
    force: bool = False,
) -> dict:
    """Run the pipeline on a dataset, skipping stages whose inputs are unchanged.

    Parameters
    ----------
    config : RunConfig
        The settings.
    out_dir : str | Path
        The run directory.
    only : tuple[str, ...] | None
        Run only these stages, all stages when None.
    force : bool
        Run the selected stages even when they are up to date.

    Returns
    -------
    dict
        The contents of the reports file: the aggregate metrics before and
        after refinement and the per-image reports. Empty when there are no
        reports yet.

    """
    out_dir = Path(out_dir)
    dataset_dir = resolve_dataset_dir(config, out_dir)
    ctx = PipelineContext(read_dataset(dataset_dir), config, out_dir)
    ran = run_stages(ctx, dataset_dir, only, force=force)
    LOGGER.info("Stages run: %s", ", ".join(ran) if ran else "none")

    reports = ctx.path(REPORTS_FILE)
    return read_json_with_backup(reports) if reports.exists() else {}


def read_reports(out_dir: str | Path) -> list[MetricReport]:
    """Read the per-image reports of a finished run."""
    values = read_json_with_backup(Path(out_dir) / REPORTS_FILE)
    return [MetricReport.from_dict(report) for report in values["reports"]]
