"""Script to compare the supervision the prior is trained with.

Three flows are trained on the same synthetic dataset:

    2d-clusters   2D keypoints grouped by the approximate nearest view search
    2d-gt-groups  2D keypoints grouped by the family labels
    3d            ground truth 3D keypoints seen from random ring cameras

The test scenes are then refined with each flow and the aggregate metrics are
printed and written to supervision.json.

Run from the root of the repository:

    poetry run python scripts/supervision_ablation.py --out runs/ablation-supervision
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np
from prettytable import PrettyTable
from tqdm import tqdm

from hoiprior.lib.config import AppConfig, setup_logging
from hoiprior.lib.dataset import read_dataset
from hoiprior.lib.evaluation import aggregate, evaluate
from hoiprior.lib.flow import rep25d_from_scene_views, train, train_on_samples
from hoiprior.lib.grouping import brute_force_topk, build_clusters, ground_truth_neighbors, knn_group, recall_at_k
from hoiprior.lib.kinematics import ObjectTemplate, StickBodyModel
from hoiprior.lib.optimizer import optimize
from hoiprior.lib.pipeline import (
    MEAN_OCCLUSION_FILE,
    RunConfig,
    evaluation_records,
    initial_scene,
    resolve_dataset_dir,
    run_pipeline,
)
from hoiprior.lib.render import MeanOcclusionMap
from hoiprior.lib.synthetic import SyntheticFamilyConfig, ring_cameras, synth_generate
from hoiprior.lib.util import read_json_with_backup, stage_rng, write_json

parser = argparse.ArgumentParser(description="Train the prior with three kinds of supervision and compare them")
parser.add_argument("--out", type=Path, default=Path("runs/ablation-supervision"), help="The run directory")
parser.add_argument("--views-3d", type=int, default=8, help="Ring cameras per scene for the 3D supervision")
args = parser.parse_args()

setup_logging()
config = RunConfig.from_app_config()
synth_cfg = replace(SyntheticFamilyConfig.from_dict(AppConfig.get_config("SYNTH")), rng_seed=config.stage_seed("synth"))
dataset_dir = resolve_dataset_dir(config, args.out)
if not (dataset_dir / "header.json").exists():
    synth_generate(synth_cfg, StickBodyModel.default(), ObjectTemplate.box(), dataset_dir)

run_pipeline(config, args.out, ("occlusion",))
dataset = read_dataset(dataset_dir)
mean = MeanOcclusionMap.from_dict(read_json_with_backup(args.out / MEAN_OCCLUSION_FILE))
index = dataset.index()
conditions = [record.condition_vector() for record in dataset.records]
grouping_cfg = replace(config.grouping, rng_seed=config.stage_seed("group"))
flow_cfg = replace(config.flow, rng_seed=config.stage_seed("train-prior"))

# Supervisions -----------------------------------------------------------------

flows = {}

neighbors = knn_group(index, grouping_cfg)
print(f"Recall of the approximate grouping: {recall_at_k(neighbors, brute_force_topk(index, neighbors.k)):.4f}")
clusters = build_clusters(index, neighbors, grouping_cfg.drop_distance)
flows["2d-clusters"] = train(list(zip(conditions, clusters, strict=True)), flow_cfg).flow

neighbors = ground_truth_neighbors(index, grouping_cfg.k)
clusters = build_clusters(index, neighbors, grouping_cfg.drop_distance)
flows["2d-gt-groups"] = train(list(zip(conditions, clusters, strict=True)), flow_cfg).flow

rng = stage_rng(config.seed, "supervision/3d")
samples = []
for cond, record in zip(conditions, dataset.records, strict=True):
    cameras = ring_cameras(synth_cfg, args.views_3d, rng)
    samples.append((cond, rep25d_from_scene_views(dataset.model.keypoints(record.gt_scene), cameras)))
flows["3d"] = train_on_samples(samples, flow_cfg).flow

# Refinement -------------------------------------------------------------------

records = evaluation_records(dataset, config.pipeline.n_test)
optim_cfg = replace(config.optim, rng_seed=config.stage_seed("optimize"))
results = {}
for name, flow in flows.items():
    reports = []
    for record in tqdm(records, desc=name):
        init = initial_scene(record, config.seed, config.pipeline)
        refined, _ = optimize(init, record.observations(), flow, mean, optim_cfg, dataset.model)
        reports.append(evaluate(refined, record.gt_scene, dataset.model, cfg=config.evaluation))
    results[name] = aggregate(reports)

table = PrettyTable()
table.field_names = ["Supervision", "SMPL chamfer", "Object chamfer", "Rotation error", "Translation error"]
for name, summary in results.items():
    table.add_row(
        [
            name,
            *(
                f"{summary[metric]['mean']:.3f}"
                for metric in ("smpl_chamfer_cm", "object_chamfer_cm", "rotation_error_deg", "translation_error_cm")
            ),
        ],
    )
table.align["Supervision"] = "l"
print(table)

spread = np.ptp([summary["object_chamfer_cm"]["mean"] for summary in results.values()])
print(f"Spread of the mean object chamfer over the supervisions: {spread:.3f} cm")
write_json(args.out / "supervision.json", results)
