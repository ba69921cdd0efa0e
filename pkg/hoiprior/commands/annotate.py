"""The annotate-solve subcommand, which turns sparse annotations into an object pose.

The input is a JSON file with the intrinsics and the part keypoints of one
image, and optionally the camera, the body parameters and contact pairs:

    {
        "intrinsics": {"focal": 1000.0, "width": 1000, "height": 1000},
        "parts": {"points": [[u, v], ...], "labels": [0, ...]},
        "camera": {"rotation": [...], "translation": [...]},
        "body": {"beta": [...], "theta": [...]},
        "contact_pairs": [[human_region, object_region], ...]
    }
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from hoiprior.lib.annotation import (
    ContactPairAnnotation,
    ContactRegions,
    PartKeypointAnnotation,
    SolverConfig,
    region_gap,
    solve_object_pose,
    solve_object_pose_softmin,
    solve_relative_pose,
)
from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_command import Command, CommandLine
from hoiprior.lib.error import ValidationError
from hoiprior.lib.kinematics import ObjectTemplate, StickBodyModel
from hoiprior.lib.models import BodyParams, CameraPose, Intrinsics
from hoiprior.lib.pipeline import RunConfig
from hoiprior.lib.util import read_json_with_backup, write_json


class AnnotateSolve(Command):
    """Solve for the object pose of an annotated image."""

    name = "annotate-solve"
    help = "Recover the object pose from part keypoints and place it from contact pairs"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """Add the solver arguments."""
        parser.add_argument("annotation", type=Path, help="The annotation JSON file")
        parser.add_argument("--out", type=Path, help="Where to write the solution, printed if not given")
        parser.add_argument("--starts", type=int, help="Random starting rotations, overrides the config")
        parser.add_argument(
            "--softmin-temp",
            type=float,
            help="Use the softmin solver at this temperature instead of the alternation solver",
        )
        parser.add_argument("--body-model", type=Path, help="Body model JSON, the built-in model if not given")
        parser.add_argument("--template", type=Path, help="Object template JSON, the built-in box if not given")

    def run(self, args: argparse.Namespace) -> int:
        """Run the solvers and write or print the solution."""
        cfg = SolverConfig.from_dict(AppConfig.get_config("ANNOTATION"))
        cfg = replace(cfg, rng_seed=RunConfig.from_app_config().stage_seed("annotate-solve"))
        if args.starts is not None:
            cfg = replace(cfg, starts=args.starts)
        if args.softmin_temp is not None:
            cfg = replace(cfg, softmin_temp=args.softmin_temp)

        values = read_json_with_backup(args.annotation)
        if "intrinsics" not in values or "parts" not in values:
            msg = f"{args.annotation} needs an 'intrinsics' and a 'parts' entry"
            raise ValidationError(msg)
        template = ObjectTemplate.from_json(args.template) if args.template else ObjectTemplate.box()
        intr = Intrinsics.from_dict(values["intrinsics"])
        ann = PartKeypointAnnotation.from_dict(values["parts"])

        solver = solve_object_pose if args.softmin_temp is None else solve_object_pose_softmin
        solution = solver(template, ann, intr, cfg)
        self.logger.info("Part keypoint solve: RMS residual %.3f px from start %d", solution.residual, solution.start)
        result = {
            "rotation": solution.rotation.tolist(),
            "translation": solution.translation.tolist(),
            "residual": solution.residual,
        }

        if "camera" in values:
            camera = CameraPose.from_dict(values["camera"])
            pose = solution.to_object_pose(camera, template.default_scale)
            result["object_pose"] = pose.to_dict()
            if values.get("contact_pairs"):
                body = StickBodyModel.from_json(args.body_model) if args.body_model else StickBodyModel.default()
                params = BodyParams.from_dict(values["body"]) if "body" in values else None
                params = params or BodyParams.zeros(body.num_betas, body.num_articulated)
                _, body_mesh = body.evaluate(params)
                regions = ContactRegions.from_models(body, template)
                pairs = ContactPairAnnotation(values["contact_pairs"])
                relative = solve_relative_pose(body_mesh, template, regions, pairs, cfg=cfg, init=pose)
                result["relative_pose"] = relative.to_dict()
                result["region_gap"] = region_gap(body_mesh, template, relative, regions, pairs)

        if args.out:
            write_json(args.out, result)
        else:
            print(json.dumps(result, indent=2))  # noqa: T201
        return 0


def setup(cli: CommandLine) -> None:
    """Set up the entry function for load_extensions().

    Parameters
    ----------
    cli : CommandLine
        The command line to add the commands to.

    """
    cli.add_command(AnnotateSolve())
