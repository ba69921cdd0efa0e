"""The synth subcommand, which writes a synthetic dataset."""

import argparse
from dataclasses import replace
from pathlib import Path

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_command import Command, CommandLine
from hoiprior.lib.kinematics import ObjectTemplate, StickBodyModel
from hoiprior.lib.pipeline import RunConfig, resolve_dataset_dir
from hoiprior.lib.synthetic import SyntheticFamilyConfig, synth_generate


class Synth(Command):
    """Generate a synthetic multi-view interaction dataset."""

    name = "synth"
    help = "Generate a synthetic dataset of interaction families seen from camera rings"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """Add the generator arguments."""
        parser.add_argument("--out", type=Path, help="Dataset directory, defaults to <out-dir>/dataset")
        parser.add_argument("--families", type=int, help="Number of families, overrides the config")
        parser.add_argument("--views", type=int, help="Views per family, overrides the config")
        parser.add_argument("--noise", type=float, help="Keypoint pixel noise std, overrides the config")
        parser.add_argument("--body-model", type=Path, help="Body model JSON, the built-in model if not given")
        parser.add_argument("--template", type=Path, help="Object template JSON, the built-in box if not given")
        parser.add_argument(
            "--write-templates",
            action="store_true",
            help="Also write the body model and object template JSON next to the dataset",
        )

    def run(self, args: argparse.Namespace) -> int:
        """Generate and write the dataset."""
        run_config = RunConfig.from_app_config()
        cfg = SyntheticFamilyConfig.from_dict(AppConfig.get_config("SYNTH"))
        overrides = {"n_scenes": args.families, "views_per_scene": args.views, "noise_sigma": args.noise}
        cfg = replace(
            cfg,
            rng_seed=run_config.stage_seed("synth"),
            **{key: value for key, value in overrides.items() if value is not None},
        )

        body = StickBodyModel.from_json(args.body_model) if args.body_model else StickBodyModel.default()
        template = ObjectTemplate.from_json(args.template) if args.template else ObjectTemplate.box()
        out = args.out or resolve_dataset_dir(run_config, AppConfig.get_config("OUT_DIR"))
        dataset = synth_generate(cfg, body, template, out)
        self.logger.info("Wrote %d records to %s", len(dataset), out)

        if args.write_templates:
            body.to_json(out / "body_model.json")
            template.to_json(out / "object_template.json")
        return 0


def setup(cli: CommandLine) -> None:
    """Set up the entry function for load_extensions().

    Parameters
    ----------
    cli : CommandLine
        The command line to add the commands to.

    """
    cli.add_command(Synth())
