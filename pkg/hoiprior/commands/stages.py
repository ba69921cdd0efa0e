"""Subcommands which run a single pipeline stage, or the whole pipeline."""

import argparse
from dataclasses import replace

from hoiprior.lib.config import AppConfig
from hoiprior.lib.custom_command import Command, CommandLine
from hoiprior.lib.dataset import read_dataset
from hoiprior.lib.evaluation import MODES, summary_table
from hoiprior.lib.grouping import NeighborSets, brute_force_topk, recall_at_k
from hoiprior.lib.pipeline import NEIGHBORS_FILE, RunConfig, resolve_dataset_dir, run_pipeline
from hoiprior.lib.util import read_json_with_backup


class StageCommand(Command):
    """Run one stage of the pipeline in the run directory."""

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """Add the arguments shared by every stage."""
        parser.add_argument("--force", action="store_true", help="Run the stage even if it is up to date")

    def run_config(self, _args: argparse.Namespace) -> RunConfig:
        """Get the settings of the stage, with any command line overrides."""
        return RunConfig.from_app_config()

    def run(self, args: argparse.Namespace) -> int:
        """Run the stage."""
        run_pipeline(self.run_config(args), AppConfig.get_config("OUT_DIR"), (self.name,), force=args.force)
        return 0


class Group(StageCommand):
    """Group every image with its nearest views."""

    name = "group"
    help = "Find the neighboring views of every image"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """Add the grouping arguments."""
        super().add_arguments(parser)
        parser.add_argument("--k", type=int, help="Neighbors per image")
        parser.add_argument("--iters", type=int, help="Refinement iterations")
        parser.add_argument("--sim-threshold", type=float, help="Swap gate on the flattened representations")
        parser.add_argument("--drop-distance", type=float, help="Drop neighbors further than this, in meters")
        parser.add_argument("--ground-truth", action="store_true", help="Group by the synthetic family labels")
        parser.add_argument("--recall", action="store_true", help="Report recall against the exact top-k")

    def run_config(self, args: argparse.Namespace) -> RunConfig:
        """Apply the grouping flags."""
        config = super().run_config(args)
        changes = given_flags(args, k="k", iters="n_iter", sim_threshold="sim_threshold", drop_distance="drop_distance")
        config = replace(config, grouping=replace(config.grouping, **changes))
        if args.ground_truth:
            config = replace(config, pipeline=replace(config.pipeline, ground_truth_grouping=True))
        return config

    def run(self, args: argparse.Namespace) -> int:
        """Run the grouping, then compare with the exact neighbors if asked."""
        super().run(args)
        if args.recall:
            config = self.run_config(args)
            out_dir = AppConfig.get_config("OUT_DIR")
            index = read_dataset(resolve_dataset_dir(config, out_dir)).index()
            approx = NeighborSets.from_dict(read_json_with_backup(f"{out_dir}/{NEIGHBORS_FILE}"))
            recall = recall_at_k(approx, brute_force_topk(index, approx.k))
            self.logger.info("Recall against the exact %d nearest views: %.4f", approx.k, recall)
        return 0


class TrainPrior(StageCommand):
    """Train the flow prior on the grouped views."""

    name = "train-prior"
    help = "Train the spatial relation prior on the neighbor clusters"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """Add the training arguments."""
        super().add_arguments(parser)
        parser.add_argument("--depth", type=int, help="Number of flow steps")
        parser.add_argument("--width", type=int, help="Hidden units of the coupling networks")
        parser.add_argument("--epochs", type=int, help="Training epochs")
        parser.add_argument("--lr", type=float, help="Adam learning rate")
        parser.add_argument("--dequant-sigma", type=float, help="Std of the training noise")

    def run_config(self, args: argparse.Namespace) -> RunConfig:
        """Apply the training flags."""
        config = super().run_config(args)
        changes = given_flags(
            args,
            depth="depth",
            width="width",
            epochs="epochs",
            lr="lr",
            dequant_sigma="dequant_sigma",
        )
        return replace(config, flow=replace(config.flow, **changes))


class Occlusion(StageCommand):
    """Compute the mean occlusion map."""

    name = "occlusion"
    help = "Average the occlusion maps of the initial scenes"


class Optimize(StageCommand):
    """Refine the test scenes."""

    name = "optimize"
    help = "Refine the initial scenes with the prior, writing scenes.json and traces.csv"


class Eval(StageCommand):
    """Evaluate the refined scenes and print the summary."""

    name = "eval"
    help = "Compare the initial and refined scenes with the ground truth"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """Add the evaluation arguments."""
        super().add_arguments(parser)
        parser.add_argument("--mode", choices=MODES, help="Evaluation protocol, overrides the config")

    def run_config(self, args: argparse.Namespace) -> RunConfig:
        """Apply the --mode flag."""
        config = super().run_config(args)
        if args.mode:
            config = replace(config, evaluation=replace(config.evaluation, mode=args.mode))
        return config

    def run(self, args: argparse.Namespace) -> int:
        """Run the evaluation and print the before and after tables."""
        reports = run_pipeline(
            self.run_config(args),
            AppConfig.get_config("OUT_DIR"),
            (self.name,),
            force=args.force,
        )
        print_summary(reports)
        return 0


class Run(StageCommand):
    """Run every stage of the pipeline."""

    name = "run"
    help = "Run group, train-prior, occlusion, optimize and eval, skipping stages which are up to date"

    def run(self, args: argparse.Namespace) -> int:
        """Run the pipeline and print the summary."""
        reports = run_pipeline(self.run_config(args), AppConfig.get_config("OUT_DIR"), force=args.force)
        print_summary(reports)
        return 0


def given_flags(args: argparse.Namespace, **fields: str) -> dict:
    """Map the flags given on the command line to the config fields they set.

    Parameters
    ----------
    args : argparse.Namespace
        The parsed arguments.
    **fields : str
        The config field set by each flag, keyed by the flag's dest.

    Returns
    -------
    dict
        The overrides for dataclasses.replace, without the flags left unset.

    """
    return {name: getattr(args, dest) for dest, name in fields.items() if getattr(args, dest) is not None}


def print_summary(reports: dict) -> None:
    """Print the before and after tables of a reports file."""
    for title in ("before", "after"):
        if title in reports:
            table = summary_table(reports[title])
            table.title = f"{title.capitalize()} refinement ({reports[title]['count']} images)"
            print(table)  # noqa: T201


def setup(cli: CommandLine) -> None:
    """Set up the entry function for load_extensions().

    Parameters
    ----------
    cli : CommandLine
        The command line to add the commands to.

    """
    for command in (Group(), TrainPrior(), Occlusion(), Optimize(), Eval(), Run()):
        cli.add_command(command)
