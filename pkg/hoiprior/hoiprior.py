"""Configure and run the hoiprior command line.

This script builds the argument parser, loads the subcommands from
hoiprior/commands and runs the one asked for. It is typically called from the
root directory of the repository, or through entrypoint.sh.

Exit codes are 0 on success, 2 when an input fails validation, 3 when a
numerical procedure diverges and 1 for anything else.
"""

import argparse
import logging
import time

import torch
from pyinstrument import Profiler

from hoiprior.lib.config import AppConfig, setup_logging
from hoiprior.lib.custom_command import CommandLine
from hoiprior.lib.error import HoiPriorError

LAUNCH_TIME = time.time()
LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))


def build_cli() -> CommandLine:
    """Build the parser with the global flags and every subcommand.

    Returns
    -------
    CommandLine
        The command line, with the extensions loaded.

    """
    parser = argparse.ArgumentParser(prog="hoiprior", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="The config file, see hoiprior-config.json")
    parser.add_argument("--seed", type=int, help="The global seed every stage seed is split from")
    parser.add_argument("--out-dir", help="The run directory artifacts are written to")
    parser.add_argument("--threads", type=int, help="The number of threads torch may use")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    parser.add_argument("--profile", action="store_true", help="Profile the command and print the report")

    cli = CommandLine(parser)
    cli.load_extensions("hoiprior.commands")
    return cli


def parse_args(cli: CommandLine, argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments.

    Parameters
    ----------
    cli : CommandLine
        The command line.
    argv : list[str] | None
        The arguments, sys.argv when None.

    Returns
    -------
    argparse.Namespace
        The parsed command line arguments.

    """
    return cli.parser.parse_args(argv)


def initialise_cli(args: argparse.Namespace) -> None:
    """Apply the global flags: load the config, set up logging and threads.

    Parameters
    ----------
    args : argparse.Namespace
        The command line arguments.

    """
    if args.config:
        AppConfig.set_config_values(args.config)
    for name, value in (("SEED", args.seed), ("OUT_DIR", args.out_dir), ("THREADS", args.threads)):
        if value is not None:
            AppConfig.set_config(name, value)

    setup_logging()
    LOGGER.setLevel(logging.DEBUG if args.debug else logging.INFO)
    LOGGER.info("Config file: %s", AppConfig.get_config("CONFIG_FILE"))
    LOGGER.debug("Seed %d, run directory %s", AppConfig.get_config("SEED"), AppConfig.get_config("OUT_DIR"))
    torch.set_num_threads(max(1, int(AppConfig.get_config("THREADS"))))


def run_command(args: argparse.Namespace) -> int:
    """Run the chosen subcommand, profiling it if asked.

    Parameters
    ----------
    args : argparse.Namespace
        The command line arguments.

    Returns
    -------
    int
        The exit code of the command.

    """
    if not args.profile:
        return args.handler.run(args)

    profiler = Profiler()
    profiler.start()
    try:
        return args.handler.run(args)
    finally:
        profiler.stop()
        print(profiler.output_text(unicode=True, color=False))  # noqa: T201


def main(argv: list[str] | None = None) -> int:
    """Run hoiprior.

    Parameters
    ----------
    argv : list[str] | None
        The arguments, sys.argv when None.

    Returns
    -------
    int
        The exit code.

    """
    cli = build_cli()
    args = parse_args(cli, argv)
    initialise_cli(args)

    try:
        code = run_command(args)
    except HoiPriorError as exc:
        LOGGER.error("%s", exc)  # noqa: TRY400
        return exc.exit_code
    except Exception:
        LOGGER.exception("Command '%s' failed with an unexpected error", args.command)
        return 1

    LOGGER.info("Finished '%s' in %.2f seconds", args.command, time.time() - LAUNCH_TIME)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
