"""Custom command classes for the command line interface.

Subcommands live in extension modules under hoiprior/commands, each with a
setup(cli) function which adds its commands, in the same way as cogs are
loaded into a bot.
"""

import argparse
import importlib
import logging
import pkgutil
from typing import ClassVar

from hoiprior.lib.config import AppConfig

LOGGER = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))


class Command:
    """A subcommand of the command line interface.

    Subclasses set name and help, add their arguments in add_arguments and do
    their work in run, which returns the exit code.
    """

    name: ClassVar[str] = ""
    help: ClassVar[str] = ""
    logger = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """Add the command's arguments to its parser.

        Parameters
        ----------
        parser : argparse.ArgumentParser
            The subcommand parser.

        """

    def run(self, args: argparse.Namespace) -> int:
        """Run the command.

        Parameters
        ----------
        args : argparse.Namespace
            The parsed command line arguments.

        Returns
        -------
        int
            The exit code.

        """
        raise NotImplementedError


class CommandLine:
    """The argument parser together with every registered subcommand."""

    def __init__(self, parser: argparse.ArgumentParser) -> None:
        """Initialise the command line.

        Parameters
        ----------
        parser : argparse.ArgumentParser
            The top-level parser, with the global flags already added.

        """
        self.parser = parser
        self.subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")
        self.commands: dict[str, Command] = {}

    def add_command(self, command: Command) -> None:
        """Register a subcommand.

        Parameters
        ----------
        command : Command
            The command to add.

        """
        if command.name in self.commands:
            msg = f"A command called '{command.name}' is already registered"
            raise ValueError(msg)
        subparser = self.subparsers.add_parser(command.name, help=command.help, description=command.help)
        command.add_arguments(subparser)
        subparser.set_defaults(handler=command)
        self.commands[command.name] = command

    def load_extensions(self, package: str) -> None:
        """Import every module of a package and call its setup function.

        Parameters
        ----------
        package : str
            The dotted name of the package.

        """
        module = importlib.import_module(package)
        for info in sorted(pkgutil.iter_modules(module.__path__), key=lambda i: i.name):
            extension = importlib.import_module(f"{package}.{info.name}")
            extension.setup(self)
            LOGGER.debug("Loaded extension %s", info.name)
