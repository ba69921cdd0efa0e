"""Module containing the command line subcommands."""
