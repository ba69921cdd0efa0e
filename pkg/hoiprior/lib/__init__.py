"""Package containing the library code used by the subcommands."""
