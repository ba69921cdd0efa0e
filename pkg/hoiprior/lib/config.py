"""Module for setting up the hoiprior config and logger."""

import copy
import json
import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, ClassVar

DEFAULT_CONFIG_FILE = "./hoiprior-config.json"

# Built-in defaults, used for any section missing from the config file. The
# per-module sections are empty here as the module config dataclasses carry
# their own documented defaults.
DEFAULT_CONFIG_JSON = {
    "LOGFILE": {
        "LOG_NAME": "hoiprior",
        "LOG_LOCATION": "logs/hoiprior.log",
    },
    "RUN": {
        "SEED": 2024,
        "OUT_DIR": "runs/default",
        "THREADS": 1,
    },
    "SYNTH": {},
    "GROUPING": {},
    "FLOW": {},
    "OCCLUSION": {},
    "OPTIM": {},
    "ANNOTATION": {},
    "EVAL": {},
    "PIPELINE": {},
}

MODULE_SECTIONS = ("SYNTH", "GROUPING", "FLOW", "OCCLUSION", "OPTIM", "ANNOTATION", "EVAL", "PIPELINE")


def setup_logging() -> None:
    """Set up logging for hoiprior.

    A console handler and a rotating file handler are attached to the package
    logger. This is called by the command line entry point only, so importing
    the library does not create any log files.
    """
    logger = logging.getLogger(AppConfig.get_config("LOGGER_NAME"))
    if logger.handlers:
        return

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter("[%(asctime)s] %(message)s", "%Y-%m-%d %H:%M:%S"))
    logger.addHandler(console_handler)

    logfile = Path(AppConfig.get_config("LOGFILE_NAME"))
    logfile.parent.mkdir(parents=True, exist_ok=True)
    file_handler = RotatingFileHandler(
        filename=logfile,
        encoding="utf-8",
        maxBytes=int(5e5),
        backupCount=5,
    )
    file_handler.setFormatter(
        logging.Formatter(
            "[%(asctime)s] %(levelname)8s : %(message)s (%(filename)s:%(lineno)d)",
            "%Y-%m-%d %H:%M:%S",
        ),
    )
    logger.addHandler(file_handler)
    logger.propagate = False
    logger.info("Loaded config file %s", AppConfig.get_config("CONFIG_FILE"))


def _merge_sections(config_json: dict) -> dict:
    """Fill in any sections or keys missing from a config file.

    Parameters
    ----------
    config_json : dict
        The config read from file.

    Returns
    -------
    dict
        The config with defaults for anything missing.

    """
    merged = copy.deepcopy(DEFAULT_CONFIG_JSON)
    for section, values in config_json.items():
        if isinstance(values, dict) and isinstance(merged.get(section), dict):
            merged[section].update(values)
        else:
            merged[section] = values
    return merged


class AppConfig:
    """The global configuration class.

    Contains the shared run settings and the raw per-module config sections.
    The sections are turned into typed config objects by the modules which own
    them, e.g. ``FlowConfig.from_dict(AppConfig.get_config("FLOW"))``.
    """

    _config: ClassVar = {}

    @classmethod
    def set_config_values(cls, path: str | Path | None = None) -> dict:
        """Set the values of the config from the config file.

        The file is looked for in the following order: the given path, the
        file in $HOIPRIOR_CONFIG, ./hoiprior-config.json. If none of them can
        be read, the built-in defaults are used.

        Parameters
        ----------
        path : str | Path | None
            An explicit config file, e.g. from the --config flag.

        Returns
        -------
        dict
            The populated config.

        """
        candidates = [p for p in (path, os.getenv("HOIPRIOR_CONFIG"), DEFAULT_CONFIG_FILE) if p]
        config_json = {}
        current_config = None
        for candidate in candidates:
            try:
                with Path(candidate).open(encoding="utf-8") as file_in:
                    config_json = json.load(file_in)
                current_config = str(Path(candidate).resolve())
                break
            except (OSError, json.JSONDecodeError):
                if candidate != DEFAULT_CONFIG_FILE:
                    print(f"Failed to load config file {candidate}, trying the next one")  # noqa: T201

        config_json = _merge_sections(config_json)

        _config = {
            # config file
            "CONFIG_FILE": current_config,
            # logging
            "LOGGER_NAME": config_json["LOGFILE"]["LOG_NAME"],
            "LOGFILE_NAME": config_json["LOGFILE"]["LOG_LOCATION"],
            # run settings
            "SEED": int(config_json["RUN"]["SEED"]),
            "OUT_DIR": str(config_json["RUN"]["OUT_DIR"]),
            "THREADS": int(config_json["RUN"]["THREADS"]),
        }
        for section in MODULE_SECTIONS:
            _config[section] = dict(config_json[section])
        cls._config = _config

        return cls._config

    # Public methods -----------------------------------------------------------

    @staticmethod
    def get_config(name: str) -> Any | None:  # noqa: ANN401
        """Get a configuration parameter.

        Parameters
        ----------
        name: str
            The name of the parameter to get the value for.

        Returns
        -------
        Any | None
            The value of the parameter requested, or None.

        """
        return AppConfig._config.get(name, None)

    @staticmethod
    def set_config(name: str, value: Any) -> None:  # noqa: ANN401
        """Set a configuration parameter.

        Parameters
        ----------
        name : str
            The name of the parameter to set.
        value : Any
            The value of the parameter.

        """
        AppConfig._config[name] = value


AppConfig.set_config_values()
