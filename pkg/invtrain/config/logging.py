"""This module sets up logging for the CLI and the API."""

from logging.config import fileConfig
from pathlib import Path

from invtrain.config.settings import get_settings

DEFAULT_LOG_CONFIG = Path(__file__).with_name("logging.ini")


def configure_logging() -> None:
    """Interpret the logging ini file (INVTRAIN_LOG_CONFIG or the bundled default)."""
    settings = get_settings()
    config_file = settings.INVTRAIN_LOG_CONFIG or DEFAULT_LOG_CONFIG
    fileConfig(config_file, disable_existing_loggers=False)
