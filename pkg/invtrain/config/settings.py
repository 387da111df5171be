"""This module contains the settings for the application."""

from functools import lru_cache
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """The settings for the application."""

    # Worker settings
    INVTRAIN_THREADS: int = 1

    # Serving settings
    INVTRAIN_CHECKPOINT: Optional[str] = None

    # Logging settings
    INVTRAIN_LOG_CONFIG: Optional[str] = None

    @field_validator("INVTRAIN_THREADS")
    @classmethod
    def validate_threads(cls, value: int) -> int:
        """At least one worker is always available."""
        if value < 1:
            raise ValueError("INVTRAIN_THREADS must be >= 1")
        return value

    class Config:
        """The configuration for the settings."""

        env_file = ".env"


@lru_cache
def get_settings():
    """This function returns the settings obj for the application."""
    return Settings()
