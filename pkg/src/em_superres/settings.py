from typing import Optional
from pydantic import Field
from dotenv import load_dotenv
from em_superres.base_models import BaseModel
import logging
import os

logger = logging.getLogger("em_superres_settings")

ENV_PREFIX = "EM_SUPERRES_"


class Settings(BaseModel):
    """
    Process-wide defaults read from the environment.

    A ``.env`` file in the working directory is loaded first, so a checkout can pin its thread budget or log
    level without touching the shell. Values given on the command line or in a config file take precedence.

    Attributes:
        threads: Default worker count for patch solving
        log_level: Logging level name for the package loggers
        chunk_size: Patches solved per work item
        seed: Default seed for commands that draw random numbers
    """

    threads: int = Field(1, ge=1)
    log_level: str = "WARNING"
    chunk_size: int = Field(2048, ge=1)
    seed: int = Field(0, ge=0)

    @classmethod
    def from_env(cls, dotenv_path: Optional[str] = None) -> "Settings":
        load_dotenv(dotenv_path)

        values = {}
        for name in cls.model_fields:
            raw = os.getenv(f"{ENV_PREFIX}{name.upper()}")
            if raw is not None:
                values[name] = raw

        logger.debug(f"Settings from environment: {values}")
        return cls.model_validate(values)
