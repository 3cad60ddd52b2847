from pydantic_settings import BaseSettings
from functools import lru_cache
from typing import Optional
import logging
import os

_log = logging.getLogger(__name__)


class Settings(BaseSettings):
    # App Settings
    app_name: str = "ergodic-hjb"
    app_version: str = "0.1.0"

    # Parallelism - default for --threads
    ergodic_hjb_threads: int = 1

    # Logging
    log_level: str = os.getenv("LOG_LEVEL", "INFO")
    log_format: str = os.getenv("LOG_FORMAT", "text")  # text | json
    log_file: Optional[str] = None

    # Artifacts
    output_dir: str = "./out"

    # Memory cap for the value-function history kept for policy synthesis
    max_history_mb: float = 256.0

    class Config:
        env_file = ".env"
        extra = "ignore"  # Ignore extra fields from .env

    @property
    def threads(self) -> int:
        """Thread count clamped to at least one worker."""
        if self.ergodic_hjb_threads < 1:
            _log.warning(f"[CONFIG] ERGODIC_HJB_THREADS={self.ergodic_hjb_threads} is invalid, using 1")
            return 1
        return self.ergodic_hjb_threads


@lru_cache()
def get_settings() -> Settings:
    return Settings()
