"""
Process settings using Pydantic Settings v2
"""

import os
from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime settings shared by every command."""

    # App Info
    app_name: str = "ProtoGuard"
    app_version: str = "1.0.0"
    app_description: str = "Unsupervised adversarial-example detection"

    # Environment
    environment: str = Field(default="development")

    # Logging
    log_level: str = Field(default="INFO")
    log_format: Literal["json", "console"] = Field(default="json")

    # Execution
    threads: int = Field(default=4, ge=1, description="Worker-pool size")
    seed: int = Field(default=0, ge=0)
    output_dir: Path = Field(default=Path("runs"))

    model_config = SettingsConfigDict(
        env_prefix="PROTOGUARD_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_level", mode="before")
    @classmethod
    def normalize_log_level(cls, value: str) -> str:
        return str(value).strip().upper()

    @field_validator("threads", mode="before")
    @classmethod
    def parse_threads(cls, value: object) -> object:
        # "auto" picks the machine's core count
        if isinstance(value, str) and value.strip().lower() == "auto":
            return os.cpu_count() or 1
        return value

    @property
    def is_development(self) -> bool:
        return self.environment.lower() == "development"


@lru_cache()
def get_settings() -> Settings:
    """Return the cached settings instance."""
    return Settings()


settings = get_settings()
