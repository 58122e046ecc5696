"""Configuration for the m2net package."""
import os
from pydantic_settings import BaseSettings
from pydantic import field_validator
from typing import List


class Settings(BaseSettings):
    """Application settings."""

    # App
    APP_VERSION: str = os.getenv("APP_VERSION", "dev")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Compute
    DEVICE: str = os.getenv("M2NET_DEVICE", "cpu")

    # Detection / attention
    DEFAULT_TAU: float = float(os.getenv("M2NET_DEFAULT_TAU", "0.5"))
    PATCH_LEN: int = int(os.getenv("M2NET_PATCH_LEN", "2"))

    # Perceptual loss feature stack is seed-pinned and never trained
    PERCEPTUAL_SEED: int = int(os.getenv("M2NET_PERCEPTUAL_SEED", "1234"))

    # Training
    CHECKPOINT_EVERY: int = int(os.getenv("M2NET_CHECKPOINT_EVERY", "5"))  # Epochs
    ABLATION_TOGGLES: str = os.getenv("M2NET_ABLATION_TOGGLES", "")  # e.g. "no-hfe,no-cha"

    # Video
    VIDEO_WORKERS: int = int(os.getenv("M2NET_VIDEO_WORKERS", "2"))

    # Profiling
    PROFILING_ENABLED: bool = os.getenv("PROFILING_ENABLED", "false").lower() == "true"

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        return str(v).strip().upper() or "INFO"

    @field_validator("DEFAULT_TAU")
    @classmethod
    def check_tau(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f"DEFAULT_TAU must lie in (0, 1), got {v}")
        return v

    class Config:
        env_file = ".env"

    def get_ablation_toggles(self) -> List[str]:
        """
        Get list of default ablation switches.

        Parses ABLATION_TOGGLES which contains comma-separated switch names
        such as "no-hfe,no-cha".

        Returns:
            List of switch name strings
        """
        if not self.ABLATION_TOGGLES:
            return []
        return [t.strip() for t in self.ABLATION_TOGGLES.split(",") if t.strip()]


settings = Settings()
