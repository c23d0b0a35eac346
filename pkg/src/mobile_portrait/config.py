"""Configuration settings for the Mobile Portrait engine."""

import logging
from functools import lru_cache
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.console import Console
from rich.logging import RichHandler


class Settings(BaseSettings):
    """Engine settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="MOBILE_PORTRAIT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )

    # Model settings
    preset: str = Field(
        default="small",
        description="Preset name: large, medium, small or toy",
    )
    resolution: int = Field(
        default=256,
        description="Square frame resolution in pixels",
    )
    weights_path: Path | None = Field(
        default=None,
        description="Weight container to load (random init from seed when unset)",
    )

    # Run settings
    seed: int = Field(
        default=0,
        description="Seed for weight init, synthetic data and random warps",
    )
    threads: int = Field(
        default=1,
        description="Worker threads for bank precompute and frame pipelining (1 = sequential)",
    )
    out_dir: Path = Field(
        default=Path("out"),
        description="Directory for frames, manifests and logs",
    )

    # Keypoint settings
    heatmap_sigma: float = Field(
        default=0.1,
        description="Gaussian heatmap sigma in normalized coordinates",
    )
    landmark_radius_px: int = Field(
        default=2,
        description="Landmark disk radius at 64x64 mask resolution (scaled with size)",
    )
    bank_views: int = Field(
        default=4,
        description="Pseudo multiview bank size T (0, 2, 4 or 8)",
    )

    # Server settings
    server_name: str = Field(
        default="mobile-portrait",
        description="MCP server name",
    )
    log_level: str = Field(
        default="INFO",
        description="Root log level",
    )
    debug: bool = Field(
        default=False,
        description="Enable debug mode",
    )

    def landmark_radius_for(self, size: int) -> int:
        """Scale the 64x64 landmark radius to a mask of the given size."""
        return max(1, round(self.landmark_radius_px * size / 64))


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def configure_logging(settings: Settings | None = None) -> None:
    """Route library logging through a rich handler on stderr."""
    settings = settings or get_settings()
    level = logging.DEBUG if settings.debug else settings.log_level.upper()
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[
            RichHandler(
                console=Console(stderr=True),
                rich_tracebacks=settings.debug,
                show_path=settings.debug,
            )
        ],
        force=True,
    )


def with_overrides(settings: Settings | None = None, **updates: object) -> Settings:
    """Copy of ``settings`` with every non-None update applied."""
    settings = settings or get_settings()
    return settings.model_copy(update={k: v for k, v in updates.items() if v is not None})
