"""Frozen network presets and their declared compute budgets."""

from pydantic import BaseModel, Field

from mobile_portrait.keypoints import MERGER_SIZES, NEURAL_COUNT
from mobile_portrait.motion import DMN_IN_CHANNELS, DMN_OUT_CHANNELS
from mobile_portrait.networks import UNetSpec
from mobile_portrait.validation import ContractError, DimensionError

SYNTHESIS_IN_CHANNELS = 7


class PresetConfig(BaseModel):
    """Channel/depth schedules for every learned stage plus the budget they target."""

    name: str
    resolution: int = Field(..., description="Resolution the budget is declared at")
    detector: UNetSpec
    dmn: UNetSpec
    synthesis: UNetSpec
    merger_sizes: tuple[int, ...] = MERGER_SIZES
    target_gflops: float | None = Field(default=None, description="Declared per-frame GFLOPs")
    target_params_m: float | None = Field(default=None, description="Declared parameters in millions")

    @property
    def resolution_divisor(self) -> int:
        """Frame sizes must be multiples of this."""
        return max(self.synthesis.divisor, 4 * self.detector.divisor, 4 * self.dmn.divisor)

    def check_resolution(self, resolution: int) -> None:
        if resolution <= 0 or resolution % self.resolution_divisor:
            raise DimensionError(
                f"preset '{self.name}' needs a resolution that is a multiple of {self.resolution_divisor}",
                axis="height",
                expected=f"multiple of {self.resolution_divisor}",
                actual=resolution,
            )


def _preset(
    name: str,
    resolution: int,
    synthesis: list[int],
    dmn: list[int],
    detector: list[int],
    target_gflops: float | None = None,
    target_params_m: float | None = None,
) -> PresetConfig:
    return PresetConfig(
        name=name,
        resolution=resolution,
        detector=UNetSpec(in_channels=3, out_channels=NEURAL_COUNT, channels=detector),
        dmn=UNetSpec(in_channels=DMN_IN_CHANNELS, out_channels=DMN_OUT_CHANNELS, channels=dmn),
        synthesis=UNetSpec(in_channels=SYNTHESIS_IN_CHANNELS, out_channels=3, channels=synthesis, fusion=True),
        target_gflops=target_gflops,
        target_params_m=target_params_m,
    )


PRESETS: dict[str, PresetConfig] = {
    "large": _preset(
        "large", 512,
        synthesis=[8, 16, 32, 64, 128, 256, 512, 1152],
        dmn=[16, 32, 64, 128, 256, 512],
        detector=[16, 32, 64, 128],
        target_gflops=16.0, target_params_m=67.7,
    ),
    "medium": _preset(
        "medium", 512,
        synthesis=[4, 8, 16, 32, 64, 192, 384, 960],
        dmn=[12, 24, 48, 96, 192, 384],
        detector=[12, 24, 48, 96],
        target_gflops=7.0, target_params_m=40.8,
    ),
    "small": _preset(
        "small", 512,
        synthesis=[4, 8, 12, 32, 64, 160, 352, 736],
        dmn=[8, 16, 32, 64, 128, 256],
        detector=[8, 16, 32, 64],
        target_gflops=4.0, target_params_m=25.5,
    ),
    # Desk-scale model for training, tests and demos; no declared budget.
    "toy": _preset(
        "toy", 64,
        synthesis=[8, 16, 32],
        dmn=[16, 32],
        detector=[8, 16],
    ),
}


def get_preset(name: str) -> PresetConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ContractError(
            f"Unknown preset '{name}'",
            suggestions=[f"Available presets: {', '.join(PRESETS)}"],
        ) from None
