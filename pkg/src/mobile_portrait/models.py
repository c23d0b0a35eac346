"""Pydantic models for configs, jobs and reports."""

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, model_validator

from mobile_portrait.validation import InputFormatError

LOSS_TERMS = ("percep", "l1", "kp", "eq", "landmark", "mask")


# ============ Training ============


class LossWeights(BaseModel):
    """Per-term loss coefficients; all 1.0 reproduces the plain six-term sum."""

    percep: float = Field(default=1.0, ge=0.0)
    l1: float = Field(default=1.0, ge=0.0)
    kp: float = Field(default=1.0, ge=0.0)
    eq: float = Field(default=1.0, ge=0.0)
    landmark: float = Field(default=1.0, ge=0.0)
    mask: float = Field(default=1.0, ge=0.0)


class TrainConfig(BaseModel):
    """Desk-scale training settings."""

    learning_rate: float = Field(default=0.002, gt=0.0, description="Optimizer step size")
    epochs: int = Field(default=60, ge=1)
    batch: int = Field(default=1, ge=1, description="Samples averaged per step")
    seed: int = 0
    optimizer: Literal["sgd-momentum", "adam"] = "adam"
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    max_steps: int | None = Field(default=None, ge=1, description="Stop after this many steps")
    loss_weights: LossWeights = Field(default_factory=LossWeights)

    keypoint_mode: Literal["mixed", "nk", "fk"] = "mixed"
    use_residual_flow: bool = True
    use_facial_losses: bool = True
    use_background: bool = True
    bank_views: Literal[0, 2, 4, 8] = 0

    eq_sigma: float = Field(default=0.1, ge=0.0, description="Control-point noise of the random equivariance warp")
    eq_retries: int = Field(default=10, ge=1)
    heatmap_sigma: float = Field(default=0.1, gt=0.0)
    landmark_radius_px: int = Field(default=2, ge=1)


class LossReport(BaseModel):
    """Loss terms of one training step."""

    step: int = Field(default=0, ge=0)
    percep: float = Field(..., ge=0.0)
    l1: float = Field(..., ge=0.0)
    kp: float = Field(..., ge=0.0)
    eq: float = Field(..., ge=0.0)
    landmark: float = Field(..., ge=0.0)
    mask: float = Field(..., ge=0.0)
    total: float = Field(..., ge=0.0)

    @model_validator(mode="after")
    def total_is_sum(self) -> "LossReport":
        terms = sum(getattr(self, t) for t in LOSS_TERMS)
        if abs(self.total - terms) > 1e-6 * max(1.0, abs(terms)):
            raise ValueError(f"total {self.total} differs from the sum of terms {terms}")
        return self

    @classmethod
    def from_terms(cls, terms: dict[str, float], step: int = 0) -> "LossReport":
        return cls(step=step, total=sum(terms[t] for t in LOSS_TERMS), **terms)


class EvalReport(BaseModel):
    """Reconstruction quality of a trained model on held-out pairs."""

    samples: int = Field(..., ge=0)
    psnr: float = Field(..., description="Mean PSNR of predictions against the driving frames")
    baseline_psnr: float = Field(..., description="Mean PSNR of the unwarped source against the driving frames")
    l1: float = Field(..., ge=0.0)

    @property
    def gain_db(self) -> float:
        return self.psnr - self.baseline_psnr


# ============ Pipeline ============


class FrameJob(BaseModel):
    """Inputs of one animation run. All referenced files must exist."""

    source_image: Path
    source_keypoints: Path = Field(..., description="One-record track holding the source's facial points")
    track: Path = Field(..., description="Driving keypoint track")
    background: Path = Field(..., description="Inpainted background image")
    fg_mask: Path = Field(..., description="Foreground mask image")
    bank: Path | None = Field(default=None, description="Precomputed feature bank")
    precompute_bank: bool = Field(default=False, description="Build the bank from the track when no file is given")
    preset: str = "small"
    output_dir: Path = Path("out")

    @model_validator(mode="after")
    def files_exist(self) -> "FrameJob":
        inputs = [self.source_image, self.source_keypoints, self.track, self.background, self.fg_mask]
        if self.bank is not None:
            inputs.append(self.bank)
        missing = [str(p) for p in inputs if not p.exists()]
        if missing:
            raise InputFormatError(
                f"job inputs do not exist: {', '.join(missing)}",
                suggestions=["Generate a demo job with `mobile-portrait demo-job DIR`"],
            )
        if self.bank is None and not self.precompute_bank:
            raise InputFormatError(
                "job has no feature bank and bank precompute is disabled",
                suggestions=["Pass --bank PATH or --precompute-bank"],
            )
        return self

    def input_files(self) -> dict[str, Path]:
        files = {
            "source_image": self.source_image,
            "source_keypoints": self.source_keypoints,
            "track": self.track,
            "background": self.background,
            "fg_mask": self.fg_mask,
        }
        if self.bank is not None:
            files["bank"] = self.bank
        return files


class OutputFile(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    """Reproducibility record written next to the frames."""

    preset: str
    resolution: int
    seed: int
    threads: int
    bank_views: int
    weights_sha256: str | None = None
    inputs: dict[str, str] = Field(default_factory=dict, description="Input name to sha256")
    outputs: list[OutputFile] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)

    @property
    def frames(self) -> int:
        return len(self.outputs)


class StageCost(BaseModel):
    """Analytic cost of one pipeline stage."""

    params: int = 0
    mac_flops: int = 0
    bias_adds: int = 0
    activation_flops: int = 0
    elementwise_flops: int = Field(default=0, description="Other per-element arithmetic, e.g. bank averaging")

    @property
    def flops(self) -> int:
        return self.mac_flops + self.bias_adds + self.activation_flops + self.elementwise_flops


class FlopsReport(BaseModel):
    preset: str
    resolution: int
    bank_views: int = 0
    stages: dict[str, StageCost]
    one_time: dict[str, StageCost] = Field(default_factory=dict, description="Per-source costs, not per frame")

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.stages.values())

    @property
    def total_params(self) -> int:
        return sum(s.params for s in self.stages.values())

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9


class LatencyStats(BaseModel):
    median_ms: float
    p95_ms: float
    samples: int


class LatencyReport(BaseModel):
    preset: str
    resolution: int
    frames: int
    threads: int
    warmup: int
    stages: dict[str, LatencyStats]
    end_to_end: LatencyStats
    flops: FlopsReport

    @property
    def gflops_per_second(self) -> float:
        return self.flops.gflops / (self.end_to_end.median_ms / 1000.0) if self.end_to_end.median_ms else 0.0


class CompositeDiagnostics(BaseModel):
    """How closely the output reproduces the inpainted background outside the face."""

    background_adherence: float = Field(..., ge=0.0, description="Mean |output - bg| where fg_mask < 0.1")
    background_pixels: int = Field(..., ge=0)
