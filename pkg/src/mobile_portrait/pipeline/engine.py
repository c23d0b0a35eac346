"""Weight initialisation and the per-source / per-frame inference facade."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from mobile_portrait.config import Settings, get_settings
from mobile_portrait.keypoints import (
    KeypointMode,
    KeypointSet,
    motion_keypoints,
    nk_detect,
    rasterize_landmark_mask,
)
from mobile_portrait.motion import DenseMotionOutput, dense_motion, warp_and_occlude
from mobile_portrait.networks import init_layers, layer_tensor_names
from mobile_portrait.pipeline.flops import STAGES, stage_layers, training_layers
from mobile_portrait.pipeline.presets import PresetConfig
from mobile_portrait.synthesis import AppearanceKnowledge, FeatureBank, precompute_bank, synthesize
from mobile_portrait.tensor import Tensor
from mobile_portrait.weights import ModelWeights

logger = logging.getLogger(__name__)

# Zero-initialised so an untrained model starts from plain TPS composition
# and mixed keypoints equal to the neural ones.
ZERO_INIT_LAYERS = ("dmn.head", "merger.fc2")
INFERENCE_PREFIXES = ("detector", "merger", "dmn", "synthesis")


def init_weights(preset: PresetConfig, seed: int = 0, training_heads: bool = True) -> ModelWeights:
    """He-initialised weights for every stage of ``preset``.

    Training-only heads (DMN mask predictors, keypoint head) are added when
    ``training_heads`` is set; inference never reads them.
    """
    rng = np.random.default_rng(seed)
    weights = ModelWeights()
    layers = stage_layers(preset)
    for stage in STAGES:
        init_layers(layers[stage], weights, rng, zero=ZERO_INIT_LAYERS)
    if training_heads:
        init_layers(training_layers(preset), weights, rng)
    logger.debug("Initialised %d tensors for preset %s (seed %d)", len(weights), preset.name, seed)
    return weights


def check_compatible(preset: PresetConfig, weights: ModelWeights) -> None:
    """Raise MissingWeightError unless every inference tensor of ``preset`` is present."""
    for stage, layers in stage_layers(preset).items():
        weights.require(layer_tensor_names(layers), component=stage)


@dataclass(frozen=True)
class SourceState:
    """Everything computed once per source image."""

    image: Tensor
    fk: KeypointSet
    nk: KeypointSet | None
    kps: KeypointSet
    lm_mask: Tensor
    knowledge: AppearanceKnowledge

    def with_bank(self, bank: FeatureBank) -> "SourceState":
        return replace(self, knowledge=self.knowledge.with_bank(bank))


class PortraitEngine:
    """Runs the inference stages of one preset over one weight container."""

    def __init__(
        self,
        preset: PresetConfig,
        weights: ModelWeights,
        settings: Settings | None = None,
        keypoint_mode: KeypointMode | str = KeypointMode.MIXED,
        use_residual_flow: bool = True,
        use_background: bool = True,
    ):
        self.preset = preset
        self.weights = weights
        self.settings = settings or get_settings()
        self.keypoint_mode = KeypointMode(keypoint_mode)
        self.use_residual_flow = use_residual_flow
        self.use_background = use_background
        self.warnings: list[str] = []

    # ============ Keypoints ============

    def detect(self, image: Tensor) -> KeypointSet:
        return nk_detect(image, self.weights, self.preset.detector)

    def motion_keypoints(self, nk: KeypointSet | None, fk: KeypointSet) -> KeypointSet:
        return motion_keypoints(self.keypoint_mode, nk, fk, self.weights)

    def landmark_mask(self, fk: KeypointSet, height: int, width: int) -> Tensor:
        return rasterize_landmark_mask(fk, height, width, self.settings.landmark_radius_for(height))

    # ============ Per Source ============

    def prepare_source(
        self,
        image: Tensor,
        fk: KeypointSet,
        background: Tensor,
        fg_mask: Tensor,
        bank: FeatureBank | None = None,
    ) -> SourceState:
        self.preset.check_resolution(image.shape[2])
        nk = self.detect(image) if self.keypoint_mode is not KeypointMode.FK else None
        return SourceState(
            image=image,
            fk=fk,
            nk=nk,
            kps=self.motion_keypoints(nk, fk),
            lm_mask=self.landmark_mask(fk, image.shape[2], image.shape[3]),
            knowledge=AppearanceKnowledge(background, fg_mask, bank or FeatureBank()),
        )

    def build_bank(
        self, state: SourceState, samples: Sequence[KeypointSet], threads: int = 1
    ) -> FeatureBank:
        return precompute_bank(
            state.image,
            state.kps,
            samples,
            state.knowledge,
            state.lm_mask,
            self.weights,
            self.preset.dmn,
            self.preset.synthesis,
            sigma=self.settings.heatmap_sigma,
            use_background=self.use_background,
            use_residual_flow=self.use_residual_flow,
            threads=threads,
        )

    # ============ Per Frame ============

    def driving_keypoints(self, state: SourceState, fk: KeypointSet, nk: KeypointSet | None) -> KeypointSet:
        """Motion keypoints of a driving frame; frames without neural points reuse the source's."""
        return self.motion_keypoints(nk if nk is not None else state.nk, fk)

    def motion(self, state: SourceState, d_kps: KeypointSet) -> DenseMotionOutput:
        return dense_motion(
            state.image,
            state.kps,
            d_kps,
            state.knowledge.fg_mask,
            state.lm_mask,
            self.weights,
            self.preset.dmn,
            sigma=self.settings.heatmap_sigma,
            use_residual_flow=self.use_residual_flow,
        )

    def warp(self, state: SourceState, d_kps: KeypointSet) -> Tensor:
        out = self.motion(state, d_kps)
        self.warnings.extend(out.warnings)
        return warp_and_occlude(state.image, out.motion)

    def render(self, state: SourceState, warped: Tensor) -> Tensor:
        return synthesize(warped, state.knowledge, self.weights, self.preset.synthesis, self.use_background)

    def frame(self, state: SourceState, d_kps: KeypointSet) -> Tensor:
        return self.render(state, self.warp(state, d_kps))
