"""Analytic FLOPs and parameter counting over the layer plans.

Convention: one multiply-accumulate is 2 FLOPs, each bias add and each ReLU
is 1 FLOP per output element. Nearest upsampling, concatenation, resizing,
sampling and heatmap rendering are not counted.
"""

from collections.abc import Sequence

from mobile_portrait.models import FlopsReport, StageCost
from mobile_portrait.motion import dmn_aux_layer, motion_size
from mobile_portrait.networks import Layer, mlp_plan
from mobile_portrait.pipeline.presets import PresetConfig
from mobile_portrait.training.losses import KP_HEAD

STAGES = ("nk_detect", "merger", "dense_motion", "synthesis")


def stage_cost(layers: Sequence[Layer]) -> StageCost:
    return StageCost(
        params=sum(layer.params for layer in layers),
        mac_flops=sum(layer.mac_flops for layer in layers),
        bias_adds=sum(layer.bias_adds for layer in layers),
        activation_flops=sum(layer.activation_flops for layer in layers),
    )


def stage_layers(preset: PresetConfig, resolution: int | None = None) -> dict[str, list[Layer]]:
    """Inference layers of every per-frame stage at ``resolution``."""
    resolution = resolution or preset.resolution
    preset.check_resolution(resolution)
    h, w = motion_size(resolution, resolution)
    return {
        "nk_detect": list(preset.detector.plan("detector", h, w)),
        "merger": list(mlp_plan("merger", preset.merger_sizes)),
        "dense_motion": list(preset.dmn.plan("dmn", h, w)),
        "synthesis": list(preset.synthesis.plan("synthesis", resolution, resolution)),
    }


def training_layers(preset: PresetConfig, resolution: int | None = None) -> list[Layer]:
    """Heads that exist only while training: DMN mask predictors and the keypoint head."""
    resolution = resolution or preset.resolution
    h, w = motion_size(resolution, resolution)
    return [
        dmn_aux_layer(preset.dmn, h, w),
        KP_HEAD,
    ]


def encoder_layers(synthesis: Sequence[Layer]) -> list[Layer]:
    """Synthesis layers up to (not including) the bottleneck fusion conv."""
    out = []
    for layer in synthesis:
        if layer.name.endswith(".fuse"):
            break
        out.append(layer)
    return out


def count_flops(preset: PresetConfig, resolution: int | None = None, bank_views: int = 0) -> FlopsReport:
    """Per-frame cost of every stage plus the one-time bank costs.

    Per-frame numbers do not depend on ``bank_views``: the bank is averaged
    once per source and the fusion conv always runs.
    """
    resolution = resolution or preset.resolution
    layers = stage_layers(preset, resolution)
    one_time: dict[str, StageCost] = {}
    if bank_views:
        h, w = preset.synthesis.bottleneck_size(resolution, resolution)
        elements = preset.synthesis.bottleneck_channels * h * w
        per_view = stage_cost([*layers["dense_motion"], *encoder_layers(layers["synthesis"])])
        one_time["bank_precompute"] = StageCost(
            mac_flops=bank_views * per_view.mac_flops,
            bias_adds=bank_views * per_view.bias_adds,
            activation_flops=bank_views * per_view.activation_flops,
        )
        # (T - 1) adds and one scale per element.
        one_time["bank_average"] = StageCost(elementwise_flops=bank_views * elements)
    return FlopsReport(
        preset=preset.name,
        resolution=resolution,
        bank_views=bank_views,
        stages={name: stage_cost(layers[name]) for name in STAGES},
        one_time=one_time,
    )
