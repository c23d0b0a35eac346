"""Image synthesis with appearance knowledge: feature bank, background input, fusion U-Net."""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mobile_portrait.keypoints import KeypointSet
from mobile_portrait.models import CompositeDiagnostics
from mobile_portrait.motion import dense_motion, warp_and_occlude
from mobile_portrait.networks import UNet, UNetSpec
from mobile_portrait.tensor import Tensor
from mobile_portrait.tensor import functional as F
from mobile_portrait.validation import (
    ContractError,
    InputFormatError,
    check_axis,
    check_finite,
    check_range,
    check_rank,
    check_same_shape,
)
from mobile_portrait.weights import ModelWeights

logger = logging.getLogger(__name__)

SUPPORTED_VIEW_COUNTS = (0, 2, 4, 8)
BANK_PREFIX = "bank.view"
BACKGROUND_THRESHOLD = 0.1


@dataclass(frozen=True)
class FeatureBank:
    """T bottleneck features precomputed from warped copies of the source."""

    views: tuple[Tensor, ...] = ()

    def __post_init__(self) -> None:
        if len(self.views) not in SUPPORTED_VIEW_COUNTS:
            raise ContractError(
                f"feature bank holds {len(self.views)} views; supported counts are {SUPPORTED_VIEW_COUNTS}"
            )
        for view in self.views:
            check_rank(view.shape, 4, "bank view")
            check_same_shape(self.views[0].shape, view.shape, "bank views")

    @property
    def count(self) -> int:
        return len(self.views)

    @property
    def shape(self) -> tuple[int, ...] | None:
        return self.views[0].shape if self.views else None

    def mean(self) -> Tensor | None:
        """Elementwise average of the views, or None for an empty bank."""
        if not self.views:
            return None
        total = np.zeros(self.views[0].shape, dtype=np.float32)
        for view in self.views:
            total += view.data
        return Tensor(total / np.float32(len(self.views)))

    def to_weights(self) -> ModelWeights:
        bank = ModelWeights()
        for i, view in enumerate(self.views):
            bank.add(f"{BANK_PREFIX}.{i}", view.data)
        return bank

    @classmethod
    def from_weights(cls, weights: ModelWeights) -> "FeatureBank":
        names = weights.names()
        expected = [f"{BANK_PREFIX}.{i}" for i in range(len(names))]
        if names != expected:
            raise InputFormatError(
                f"bank file must hold tensors {BANK_PREFIX}.0 .. {BANK_PREFIX}.N-1 in order, found {names[:4]}"
            )
        return cls(tuple(weights[n] for n in names))

    def save(self, path: Path | str) -> Path:
        return self.to_weights().save(path)

    @classmethod
    def load(cls, path: Path | str) -> "FeatureBank":
        return cls.from_weights(ModelWeights.load(path))


@dataclass(frozen=True)
class AppearanceKnowledge:
    """Inpainted background, foreground mask and feature bank for one source.

    The bank average is computed once here so per-frame synthesis cost does
    not depend on the number of views.
    """

    inpainted_bg: Tensor
    fg_mask: Tensor
    bank: FeatureBank = FeatureBank()
    bank_mean: Tensor | None = field(init=False, repr=False)

    def __post_init__(self) -> None:
        check_rank(self.inpainted_bg.shape, 4, "inpainted background")
        check_axis(self.inpainted_bg.shape[1], 3, "channels", "inpainted background")
        check_same_shape((1, 1, *self.inpainted_bg.shape[2:]), self.fg_mask.shape, "fg_mask vs background")
        check_finite(self.inpainted_bg.data, "inpainted background")
        check_range(self.inpainted_bg.data, 0.0, 1.0, "inpainted background")
        check_range(self.fg_mask.data, 0.0, 1.0, "fg_mask")
        object.__setattr__(self, "bank_mean", self.bank.mean())

    def with_bank(self, bank: FeatureBank) -> "AppearanceKnowledge":
        return AppearanceKnowledge(self.inpainted_bg, self.fg_mask, bank)


# ============ Synthesis ============


def synthesis_input(warped: Tensor, knowledge: AppearanceKnowledge, use_background: bool = True) -> Tensor:
    """7-channel input: warped image, inpainted background, foreground mask.

    With ``use_background`` off the background and mask slots are zeros.
    """
    check_same_shape(warped.shape, knowledge.inpainted_bg.shape, "warped vs background")
    if use_background:
        return F.concat([warped, knowledge.inpainted_bg, knowledge.fg_mask], axis=1)
    _, _, h, w = warped.shape
    return F.concat([warped, Tensor(np.zeros((1, 4, h, w), dtype=np.float32))], axis=1)


def encode_view(
    warped: Tensor,
    knowledge: AppearanceKnowledge,
    weights: ModelWeights,
    spec: UNetSpec,
    use_background: bool = True,
) -> Tensor:
    """Synthesis encoder through the last downblock (bottleneck features)."""
    net = UNet(spec, "synthesis", weights)
    bottleneck, _ = net.encode(synthesis_input(warped, knowledge, use_background))
    return bottleneck


def synthesize(
    warped: Tensor,
    knowledge: AppearanceKnowledge,
    weights: ModelWeights,
    spec: UNetSpec,
    use_background: bool = True,
) -> Tensor:
    """Generate the output frame in [0, 1].

    Raises:
        ContractError: If the bank shape does not match the bottleneck.
        MissingWeightError: If synthesis tensors are absent.
    """
    net = UNet(spec, "synthesis", weights)
    net.require()
    bottleneck, skips = net.encode(synthesis_input(warped, knowledge, use_background))
    bank = knowledge.bank_mean
    if bank is not None:
        check_same_shape(bottleneck.shape, bank.shape, "bank vs synthesis bottleneck")
    fused = net.fuse(bottleneck, bank)
    return F.sigmoid(net.head(net.decode(fused, skips)))


def uniform_sample_indices(length: int, count: int) -> list[int]:
    """``count`` indices at uniform spacing over a sequence of ``length``.

    Each index is the centre of one of ``count`` equal spans.
    """
    if count <= 0 or length <= 0:
        return []
    return [min(length - 1, int((i + 0.5) * length / count)) for i in range(count)]


def precompute_bank(
    source: Tensor,
    source_kps: KeypointSet,
    driving_samples: Sequence[KeypointSet],
    knowledge: AppearanceKnowledge,
    lm_mask: Tensor,
    weights: ModelWeights,
    dmn_spec: UNetSpec,
    synthesis_spec: UNetSpec,
    sigma: float = 0.1,
    use_background: bool = True,
    use_residual_flow: bool = True,
    threads: int = 1,
) -> FeatureBank:
    """Warp the source toward each sampled driving pose and keep its bottleneck feature.

    Views are independent, so ``threads > 1`` runs them on a worker pool;
    results keep sample order.
    """

    def one_view(d_kps: KeypointSet) -> Tensor:
        out = dense_motion(
            source, source_kps, d_kps, knowledge.fg_mask, lm_mask, weights, dmn_spec,
            sigma=sigma, use_residual_flow=use_residual_flow,
        )
        warped = warp_and_occlude(source, out.motion)
        return encode_view(warped, knowledge, weights, synthesis_spec, use_background)

    if not driving_samples:
        return FeatureBank()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            views = list(pool.map(one_view, driving_samples))
    else:
        views = [one_view(d) for d in driving_samples]
    logger.info("Precomputed feature bank with %d views of shape %s", len(views), views[0].shape)
    return FeatureBank(tuple(v.detach() for v in views))


# ============ Diagnostics ============


def composite_check(output: Tensor, knowledge: AppearanceKnowledge) -> CompositeDiagnostics:
    check_same_shape(output.shape, knowledge.inpainted_bg.shape, "output vs background")
    region = knowledge.fg_mask.data[:, 0] < BACKGROUND_THRESHOLD  # (1, H, W)
    pixels = int(region.sum())
    if pixels == 0:
        return CompositeDiagnostics(background_adherence=0.0, background_pixels=0)
    diff = np.abs(output.data.astype(np.float64) - knowledge.inpainted_bg.data)
    score = float(diff.transpose(1, 0, 2, 3)[:, region].mean())
    return CompositeDiagnostics(background_adherence=score, background_pixels=pixels)
