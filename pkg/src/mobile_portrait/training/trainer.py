"""Desk-scale training loop over the six-term objective."""

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from mobile_portrait.keypoints import KeypointKind, KeypointMode, KeypointSet, motion_keypoints, nk_detect
from mobile_portrait.models import LOSS_TERMS, EvalReport, LossReport, TrainConfig
from mobile_portrait.motion import DenseMotionOutput, dense_motion, motion_size, warp_and_occlude
from mobile_portrait.pipeline.engine import init_weights
from mobile_portrait.pipeline.metrics import psnr
from mobile_portrait.pipeline.presets import PresetConfig
from mobile_portrait.synthesis import AppearanceKnowledge, FeatureBank, precompute_bank, synthesize
from mobile_portrait.tensor import GradTape, Tensor
from mobile_portrait.tensor import functional as F
from mobile_portrait.training.data import SyntheticDataset, TrainSample
from mobile_portrait.training.losses import (
    build_perceptual_pyramid,
    equivariance_loss,
    facial_knowledge_losses,
    kp_loss,
    l1_loss,
    perceptual_loss,
)
from mobile_portrait.training.optim import Optimizer
from mobile_portrait.validation import ContractError, NumericalError
from mobile_portrait.weights import ModelWeights

logger = logging.getLogger(__name__)

TRAINABLE_PREFIXES = ("detector", "merger", "dmn", "synthesis", "kp_head")


def _zero() -> Tensor:
    return Tensor(np.float32(0.0))


def _keypoints(
    frame_image: Tensor, fk: KeypointSet, weights: ModelWeights, cfg: TrainConfig, preset: PresetConfig
) -> KeypointSet:
    mode = KeypointMode(cfg.keypoint_mode)
    nk = nk_detect(frame_image, weights, preset.detector) if mode is not KeypointMode.FK else None
    return motion_keypoints(mode, nk, fk, weights)


def sample_bank(sample: TrainSample, weights: ModelWeights, cfg: TrainConfig, preset: PresetConfig) -> FeatureBank:
    """Bank of ``cfg.bank_views`` views interpolated between the source and driving poses.

    Call outside any tape: bank features are constants for the step.
    """
    if cfg.bank_views == 0:
        return FeatureBank()
    s_kps = _keypoints(sample.source.image, sample.source.fk, weights, cfg, preset).numpy()
    d_kps = _keypoints(sample.driving.image, sample.driving.fk, weights, cfg, preset).numpy()
    views = [
        KeypointSet.from_array(s_kps + (i + 0.5) / cfg.bank_views * (d_kps - s_kps), KeypointKind.MIXED)
        for i in range(cfg.bank_views)
    ]
    knowledge = AppearanceKnowledge(sample.background, sample.source.fg_mask)
    return precompute_bank(
        sample.source.image,
        KeypointSet.from_array(s_kps, KeypointKind.MIXED),
        views,
        knowledge,
        sample.source.lm_mask,
        weights,
        preset.dmn,
        preset.synthesis,
        sigma=cfg.heatmap_sigma,
        use_background=cfg.use_background,
        use_residual_flow=cfg.use_residual_flow,
    )


def reconstruct(
    sample: TrainSample,
    weights: ModelWeights,
    cfg: TrainConfig,
    preset: PresetConfig,
    bank: FeatureBank | None = None,
    training: bool = False,
) -> tuple[Tensor, DenseMotionOutput, KeypointSet]:
    """Predict the driving frame from the source; returns (prediction, motion output, driving keypoints)."""
    s_kps = _keypoints(sample.source.image, sample.source.fk, weights, cfg, preset)
    d_kps = _keypoints(sample.driving.image, sample.driving.fk, weights, cfg, preset)
    knowledge = AppearanceKnowledge(sample.background, sample.source.fg_mask, bank or FeatureBank())
    out = dense_motion(
        sample.source.image,
        s_kps,
        d_kps,
        sample.source.fg_mask,
        sample.source.lm_mask,
        weights,
        preset.dmn,
        training=training,
        sigma=cfg.heatmap_sigma,
        use_residual_flow=cfg.use_residual_flow,
    )
    warped = warp_and_occlude(sample.source.image, out.motion)
    pred = synthesize(warped, knowledge, weights, preset.synthesis, cfg.use_background)
    return pred, out, d_kps


def equivariance_seed(cfg: TrainConfig, step: int, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, step, index]).generate_state(1)[0])


def sample_losses(
    sample: TrainSample,
    weights: ModelWeights,
    cfg: TrainConfig,
    preset: PresetConfig,
    pyramid: ModelWeights,
    bank: FeatureBank,
    eq_seed: int,
) -> dict[str, Tensor]:
    """Unweighted loss terms of one source/driving pair."""
    pred, out, d_kps = reconstruct(sample, weights, cfg, preset, bank, training=True)
    target = sample.driving.image
    terms = {
        "percep": perceptual_loss(pred, target, pyramid),
        "l1": l1_loss(pred, target),
        "kp": kp_loss(d_kps, sample.driving.fk, weights),
        "eq": _zero(),
        "landmark": _zero(),
        "mask": _zero(),
    }
    if cfg.keypoint_mode != KeypointMode.FK:
        terms["eq"] = equivariance_loss(
            target, weights, preset.detector, eq_seed, sigma=cfg.eq_sigma, retries=cfg.eq_retries
        )
    if cfg.use_facial_losses:
        assert out.aux_fg_mask is not None and out.aux_lm_mask is not None
        h, w = motion_size(*target.shape[2:])
        target_fg = F.resize(sample.driving.fg_mask, h, w, mode="bilinear")
        target_lm = F.resize(sample.driving.lm_mask, h, w, mode="bilinear")
        terms["mask"], terms["landmark"] = facial_knowledge_losses(
            out.aux_fg_mask, out.aux_lm_mask, target_fg, target_lm
        )
    return terms


def batch_loss(
    batch: Sequence[TrainSample],
    weights: ModelWeights,
    cfg: TrainConfig,
    preset: PresetConfig,
    pyramid: ModelWeights,
    banks: Sequence[FeatureBank],
    step: int = 0,
) -> tuple[dict[str, Tensor], Tensor]:
    """Weighted batch-mean loss terms and their sum."""
    coeffs = cfg.loss_weights.model_dump()
    per_sample = [
        sample_losses(s, weights, cfg, preset, pyramid, bank, equivariance_seed(cfg, step, i))
        for i, (s, bank) in enumerate(zip(batch, banks, strict=True))
    ]
    terms: dict[str, Tensor] = {}
    for name in LOSS_TERMS:
        value = per_sample[0][name]
        for losses in per_sample[1:]:
            value = value + losses[name]
        terms[name] = value * (coeffs[name] / len(batch))
    total = terms[LOSS_TERMS[0]]
    for name in LOSS_TERMS[1:]:
        total = total + terms[name]
    return terms, total


def train_step(
    batch: Sequence[TrainSample],
    weights: ModelWeights,
    cfg: TrainConfig,
    preset: PresetConfig,
    pyramid: ModelWeights,
    optimizer: Optimizer,
    step: int = 0,
) -> tuple[ModelWeights, LossReport]:
    """One optimizer update on the weighted sum of the six loss terms.

    ``weights`` is updated in place and returned.

    Raises:
        NumericalError: If any loss term is NaN or Inf, naming the term.
    """
    if not batch:
        raise ContractError("train_step needs at least one sample")
    params = weights.set_trainable(TRAINABLE_PREFIXES)
    banks = [sample_bank(s, weights, cfg, preset) for s in batch]

    with GradTape() as tape:
        terms, total = batch_loss(batch, weights, cfg, preset, pyramid, banks, step)

    for name, value in terms.items():
        if not np.isfinite(value.item()):
            raise NumericalError(
                f"loss term '{name}' is {value.item()} at step {step}",
                term=name,
                suggestions=["Lower the learning rate", "Check the batch images for invalid values"],
            )

    grads = tape.gradients(total, params)
    optimizer.step(params, grads)
    report = LossReport.from_terms({name: value.item() for name, value in terms.items()}, step=step)
    logger.debug("step %d total %.6f", step, report.total)
    return weights, report


def evaluate(
    dataset: SyntheticDataset, weights: ModelWeights, cfg: TrainConfig, preset: PresetConfig
) -> EvalReport:
    """Reconstruction quality against the identity-warp baseline (source copied as prediction)."""
    scores, baseline, l1 = [], [], []
    for i in range(len(dataset)):
        sample = dataset[i]
        pred, _, _ = reconstruct(sample, weights, cfg, preset, sample_bank(sample, weights, cfg, preset))
        scores.append(psnr(pred, sample.driving.image))
        baseline.append(psnr(sample.source.image, sample.driving.image))
        l1.append(l1_loss(pred, sample.driving.image).item())
    return EvalReport(
        samples=len(dataset),
        psnr=float(np.mean(scores)),
        baseline_psnr=float(np.mean(baseline)),
        l1=float(np.mean(l1)),
    )


class Trainer:
    """Runs ``train_step`` over a synthetic dataset and logs one JSON line per step."""

    def __init__(
        self,
        cfg: TrainConfig,
        preset: PresetConfig,
        weights: ModelWeights | None = None,
        optimizer: Optimizer | None = None,
    ):
        self.cfg = cfg
        self.preset = preset
        self.weights = weights if weights is not None else init_weights(preset, seed=cfg.seed)
        self.optimizer = optimizer or Optimizer.from_config(cfg)
        self.pyramid = build_perceptual_pyramid()
        self.reports: list[LossReport] = []

    def batches(self, dataset: SyntheticDataset) -> list[list[TrainSample]]:
        """One epoch of batches in a seeded shuffled order."""
        order = np.random.default_rng([self.cfg.seed, len(self.reports)]).permutation(len(dataset))
        return [
            [dataset[int(i)] for i in order[start : start + self.cfg.batch]]
            for start in range(0, len(order), self.cfg.batch)
        ]

    def fit(self, dataset: SyntheticDataset, log_path: Path | str | None = None) -> list[LossReport]:
        """Train for ``cfg.epochs`` epochs or ``cfg.max_steps`` steps, whichever ends first."""
        log = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log = log_path.open("w", encoding="utf-8")
        try:
            for epoch in range(self.cfg.epochs):
                for batch in self.batches(dataset):
                    if self.cfg.max_steps is not None and len(self.reports) >= self.cfg.max_steps:
                        return self.reports
                    _, report = train_step(
                        batch, self.weights, self.cfg, self.preset, self.pyramid, self.optimizer, len(self.reports)
                    )
                    self.reports.append(report)
                    if log is not None:
                        log.write(report.model_dump_json() + "\n")
                if self.reports:
                    logger.info("epoch %d done, last total %.6f", epoch + 1, self.reports[-1].total)
        finally:
            if log is not None:
                log.close()
        return self.reports
