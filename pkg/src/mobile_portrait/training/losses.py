"""Loss terms of the training objective.

Every term is a scalar Tensor, non-negative and zero on a perfect prediction.
"""

import logging
from collections.abc import Callable

import numpy as np

from mobile_portrait.keypoints import FACIAL_COUNT, MIXED_COUNT, KeypointSet, nk_detect
from mobile_portrait.motion import CONTROL_POINTS, TpsTransform, fit_tps, tps_apply, tps_warp_points
from mobile_portrait.networks import ConvLayer, LinearLayer, UNetSpec, init_layers, layer_tensor_names
from mobile_portrait.tensor import Tensor, identity_grid
from mobile_portrait.tensor import functional as F
from mobile_portrait.validation import NumericalError, SingularSystemError, check_same_shape
from mobile_portrait.weights import ModelWeights

logger = logging.getLogger(__name__)

PERCEPTUAL_SEED = 1234
PERCEPTUAL_SCALES = 3
PERCEPTUAL_CHANNELS = (3, 8, 8)

# Control points of the random equivariance warp, perturbed by Gaussian noise.
EQ_CONTROL_POINTS = np.array([[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5], [0.0, 0.0]])

KP_HEAD = LinearLayer(name="kp_head", in_features=2 * MIXED_COUNT, out_features=2 * FACIAL_COUNT, relu=False)


# ============ Reconstruction ============


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    check_same_shape(pred.shape, target.shape, "l1 inputs")
    return F.mean(F.abs(pred - target))


def perceptual_layers(size: int = 64) -> list[ConvLayer]:
    """Two 3x3 conv + ReLU layers per scale, named ``percep.s<scale>.conv<j>``."""
    layers = []
    for s in range(PERCEPTUAL_SCALES):
        side = max(1, size >> s)
        for j in range(len(PERCEPTUAL_CHANNELS) - 1):
            layers.append(
                ConvLayer(
                    name=f"percep.s{s}.conv{j}",
                    in_channels=PERCEPTUAL_CHANNELS[j],
                    out_channels=PERCEPTUAL_CHANNELS[j + 1],
                    out_h=side,
                    out_w=side,
                )
            )
    return layers


def build_perceptual_pyramid(seed: int = PERCEPTUAL_SEED) -> ModelWeights:
    """Fixed random feature extractor; never trained."""
    weights = ModelWeights()
    init_layers(perceptual_layers(), weights, np.random.default_rng(seed))
    return weights


def _features(image: Tensor, scale: int, pyramid: ModelWeights) -> Tensor:
    h = image
    for j in range(len(PERCEPTUAL_CHANNELS) - 1):
        name = f"percep.s{scale}.conv{j}"
        h = F.relu(F.conv2d(h, pyramid[f"{name}.weight"], pyramid[f"{name}.bias"], padding=1))
    return h


def perceptual_loss(pred: Tensor, target: Tensor, pyramid: ModelWeights) -> Tensor:
    """Sum over scales 1, 1/2 and 1/4 of the mean absolute feature difference.

    Raises:
        MissingWeightError: If pyramid tensors are absent.
    """
    check_same_shape(pred.shape, target.shape, "perceptual inputs")
    pyramid.require(layer_tensor_names(perceptual_layers()), component="percep")
    _, _, H, W = pred.shape
    terms = []
    for s in range(PERCEPTUAL_SCALES):
        h, w = max(1, H >> s), max(1, W >> s)
        p = pred if s == 0 else F.resize(pred, h, w, mode="bilinear")
        t = target if s == 0 else F.resize(target, h, w, mode="bilinear")
        term = F.mean(F.abs(_features(p, s, pyramid) - _features(t, s, pyramid)))
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


# ============ Keypoint Terms ============


def random_warp(rng: np.random.Generator, sigma: float = 0.1, retries: int = 10) -> TpsTransform:
    """A TPS moving the fixed control points by N(0, sigma) noise.

    Raises:
        NumericalError: If every draw is degenerate.
    """
    for attempt in range(retries):
        dst = EQ_CONTROL_POINTS + rng.normal(0.0, sigma, size=(CONTROL_POINTS, 2))
        try:
            return fit_tps(EQ_CONTROL_POINTS, dst)
        except SingularSystemError:
            logger.debug("Degenerate equivariance warp on attempt %d; redrawing", attempt + 1)
    raise NumericalError(
        f"no non-degenerate equivariance warp after {retries} draws",
        term="eq",
        suggestions=["Lower eq_sigma in the training config"],
    )


def equivariance_loss(
    image: Tensor,
    weights: ModelWeights,
    spec: UNetSpec,
    rng_seed: int,
    sigma: float = 0.1,
    retries: int = 10,
    warp: TpsTransform | None = None,
    detector: Callable[[Tensor], KeypointSet] | None = None,
) -> Tensor:
    """Mean L1 distance between W(nk(image o W)) and nk(image).

    The image is resampled at W(g) for every pixel g, so keypoints found on the
    warped image map back onto the source frame through W. ``warp`` overrides
    the random draw; ``detector`` overrides the neural keypoint detector.
    """
    detect = detector or (lambda x: nk_detect(x, weights, spec))
    if warp is None:
        warp = random_warp(np.random.default_rng(rng_seed), sigma, retries)
    _, _, H, W = image.shape
    grid = tps_apply(warp, Tensor(identity_grid(H, W)))
    warped = F.grid_sample(image, grid)
    mapped = tps_warp_points(warp, detect(warped).points)
    reference = detect(image).points
    per_point = F.sum(F.abs(mapped - reference), axis=2)
    return F.mean(per_point)


def predict_facial(mixed: KeypointSet, weights: ModelWeights) -> Tensor:
    """(1, 106, 2) facial points regressed from the mixed keypoints."""
    flat = F.reshape(mixed.points, (1, 2 * MIXED_COUNT))
    out = F.linear(flat, weights[f"{KP_HEAD.name}.weight"], weights[f"{KP_HEAD.name}.bias"])
    return F.reshape(out, (1, FACIAL_COUNT, 2))


def kp_loss(mixed: KeypointSet, fk: KeypointSet, weights: ModelWeights) -> Tensor:
    """Mean Euclidean distance between head-predicted and given facial points.

    Experimental: the keypoint head exists only during training.
    """
    weights.require(layer_tensor_names([KP_HEAD]), component="kp_head")
    diff = predict_facial(mixed, weights) - fk.points
    return F.mean(F.sqrt(F.sum(diff * diff, axis=2)))


# ============ Facial Knowledge ============


def facial_knowledge_losses(
    aux_fg: Tensor, aux_lm: Tensor, target_fg: Tensor, target_lm: Tensor
) -> tuple[Tensor, Tensor]:
    """L1 of the DMN mask predictors against the driving frame's masks."""
    return l1_loss(aux_fg, target_fg), l1_loss(aux_lm, target_lm)
