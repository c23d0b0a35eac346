"""Tests for the training loss terms."""

import numpy as np
import pytest

from mobile_portrait.keypoints import (
    FACIAL_COUNT,
    MIXED_COUNT,
    NEURAL_COUNT,
    KeypointKind,
    KeypointSet,
    facial_subset,
    soft_argmax,
)
from mobile_portrait.motion import TpsTransform, fit_tps
from mobile_portrait.tensor import Tensor
from mobile_portrait.tensor import functional as F
from mobile_portrait.training import losses
from mobile_portrait.training.losses import (
    EQ_CONTROL_POINTS,
    equivariance_loss,
    facial_knowledge_losses,
    kp_loss,
    l1_loss,
    perceptual_loss,
    random_warp,
)
from mobile_portrait.validation import DimensionError, MissingWeightError, NumericalError, SingularSystemError
from mobile_portrait.weights import ModelWeights
from tests.gradcheck import check_gradients


def kp_head(bias: np.ndarray) -> ModelWeights:
    """A keypoint head that ignores its input and predicts ``bias``."""
    weights = ModelWeights()
    weights.add("kp_head.weight", np.zeros((2 * FACIAL_COUNT, 2 * MIXED_COUNT)))
    weights.add("kp_head.bias", bias.reshape(-1))
    return weights


# ============ Reconstruction ============


class TestL1Loss:
    """Tests for the pixel L1 term."""

    def test_known_value(self):
        loss = l1_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.full((1, 3, 4, 4), 0.25)))
        assert loss.item() == pytest.approx(0.25)

    def test_equal_inputs(self, rng):
        x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
        assert l1_loss(x, x).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            l1_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 8))))


class TestPerceptualLoss:
    """Tests for the multi-scale feature loss."""

    def test_equal_inputs(self, sample, pyramid):
        assert perceptual_loss(sample.source.image, sample.source.image, pyramid).item() == 0.0

    def test_symmetric_and_positive(self, sample, pyramid):
        a = perceptual_loss(sample.source.image, sample.driving.image, pyramid).item()
        b = perceptual_loss(sample.driving.image, sample.source.image, pyramid).item()
        assert a > 0.0
        assert a == pytest.approx(b, rel=1e-5)

    def test_pyramid_is_fixed(self):
        a, b = losses.build_perceptual_pyramid(), losses.build_perceptual_pyramid()
        assert a.to_bytes() == b.to_bytes()

    def test_missing_pyramid(self, sample):
        with pytest.raises(MissingWeightError) as exc_info:
            perceptual_loss(sample.source.image, sample.driving.image, ModelWeights())
        assert exc_info.value.component == "percep"


# ============ Keypoint Terms ============


class TestKpLoss:
    """Tests for the facial keypoint regression term."""

    def test_constant_offset(self, sample):
        """Test that a prediction off by (0.3, 0.4) everywhere costs 0.5."""
        fk = sample.driving.fk
        weights = kp_head(fk.numpy() + np.array([0.3, 0.4]))
        loss = kp_loss(facial_subset(fk), fk, weights)
        assert loss.item() == pytest.approx(0.5, abs=1e-5)

    def test_exact_prediction(self, sample):
        fk = sample.driving.fk
        loss = kp_loss(facial_subset(fk), fk, kp_head(fk.numpy()))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_missing_head(self, sample):
        with pytest.raises(MissingWeightError) as exc_info:
            kp_loss(facial_subset(sample.driving.fk), sample.driving.fk, ModelWeights())
        assert exc_info.value.component == "kp_head"


class TestEquivarianceLoss:
    """Tests for the keypoint equivariance term."""

    def test_identity_warp(self, sample, toy_weights, toy_preset):
        warp = TpsTransform.identity(EQ_CONTROL_POINTS)
        loss = equivariance_loss(sample.driving.image, toy_weights, toy_preset.detector, 0, warp=warp)
        assert loss.item() == pytest.approx(0.0, abs=1e-5)

    def test_translation_with_fixed_detector(self, sample, toy_weights, toy_preset):
        """Test that a detector blind to the image pays exactly the warp translation."""
        shift = np.array([0.1, -0.05])
        warp = fit_tps(EQ_CONTROL_POINTS, EQ_CONTROL_POINTS + shift)
        centre = KeypointSet.from_array(np.zeros((NEURAL_COUNT, 2)), KeypointKind.NEURAL)
        loss = equivariance_loss(
            sample.driving.image, toy_weights, toy_preset.detector, 0, warp=warp, detector=lambda _: centre
        )
        assert loss.item() == pytest.approx(0.15, abs=1e-5)

    def test_seeded(self, sample, toy_weights, toy_preset):
        a = equivariance_loss(sample.driving.image, toy_weights, toy_preset.detector, 7)
        b = equivariance_loss(sample.driving.image, toy_weights, toy_preset.detector, 7)
        assert a.item() == b.item()
        assert a.item() >= 0.0


class TestRandomWarp:
    """Tests for drawing the equivariance warp."""

    def test_seeded_draw(self):
        a = random_warp(np.random.default_rng(3))
        b = random_warp(np.random.default_rng(3))
        np.testing.assert_array_equal(a.affine, b.affine)
        np.testing.assert_array_equal(a.radial_weights, b.radial_weights)

    def test_zero_sigma_is_identity(self):
        warp = random_warp(np.random.default_rng(0), sigma=0.0)
        np.testing.assert_allclose(warp.map_points(EQ_CONTROL_POINTS), EQ_CONTROL_POINTS, atol=1e-9)

    def test_redraws_degenerate(self, monkeypatch):
        calls = []

        def flaky(src, dst):
            calls.append(1)
            if len(calls) < 3:
                raise SingularSystemError("degenerate", condition=1e12)
            return fit_tps(src, dst)

        monkeypatch.setattr(losses, "fit_tps", flaky)
        random_warp(np.random.default_rng(0), retries=3)
        assert len(calls) == 3

    def test_retries_exhausted(self, monkeypatch):
        def always_singular(src, dst):
            raise SingularSystemError("degenerate", condition=1e12)

        monkeypatch.setattr(losses, "fit_tps", always_singular)
        with pytest.raises(NumericalError) as exc_info:
            random_warp(np.random.default_rng(0), retries=4)
        assert exc_info.value.term == "eq"
        assert exc_info.value.exit_code == 4


# ============ Facial Knowledge ============


class TestFacialKnowledgeLosses:
    """Tests for the auxiliary mask terms."""

    def test_zeros_against_ones(self):
        zeros, ones = Tensor(np.zeros((1, 1, 16, 16))), Tensor(np.ones((1, 1, 16, 16)))
        mask, landmark = facial_knowledge_losses(zeros, zeros, ones, ones)
        assert (mask.item(), landmark.item()) == (1.0, 1.0)

    def test_independent_terms(self, rng):
        target = Tensor(rng.uniform(0, 1, (1, 1, 16, 16)))
        mask, landmark = facial_knowledge_losses(target, Tensor(np.zeros((1, 1, 16, 16))), target, target)
        assert mask.item() == 0.0
        assert landmark.item() > 0.0


# ============ Gradients ============


def pixel_model(rng: np.random.Generator, channels: int):
    """sigmoid(conv2d(x, k)) on a fixed 8x8 input, its kernel and a target clear of every |.| kink."""
    x = Tensor(rng.uniform(0, 1, (1, channels, 8, 8)))
    bias = Tensor(rng.uniform(-0.1, 0.1, channels))
    kernel = rng.uniform(-0.3, 0.3, (channels, channels, 3, 3))

    def predict(k: Tensor) -> Tensor:
        return F.sigmoid(F.conv2d(x, k, bias, padding=1))

    pred = predict(Tensor(kernel)).numpy()
    gap = rng.uniform(0.05, 0.2, pred.shape) * rng.choice([-1.0, 1.0], pred.shape)
    return predict, kernel, Tensor(pred + gap)


class TestLossGradients:
    """Tests comparing tape gradients of every loss term with central differences."""

    def test_l1(self, rng):
        predict, kernel, target = pixel_model(rng, 3)
        check_gradients(lambda k: l1_loss(predict(k), target), kernel)

    @pytest.mark.parametrize("term", [0, 1], ids=["mask", "landmark"])
    def test_facial_knowledge(self, rng, term):
        predict, kernel, target = pixel_model(rng, 1)
        fixed = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))

        def build(k):
            pred = predict(k)
            pair = (pred, fixed) if term == 0 else (fixed, pred)
            targets = (target, fixed) if term == 0 else (fixed, target)
            return facial_knowledge_losses(*pair, *targets)[term]

        check_gradients(build, kernel)

    def test_perceptual(self, rng, smooth_pyramid):
        """Test the image gradient through all three scales with positive features."""
        pred = rng.uniform(0.1, 0.4, (1, 3, 8, 8))
        target = Tensor(pred + rng.uniform(0.3, 0.5, pred.shape))
        check_gradients(lambda p: perceptual_loss(p, target, smooth_pyramid), pred)

    def test_kp(self, rng):
        """Test the head parameters and the mixed points with every residual far from zero."""
        magnitude = rng.uniform(0.3, 0.9, (FACIAL_COUNT, 2)) * rng.choice([-1.0, 1.0], (FACIAL_COUNT, 2))
        fk = KeypointSet.from_array(magnitude, KeypointKind.FACIAL)
        points = rng.uniform(-0.8, 0.8, (1, MIXED_COUNT, 2))
        weight = rng.uniform(-0.01, 0.01, (2 * FACIAL_COUNT, 2 * MIXED_COUNT))
        bias = rng.uniform(-0.05, 0.05, 2 * FACIAL_COUNT)

        def build(p, w, b):
            head = ModelWeights()
            head.add("kp_head.weight", w)
            head.add("kp_head.bias", b)
            return kp_loss(KeypointSet(p, KeypointKind.MIXED), fk, head)

        check_gradients(build, points, weight, bias, samples=24)

    def test_equivariance(self, rng, toy_preset):
        """Test a small soft-argmax detector under a translation larger than any detection shift."""
        image = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
        kernel = rng.uniform(-0.1, 0.1, (NEURAL_COUNT, 3, 3, 3))
        bias = Tensor(np.zeros(NEURAL_COUNT))
        warp = fit_tps(EQ_CONTROL_POINTS, EQ_CONTROL_POINTS + np.array([0.6, -0.6]))

        def build(k):
            def detect(x):
                logits = F.conv2d(F.resize(x, 8, 8, mode="bilinear"), k, bias, padding=1)
                return KeypointSet(soft_argmax(logits), KeypointKind.NEURAL)

            return equivariance_loss(image, ModelWeights(), toy_preset.detector, 0, warp=warp, detector=detect)

        check_gradients(build, kernel, samples=24)
