"""Tests for the feature bank, appearance knowledge and image synthesis."""

import numpy as np
import pytest

from mobile_portrait.keypoints import facial_subset
from mobile_portrait.motion import dense_motion, warp_and_occlude
from mobile_portrait.synthesis import (
    AppearanceKnowledge,
    FeatureBank,
    composite_check,
    encode_view,
    precompute_bank,
    synthesize,
    uniform_sample_indices,
)
from mobile_portrait.tensor import Tensor
from mobile_portrait.tensor import functional as F
from mobile_portrait.validation import ContractError, DimensionError, InputFormatError
from mobile_portrait.weights import ModelWeights

BOTTLENECK = (1, 32, 16, 16)


@pytest.fixture
def knowledge(sample) -> AppearanceKnowledge:
    return AppearanceKnowledge(sample.background, sample.source.fg_mask)


def random_bank(rng: np.random.Generator, views: int) -> FeatureBank:
    return FeatureBank(tuple(Tensor(rng.standard_normal(BOTTLENECK)) for _ in range(views)))


def bank_for(sample, weights, preset, knowledge, samples, threads=1) -> FeatureBank:
    return precompute_bank(
        sample.source.image,
        facial_subset(sample.source.fk),
        samples,
        knowledge,
        sample.source.lm_mask,
        weights,
        preset.dmn,
        preset.synthesis,
        threads=threads,
    )


# ============ Feature Bank ============


class TestFeatureBank:
    """Tests for the pseudo multiview feature bank."""

    def test_empty(self):
        bank = FeatureBank()
        assert bank.count == 0
        assert bank.shape is None
        assert bank.mean() is None

    def test_mean(self, rng):
        bank = random_bank(rng, 4)
        expected = np.mean([v.numpy() for v in bank.views], axis=0)
        np.testing.assert_allclose(bank.mean().numpy(), expected, atol=1e-6)

    def test_unsupported_view_count(self, rng):
        with pytest.raises(ContractError):
            random_bank(rng, 3)

    def test_mismatched_views(self, rng):
        with pytest.raises(DimensionError):
            FeatureBank((Tensor(np.zeros(BOTTLENECK)), Tensor(np.zeros((1, 32, 8, 8)))))

    def test_file_round_trip(self, rng, tmp_path):
        """Test that a saved bank reloads to byte-identical files."""
        first = random_bank(rng, 4).save(tmp_path / "a.mpw")
        second = FeatureBank.load(first).save(tmp_path / "b.mpw")
        assert first.read_bytes() == second.read_bytes()

    def test_foreign_container_rejected(self, tmp_path):
        weights = ModelWeights()
        weights.add("detector.stem.weight", np.zeros((1, 1, 1, 1)))
        with pytest.raises(InputFormatError):
            FeatureBank.load(weights.save(tmp_path / "w.mpw"))


class TestAppearanceKnowledge:
    """Tests for the per-source appearance inputs."""

    def test_bank_mean_cached(self, rng, knowledge):
        bank = random_bank(rng, 2)
        with_bank = knowledge.with_bank(bank)
        np.testing.assert_array_equal(with_bank.bank_mean.numpy(), bank.mean().numpy())
        assert knowledge.bank_mean is None

    def test_background_out_of_range(self, sample):
        with pytest.raises(ContractError):
            AppearanceKnowledge(Tensor(np.full((1, 3, 64, 64), 1.5)), sample.source.fg_mask)

    def test_mask_size_checked(self, sample):
        with pytest.raises(DimensionError):
            AppearanceKnowledge(sample.background, Tensor(np.zeros((1, 1, 32, 32))))


# ============ Synthesis ============


class TestSynthesize:
    """Tests for the synthesis U-Net."""

    def test_output_in_unit_range(self, sample, knowledge, toy_weights, toy_preset):
        out = synthesize(sample.source.image, knowledge, toy_weights, toy_preset.synthesis)
        assert out.shape == (1, 3, 64, 64)
        assert 0.0 <= out.numpy().min() and out.numpy().max() <= 1.0

    def test_matches_layer_replay(self, sample, knowledge, toy_weights, toy_preset):
        """Test the toy synthesis net against a hand-written replay of its layer sequence."""

        def conv(x: Tensor, name: str, stride: int = 1, relu: bool = True) -> Tensor:
            y = F.conv2d(
                x, toy_weights[f"synthesis.{name}.weight"], toy_weights[f"synthesis.{name}.bias"],
                stride=stride, padding=1,
            )
            return F.relu(y) if relu else y

        warped = sample.source.image
        x = F.concat([warped, knowledge.inpainted_bg, knowledge.fg_mask], axis=1)
        h = conv(x, "stem")
        s0 = conv(h, "enc0.conv0")
        s1 = conv(conv(s0, "down0", stride=2), "enc1.conv0")
        h = conv(conv(s1, "down1", stride=2), "enc2.conv0")
        h = conv(F.concat([h, Tensor(np.zeros(h.shape))], axis=1), "fuse")
        h = conv(F.concat([F.resize(h, 32, 32, mode="nearest"), s1], axis=1), "dec1.conv0")
        h = conv(F.concat([F.resize(h, 64, 64, mode="nearest"), s0], axis=1), "dec0.conv0")
        expected = F.sigmoid(conv(h, "head", relu=False))

        out = synthesize(warped, knowledge, toy_weights, toy_preset.synthesis)
        np.testing.assert_allclose(out.numpy(), expected.numpy(), atol=1e-5)

    def test_zero_bank_slots_ignore_bank(self, rng, sample, knowledge, toy_weights, toy_preset):
        """Test that zeroed bank-slot fusion weights make the output bank-independent."""
        weights = toy_weights.copy()
        fuse = weights["synthesis.fuse.weight"].numpy().copy()
        fuse[:, BOTTLENECK[1]:] = 0.0
        weights.assign("synthesis.fuse.weight", fuse)
        empty = synthesize(sample.source.image, knowledge, weights, toy_preset.synthesis)
        banked = synthesize(sample.source.image, knowledge.with_bank(random_bank(rng, 4)), weights, toy_preset.synthesis)
        np.testing.assert_array_equal(empty.numpy(), banked.numpy())

    def test_bank_changes_output(self, rng, sample, knowledge, toy_weights, toy_preset):
        empty = synthesize(sample.source.image, knowledge, toy_weights, toy_preset.synthesis)
        banked = synthesize(
            sample.source.image, knowledge.with_bank(random_bank(rng, 2)), toy_weights, toy_preset.synthesis
        )
        assert not np.array_equal(empty.numpy(), banked.numpy())

    def test_bank_shape_mismatch(self, sample, knowledge, toy_weights, toy_preset):
        bank = FeatureBank((Tensor(np.zeros((1, 32, 8, 8))), Tensor(np.zeros((1, 32, 8, 8)))))
        with pytest.raises(DimensionError):
            synthesize(sample.source.image, knowledge.with_bank(bank), toy_weights, toy_preset.synthesis)

    def test_without_background_input(self, sample, knowledge, toy_weights, toy_preset):
        with_bg = synthesize(sample.source.image, knowledge, toy_weights, toy_preset.synthesis)
        without = synthesize(sample.source.image, knowledge, toy_weights, toy_preset.synthesis, use_background=False)
        assert without.shape == with_bg.shape
        assert not np.array_equal(with_bg.numpy(), without.numpy())


# ============ Bank Precompute ============


class TestPrecomputeBank:
    """Tests for building the feature bank from driving poses."""

    def test_no_samples(self, sample, knowledge, toy_weights, toy_preset):
        assert bank_for(sample, toy_weights, toy_preset, knowledge, []).count == 0

    def test_source_pose_views(self, sample, knowledge, toy_weights, toy_preset):
        """Test that samples at the source pose give identical views of the warped source."""
        kps = facial_subset(sample.source.fk)
        bank = bank_for(sample, toy_weights, toy_preset, knowledge, [kps, kps])
        assert bank.count == 2
        assert bank.shape == BOTTLENECK
        np.testing.assert_array_equal(bank.views[0].numpy(), bank.views[1].numpy())

        out = dense_motion(
            sample.source.image, kps, kps, sample.source.fg_mask, sample.source.lm_mask,
            toy_weights, toy_preset.dmn,
        )
        warped = warp_and_occlude(sample.source.image, out.motion)
        np.testing.assert_allclose(warped.numpy(), 0.5 * sample.source.image.numpy(), atol=1e-6)
        expected = encode_view(warped, knowledge, toy_weights, toy_preset.synthesis)
        np.testing.assert_array_equal(bank.views[0].numpy(), expected.numpy())

    def test_deterministic_and_thread_independent(self, sample, knowledge, toy_weights, toy_preset):
        """Test that reruns and a worker pool give bitwise-identical banks."""
        kps = facial_subset(sample.source.fk)
        poses = [facial_subset(sample.driving.fk), kps, facial_subset(sample.driving.fk), kps]
        a = bank_for(sample, toy_weights, toy_preset, knowledge, poses)
        b = bank_for(sample, toy_weights, toy_preset, knowledge, poses)
        c = bank_for(sample, toy_weights, toy_preset, knowledge, poses, threads=2)
        for va, vb, vc in zip(a.views, b.views, c.views, strict=True):
            np.testing.assert_array_equal(va.numpy(), vb.numpy())
            np.testing.assert_array_equal(va.numpy(), vc.numpy())

    def test_loaded_bank_reproduces_output(self, sample, knowledge, toy_weights, toy_preset, tmp_path):
        """Test that synthesis with a bank reloaded from disk is bit-exact."""
        kps = facial_subset(sample.driving.fk)
        bank = bank_for(sample, toy_weights, toy_preset, knowledge, [kps, kps])
        loaded = FeatureBank.load(bank.save(tmp_path / "bank.mpw"))
        direct = synthesize(sample.source.image, knowledge.with_bank(bank), toy_weights, toy_preset.synthesis)
        reloaded = synthesize(sample.source.image, knowledge.with_bank(loaded), toy_weights, toy_preset.synthesis)
        np.testing.assert_array_equal(direct.numpy(), reloaded.numpy())


class TestUniformSampleIndices:
    """Tests for uniform view sampling over a track."""

    @pytest.mark.parametrize(
        ("length", "count", "expected"),
        [
            (10, 4, [1, 3, 6, 8]),
            (10, 0, []),
            (0, 4, []),
            (3, 8, [0, 0, 0, 1, 1, 2, 2, 2]),
        ],
    )
    def test_indices(self, length, count, expected):
        assert uniform_sample_indices(length, count) == expected


# ============ Diagnostics ============


class TestCompositeCheck:
    """Tests for the background adherence diagnostic."""

    def _knowledge(self, bg: np.ndarray, mask: np.ndarray) -> AppearanceKnowledge:
        return AppearanceKnowledge(Tensor(bg), Tensor(mask))

    def test_output_equals_background(self, rng):
        bg = rng.uniform(0, 1, (1, 3, 8, 8))
        diag = composite_check(Tensor(bg), self._knowledge(bg, rng.uniform(0, 1, (1, 1, 8, 8))))
        assert diag.background_adherence == 0.0

    def test_constant_offset(self, rng):
        bg = rng.uniform(0, 0.5, (1, 3, 8, 8))
        diag = composite_check(Tensor(bg + 0.2), self._knowledge(bg, np.zeros((1, 1, 8, 8))))
        assert diag.background_adherence == pytest.approx(0.2, abs=1e-6)
        assert diag.background_pixels == 64

    def test_masked_mean(self, rng):
        """Test against a direct masked mean over pixels with fg_mask < 0.1."""
        bg = rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
        out = rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
        mask = rng.uniform(0, 0.3, (1, 1, 8, 8)).astype(np.float32)
        region = mask[0, 0] < 0.1
        expected = np.abs(out.astype(np.float64) - bg)[0][:, region].mean()
        diag = composite_check(Tensor(out), self._knowledge(bg, mask))
        assert diag.background_adherence == pytest.approx(expected, abs=1e-9)
        assert diag.background_pixels == int(region.sum())

    def test_full_foreground(self, rng):
        bg = rng.uniform(0, 1, (1, 3, 4, 4))
        diag = composite_check(Tensor(bg), self._knowledge(bg, np.ones((1, 1, 4, 4))))
        assert diag.background_pixels == 0
