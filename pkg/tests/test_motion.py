"""Tests for thin-plate splines, candidate flows, dense motion and warping."""

import numpy as np
import pytest

from mobile_portrait.keypoints import FACIAL_COUNT, MIXED_COUNT, KeypointKind, KeypointSet
from mobile_portrait.motion import (
    CONTROL_POINTS,
    NUM_CANDIDATES,
    MotionField,
    TpsTransform,
    build_candidates,
    compose_flow,
    dense_motion,
    fit_tps,
    grid_to_flow,
    tps_apply,
    tps_warp_points,
    warp_and_occlude,
)
from mobile_portrait.tensor import Tensor, identity_grid
from mobile_portrait.validation import ContractError, MissingWeightError, SingularSystemError
from mobile_portrait.weights import ModelWeights


def random_pair(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    src = rng.uniform(-1, 1, (CONTROL_POINTS, 2))
    return src, src + rng.normal(0, 0.2, (CONTROL_POINTS, 2))


def mixed(points: np.ndarray) -> KeypointSet:
    return KeypointSet.from_array(points, KeypointKind.MIXED)


def tps_oracle(src: np.ndarray, dst: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Independent dense solve of the TPS system, evaluated at ``points``."""
    n = len(src)

    def u(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        r2 = ((a[:, None] - b[None]) ** 2).sum(-1)
        out = np.zeros_like(r2)
        nz = r2 > 0
        out[nz] = r2[nz] * np.log(r2[nz])
        return out

    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = u(src, src)
    system[:n, n] = 1.0
    system[:n, n + 1:] = src
    system[n, :n] = 1.0
    system[n + 1:, :n] = src.T
    rhs = np.vstack([dst, np.zeros((3, 2))])
    sol = np.linalg.solve(system, rhs)
    return u(points, src) @ sol[:n] + sol[n] + points @ sol[n + 1:]


# ============ Thin-Plate Splines ============


class TestFitTps:
    """Tests for the TPS solver."""

    def test_identity_fit(self, rng):
        src = rng.uniform(-1, 1, (CONTROL_POINTS, 2))
        t = fit_tps(src, src)
        np.testing.assert_array_equal(t.affine, [[1, 0, 0], [0, 1, 0]])
        np.testing.assert_array_equal(t.radial_weights, 0.0)

    def test_translation(self, rng):
        """Test that a pure translation is reproduced by the affine part alone."""
        src = rng.uniform(-1, 1, (CONTROL_POINTS, 2))
        t = fit_tps(src, src + [0.1, 0.0])
        np.testing.assert_allclose(t.affine[:, :2], np.eye(2), atol=1e-8)
        np.testing.assert_allclose(t.affine[:, 2], [0.1, 0.0], atol=1e-8)
        assert np.abs(t.radial_weights).max() <= 1e-6

    def test_interpolates_random_pairs(self, rng):
        """Test 1000 random fits hit every control point within 1e-5."""
        for _ in range(1000):
            src, dst = random_pair(rng)
            t = fit_tps(src, dst)
            assert np.abs(t.map_points(src) - dst).max() <= 1e-5

    def test_matches_dense_solve(self, rng):
        src, dst = random_pair(rng)
        probe = rng.uniform(-1, 1, (20, 2))
        np.testing.assert_allclose(fit_tps(src, dst).map_points(probe), tps_oracle(src, dst, probe), atol=1e-8)

    def test_reproduces_affine_maps(self, rng):
        """Test that affine-generated pairs give negligible radial weights."""
        for _ in range(1000):
            src = rng.uniform(-1, 1, (CONTROL_POINTS, 2))
            a = np.eye(2) + rng.normal(0, 0.2, (2, 2))
            dst = src @ a.T + rng.normal(0, 0.2, 2)
            assert np.abs(fit_tps(src, dst).radial_weights).max() <= 1e-5

    @pytest.mark.parametrize(
        "src",
        [
            np.stack([np.linspace(-1, 1, CONTROL_POINTS), np.linspace(-0.5, 0.5, CONTROL_POINTS)], axis=1),
            np.zeros((CONTROL_POINTS, 2)),
        ],
        ids=["collinear", "coincident"],
    )
    def test_degenerate_points(self, src):
        with pytest.raises(SingularSystemError) as exc_info:
            fit_tps(src, src + 0.1)
        assert exc_info.value.condition >= 1e8
        assert exc_info.value.exit_code == 4


class TestTpsApply:
    """Tests for evaluating a spline on grids and points."""

    def test_identity(self):
        grid = Tensor(identity_grid(6, 5))
        t = TpsTransform.identity(np.random.default_rng(0).uniform(-1, 1, (CONTROL_POINTS, 2)))
        np.testing.assert_array_equal(tps_apply(t, grid).numpy(), grid.numpy())

    def test_translation_shifts_grid(self, rng):
        src = rng.uniform(-1, 1, (CONTROL_POINTS, 2))
        grid = Tensor(identity_grid(7, 7))
        out = tps_apply(fit_tps(src, src + [0.1, 0.0]), grid).numpy()
        np.testing.assert_allclose(out, grid.numpy() + np.array([0.1, 0.0], dtype=np.float32), atol=1e-5)

    def test_control_points_map_to_destinations(self, rng):
        src, dst = random_pair(rng)
        out = tps_apply(fit_tps(src, dst), Tensor(src.reshape(1, 1, CONTROL_POINTS, 2))).numpy()
        np.testing.assert_allclose(out.reshape(CONTROL_POINTS, 2), dst, atol=1e-5)

    def test_point_warp_matches_grid_evaluation(self, rng):
        """Test that the differentiable point path agrees with the float64 map."""
        src, dst = random_pair(rng)
        t = fit_tps(src, dst)
        points = rng.uniform(-1, 1, (1, 12, 2))
        out = tps_warp_points(t, Tensor(points)).numpy()
        np.testing.assert_allclose(out, t.map_points(points), atol=1e-4)


# ============ Candidates ============


class TestBuildCandidates:
    """Tests for the per-group candidate flows."""

    def test_same_keypoints_give_identity(self, rng):
        kps = mixed(rng.uniform(-0.9, 0.9, (MIXED_COUNT, 2)))
        result = build_candidates(kps, kps, 8, 8)
        assert len(result.grids) == NUM_CANDIDATES
        for grid in result.grids:
            np.testing.assert_array_equal(grid.numpy(), identity_grid(8, 8))

    def test_one_translated_group(self, rng):
        """Test that moving one source group moves exactly one candidate."""
        drv = rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2))
        src = drv.copy()
        delta = np.array([0.05, -0.03])
        src[15:20] += delta
        result = build_candidates(mixed(src), mixed(drv), 8, 8)
        base = identity_grid(8, 8)
        moved = [k for k, grid in enumerate(result.grids) if not np.allclose(grid.numpy(), base, atol=1e-6)]
        assert moved == [4]
        np.testing.assert_allclose(result.grids[4].numpy(), base + delta.astype(np.float32), atol=1e-5)

    def test_each_candidate_interpolates_its_group(self, rng):
        src = rng.uniform(-0.9, 0.9, (MIXED_COUNT, 2))
        drv = rng.uniform(-0.9, 0.9, (MIXED_COUNT, 2))
        s_kps, d_kps = mixed(src), mixed(drv)
        result = build_candidates(s_kps, d_kps, 4, 4)
        assert len(result.grids) == NUM_CANDIDATES
        base = Tensor(identity_grid(4, 4))
        for g in range(NUM_CANDIDATES - 1):
            group = slice(g * CONTROL_POINTS, (g + 1) * CONTROL_POINTS)
            t = fit_tps(d_kps.numpy()[group], s_kps.numpy()[group])
            np.testing.assert_allclose(t.map_points(d_kps.numpy()[group]), s_kps.numpy()[group], atol=1e-5)
            np.testing.assert_array_equal(result.grids[g + 1].numpy(), tps_apply(t, base).numpy())

    def test_degenerate_group_falls_back(self, rng):
        """Test that a collinear driving group yields an identity candidate and a warning."""
        src = rng.uniform(-0.9, 0.9, (MIXED_COUNT, 2))
        drv = src + 0.05
        drv[0:5] = np.stack([np.linspace(-0.5, 0.5, 5), np.zeros(5)], axis=1)
        result = build_candidates(mixed(src), mixed(drv), 6, 6)
        assert result.degenerate_groups == [0]
        assert len(result.warnings) == 1
        np.testing.assert_array_equal(result.grids[1].numpy(), identity_grid(6, 6))

    def test_wrong_count(self, rng):
        fk = KeypointSet.from_array(rng.uniform(-1, 1, (FACIAL_COUNT, 2)), KeypointKind.FACIAL)
        with pytest.raises(ContractError):
            build_candidates(fk, fk, 4, 4)


# ============ Composition ============


class TestComposeFlow:
    """Tests for weighted candidate composition."""

    def _candidates(self, rng: np.random.Generator, h: int, w: int) -> list[Tensor]:
        src = rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2))
        drv = src + rng.normal(0, 0.05, (MIXED_COUNT, 2))
        return build_candidates(mixed(src), mixed(drv), h, w).grids

    def test_uniform_contributions_average(self, rng):
        grids = self._candidates(rng, 6, 6)
        weights = Tensor(np.full((1, NUM_CANDIDATES, 6, 6), 1.0 / NUM_CANDIDATES))
        flow = compose_flow(weights, grids, None, 6, 6).numpy()
        expected = np.mean([grid_to_flow(g.numpy()) for g in grids], axis=0)
        np.testing.assert_allclose(flow, expected, atol=1e-6)

    def test_one_hot_selects_candidate(self, rng):
        grids = self._candidates(rng, 6, 6)
        weights = np.zeros((1, NUM_CANDIDATES, 6, 6), dtype=np.float32)
        weights[:, 3] = 1.0
        flow = compose_flow(Tensor(weights), grids, Tensor(np.zeros((1, 2, 6, 6))), 6, 6).numpy()
        np.testing.assert_allclose(flow, grid_to_flow(grids[3].numpy()), atol=1e-6)

    def test_residual_added_in_normalized_units(self, rng):
        grids = self._candidates(rng, 4, 4)
        weights = np.zeros((1, NUM_CANDIDATES, 4, 4), dtype=np.float32)
        weights[:, 0] = 1.0
        residual = np.full((1, 2, 4, 4), 0.1, dtype=np.float32)
        flow = compose_flow(Tensor(weights), grids, Tensor(residual), 4, 4).numpy()
        np.testing.assert_allclose(flow, grid_to_flow(identity_grid(4, 4)) + 0.1, atol=1e-6)

    def test_upsampled_to_output_size(self, rng):
        grids = self._candidates(rng, 4, 4)
        weights = Tensor(np.full((1, NUM_CANDIDATES, 4, 4), 1.0 / NUM_CANDIDATES))
        assert compose_flow(weights, grids, None, 16, 16).shape == (1, 2, 16, 16)


# ============ Dense Motion ============


class TestDenseMotion:
    """Tests for the dense motion network."""

    def _inputs(self, sample):
        fg = sample.source.fg_mask
        lm = sample.source.lm_mask
        return sample.source.image, fg, lm

    def test_identity_fixed_point(self, rng, toy_weights, toy_preset, sample):
        """Test that equal keypoints and a zero head give the identity flow exactly."""
        image, fg, lm = self._inputs(sample)
        kps = mixed(rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2)))
        out = dense_motion(image, kps, kps, fg, lm, toy_weights, toy_preset.dmn)
        np.testing.assert_array_equal(out.motion.flow.numpy(), grid_to_flow(identity_grid(64, 64)))
        np.testing.assert_array_equal(out.residual_flow.numpy(), 0.0)
        np.testing.assert_allclose(out.motion.occlusion.numpy(), 0.5, atol=1e-6)

        unoccluded = MotionField(out.motion.flow, Tensor(np.ones((1, 1, 64, 64))))
        np.testing.assert_array_equal(warp_and_occlude(image, unoccluded).numpy(), image.numpy())

    def test_contributions_sum_to_one(self, rng, toy_weights, toy_preset, sample):
        image, fg, lm = self._inputs(sample)
        s = mixed(rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2)))
        d = mixed(rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2)))
        out = dense_motion(image, s, d, fg, lm, toy_weights, toy_preset.dmn)
        assert out.contributions.shape == (1, NUM_CANDIDATES, 16, 16)
        np.testing.assert_allclose(out.contributions.numpy().sum(axis=1), 1.0, atol=1e-6)
        assert out.motion.flow.shape == (1, 2, 64, 64)

    def test_training_adds_mask_heads(self, rng, toy_weights, toy_preset, sample):
        """Test that training mode predicts both auxiliary masks at motion resolution."""
        image, fg, lm = self._inputs(sample)
        kps = mixed(rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2)))
        inference = dense_motion(image, kps, kps, fg, lm, toy_weights, toy_preset.dmn)
        training = dense_motion(image, kps, kps, fg, lm, toy_weights, toy_preset.dmn, training=True)
        assert inference.aux_fg_mask is None and inference.aux_lm_mask is None
        assert training.aux_fg_mask is not None and training.aux_lm_mask is not None
        assert training.aux_fg_mask.shape == (1, 1, 16, 16)
        assert 0.0 <= training.aux_lm_mask.numpy().min() <= training.aux_lm_mask.numpy().max() <= 1.0
        np.testing.assert_array_equal(training.motion.flow.numpy(), inference.motion.flow.numpy())

    def test_mask_out_of_range(self, rng, toy_weights, toy_preset, sample):
        image, fg, _ = self._inputs(sample)
        kps = mixed(rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2)))
        bad = Tensor(np.full((1, 1, 64, 64), 1.5))
        with pytest.raises(ContractError):
            dense_motion(image, kps, kps, fg, bad, toy_weights, toy_preset.dmn)

    def test_missing_weights(self, rng, toy_preset, sample):
        image, fg, lm = self._inputs(sample)
        kps = mixed(rng.uniform(-0.8, 0.8, (MIXED_COUNT, 2)))
        with pytest.raises(MissingWeightError):
            dense_motion(image, kps, kps, fg, lm, ModelWeights(), toy_preset.dmn)


# ============ Warping ============


class TestWarpAndOcclude:
    """Tests for warping the source along a motion field."""

    def test_identity(self, sample):
        image = sample.source.image
        out = warp_and_occlude(image, MotionField.identity(64, 64))
        np.testing.assert_array_equal(out.numpy(), image.numpy())

    def test_zero_occlusion(self, sample):
        identity = MotionField.identity(64, 64)
        m = MotionField(identity.flow, Tensor(np.zeros((1, 1, 64, 64))))
        np.testing.assert_array_equal(warp_and_occlude(sample.source.image, m).numpy(), 0.0)

    def test_half_occlusion(self, sample):
        identity = MotionField.identity(64, 64)
        m = MotionField(identity.flow, Tensor(np.full((1, 1, 64, 64), 0.5)))
        np.testing.assert_allclose(warp_and_occlude(sample.source.image, m).numpy(), 0.5 * sample.source.image.numpy())

    def test_monotone_in_occlusion(self, rng, sample):
        flow = MotionField.identity(64, 64).flow + Tensor(rng.normal(0, 0.05, (1, 2, 64, 64)))
        low = rng.uniform(0, 0.5, (1, 1, 64, 64))
        high = low + rng.uniform(0, 0.5, (1, 1, 64, 64))
        a = warp_and_occlude(sample.source.image, MotionField(flow, Tensor(low))).numpy()
        b = warp_and_occlude(sample.source.image, MotionField(flow, Tensor(high))).numpy()
        assert np.all(b >= a)

    def test_occlusion_shape_checked(self):
        with pytest.raises(ContractError):
            MotionField(MotionField.identity(8, 8).flow, Tensor(np.ones((1, 1, 4, 4))))
