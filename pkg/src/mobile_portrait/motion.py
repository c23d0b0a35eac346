"""Motion generation: TPS candidates, the dense motion network and warping."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from mobile_portrait.keypoints import MIXED_COUNT, KeypointSet, gaussian_heatmaps
from mobile_portrait.networks import ConvLayer, UNet, UNetSpec
from mobile_portrait.tensor import Tensor, identity_grid
from mobile_portrait.tensor import functional as F
from mobile_portrait.validation import (
    ContractError,
    SingularSystemError,
    check_axis,
    check_range,
    check_rank,
    check_same_shape,
)
from mobile_portrait.weights import ModelWeights

logger = logging.getLogger(__name__)

CONTROL_POINTS = 5
NUM_TRANSFORMS = MIXED_COUNT // CONTROL_POINTS
NUM_CANDIDATES = NUM_TRANSFORMS + 1
MAX_CONDITION = 1e8

# Dense motion head layout.
OCCLUSION_CHANNEL = NUM_CANDIDATES
RESIDUAL_CHANNELS = slice(NUM_CANDIDATES + 1, NUM_CANDIDATES + 3)
DMN_OUT_CHANNELS = NUM_CANDIDATES + 3
DMN_IN_CHANNELS = MIXED_COUNT + 3 * NUM_CANDIDATES + 2
AUX_CHANNELS = 2


# ============ Thin-Plate Splines ============


def tps_kernel(d2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2 written on squared distances, with U(0) = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d2 > 0, d2 * np.log(np.where(d2 > 0, d2, 1.0)), 0.0)


@dataclass(frozen=True)
class TpsTransform:
    """Thin-plate spline through five control pairs.

    ``affine`` is 2x3 with the translation in its last column, so the map is
    ``affine[:, :2] @ p + affine[:, 2] + sum_i U(|p - src_i|) * radial_weights[i]``.
    """

    control_src: np.ndarray
    control_dst: np.ndarray
    affine: np.ndarray
    radial_weights: np.ndarray

    @classmethod
    def identity(cls, points: np.ndarray) -> "TpsTransform":
        points = np.asarray(points, dtype=np.float64)
        return cls(
            control_src=points,
            control_dst=points.copy(),
            affine=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            radial_weights=np.zeros((CONTROL_POINTS, 2)),
        )

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (..., 2) array in float64."""
        p = np.asarray(points, dtype=np.float64)
        out = p @ self.affine[:, :2].T + self.affine[:, 2]
        d2 = ((p[..., None, :] - self.control_src) ** 2).sum(axis=-1)
        return out + tps_kernel(d2) @ self.radial_weights


def _tps_system(src: np.ndarray) -> np.ndarray:
    """The (n+3) x (n+3) TPS matrix for control points ``src``."""
    n = CONTROL_POINTS
    d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(axis=-1)
    P = np.hstack([np.ones((n, 1)), src])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = tps_kernel(d2)
    L[:n, n:] = P
    L[n:, :n] = P.T
    condition = float(np.linalg.cond(L))
    if not np.isfinite(condition) or condition >= MAX_CONDITION:
        raise SingularSystemError("degenerate TPS control points", condition=condition)
    return L


def fit_tps(src5: np.ndarray, dst5: np.ndarray) -> TpsTransform:
    """Solve the TPS interpolation system mapping ``src5`` onto ``dst5``.

    Raises:
        SingularSystemError: When the control points are (near-)collinear or
            coincident and the system's condition number reaches 1e8.
    """
    src = np.asarray(src5, dtype=np.float64).reshape(CONTROL_POINTS, 2)
    dst = np.asarray(dst5, dtype=np.float64).reshape(CONTROL_POINTS, 2)
    L = _tps_system(src)
    if np.array_equal(src, dst):
        return TpsTransform.identity(src)
    rhs = np.zeros((CONTROL_POINTS + 3, 2))
    rhs[:CONTROL_POINTS] = dst
    solution = np.linalg.solve(L, rhs)
    weights, coeffs = solution[:CONTROL_POINTS], solution[CONTROL_POINTS:]
    # coeffs rows are (constant, x, y).
    affine = np.stack([coeffs[1], coeffs[2], coeffs[0]], axis=1)
    return TpsTransform(control_src=src, control_dst=dst, affine=affine, radial_weights=weights)


def tps_apply(t: TpsTransform, grid: Tensor) -> Tensor:
    """Evaluate the spline at every point of a (1, h, w, 2) grid."""
    check_rank(grid.shape, 4, "TPS grid")
    check_axis(grid.shape[3], 2, "coordinates", "TPS grid")
    return Tensor(t.map_points(grid.data).astype(np.float32))


def tps_warp_points(t: TpsTransform, points: Tensor) -> Tensor:
    """Differentiable spline evaluation on (1, K, 2) points."""
    out = F.matmul(points, Tensor(t.affine[:, :2].T.astype(np.float32))) + Tensor(t.affine[:, 2].astype(np.float32))
    radial = []
    for c in t.control_src.astype(np.float32):
        diff = points - Tensor(c.reshape(1, 1, 2))
        d2 = F.sum(diff * diff, axis=2, keepdims=True)
        radial.append(d2 * F.log(d2))
    basis = F.concat(radial, axis=2)
    return out + F.matmul(basis, Tensor(t.radial_weights.astype(np.float32)))


# ============ Candidate Flows ============


@dataclass
class CandidateFlows:
    """K+1 sampling grids (1, h, w, 2); index 0 is the identity background candidate."""

    grids: list[Tensor]
    degenerate_groups: list[int] = field(default_factory=list)

    @property
    def warnings(self) -> list[str]:
        return [f"TPS group {g} is degenerate; identity flow used" for g in self.degenerate_groups]


def build_candidates(s_kps: KeypointSet, d_kps: KeypointSet, h: int, w: int) -> CandidateFlows:
    """One identity grid plus one TPS grid per contiguous group of five keypoints.

    Each TPS is fitted from driving to source points so the grid samples the
    source (backward warping). Degenerate groups fall back to the identity.
    """
    for kps in (s_kps, d_kps):
        if kps.count != MIXED_COUNT:
            raise ContractError(f"build_candidates needs {MIXED_COUNT} keypoints, got {kps.count}")
    base = Tensor(identity_grid(h, w))
    src = s_kps.numpy().astype(np.float64)
    drv = d_kps.numpy().astype(np.float64)
    result = CandidateFlows(grids=[base])
    for g in range(NUM_TRANSFORMS):
        group = slice(g * CONTROL_POINTS, (g + 1) * CONTROL_POINTS)
        try:
            t = fit_tps(drv[group], src[group])
        except SingularSystemError as e:
            logger.warning("TPS group %d degenerate (%s); using identity", g, e.message)
            result.degenerate_groups.append(g)
            result.grids.append(base)
            continue
        result.grids.append(tps_apply(t, base))
    return result


# ============ Dense Motion ============


@dataclass(frozen=True)
class MotionField:
    """Backward sampling coordinates (1, 2, H, W) and an occlusion gate (1, 1, H, W)."""

    flow: Tensor
    occlusion: Tensor

    def __post_init__(self) -> None:
        check_rank(self.flow.shape, 4, "flow")
        check_axis(self.flow.shape[1], 2, "channels", "flow")
        check_same_shape(
            (1, 1, *self.flow.shape[2:]), self.occlusion.shape, "occlusion vs flow"
        )

    @classmethod
    def identity(cls, height: int, width: int) -> "MotionField":
        return cls(
            flow=Tensor(grid_to_flow(identity_grid(height, width))),
            occlusion=Tensor(np.ones((1, 1, height, width), dtype=np.float32)),
        )

    def sampling_grid(self) -> Tensor:
        """Flow in the (1, H, W, 2) layout grid_sample expects."""
        return F.permute(self.flow, (0, 2, 3, 1))


@dataclass(frozen=True)
class DenseMotionOutput:
    motion: MotionField
    contributions: Tensor
    residual_flow: Tensor
    aux_fg_mask: Tensor | None = None
    aux_lm_mask: Tensor | None = None
    warnings: list[str] = field(default_factory=list)


def grid_to_flow(grid: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(grid.transpose(0, 3, 1, 2))


def dmn_aux_layer(spec: UNetSpec, height: int, width: int) -> ConvLayer:
    """Training-only mask head on the last DMN feature layer."""
    return ConvLayer(
        name="dmn.aux_head", in_channels=spec.channels[0], out_channels=AUX_CHANNELS,
        out_h=height, out_w=width, relu=False,
    )


def motion_size(height: int, width: int) -> tuple[int, int]:
    """Resolution at which the dense motion network runs."""
    return height // 4, width // 4


def dense_motion_input(
    source: Tensor,
    s_kps: KeypointSet,
    d_kps: KeypointSet,
    fg_mask: Tensor,
    lm_mask: Tensor,
    candidates: CandidateFlows,
    sigma: float,
) -> Tensor:
    """85-channel input: heatmap differences, candidate-warped sources, masks."""
    h, w = candidates.grids[0].shape[1:3]
    heat = gaussian_heatmaps(d_kps, h, w, sigma) - gaussian_heatmaps(s_kps, h, w, sigma)
    small = F.resize(source, h, w, mode="bilinear")
    warped = [F.grid_sample(small, grid) for grid in candidates.grids]
    masks = [F.resize(fg_mask, h, w, mode="bilinear"), F.resize(lm_mask, h, w, mode="bilinear")]
    return F.concat([heat, *warped, *masks], axis=1)


def compose_flow(
    contributions: Tensor,
    candidates: Sequence[Tensor],
    residual: Tensor | None,
    out_h: int,
    out_w: int,
) -> Tensor:
    """Full-resolution flow (1, 2, H, W) from weighted candidates and a residual.

    Composition runs on displacements from the identity grid, which are then
    upsampled bilinearly and re-added to the full-resolution identity grid.
    """
    h, w = contributions.shape[2:]
    base = identity_grid(h, w)
    disp = np.concatenate([grid_to_flow(c.data - base) for c in candidates], axis=0)  # (K+1, 2, h, w)
    dx = Tensor(disp[None, :, 0])
    dy = Tensor(disp[None, :, 1])
    total = F.concat(
        [F.sum(contributions * dx, axis=1, keepdims=True), F.sum(contributions * dy, axis=1, keepdims=True)],
        axis=1,
    )
    if residual is not None:
        total = total + residual
    if (h, w) != (out_h, out_w):
        total = F.resize(total, out_h, out_w, mode="bilinear")
    return Tensor(grid_to_flow(identity_grid(out_h, out_w))) + total


def dense_motion(
    source: Tensor,
    s_kps: KeypointSet,
    d_kps: KeypointSet,
    fg_mask: Tensor,
    lm_mask: Tensor,
    weights: ModelWeights,
    spec: UNetSpec,
    training: bool = False,
    sigma: float = 0.1,
    use_residual_flow: bool = True,
) -> DenseMotionOutput:
    """Run the dense motion network and compose the motion field.

    Raises:
        MissingWeightError: If DMN tensors are absent.
        ContractError: If masks leave [0, 1] or shapes disagree.
    """
    check_rank(source.shape, 4, "source")
    _, _, H, W = source.shape
    check_same_shape((1, 1, H, W), fg_mask.shape, "fg_mask vs source")
    check_same_shape((1, 1, H, W), lm_mask.shape, "lm_mask vs source")
    check_range(fg_mask.data, 0.0, 1.0, "fg_mask")
    check_range(lm_mask.data, 0.0, 1.0, "lm_mask")

    h, w = motion_size(H, W)
    candidates = build_candidates(s_kps.detach(), d_kps.detach(), h, w)
    net = UNet(spec, "dmn", weights)
    net.require()
    features = net.decode(*net.encode(dense_motion_input(source, s_kps, d_kps, fg_mask, lm_mask, candidates, sigma)))
    head = net.head(features)

    contributions = F.softmax_channels(F.index(head, (slice(None), slice(0, NUM_CANDIDATES))))
    occlusion = F.sigmoid(F.index(head, (slice(None), slice(OCCLUSION_CHANNEL, OCCLUSION_CHANNEL + 1))))
    residual = F.index(head, (slice(None), RESIDUAL_CHANNELS))
    flow = compose_flow(contributions, candidates.grids, residual if use_residual_flow else None, H, W)
    if (h, w) != (H, W):
        occlusion = F.resize(occlusion, H, W, mode="bilinear")

    aux_fg = aux_lm = None
    if training:
        aux = F.sigmoid(net.head(features, name="aux_head"))
        aux_fg = F.index(aux, (slice(None), slice(0, 1)))
        aux_lm = F.index(aux, (slice(None), slice(1, 2)))
    return DenseMotionOutput(
        motion=MotionField(flow=flow, occlusion=occlusion),
        contributions=contributions,
        residual_flow=residual,
        aux_fg_mask=aux_fg,
        aux_lm_mask=aux_lm,
        warnings=candidates.warnings,
    )


def warp_and_occlude(source: Tensor, m: MotionField) -> Tensor:
    """Backward-warp the source along the flow and gate it by occlusion."""
    check_same_shape(source.shape[2:], m.flow.shape[2:], "source vs flow")
    return m.occlusion * F.grid_sample(source, m.sampling_grid())
