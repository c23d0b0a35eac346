"""Keypoint sets, detection, merging, heatmaps, landmark masks and track files."""

import json
import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from mobile_portrait.networks import UNet, UNetSpec, mlp_forward, mlp_plan
from mobile_portrait.tensor import Tensor, identity_grid
from mobile_portrait.tensor import functional as F
from mobile_portrait.validation import ContractError, InputFormatError, check_finite, check_rank
from mobile_portrait.weights import ModelWeights

logger = logging.getLogger(__name__)

NEURAL_COUNT = 50
FACIAL_COUNT = 106
MIXED_COUNT = 50
CORRUPT_LIMIT = 1.5

MERGER_SIZES = (2 * NEURAL_COUNT + 2 * FACIAL_COUNT, 256, 256, 2 * MIXED_COUNT)
MERGER_LAYERS = mlp_plan("merger", MERGER_SIZES)

# Evenly spaced facial landmarks standing in for mixed keypoints in fk mode.
FK_SUBSET = np.round(np.linspace(0, FACIAL_COUNT - 1, MIXED_COUNT)).astype(np.int64)


class KeypointKind(StrEnum):
    NEURAL = "neural"
    FACIAL = "facial"
    MIXED = "mixed"


class KeypointMode(StrEnum):
    """Which keypoints drive the motion network."""

    MIXED = "mixed"
    NK = "nk"
    FK = "fk"


KIND_COUNTS = {
    KeypointKind.NEURAL: NEURAL_COUNT,
    KeypointKind.FACIAL: FACIAL_COUNT,
    KeypointKind.MIXED: MIXED_COUNT,
}


@dataclass(frozen=True)
class KeypointSet:
    """Ordered 2-D points in normalized coordinates, held as a (1, K, 2) tensor."""

    points: Tensor
    kind: KeypointKind

    def __post_init__(self) -> None:
        expected = KIND_COUNTS[self.kind]
        if self.points.shape != (1, expected, 2):
            raise ContractError(
                f"{self.kind.value} keypoints must have shape (1, {expected}, 2), got {self.points.shape}"
            )
        check_finite(self.points.data, f"{self.kind.value} keypoints")

    @classmethod
    def from_array(cls, points: np.ndarray | Sequence[Sequence[float]], kind: KeypointKind | str) -> "KeypointSet":
        """Build a constant set, clamping coordinates into [-1, 1]."""
        array = np.clip(np.asarray(points, dtype=np.float32).reshape(1, -1, 2), -1.0, 1.0)
        return cls(Tensor(array), KeypointKind(kind))

    @property
    def count(self) -> int:
        return self.points.shape[1]

    def numpy(self) -> np.ndarray:
        """Points as a (K, 2) array."""
        return self.points.data[0]

    def relabel(self, kind: KeypointKind) -> "KeypointSet":
        return KeypointSet(self.points, kind)

    def detach(self) -> "KeypointSet":
        return KeypointSet(self.points.detach(), self.kind)


# ============ Detection ============


def soft_argmax(logits: Tensor) -> Tensor:
    """Expected normalized coordinate under a per-channel spatial softmax.

    (1, K, h, w) logits become (1, K, 2) points inside [-1, 1].
    """
    check_rank(logits.shape, 4, "heatmap logits")
    _, k, h, w = logits.shape
    probs = F.softmax(F.reshape(logits, (1, k, h * w)), axis=2)
    coords = Tensor(identity_grid(h, w).reshape(h * w, 2))
    return F.matmul(probs, coords)


def detector_input(image: Tensor) -> Tensor:
    """Quarter-resolution copy of the image fed to the detector."""
    return F.resize(image, image.shape[2] // 4, image.shape[3] // 4, mode="bilinear")


def nk_detect(image: Tensor, weights: ModelWeights, spec: UNetSpec) -> KeypointSet:
    """Detect 50 neural keypoints with the detector U-Net and a soft-argmax.

    Raises:
        MissingWeightError: If detector tensors are absent.
        DimensionError: If the image is not (1, 3, H, W) with H/4, W/4 valid
            detector sizes.
    """
    check_rank(image.shape, 4, "detector image")
    net = UNet(spec, "detector", weights)
    net.require()
    logits = net(detector_input(image))
    return KeypointSet(soft_argmax(logits), KeypointKind.NEURAL)


# ============ Merging ============


def merge_keypoints(nk: KeypointSet, fk: KeypointSet, weights: ModelWeights) -> KeypointSet:
    """Mixed keypoints: nk plus an MLP offset computed from nk and fk, clamped to [-1, 1]."""
    if nk.count != NEURAL_COUNT or fk.count != FACIAL_COUNT:
        raise ContractError(
            f"merge_keypoints needs {NEURAL_COUNT} neural and {FACIAL_COUNT} facial points, "
            f"got {nk.count} and {fk.count}"
        )
    weights.require([f"{layer.name}.{p}" for layer in MERGER_LAYERS for p in ("weight", "bias")], "merger")
    flat = F.concat(
        [F.reshape(nk.points, (1, 2 * NEURAL_COUNT)), F.reshape(fk.points, (1, 2 * FACIAL_COUNT))], axis=1
    )
    offsets = F.reshape(mlp_forward(flat, MERGER_LAYERS, weights), (1, MIXED_COUNT, 2))
    return KeypointSet(F.clip(nk.points + offsets, -1.0, 1.0), KeypointKind.MIXED)


def facial_subset(fk: KeypointSet) -> KeypointSet:
    """Fixed evenly spaced 50-of-106 landmarks used as motion keypoints."""
    return KeypointSet(F.index(fk.points, (slice(None), FK_SUBSET)), KeypointKind.MIXED)


def motion_keypoints(
    mode: KeypointMode | str, nk: KeypointSet | None, fk: KeypointSet, weights: ModelWeights
) -> KeypointSet:
    """The 50 keypoints that drive the motion network under ``mode``."""
    mode = KeypointMode(mode)
    if mode is KeypointMode.FK:
        return facial_subset(fk)
    if nk is None:
        raise ContractError(f"keypoint mode '{mode.value}' needs neural keypoints")
    if mode is KeypointMode.NK:
        return nk.relabel(KeypointKind.MIXED)
    return merge_keypoints(nk, fk, weights)


# ============ Heatmaps and Masks ============


def gaussian_heatmaps(kps: KeypointSet, out_h: int, out_w: int, sigma: float) -> Tensor:
    """One Gaussian bump per keypoint on the normalized (out_h, out_w) grid.

    Differentiable with respect to the keypoint positions.
    """
    if sigma <= 0:
        raise ContractError(f"heatmap sigma must be positive, got {sigma}")
    k = kps.count
    grid = identity_grid(out_h, out_w)
    gx = Tensor(grid[..., 0].reshape(1, 1, out_h, out_w))
    gy = Tensor(grid[..., 1].reshape(1, 1, out_h, out_w))
    px = F.reshape(F.index(kps.points, (slice(None), slice(None), 0)), (1, k, 1, 1))
    py = F.reshape(F.index(kps.points, (slice(None), slice(None), 1)), (1, k, 1, 1))
    dx = gx - px
    dy = gy - py
    d2 = dx * dx + dy * dy
    return F.exp(d2 * (-1.0 / (2.0 * sigma * sigma)))


def to_pixel_coords(points: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (K, 2) points to (x, y) pixel positions."""
    xs = (points[:, 0].astype(np.float64) + 1.0) * 0.5 * (width - 1)
    ys = (points[:, 1].astype(np.float64) + 1.0) * 0.5 * (height - 1)
    return xs, ys


def rasterize_landmark_mask(fk: KeypointSet, out_h: int, out_w: int, radius_px: int) -> Tensor:
    """Binary mask with a filled disk of ``radius_px`` around every landmark."""
    if radius_px < 1:
        raise ContractError(f"landmark radius must be >= 1 pixel, got {radius_px}")
    xs, ys = to_pixel_coords(fk.numpy(), out_h, out_w)
    rows = np.arange(out_h, dtype=np.float64)[:, None]
    cols = np.arange(out_w, dtype=np.float64)[None, :]
    mask = np.zeros((out_h, out_w), dtype=bool)
    r2 = float(radius_px) ** 2
    for x, y in zip(xs, ys, strict=True):
        mask |= (rows - y) ** 2 + (cols - x) ** 2 <= r2
    return Tensor(mask.astype(np.float32)[None, None])


# ============ Track Files ============


class TrackRecord(BaseModel):
    """One line of a keypoint track file."""

    frame: int = Field(..., ge=0, description="Frame index, strictly increasing")
    fk: list[tuple[float, float]] = Field(..., min_length=FACIAL_COUNT, max_length=FACIAL_COUNT)
    nk: list[tuple[float, float]] | None = Field(default=None, min_length=NEURAL_COUNT, max_length=NEURAL_COUNT)

    @field_validator("fk", "nk")
    @classmethod
    def within_corrupt_limit(
        cls, points: list[tuple[float, float]] | None
    ) -> list[tuple[float, float]] | None:
        if points is None:
            return None
        array = np.asarray(points, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise ValueError("coordinates must be finite")
        if np.abs(array).max() > CORRUPT_LIMIT:
            raise ValueError(f"coordinate {np.abs(array).max():.6f} lies outside [-{CORRUPT_LIMIT}, {CORRUPT_LIMIT}]")
        return points


@dataclass(frozen=True)
class TrackFrame:
    frame_index: int
    facial: KeypointSet
    neural: KeypointSet | None = None


@dataclass(frozen=True)
class KeypointTrack:
    """Immutable per-frame keypoint records with strictly increasing indices."""

    frames: tuple[TrackFrame, ...]

    def __post_init__(self) -> None:
        for prev, cur in zip(self.frames, self.frames[1:], strict=False):
            if cur.frame_index <= prev.frame_index:
                raise ContractError(
                    f"frame index {cur.frame_index} does not follow {prev.frame_index} in increasing order"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[TrackFrame]:
        return iter(self.frames)

    def __getitem__(self, i: int) -> TrackFrame:
        return self.frames[i]


def _format_points(points: np.ndarray) -> str:
    return "[" + ", ".join(f"[{x:.6f}, {y:.6f}]" for x, y in points.astype(np.float64)) + "]"


def format_track_line(frame: TrackFrame) -> str:
    """Canonical JSON line: keys frame, fk, nk; six decimals."""
    line = f'{{"frame": {frame.frame_index}, "fk": {_format_points(frame.facial.numpy())}'
    if frame.neural is not None:
        line += f', "nk": {_format_points(frame.neural.numpy())}'
    return line + "}"


def save_keypoint_track(track: KeypointTrack | Iterable[TrackFrame], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = track.frames if isinstance(track, KeypointTrack) else tuple(track)
    text = "".join(format_track_line(f) + "\n" for f in frames)
    path.write_text(text, encoding="utf-8")
    logger.debug("Wrote %d track frames to %s", len(frames), path)
    return path


def parse_keypoint_track(lines: Iterable[str]) -> KeypointTrack:
    """Parse track lines; blank lines are skipped.

    Raises:
        InputFormatError: On malformed JSON, wrong point counts, corrupt
            coordinates or non-increasing frame indices, naming the line.
    """
    frames: list[TrackFrame] = []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            record = TrackRecord.model_validate(json.loads(raw))
        except json.JSONDecodeError as e:
            raise InputFormatError(f"invalid JSON: {e.msg}", line=lineno) from e
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(p) for p in first["loc"])
            raise InputFormatError(
                f"{where}: {first['msg']}",
                line=lineno,
                suggestions=[
                    f"Each line needs 'frame', {FACIAL_COUNT} 'fk' pairs and optionally {NEURAL_COUNT} 'nk' pairs"
                ],
            ) from e
        if frames and record.frame <= frames[-1].frame_index:
            raise InputFormatError(
                f"frame index {record.frame} is not greater than the previous index {frames[-1].frame_index}",
                line=lineno,
            )
        frames.append(
            TrackFrame(
                frame_index=record.frame,
                facial=KeypointSet.from_array(record.fk, KeypointKind.FACIAL),
                neural=KeypointSet.from_array(record.nk, KeypointKind.NEURAL) if record.nk else None,
            )
        )
    return KeypointTrack(tuple(frames))


def load_keypoint_track(path: Path | str) -> KeypointTrack:
    path = Path(path)
    if not path.exists():
        raise InputFormatError(f"keypoint track '{path}' does not exist")
    with path.open(encoding="utf-8") as fh:
        track = parse_keypoint_track(fh)
    logger.debug("Loaded %d track frames from %s", len(track), path)
    return track
