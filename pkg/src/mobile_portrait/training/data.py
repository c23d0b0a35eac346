"""Procedural portraits with exact supervision.

A portrait is a textured ellipse head with eyes and a mouth over a static
patterned background. Its pose is an affine map of a canonical face frame
composed with a small thin-plate-spline bend, so facial landmarks, the
foreground mask and the true background are all known exactly.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mobile_portrait.keypoints import (
    FACIAL_COUNT,
    KeypointKind,
    KeypointSet,
    KeypointTrack,
    TrackFrame,
    rasterize_landmark_mask,
    save_keypoint_track,
)
from mobile_portrait.models import FrameJob
from mobile_portrait.motion import CONTROL_POINTS, TpsTransform, fit_tps
from mobile_portrait.pipeline.imageio import write_image
from mobile_portrait.tensor import Tensor, identity_grid

logger = logging.getLogger(__name__)

HEAD_RADII = (0.45, 0.6)
EYE_CENTERS = ((-0.18, -0.12), (0.18, -0.12))
EYE_RADIUS = 0.07
MOUTH_CENTER = (0.0, 0.28)
MOUTH_HALF_WIDTH = 0.16

# Control points of the expression bend, in the canonical face frame.
BEND_CONTROL = np.array([[-0.3, -0.3], [0.3, -0.3], [-0.3, 0.3], [0.3, 0.3], [0.0, 0.0]])
BEND_SIGMA = 0.03
INVERT_ITERATIONS = 50


# ============ Landmarks ============


def _arc(cx: float, cy: float, rx: float, ry: float, start: float, stop: float, n: int) -> np.ndarray:
    t = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def canonical_landmarks(mouth_open: float = 0.0) -> np.ndarray:
    """The 106 facial landmarks of the canonical face frame.

    Order: contour 33, brows 2x9, eyes 2x9, nose 15, mouth 20, pupils 2.
    ``mouth_open`` in [0, 1] widens the lip gap.
    """
    rx, ry = HEAD_RADII
    contour = _arc(0.0, 0.0, rx * 0.98, ry * 0.98, np.pi * 0.05, np.pi * 0.95, 33)
    brows = [_arc(ex, ey - 0.1, 0.1, 0.04, np.pi * 1.1, np.pi * 1.9, 9) for ex, ey in EYE_CENTERS]
    eyes = [
        np.concatenate([_arc(ex, ey, EYE_RADIUS, EYE_RADIUS * 0.6, 0.0, 2 * np.pi, 9)[:8], [[ex, ey]]])
        for ex, ey in EYE_CENTERS
    ]
    bridge = np.stack([np.zeros(9), np.linspace(-0.1, 0.1, 9)], axis=1)
    nostrils = _arc(0.0, 0.12, 0.07, 0.03, 0.0, np.pi, 6)
    gap = 0.02 + 0.08 * float(np.clip(mouth_open, 0.0, 1.0))
    mx, my = MOUTH_CENTER
    upper = _arc(mx, my, MOUTH_HALF_WIDTH, gap, np.pi, 2 * np.pi, 10)
    lower = _arc(mx, my, MOUTH_HALF_WIDTH, gap, 0.0, np.pi, 10)
    pupils = np.array(EYE_CENTERS)
    points = np.concatenate([contour, *brows, *eyes, bridge, nostrils, upper, lower, pupils])
    assert points.shape == (FACIAL_COUNT, 2)
    return points


# ============ Poses and Rendering ============


def invert_tps(t: TpsTransform, targets: np.ndarray) -> np.ndarray:
    """Points u with t(u) = targets, by fixed-point iteration.

    Converges while the spline stays close to the identity, which small
    bends guarantee.
    """
    u = np.asarray(targets, dtype=np.float64).copy()
    for _ in range(INVERT_ITERATIONS):
        u = u - (t.map_points(u) - targets)
    residual = float(np.abs(t.map_points(u) - targets).max())
    if residual > 1e-9:
        logger.warning("TPS inversion stopped with residual %.3g", residual)
    return u


@dataclass(frozen=True)
class Pose:
    """Placement of the canonical face.

    A pixel p shows the canonical point bend(A^-1 p), where A is
    p = scale * R(angle) q + shift and ``bend`` is a TPS moving
    ``BEND_CONTROL`` by the given offsets (none when empty).
    """

    angle: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)
    mouth_open: float = 0.0
    bend: tuple[tuple[float, float], ...] = ()

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    @property
    def warp(self) -> TpsTransform | None:
        if not self.bend:
            return None
        return fit_tps(BEND_CONTROL, BEND_CONTROL + np.asarray(self.bend, dtype=np.float64))

    def apply(self, q: np.ndarray) -> np.ndarray:
        return q @ self.matrix.T + np.asarray(self.shift)

    def invert(self, p: np.ndarray) -> np.ndarray:
        return (p - np.asarray(self.shift)) @ np.linalg.inv(self.matrix).T

    def to_canonical(self, p: np.ndarray) -> np.ndarray:
        """Canonical face point shown at image point ``p``."""
        q = self.invert(p)
        t = self.warp
        return q if t is None else t.map_points(q)

    def landmarks(self) -> np.ndarray:
        q = canonical_landmarks(self.mouth_open)
        t = self.warp
        if t is not None:
            q = invert_tps(t, q)
        return np.clip(self.apply(q), -1.0, 1.0)


def random_pose(rng: np.random.Generator, jitter: float = 1.0) -> Pose:
    angle = float(rng.normal(0.0, 0.15 * jitter))
    scale = float(1.0 + rng.normal(0.0, 0.05 * jitter))
    shift = (float(rng.normal(0.0, 0.06 * jitter)), float(rng.normal(0.0, 0.06 * jitter)))
    mouth_open = float(rng.uniform(0.0, 1.0))
    offsets = rng.normal(0.0, BEND_SIGMA * jitter, size=(CONTROL_POINTS, 2))
    return Pose(
        angle=angle,
        scale=scale,
        shift=shift,
        mouth_open=mouth_open,
        bend=tuple((float(dx), float(dy)) for dx, dy in offsets),
    )


@dataclass(frozen=True)
class Appearance:
    """Colours and texture frequencies of one synthetic identity."""

    skin: np.ndarray
    eye: np.ndarray
    lips: np.ndarray
    texture_freq: float
    bg_colors: np.ndarray
    bg_freq: float

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Appearance":
        return cls(
            skin=rng.uniform(0.55, 0.9, size=3),
            eye=rng.uniform(0.0, 0.2, size=3),
            lips=np.array([rng.uniform(0.6, 0.9), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)]),
            texture_freq=float(rng.uniform(4.0, 8.0)),
            bg_colors=rng.uniform(0.1, 0.6, size=(2, 3)),
            bg_freq=float(rng.uniform(2.0, 5.0)),
        )


def render_background(look: Appearance, size: int) -> np.ndarray:
    """(3, H, W) diagonal stripes; the true, foreground-free background."""
    grid = identity_grid(size, size)[0].astype(np.float64)
    t = 0.5 + 0.5 * np.sin(look.bg_freq * np.pi * (grid[..., 0] + grid[..., 1]))
    bg = look.bg_colors[0][:, None, None] * (1 - t) + look.bg_colors[1][:, None, None] * t
    return bg.astype(np.float32)


def render_portrait(look: Appearance, pose: Pose, size: int) -> tuple[np.ndarray, np.ndarray]:
    """(3, H, W) image and (1, H, W) foreground mask of the posed face."""
    grid = identity_grid(size, size).astype(np.float64).reshape(-1, 2)
    q = pose.to_canonical(grid).reshape(size, size, 2)
    qx, qy = q[..., 0], q[..., 1]
    rx, ry = HEAD_RADII
    head = (qx / rx) ** 2 + (qy / ry) ** 2 <= 1.0

    shade = 0.85 + 0.15 * np.sin(look.texture_freq * np.pi * qx) * np.cos(look.texture_freq * np.pi * qy)
    face = look.skin[:, None, None] * shade[None]
    for ex, ey in EYE_CENTERS:
        eye = ((qx - ex) / EYE_RADIUS) ** 2 + ((qy - ey) / (EYE_RADIUS * 0.6)) ** 2 <= 1.0
        face = np.where(eye[None], look.eye[:, None, None], face)
    mx, my = MOUTH_CENTER
    gap = 0.02 + 0.08 * float(np.clip(pose.mouth_open, 0.0, 1.0))
    mouth = ((qx - mx) / MOUTH_HALF_WIDTH) ** 2 + ((qy - my) / gap) ** 2 <= 1.0
    face = np.where(mouth[None], look.lips[:, None, None], face)

    image = np.where(head[None], face, render_background(look, size))
    return np.clip(image, 0.0, 1.0).astype(np.float32), head[None].astype(np.float32)


# ============ Samples ============


@dataclass(frozen=True)
class PortraitFrame:
    image: Tensor
    fg_mask: Tensor
    lm_mask: Tensor
    fk: KeypointSet


@dataclass(frozen=True)
class TrainSample:
    """A source and a driving frame of the same identity plus its true background."""

    source: PortraitFrame
    driving: PortraitFrame
    background: Tensor


def render_frame(look: Appearance, pose: Pose, size: int, landmark_radius_px: int) -> PortraitFrame:
    image, mask = render_portrait(look, pose, size)
    fk = KeypointSet.from_array(pose.landmarks(), KeypointKind.FACIAL)
    return PortraitFrame(
        image=Tensor(image[None]),
        fg_mask=Tensor(mask[None]),
        lm_mask=rasterize_landmark_mask(fk, size, size, landmark_radius_px),
        fk=fk,
    )


class SyntheticDataset:
    """Deterministic, indexable source/driving pairs.

    Sample ``i`` depends only on ``(seed, i)``, so loaders on other threads
    see the same data.
    """

    def __init__(self, size: int = 64, length: int = 1, seed: int = 0, landmark_radius_px: int = 2):
        self.size = size
        self.length = length
        self.seed = seed
        self.landmark_radius_px = landmark_radius_px

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> TrainSample:
        if not 0 <= index < self.length:
            raise IndexError(f"sample {index} out of range for {self.length} samples")
        rng = np.random.default_rng([self.seed, index])
        look = Appearance.random(rng)
        source_pose, driving_pose = random_pose(rng), random_pose(rng)
        return TrainSample(
            source=render_frame(look, source_pose, self.size, self.landmark_radius_px),
            driving=render_frame(look, driving_pose, self.size, self.landmark_radius_px),
            background=Tensor(render_background(look, self.size)[None]),
        )


# ============ Demo Jobs ============


def track_poses(frames: int, seed: int = 0) -> list[Pose]:
    """A smooth head motion: nodding, turning, talking and a slow expression bend."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    bend_phase = rng.uniform(0.0, 2 * np.pi, size=(CONTROL_POINTS, 2))
    t = np.arange(frames) / max(1, frames)
    return [
        Pose(
            angle=0.12 * float(np.sin(2 * np.pi * ti + phase[0])),
            scale=1.0 + 0.03 * float(np.sin(2 * np.pi * ti + phase[1])),
            shift=(0.05 * float(np.sin(2 * np.pi * ti + phase[2])), 0.03 * float(np.cos(2 * np.pi * ti))),
            mouth_open=0.5 + 0.5 * float(np.sin(4 * np.pi * ti)),
            bend=tuple(
                (BEND_SIGMA * float(np.sin(2 * np.pi * ti + px)), BEND_SIGMA * float(np.sin(2 * np.pi * ti + py)))
                for px, py in bend_phase
            ),
        )
        for ti in t
    ]


def write_synthetic_job(
    out_dir: Path | str,
    size: int = 64,
    frames: int = 10,
    seed: int = 0,
    preset: str = "toy",
) -> FrameJob:
    """Write a complete animation job for one synthetic identity.

    Files: ``source.ppm``, ``background.ppm``, ``fg.pgm``,
    ``source_track.jsonl`` and ``track.jsonl``; frames go to ``frames/``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    look = Appearance.random(np.random.default_rng(seed))
    source_pose = Pose()
    image, mask = render_portrait(look, source_pose, size)

    write_image(out_dir / "source.ppm", Tensor(image[None]))
    write_image(out_dir / "background.ppm", Tensor(render_background(look, size)[None]))
    write_image(out_dir / "fg.pgm", Tensor(mask[None]))
    save_keypoint_track(
        KeypointTrack((TrackFrame(0, KeypointSet.from_array(source_pose.landmarks(), KeypointKind.FACIAL)),)),
        out_dir / "source_track.jsonl",
    )
    track = KeypointTrack(
        tuple(
            TrackFrame(i, KeypointSet.from_array(pose.landmarks(), KeypointKind.FACIAL))
            for i, pose in enumerate(track_poses(frames, seed))
        )
    )
    save_keypoint_track(track, out_dir / "track.jsonl")
    logger.info("Wrote synthetic %dx%d job with %d frames to %s", size, size, frames, out_dir)
    return FrameJob(
        source_image=out_dir / "source.ppm",
        source_keypoints=out_dir / "source_track.jsonl",
        track=out_dir / "track.jsonl",
        background=out_dir / "background.ppm",
        fg_mask=out_dir / "fg.pgm",
        precompute_bank=True,
        preset=preset,
        output_dir=out_dir / "frames",
    )
