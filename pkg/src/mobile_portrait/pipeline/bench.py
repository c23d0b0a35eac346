"""Host latency benchmark of the per-frame stages on synthetic inputs.

Latency numbers are reported, never asserted: they depend on the host.
"""

import logging
import time
from collections.abc import Callable
from typing import TypeVar

import numpy as np

from mobile_portrait.config import Settings, get_settings
from mobile_portrait.models import LatencyReport, LatencyStats
from mobile_portrait.motion import warp_and_occlude
from mobile_portrait.pipeline.engine import PortraitEngine, SourceState, init_weights
from mobile_portrait.pipeline.flops import count_flops
from mobile_portrait.pipeline.presets import PresetConfig
from mobile_portrait.synthesis import uniform_sample_indices
from mobile_portrait.tensor import Tensor
from mobile_portrait.training.data import (
    Appearance,
    PortraitFrame,
    Pose,
    render_background,
    render_frame,
    track_poses,
)
from mobile_portrait.validation import ContractError

logger = logging.getLogger(__name__)

WARMUP_FRAMES = 5
MIN_FRAMES = 10
BENCH_STAGES = ("nk_detect", "merger", "dense_motion", "warp", "synthesis")

T = TypeVar("T")


def latency_stats(samples_ms: list[float]) -> LatencyStats:
    values = np.asarray(samples_ms, dtype=np.float64)
    return LatencyStats(
        median_ms=float(np.percentile(values, 50)),
        p95_ms=float(np.percentile(values, 95)),
        samples=len(samples_ms),
    )


def _timed(fn: Callable[[], T], into: list[float]) -> T:
    start = time.perf_counter()
    result = fn()
    into.append((time.perf_counter() - start) * 1000.0)
    return result


def _time_frame(
    engine: PortraitEngine, state: SourceState, frame: PortraitFrame
) -> tuple[dict[str, list[float]], float]:
    stage_ms: dict[str, list[float]] = {stage: [] for stage in BENCH_STAGES}
    start = time.perf_counter()
    nk = _timed(lambda: engine.detect(frame.image), stage_ms["nk_detect"])
    d_kps = _timed(lambda: engine.motion_keypoints(nk, frame.fk), stage_ms["merger"])
    out = _timed(lambda: engine.motion(state, d_kps), stage_ms["dense_motion"])
    warped = _timed(lambda: warp_and_occlude(state.image, out.motion), stage_ms["warp"])
    _timed(lambda: engine.render(state, warped), stage_ms["synthesis"])
    return stage_ms, (time.perf_counter() - start) * 1000.0


def bench(
    preset: PresetConfig,
    resolution: int | None = None,
    frames: int = MIN_FRAMES,
    threads: int = 1,
    seed: int = 0,
    bank_views: int = 4,
    settings: Settings | None = None,
) -> LatencyReport:
    """Time every per-frame stage over ``frames`` driving frames after a warm-up.

    ``threads`` drives the one-time bank precompute; per-frame timing is
    always sequential so stage times add up to the frame time.

    Raises:
        ContractError: If ``frames`` is below 10 or the resolution does not
            fit the preset.
    """
    if frames < MIN_FRAMES:
        raise ContractError(
            f"bench needs at least {MIN_FRAMES} timed frames, got {frames}",
            suggestions=[f"Pass --frames {MIN_FRAMES} or more"],
        )
    settings = settings or get_settings()
    resolution = resolution or preset.resolution
    preset.check_resolution(resolution)
    engine = PortraitEngine(preset, init_weights(preset, seed=seed, training_heads=False), settings)

    radius = settings.landmark_radius_for(resolution)
    look = Appearance.random(np.random.default_rng(seed))
    source = render_frame(look, Pose(), resolution, radius)
    driving = [render_frame(look, p, resolution, radius) for p in track_poses(WARMUP_FRAMES + frames, seed)]
    background = Tensor(render_background(look, resolution)[None])

    state = engine.prepare_source(source.image, source.fk, background, source.fg_mask)
    if bank_views:
        picks = uniform_sample_indices(len(driving), bank_views)
        samples = [engine.driving_keypoints(state, driving[i].fk, None) for i in picks]
        state = state.with_bank(engine.build_bank(state, samples, threads=threads))

    timings: dict[str, list[float]] = {stage: [] for stage in BENCH_STAGES}
    end_to_end: list[float] = []
    for i, frame in enumerate(driving):
        stage_ms, elapsed = _time_frame(engine, state, frame)
        if i < WARMUP_FRAMES:
            continue
        end_to_end.append(elapsed)
        for stage in BENCH_STAGES:
            timings[stage].extend(stage_ms[stage])

    report = LatencyReport(
        preset=preset.name,
        resolution=resolution,
        frames=frames,
        threads=threads,
        warmup=WARMUP_FRAMES,
        stages={stage: latency_stats(values) for stage, values in timings.items()},
        end_to_end=latency_stats(end_to_end),
        flops=count_flops(preset, resolution, bank_views=bank_views),
    )
    logger.info(
        "%s at %d: median %.1f ms, p95 %.1f ms per frame",
        preset.name, resolution, report.end_to_end.median_ms, report.end_to_end.p95_ms,
    )
    return report
