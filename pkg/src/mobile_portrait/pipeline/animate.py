"""Frame-by-frame animation of a source portrait along a keypoint track."""

import hashlib
import logging
from collections.abc import Iterator, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from mobile_portrait.config import Settings, get_settings
from mobile_portrait.keypoints import KeypointSet, KeypointTrack, load_keypoint_track
from mobile_portrait.models import FrameJob, OutputFile, RunManifest
from mobile_portrait.pipeline.engine import PortraitEngine, SourceState, check_compatible, init_weights
from mobile_portrait.pipeline.imageio import read_image, read_mask, write_image
from mobile_portrait.pipeline.presets import get_preset
from mobile_portrait.synthesis import FeatureBank, uniform_sample_indices
from mobile_portrait.tensor import Tensor
from mobile_portrait.validation import EngineError, InputFormatError
from mobile_portrait.weights import ModelWeights

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def frame_name(index: int) -> str:
    return f"frame_{index:05d}.ppm"


@dataclass
class AnimationResult:
    frames: list[Path] = field(default_factory=list)
    manifest: RunManifest | None = None
    manifest_path: Path | None = None


def load_weights(settings: Settings, preset_name: str) -> tuple[ModelWeights, str | None]:
    """Weights from ``settings.weights_path`` or a seeded random init, with the file hash."""
    preset = get_preset(preset_name)
    if settings.weights_path is not None:
        weights = ModelWeights.load(settings.weights_path)
        check_compatible(preset, weights)
        return weights, sha256_file(settings.weights_path)
    logger.info("No weight file given; using seeded random init (seed %d)", settings.seed)
    return init_weights(preset, seed=settings.seed, training_heads=False), None


def _tag_frame(error: EngineError, index: int) -> EngineError:
    error.message = f"frame {index}: {error.message}"
    error.args = (error.message,)
    return error


def render_frames(
    engine: PortraitEngine,
    state: SourceState,
    driving: Sequence[KeypointSet],
    threads: int = 1,
) -> Iterator[Tensor]:
    """Yield output frames in order.

    With ``threads > 1`` motion for frame t+1 overlaps synthesis of frame t;
    every stage is a pure function of its inputs, so results match the
    sequential mode bit for bit.
    """
    if threads <= 1 or len(driving) < 2:
        for i, d_kps in enumerate(driving):
            try:
                yield engine.frame(state, d_kps)
            except EngineError as e:
                raise _tag_frame(e, i) from e
        return

    def warp(d_kps: KeypointSet) -> Tensor:
        return engine.warp(state, d_kps)

    with ThreadPoolExecutor(max_workers=2) as pool:
        pending: Future[Tensor] = pool.submit(warp, driving[0])
        for i in range(len(driving)):
            try:
                warped = pending.result()
                if i + 1 < len(driving):
                    pending = pool.submit(warp, driving[i + 1])
                yield engine.render(state, warped)
            except EngineError as e:
                raise _tag_frame(e, i) from e


@dataclass
class PreparedJob:
    engine: PortraitEngine
    state: SourceState
    track: KeypointTrack
    driving: list[KeypointSet]
    weights_hash: str | None


def prepare_job(job: FrameJob, settings: Settings) -> PreparedJob:
    """Load weights and inputs, and compute every per-source quantity."""
    preset = get_preset(job.preset)
    preset.check_resolution(settings.resolution)
    size = settings.resolution
    weights, weights_hash = load_weights(settings, job.preset)
    engine = PortraitEngine(preset, weights, settings)

    source_track = load_keypoint_track(job.source_keypoints)
    if len(source_track) == 0:
        raise InputFormatError(f"source keypoint file '{job.source_keypoints}' has no record")
    track = load_keypoint_track(job.track)
    state = engine.prepare_source(
        read_image(job.source_image, size),
        source_track[0].facial,
        read_image(job.background, size),
        read_mask(job.fg_mask, size),
    )
    driving = [engine.driving_keypoints(state, f.facial, f.neural) for f in track]
    return PreparedJob(engine, state, track, driving, weights_hash)


def build_job_bank(prepared: PreparedJob, settings: Settings) -> FeatureBank:
    """Bank from ``settings.bank_views`` frames sampled uniformly over the track."""
    picks = uniform_sample_indices(len(prepared.driving), settings.bank_views)
    return prepared.engine.build_bank(
        prepared.state, [prepared.driving[i] for i in picks], threads=settings.threads
    )


def precompute_job_bank(job: FrameJob, out_path: Path, settings: Settings | None = None) -> FeatureBank:
    """Build a job's feature bank ahead of time and save it to ``out_path``."""
    settings = settings or get_settings()
    bank = build_job_bank(prepare_job(job, settings), settings)
    bank.save(out_path)
    return bank


def animate(job: FrameJob, settings: Settings | None = None) -> AnimationResult:
    """Render every track frame of ``job`` to PPM files plus a run manifest.

    Raises:
        InputFormatError: On unreadable inputs or an empty source record.
        EngineError: On per-frame failures, tagged with the frame index.
    """
    settings = settings or get_settings()
    prepared = prepare_job(job, settings)
    bank = FeatureBank.load(job.bank) if job.bank is not None else build_job_bank(prepared, settings)
    state = prepared.state.with_bank(bank)
    engine = prepared.engine

    out_dir = job.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        preset=engine.preset.name,
        resolution=settings.resolution,
        seed=settings.seed,
        threads=settings.threads,
        bank_views=bank.count,
        weights_sha256=prepared.weights_hash,
        inputs={name: sha256_file(path) for name, path in job.input_files().items()},
    )
    result = AnimationResult()
    for i, image in enumerate(render_frames(engine, state, prepared.driving, settings.threads)):
        path = write_image(out_dir / frame_name(prepared.track[i].frame_index), image)
        result.frames.append(path)
        manifest.outputs.append(OutputFile(path=path.name, sha256=sha256_file(path)))
        logger.debug("Wrote %s", path)

    manifest.warnings = list(dict.fromkeys(engine.warnings))
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("Rendered %d frames to %s", len(result.frames), out_dir)
    result.manifest = manifest
    result.manifest_path = manifest_path
    return result
