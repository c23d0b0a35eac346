"""MCP tools for animation, bank precompute and latency benchmarks."""

import asyncio
from pathlib import Path

from mcp.server.fastmcp import FastMCP

from mobile_portrait.config import with_overrides
from mobile_portrait.models import FrameJob
from mobile_portrait.pipeline.animate import animate, precompute_job_bank
from mobile_portrait.pipeline.bench import bench
from mobile_portrait.pipeline.presets import get_preset
from mobile_portrait.validation import EngineError, format_error_response


def _job(
    source_image: str,
    source_keypoints: str,
    track: str,
    background: str,
    fg_mask: str,
    preset: str,
    output_dir: str,
    bank: str | None,
    precompute: bool,
) -> FrameJob:
    return FrameJob(
        source_image=Path(source_image),
        source_keypoints=Path(source_keypoints),
        track=Path(track),
        background=Path(background),
        fg_mask=Path(fg_mask),
        bank=Path(bank) if bank else None,
        precompute_bank=precompute,
        preset=preset,
        output_dir=Path(output_dir),
    )


def register_rendering_tools(mcp: FastMCP) -> None:
    """Register rendering tools with the MCP server.

    Tools:
    - animate_track: Render a keypoint track into frames plus a manifest
    - precompute_bank: Build and save a job's feature bank
    - bench_preset: Per-stage host latency of a preset
    """

    @mcp.tool()
    async def animate_track(
        source_image: str,
        source_keypoints: str,
        track: str,
        background: str,
        fg_mask: str,
        output_dir: str,
        preset: str = "small",
        bank: str | None = None,
        precompute_bank: bool = True,
        resolution: int | None = None,
        seed: int | None = None,
        threads: int | None = None,
        weights: str | None = None,
    ) -> dict:
        """Animate a source portrait along a driving keypoint track.

        Args:
            source_image: Source portrait image.
            source_keypoints: One-record track with the source's 106 facial points.
            track: Driving keypoint track (JSON lines).
            background: Inpainted background image.
            fg_mask: Foreground mask image.
            output_dir: Directory for frames and manifest.json.
            preset: Preset name.
            bank: Precomputed feature bank file (optional).
            precompute_bank: Build the bank from the track when no file is given.
            resolution: Frame size override.
            seed: Seed for random weight init when no weight file is given.
            threads: Worker threads (1 = sequential).
            weights: Weight container file.

        Returns:
            Frame count, manifest path and warnings.
        """
        try:
            job = _job(
                source_image, source_keypoints, track, background, fg_mask,
                preset, output_dir, bank, precompute_bank,
            )
            settings = with_overrides(
                resolution=resolution or get_preset(preset).resolution, seed=seed, threads=threads,
                weights_path=Path(weights) if weights else None,
            )
            result = await asyncio.to_thread(animate, job, settings)
            assert result.manifest is not None
            return {
                "success": True,
                "frames": len(result.frames),
                "manifest": str(result.manifest_path),
                "warnings": result.manifest.warnings,
            }
        except EngineError as e:
            return format_error_response(e, "Failed to animate")

    @mcp.tool()
    async def precompute_bank(
        source_image: str,
        source_keypoints: str,
        track: str,
        background: str,
        fg_mask: str,
        out_path: str,
        preset: str = "small",
        bank_views: int | None = None,
        resolution: int | None = None,
        threads: int | None = None,
        weights: str | None = None,
    ) -> dict:
        """Precompute pseudo multiview features for a source and save them.

        Args:
            source_image: Source portrait image.
            source_keypoints: One-record track with the source's facial points.
            track: Driving track the views are sampled from.
            background: Inpainted background image.
            fg_mask: Foreground mask image.
            out_path: Destination bank file.
            preset: Preset name.
            bank_views: Number of views T (0, 2, 4 or 8).
            resolution: Frame size override.
            threads: Worker threads for the views.
            weights: Weight container file.

        Returns:
            View count, feature shape and the bank path.
        """
        try:
            job = _job(
                source_image, source_keypoints, track, background, fg_mask,
                preset, str(Path(out_path).parent), None, True,
            )
            settings = with_overrides(
                bank_views=bank_views, resolution=resolution or get_preset(preset).resolution,
                threads=threads,
                weights_path=Path(weights) if weights else None,
            )
            result = await asyncio.to_thread(precompute_job_bank, job, Path(out_path), settings)
            return {
                "success": True,
                "views": result.count,
                "shape": list(result.shape) if result.shape else None,
                "path": out_path,
            }
        except EngineError as e:
            return format_error_response(e, "Failed to precompute bank")

    @mcp.tool()
    async def bench_preset(
        preset: str = "toy",
        resolution: int | None = None,
        frames: int = 10,
        threads: int = 1,
        seed: int = 0,
    ) -> dict:
        """Measure per-stage latency of a preset on synthetic frames.

        Args:
            preset: Preset name.
            resolution: Frame size; defaults to the preset's own.
            frames: Timed frames (at least 10) after 5 warm-up frames.
            threads: Worker threads for the one-time bank precompute.
            seed: Seed for weights and synthetic inputs.

        Returns:
            Median and p95 milliseconds per stage and per frame, plus GFLOPs.
        """
        try:
            report = await asyncio.to_thread(
                bench, get_preset(preset), resolution, frames, threads, seed
            )
            return {
                "success": True,
                **report.model_dump(exclude={"flops"}),
                "gflops": report.flops.gflops,
                "gflops_per_second": report.gflops_per_second,
            }
        except EngineError as e:
            return format_error_response(e, "Failed to benchmark")
