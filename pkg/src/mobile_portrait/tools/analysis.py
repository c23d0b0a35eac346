"""MCP tools for cost accounting, weight inspection and image metrics."""

import asyncio

from mcp.server.fastmcp import FastMCP

from mobile_portrait.pipeline.flops import count_flops as count_preset_flops
from mobile_portrait.pipeline.imageio import read_image
from mobile_portrait.pipeline.metrics import psnr, ssim
from mobile_portrait.pipeline.presets import get_preset
from mobile_portrait.validation import EngineError, format_error_response
from mobile_portrait.weights import ModelWeights


def register_analysis_tools(mcp: FastMCP) -> None:
    """Register analysis tools with the MCP server.

    Tools:
    - count_flops: Analytic per-stage FLOPs and parameters of a preset
    - inspect_weights: Tensor and parameter counts of a weight file
    - image_metrics: PSNR and SSIM between two images
    """

    @mcp.tool()
    async def count_flops(preset: str = "small", resolution: int | None = None, bank_views: int = 0) -> dict:
        """Count FLOPs and parameters of a preset.

        Args:
            preset: Preset name (large, medium, small, toy).
            resolution: Square frame size; defaults to the preset's own.
            bank_views: Feature bank size T, reported as one-time cost.

        Returns:
            Per-stage costs, one-time bank costs and totals.
        """
        try:
            report = count_preset_flops(get_preset(preset), resolution, bank_views=bank_views)
            return {
                "success": True,
                **report.model_dump(),
                "total_flops": report.total_flops,
                "total_params": report.total_params,
                "gflops": report.gflops,
            }
        except EngineError as e:
            return format_error_response(e, "Failed to count FLOPs")

    @mcp.tool()
    async def inspect_weights(path: str) -> dict:
        """Summarize a weight container file.

        Args:
            path: Path to an MPW1 weight file.

        Returns:
            Format version, tensor count and parameters per component.
        """
        try:
            weights = await asyncio.to_thread(ModelWeights.load, path)
            return {
                "success": True,
                "format_version": weights.format_version,
                "tensors": len(weights),
                "parameters": weights.parameter_count(),
                "components": weights.component_counts(),
            }
        except EngineError as e:
            return format_error_response(e, "Failed to inspect weights")

    @mcp.tool()
    async def image_metrics(reference: str, candidate: str) -> dict:
        """Compare two images of equal size.

        Args:
            reference: Path to the reference image.
            candidate: Path to the image under test.

        Returns:
            PSNR in dB (capped at 99) and mean SSIM.
        """
        try:
            a = await asyncio.to_thread(read_image, reference)
            b = await asyncio.to_thread(read_image, candidate)
            return {"success": True, "psnr": psnr(a, b), "ssim": ssim(a, b)}
        except EngineError as e:
            return format_error_response(e, "Failed to compute metrics")
