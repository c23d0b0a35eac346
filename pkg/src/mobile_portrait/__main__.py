"""Command-line entry point."""

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from mobile_portrait import __version__
from mobile_portrait.config import Settings, configure_logging, with_overrides
from mobile_portrait.models import FrameJob
from mobile_portrait.validation import EngineError, InputFormatError

console = Console()

JOB_FILES = {
    "source_image": "source.ppm",
    "source_keypoints": "source_track.jsonl",
    "track": "track.jsonl",
    "background": "background.ppm",
    "fg_mask": "fg.pgm",
}


# ============ Parser ============


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=["large", "medium", "small", "toy"], help="Model preset")
    parser.add_argument("--resolution", type=int, help="Square frame size (defaults to the preset's)")
    parser.add_argument("--seed", type=int, help="Seed for weights, data and random warps")
    parser.add_argument("--threads", type=int, help="Worker threads (1 = sequential)")
    parser.add_argument("--weights", type=Path, help="Weight container file")
    parser.add_argument("--out", type=Path, help="Output directory or file")


def _job_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--job", type=Path, help="Directory laid out like `demo-job` output")
    parser.add_argument("--source", type=Path, help="Source portrait image")
    parser.add_argument("--source-keypoints", type=Path, help="One-record track with the source's facial points")
    parser.add_argument("--track", type=Path, help="Driving keypoint track")
    parser.add_argument("--background", type=Path, help="Inpainted background image")
    parser.add_argument("--fg-mask", type=Path, help="Foreground mask image")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobile-portrait", description="One-shot head avatar animation")
    parser.add_argument("--version", action="version", version=f"mobile-portrait {__version__}")
    parser.add_argument("--debug", action="store_true", help="Verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("animate", help="Render a driving track into frames")
    _common(p)
    _job_inputs(p)
    p.add_argument("--bank", type=Path, help="Precomputed feature bank")
    p.add_argument("--precompute-bank", action="store_true", help="Build the bank from the track")

    p = sub.add_parser("precompute-bank", help="Build and save a source's feature bank")
    _common(p)
    _job_inputs(p)
    p.add_argument("--bank-views", type=int, choices=[0, 2, 4, 8], help="Number of views T")

    p = sub.add_parser("train-toy", help="Train the toy preset on synthetic portraits")
    _common(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--samples", type=int, default=1, help="Synthetic source/driving pairs")
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--optimizer", choices=["adam", "sgd-momentum"], default="adam")
    p.add_argument("--keypoint-mode", choices=["mixed", "nk", "fk"], default="mixed")
    p.add_argument("--bank-views", type=int, choices=[0, 2, 4, 8], default=0)
    p.add_argument("--no-residual-flow", action="store_true")
    p.add_argument("--no-facial-losses", action="store_true")
    p.add_argument("--no-background", action="store_true")

    p = sub.add_parser("bench", help="Host latency per stage")
    _common(p)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--bank-views", type=int, choices=[0, 2, 4, 8], help="Number of bank views T")

    p = sub.add_parser("flops", help="Analytic FLOPs and parameters")
    _common(p)
    p.add_argument("--bank-views", type=int, choices=[0, 2, 4, 8], default=0)

    p = sub.add_parser("weights", help="Weight file utilities")
    wsub = p.add_subparsers(dest="weights_command", required=True)
    wp = wsub.add_parser("inspect", help="Summarize a weight file")
    wp.add_argument("path", type=Path)

    p = sub.add_parser("metrics", help="Image quality metrics")
    p.add_argument("metric", choices=["psnr", "ssim"])
    p.add_argument("reference", type=Path)
    p.add_argument("candidate", type=Path)

    p = sub.add_parser("demo-job", help="Write a synthetic animation job")
    p.add_argument("directory", type=Path)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", default="toy")

    sub.add_parser("serve", help="Run the MCP server over stdio")
    return parser


# ============ Commands ============


def _settings(args: argparse.Namespace) -> Settings:
    """Environment settings overridden by flags.

    Without --resolution or MOBILE_PORTRAIT_RESOLUTION the preset's own
    resolution is used.
    """
    from mobile_portrait.pipeline.presets import get_preset

    settings = with_overrides(
        preset=getattr(args, "preset", None),
        resolution=getattr(args, "resolution", None),
        seed=getattr(args, "seed", None),
        threads=getattr(args, "threads", None),
        weights_path=getattr(args, "weights", None),
        bank_views=getattr(args, "bank_views", None),
        debug=args.debug or None,
    )
    if "resolution" not in settings.model_fields_set and getattr(args, "resolution", None) is None:
        settings = settings.model_copy(update={"resolution": get_preset(settings.preset).resolution})
    return settings


def _frame_job(args: argparse.Namespace, settings: Settings, output_dir: Path, **extra: Any) -> FrameJob:
    paths = {
        "source_image": args.source,
        "source_keypoints": args.source_keypoints,
        "track": args.track,
        "background": args.background,
        "fg_mask": args.fg_mask,
    }
    if args.job is not None:
        paths = {k: v or args.job / JOB_FILES[k] for k, v in paths.items()}
    missing = [k for k, v in paths.items() if v is None]
    if missing:
        raise InputFormatError(
            f"missing job inputs: {', '.join(missing)}",
            suggestions=["Pass --job DIR or every input flag"],
        )
    return FrameJob(**paths, preset=settings.preset, output_dir=output_dir, **extra)


def cmd_animate(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.pipeline.animate import animate

    out = args.out or settings.out_dir
    job = _frame_job(args, settings, out, bank=args.bank, precompute_bank=args.precompute_bank)
    result = animate(job, settings)
    console.print(f"[green]Rendered {len(result.frames)} frames to {out}[/green]")
    if result.manifest and result.manifest.warnings:
        for warning in result.manifest.warnings:
            console.print(f"[yellow]warning:[/yellow] {warning}")


def cmd_precompute_bank(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.pipeline.animate import precompute_job_bank

    out = args.out or settings.out_dir / "bank.mpw"
    job = _frame_job(args, settings, out.parent, precompute_bank=True)
    bank = precompute_job_bank(job, out, settings)
    console.print(f"[green]Saved {bank.count}-view bank {bank.shape} to {out}[/green]")


def cmd_train_toy(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.models import TrainConfig
    from mobile_portrait.pipeline.presets import get_preset
    from mobile_portrait.training.data import SyntheticDataset
    from mobile_portrait.training.trainer import Trainer, evaluate

    preset = get_preset(args.preset or "toy")
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.steps,
        max_steps=args.steps,
        seed=settings.seed,
        optimizer=args.optimizer,
        keypoint_mode=args.keypoint_mode,
        bank_views=args.bank_views,
        use_residual_flow=not args.no_residual_flow,
        use_facial_losses=not args.no_facial_losses,
        use_background=not args.no_background,
        heatmap_sigma=settings.heatmap_sigma,
        landmark_radius_px=settings.landmark_radius_px,
    )
    size = args.resolution or preset.resolution
    dataset = SyntheticDataset(size, args.samples, settings.seed, settings.landmark_radius_for(size))
    out = args.out or settings.out_dir
    trainer = Trainer(cfg, preset)
    reports = trainer.fit(dataset, log_path=out / "train_log.jsonl")
    trainer.weights.save(out / "weights.mpw")

    result = evaluate(dataset, trainer.weights, cfg, preset)
    table = Table(title=f"train-toy ({len(reports)} steps)")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    if reports:
        table.add_row("first total loss", f"{reports[0].total:.6f}")
        table.add_row("last total loss", f"{reports[-1].total:.6f}")
    table.add_row("PSNR (dB)", f"{result.psnr:.3f}")
    table.add_row("identity-warp PSNR (dB)", f"{result.baseline_psnr:.3f}")
    console.print(table)
    console.print(f"[green]Weights and log written to {out}[/green]")


def cmd_bench(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.pipeline.bench import bench
    from mobile_portrait.pipeline.presets import get_preset

    preset = get_preset(settings.preset)
    report = bench(
        preset,
        settings.resolution,
        args.frames,
        settings.threads,
        settings.seed,
        bank_views=settings.bank_views,
        settings=settings,
    )
    table = Table(title=f"{preset.name} at {report.resolution}px, {report.frames} frames")
    table.add_column("Stage")
    table.add_column("Median (ms)", justify="right")
    table.add_column("p95 (ms)", justify="right")
    for stage, stats in report.stages.items():
        table.add_row(stage, f"{stats.median_ms:.2f}", f"{stats.p95_ms:.2f}")
    table.add_row("[bold]frame[/bold]", f"{report.end_to_end.median_ms:.2f}", f"{report.end_to_end.p95_ms:.2f}")
    console.print(table)
    console.print(f"{report.flops.gflops:.3f} GFLOPs per frame, {report.gflops_per_second:.2f} GFLOP/s")


def cmd_flops(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.pipeline.flops import count_flops
    from mobile_portrait.pipeline.presets import get_preset

    preset = get_preset(settings.preset)
    report = count_flops(preset, settings.resolution, bank_views=args.bank_views)
    table = Table(title=f"{preset.name} at {report.resolution}px")
    table.add_column("Stage")
    table.add_column("Params", justify="right")
    table.add_column("GFLOPs", justify="right")
    for stage, cost in report.stages.items():
        table.add_row(stage, f"{cost.params:,}", f"{cost.flops / 1e9:.4f}")
    for stage, cost in report.one_time.items():
        table.add_row(f"{stage} (one-time)", "", f"{cost.flops / 1e9:.4f}")
    table.add_row("[bold]per frame[/bold]", f"{report.total_params:,}", f"{report.gflops:.4f}")
    console.print(table)


def cmd_weights(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.weights import ModelWeights

    weights = ModelWeights.load(args.path)
    table = Table(title=f"{args.path} (format v{weights.format_version}, {len(weights)} tensors)")
    table.add_column("Component")
    table.add_column("Params", justify="right")
    for component, count in weights.component_counts().items():
        table.add_row(component, f"{count:,}")
    table.add_row("[bold]total[/bold]", f"{weights.parameter_count():,}")
    console.print(table)


def cmd_metrics(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.pipeline.imageio import read_image
    from mobile_portrait.pipeline.metrics import psnr, ssim

    a, b = read_image(args.reference), read_image(args.candidate)
    if args.metric == "psnr":
        console.print(f"PSNR: {psnr(a, b):.4f} dB")
    else:
        console.print(f"SSIM: {ssim(a, b):.6f}")


def cmd_demo_job(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.training.data import write_synthetic_job

    job = write_synthetic_job(args.directory, args.resolution, args.frames, args.seed, args.preset)
    console.print(f"[green]Wrote demo job to {args.directory}[/green] (frames go to {job.output_dir})")


def cmd_serve(args: argparse.Namespace, settings: Settings) -> None:
    from mobile_portrait.server import create_server

    create_server().run()


COMMANDS = {
    "animate": cmd_animate,
    "precompute-bank": cmd_precompute_bank,
    "train-toy": cmd_train_toy,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "weights": cmd_weights,
    "metrics": cmd_metrics,
    "demo-job": cmd_demo_job,
    "serve": cmd_serve,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the command and return the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        settings = _settings(args)
        configure_logging(settings)
        COMMANDS[args.command](args, settings)
    except EngineError as e:
        console.print(f"[red]Error:[/red] {e.message}")
        for suggestion in e.suggestions:
            console.print(f"  [dim]- {suggestion}[/dim]")
        return e.exit_code
    except ValidationError as e:
        console.print(f"[red]Invalid arguments:[/red] {e.error_count()} validation error(s)")
        for error in e.errors():
            field = ".".join(str(part) for part in error["loc"]) or "input"
            console.print(f"  [dim]- {field}: {error['msg']}[/dim]")
        return InputFormatError.exit_code
    except KeyboardInterrupt:
        console.print("\n[yellow]Stopped by user[/yellow]")
        return 130
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
