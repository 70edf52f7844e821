"""Main entry point for the occupancy-guided Gaussian splatting pipeline."""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from .config import ConvertConfig, RenderConfig, RuntimeConfig, SynthConfig, TrainConfig
from .errors import OGGaussianError, ValidationError
from .pipeline import cmd_convert, cmd_eval, cmd_render, cmd_synth, cmd_train, parse_frames


logger = logging.getLogger(__name__)


def _print_summary(title: str, summary: Dict[str, Any]) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    print(json.dumps(summary, indent=2, sort_keys=True))


def run_convert(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    config = ConvertConfig.from_file(args.config, base=ConvertConfig().with_runtime(runtime))
    result = cmd_convert(args.manifest, config, args.output or "priors")
    _print_summary("Occupancy priors", result.to_dict())
    return 0


def run_train(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    config = TrainConfig.from_file(args.config, base=TrainConfig().with_runtime(runtime)).with_overrides(
        iterations=args.iterations,
        seed=args.seed,
        threads=args.threads,
    )
    convert_config = ConvertConfig.from_file(args.convert_config, base=ConvertConfig().with_runtime(runtime))
    result = cmd_train(
        args.manifest,
        config,
        args.output or "run",
        priors_dir=args.priors,
        convert_config=convert_config,
        progress=not args.no_progress,
    )
    _print_summary("Training finished", result.to_dict())
    return 0


def run_render(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    config = RenderConfig.from_file(args.config, base=RenderConfig().with_runtime(runtime)).with_overrides(
        threads=args.threads,
        depth=True if args.depth else None,
        semantic=True if args.semantic else None,
    )
    result = cmd_render(
        args.scene,
        args.cameras,
        args.output or "renders",
        frames=parse_frames(args.frames),
        config=config,
    )
    _print_summary("Rendered images", result.to_dict())
    if not result.ok:
        print(f"\n{len(result.errors)} frame(s) failed", file=sys.stderr)
        return ValidationError.exit_code
    return 0


def run_eval(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    output = args.output or "eval"
    report = cmd_eval(args.rendered, args.target, output, mask_dir=args.masks)
    _print_summary("Evaluation", {
        "psnr": report.psnr,
        "ssim": report.ssim,
        "psnr_dym": report.psnr_dym,
        "frames": len(report.frames),
        "errors": report.errors,
        "report_dir": output,
    })
    if not report.ok:
        return ValidationError.exit_code
    return 0


def run_synth(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    config = SynthConfig.from_file(args.config, base=SynthConfig().with_runtime(runtime)).with_overrides(
        seed=args.seed,
        frames=args.frames,
        threads=args.threads,
    )
    result = cmd_synth(config, args.output or "synthetic")
    _print_summary("Synthetic dataset", result.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    parser = argparse.ArgumentParser(
        prog="python -m src",
        description="Occupancy-guided Gaussian splatting for driving scenes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthetic dataset, priors, training and evaluation
  python -m src synth --output data/synth --seed 7
  python -m src convert data/synth/manifest.json --config data/synth/convert.env --output data/priors
  python -m src train data/synth/manifest.json --priors data/priors --iterations 2000 --output runs/synth
  python -m src render runs/synth/final data/synth/cameras.json --frames 0,5 --output renders
  python -m src eval renders data/synth/images --masks data/synth/masks --output eval

Exit codes: 0 success, 1 invalid input, 2 run aborted.
""",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="KEY=VALUE config file for the command")
    common.add_argument("--output", "-o", help="Output directory")
    common.add_argument("--log-level", help="Logging level (default: LOG_LEVEL or INFO)")

    sub = parser.add_subparsers(dest="command", required=True)

    convert = sub.add_parser("convert", parents=[common], help="Occupancy grids to point-cloud priors")
    convert.add_argument("manifest", help="Scene manifest (JSON)")
    convert.set_defaults(handler=run_convert)

    train = sub.add_parser("train", parents=[common], help="Optimise a scene")
    train.add_argument("manifest", help="Scene manifest (JSON)")
    train.add_argument("--priors", help="Output directory of a previous convert run")
    train.add_argument("--convert-config", help="Config file for the implicit convert step")
    train.add_argument("--iterations", type=int, help="Training iterations")
    train.add_argument("--seed", type=int, help="Random seed")
    train.add_argument("--threads", type=int, help="Render threads")
    train.add_argument("--no-progress", action="store_true", help="Hide the progress bar")
    train.set_defaults(handler=run_train)

    render = sub.add_parser("render", parents=[common], help="Render a checkpoint")
    render.add_argument("scene", help="Checkpoint directory")
    render.add_argument("cameras", help="Camera manifest (JSON)")
    render.add_argument("--frames", help="Frame list such as 0,5 or 2-4 (default: all)")
    render.add_argument("--threads", type=int, help="Render threads")
    render.add_argument("--depth", action="store_true", help="Also write 16-bit depth PNGs")
    render.add_argument("--semantic", action="store_true", help="Also write class-id PNGs")
    render.set_defaults(handler=run_render)

    evaluate = sub.add_parser("eval", parents=[common], help="Compare rendered and reference images")
    evaluate.add_argument("rendered", help="Directory of rendered PNGs")
    evaluate.add_argument("target", help="Directory of reference PNGs")
    evaluate.add_argument("--masks", help="Directory of dynamic-vehicle masks")
    evaluate.set_defaults(handler=run_eval)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    synth.add_argument("--seed", type=int, help="Random seed")
    synth.add_argument("--frames", type=int, help="Number of frames")
    synth.add_argument("--threads", type=int, help="Render threads")
    synth.set_defaults(handler=run_synth)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        runtime = RuntimeConfig.from_env()
    except OGGaussianError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code

    logging.basicConfig(
        level=(args.log_level or runtime.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.handler(args, runtime)
    except OGGaussianError as e:
        logger.debug("command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
