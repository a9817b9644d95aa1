"""Command-line interface.

Exit codes: 0 success, 2 contract violation, 3 bad configuration,
4 image or file I/O failure, 5 numerical failure, 6 synchronization
failure, 7 measurement failure, 1 any other error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigurationError, MisrError
from .pipeline import (
    RunConfig,
    bench_csv,
    cmd_bench,
    cmd_degrade,
    cmd_metrics,
    cmd_mtf,
    cmd_pipeline,
    cmd_reconstruct,
    metrics_csv,
)

_DEFAULTS = RunConfig()


def _model_flags(p: argparse.ArgumentParser, explicit_only: bool = False):
    # with explicit_only the defaults are None so that manifest values can fill in
    d = (lambda v: None) if explicit_only else (lambda v: v)
    g = p.add_argument_group("forward model")
    g.add_argument("--scale", type=int, default=d(_DEFAULTS.scale), help="upscaling factor r (default 2)")
    g.add_argument("--frames", type=int, default=None, help="number of LR frames k (default: all shifts of the pattern)")
    g.add_argument("--shift-pattern", choices=["auto", "clockwise", "grid"], default=d(_DEFAULTS.shift_pattern),
                   help="half-pixel clockwise (4 frames) or r x r grid; auto picks clockwise at 2x")
    g.add_argument("--blur-size", type=int, default=d(_DEFAULTS.blur_size), help="Gaussian blur kernel size (default 3)")
    g.add_argument("--blur-std", type=float, default=d(_DEFAULTS.blur_std), help="Gaussian blur std in HR px (default 0.5)")
    g.add_argument("--noise-sigma", type=float, default=d(_DEFAULTS.noise_sigma),
                   help="noise std on a [0, 1] intensity scale (default 1/255)")


def _solver_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("reconstruction")
    g.add_argument("--p", type=int, choices=[1, 2], default=_DEFAULTS.p, help="data norm (default 1)")
    g.add_argument("--lam", type=float, default=_DEFAULTS.lam, help="prior weight (default 0.05)")
    g.add_argument("--alpha", type=float, default=_DEFAULTS.alpha, help="BTV decay (default 0.4)")
    g.add_argument("--window", type=int, default=_DEFAULTS.window, help="BTV window w (default 3)")
    g.add_argument("--l1-epsilon", type=float, default=_DEFAULTS.l1_epsilon, help="L1 smoothing (default 1e-3)")
    g.add_argument("--workers", "-g", type=int, default=_DEFAULTS.workers, help="partitions g (default 1)")
    g.add_argument("--n-iter", type=int, default=_DEFAULTS.n_iter, help="SCG iterations (default 20)")


def _output_flags(p: argparse.ArgumentParser):
    p.add_argument("--format", choices=["raw", "png"], default=_DEFAULTS.format, help="frame format (default raw)")
    p.add_argument("--bit-depth", type=int, choices=[8, 16], default=_DEFAULTS.bit_depth, help="PNG bit depth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misr", description="Multi-image super-resolution toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="simulate shifted, blurred, binned LR frames from a GT image")
    p.add_argument("input", help="ground-truth image (.png or .raw)")
    p.add_argument("output", help="directory for frames and manifest")
    _model_flags(p)
    _output_flags(p)
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed)

    p = sub.add_parser("reconstruct", help="super-resolve a frame directory")
    p.add_argument("input", help="directory with frames and manifest")
    p.add_argument("output", help="SR image (.png or .raw)")
    p.add_argument("--trace", help="write the convergence trace CSV here")
    p.add_argument("--force", action="store_true", help="use command-line model flags even if the manifest differs")
    _model_flags(p, explicit_only=True)
    _solver_flags(p)
    p.add_argument("--bit-depth", type=int, choices=[8, 16], default=_DEFAULTS.bit_depth, help="PNG bit depth")

    p = sub.add_parser("pipeline", help="simulate the capture-reconstruct loop of a scan")
    p.add_argument("--input", help="directory of per-view frame directories (default: synthetic views)")
    p.add_argument("--output", help="directory for per-view SR images and report.csv")
    p.add_argument("--exposure", type=float, default=_DEFAULTS.exposure, help="seconds per frame (default 0.5)")
    p.add_argument("--rotation-latency", type=float, default=_DEFAULTS.rotation_latency,
                   help="seconds to rotate to the next view (default 0)")
    p.add_argument("--views", type=int, default=_DEFAULTS.views, help="synthetic views (default 16)")
    p.add_argument("--view-size", type=int, default=_DEFAULTS.view_size, help="synthetic LR frame edge (default 512)")
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    _model_flags(p)
    _solver_flags(p)
    _output_flags(p)

    p = sub.add_parser("metrics", help="PSNR/SSIM against a reference, or MTF of a disk image")
    p.add_argument("images", nargs="+", help="images to score")
    p.add_argument("--reference", help="reference image for PSNR/SSIM")
    p.add_argument("--mtf", action="store_true", help="measure the MTF of each image's disk edge")
    p.add_argument("--center", type=float, nargs=2, metavar=("X", "Y"), help="disk centre in pixels")
    p.add_argument("--radius", type=float, help="disk radius in pixels")
    p.add_argument("--pixel-pitch", type=float, default=1.0, help="pixel size in output frequency units")
    p.add_argument("--curve", help="MTF curve CSV path (single image only)")
    p.add_argument("--data-range", type=float, default=1.0)

    p = sub.add_parser("bench", help="time reconstructions over sizes, iterations and worker counts")
    p.add_argument("--sizes", type=int, nargs="+", default=[512, 1024, 2048], help="LR frame edges")
    p.add_argument("--iterations", type=int, nargs="+", default=[5, 10, 20])
    p.add_argument("--g-values", type=int, nargs="+", default=[1, 4])
    p.add_argument("--output", help="write the table here as well as to stdout")
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    _model_flags(p)
    return parser


_CONFIG_KEYS = {f for f in RunConfig.__dataclass_fields__}


def _config(args, **extra) -> RunConfig:
    kw = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None}
    kw.update(extra)
    return RunConfig(**kw)


def _run(args) -> int:
    out = sys.stdout
    if args.command == "degrade":
        paths = cmd_degrade(_config(args))
        for p in paths:
            print(p, file=out)
    elif args.command == "reconstruct":
        explicit = {k for k in ("scale", "frames", "shift_pattern", "blur_size", "blur_std", "noise_sigma")
                    if getattr(args, k) is not None}
        result = cmd_reconstruct(_config(args), explicit=frozenset(explicit), force=args.force)
        last = result.trace[-1]
        print(f"iterations={last.iter} f={last.f_c:.6g} output={args.output}", file=out)
    elif args.command == "pipeline":
        report = cmd_pipeline(_config(args))
        out.write(report.to_csv())
        return 0
    elif args.command == "metrics":
        if args.mtf:
            if args.center is None or args.radius is None:
                raise ConfigurationError("--mtf needs --center and --radius")
            if args.curve and len(args.images) > 1:
                raise ConfigurationError("--curve takes a single image")
            print("image,mtf10,reached10", file=out)
            for img in args.images:
                c = cmd_mtf(img, tuple(args.center), args.radius, args.pixel_pitch, args.curve)
                print(f"{img},{c.mtf10:.5f},{'yes' if c.reached10 else 'no'}", file=out)
        else:
            if not args.reference:
                raise ConfigurationError("metrics needs --reference (or --mtf)")
            rows = cmd_metrics(args.reference, args.images, args.data_range)
            out.write(metrics_csv(rows))
            if any("error" in r for r in rows):
                return ConfigurationError.exit_code
    elif args.command == "bench":
        config = _config(args)
        rows = cmd_bench(config, args.sizes, args.iterations, args.g_values)
        text = bench_csv(rows)
        out.write(text)
        if args.output:
            with open(args.output, "w") as f:
                f.write(text)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except MisrError as e:
        print(f"misr {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
