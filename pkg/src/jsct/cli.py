"""Command-line entry point ``jsct``.

Subcommands::

    jsct run <config>                       full convergence experiment
    jsct phantom <kind> <out>               rasterise a phantom to <out>.pgm/.raw
    jsct simulate <config> <out>            simulate a noisy sinogram
    jsct reconstruct <config> <sinogram> <out>

``--seed``, ``--output-dir``, ``--threads`` and ``--reproducible`` override
the config file.  Failures exit nonzero and print one JSON object on stderr,
``{"error": <kind>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .algorithms import ReconstructionError
from .harness import (
    ConfigError,
    ExperimentConfig,
    build_problem,
    load_config,
    read_sinogram,
    reconstruct,
    render_image,
    run_experiment,
    write_sinogram,
)
from .model import LipschitzConvergenceError
from .simulate import PHANTOMS, make_phantom

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--output-dir", type=Path, help="directory for outputs")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--reproducible", action="store_true", default=None,
                        help="single thread, deterministic output (no wall times in CSVs)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="jsct", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"jsct {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run a convergence experiment")
    r.add_argument("config", type=Path)

    ph = sub.add_parser("phantom", parents=[common], help="write a phantom image")
    ph.add_argument("kind", choices=sorted(PHANTOMS))
    ph.add_argument("out", type=Path, help="output path stem (.pgm and .raw are written)")
    ph.add_argument("--config", type=Path, help="take the geometry from this config")

    s = sub.add_parser("simulate", parents=[common], help="simulate noisy counts")
    s.add_argument("config", type=Path)
    s.add_argument("out", type=Path, help="sinogram file (float64, counts then I0)")

    rc = sub.add_parser("reconstruct", parents=[common], help="reconstruct a sinogram")
    rc.add_argument("config", type=Path)
    rc.add_argument("sinogram", type=Path)
    rc.add_argument("out", type=Path, help="output path stem (.pgm and .raw are written)")
    return p


def _stem(path: Path) -> Path:
    return path.with_suffix("") if path.suffix in (".pgm", ".raw") else path


def _place(path: Path, output_dir) -> Path:
    path = Path(path)
    if output_dir is not None and not path.is_absolute():
        path = Path(output_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    over = {"seed": args.seed, "output_dir": args.output_dir, "reproducible": args.reproducible}
    return load_config(args.config, **over)


def _cmd_run(args):
    cfg = _config(args)
    meta = run_experiment(cfg)
    print(json.dumps({"status": "ok", "output_dir": str(cfg.output_dir),
                      "runs": sorted(meta["runs"]), "aborted": meta["aborted"],
                      "reference_phi": meta["reference"]["phi"]}))
    return 0


def _cmd_phantom(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    ph = make_phantom(args.kind, cfg.geometry)
    out = _place(_stem(args.out), args.output_dir)
    hi = float(ph.image.max()) or 1.0
    render_image(ph.image, out.with_suffix(".pgm"), cfg.window or (0.0, hi),
                 cfg.geometry.pixel_size)
    print(json.dumps({"status": "ok", "image": str(out.with_suffix(".pgm"))}))
    return 0


def _cmd_simulate(args):
    cfg = _config(args)
    problem, _ = build_problem(cfg)
    out = _place(args.out, args.output_dir)
    write_sinogram(problem.data, out, cfg.geometry)
    print(json.dumps({"status": "ok", "sinogram": str(out), "rays": problem.m}))
    return 0


def _cmd_reconstruct(args):
    cfg = _config(args)
    data, _ = read_sinogram(args.sinogram)
    res = reconstruct(cfg, data)
    out = _place(_stem(args.out), args.output_dir)
    img = res.x.reshape(cfg.geometry.image_shape)
    hi = float(img.max()) or 1.0
    render_image(img, out.with_suffix(".pgm"), cfg.window or (0.0, hi), cfg.geometry.pixel_size)
    print(json.dumps({"status": "ok", "image": str(out.with_suffix(".pgm")),
                      "objective": res.final_objective, "passes": res.passes}))
    return 0


_COMMANDS = {"run": _cmd_run, "phantom": _cmd_phantom, "simulate": _cmd_simulate,
             "reconstruct": _cmd_reconstruct}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("UsageError", "invalid command line (see usage above)", EXIT_USAGE)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        return _fail("UsageError", "--threads must be >= 1", EXIT_USAGE)
    threads = 1 if args.reproducible else args.threads
    limits = threadpool_limits(limits=threads) if threads else nullcontext()
    try:
        with limits:
            return _COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), EXIT_USAGE)
    except (ReconstructionError, LipschitzConvergenceError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
