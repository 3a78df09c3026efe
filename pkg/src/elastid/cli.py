"""Command-line front end.

Exit codes: 0 success, 2 usage or invalid configuration, 3 numeric failure
(including a non-converged estimation), 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .errors import NumericError, SchemaError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("elastid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'E,nu', got {text!r}") from exc
    return a, b


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return n


def _globals(parser, suppress: bool):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", type=Path, help="JSON file overriding default settings", **kw)
    parser.add_argument("--seed", type=int, help="seed for the sweep, initialization and training", **kw)
    parser.add_argument("--jobs", type=_positive_int, help="worker processes for FE solves",
                        **(kw or {"default": 1}))
    parser.add_argument("--out-dir", type=Path, help="artifact directory", **(kw or {"default": Path("run")}))
    parser.add_argument("-v", "--verbose", action="store_true", **kw)


def _obs_source(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--truth", type=_pair, metavar="E,NU", help="synthesize u_obs with one FE solve")
    g.add_argument("--obs", type=Path, help="CSV with the 50 labelled observation columns")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elastid", description=__doc__.splitlines()[0])
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mesh", help="build and write the structured triangle mesh")
    p.add_argument("--length", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--h", type=float, dest="mesh_size")
    p.add_argument("--output", default="mesh.txt")

    p = sub.add_parser("generate", help="FE training and validation data over the parameter sweep")
    p.add_argument("--n-E", type=int)
    p.add_argument("--n-nu", type=int)
    p.add_argument("--n-val", type=int)

    p = sub.add_parser("train", help="fit the surrogate network")
    p.add_argument("--epochs", type=int, help="total epochs (multiple of the block length)")
    p.add_argument("--data-dir", type=Path, help="directory with train.csv and val.csv (default: out-dir)")

    p = sub.add_parser("estimate", help="recover (E, nu) from an observation")
    p.add_argument("--method", choices=sorted(pipeline.METHODS), required=True)
    _obs_source(p)
    p.add_argument("--start", type=_pair, metavar="E,NU", help="initial guess (default: box midpoint)")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--clamp", action="store_true", help="project iterates onto the parameter box")
    p.add_argument("--network", type=Path)

    p = sub.add_parser("surface", help="objective surfaces on a parameter grid")
    _obs_source(p)
    p.add_argument("--which", choices=("N", "h", "both"), default="both")
    p.add_argument("--n-E", type=int, default=10)
    p.add_argument("--n-nu", type=int, default=10)
    p.add_argument("--network", type=Path)

    p = sub.add_parser("solve", help="one FE forward solve with snapshot export")
    p.add_argument("--params", type=_pair, metavar="E,NU", required=True)
    p.add_argument("--all-steps", action="store_true", help="write every time level, not only T/2 and T")

    p = sub.add_parser("bench", help="surrogate against FE timing")
    p.add_argument("--calls", type=int, default=100_000)
    p.add_argument("--fe-solves", type=int, default=3)
    p.add_argument("--network", type=Path)

    for sp in sub.choices.values():
        _globals(sp, suppress=True)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _u_obs(args, cfg: RunConfig):
    if args.truth is not None:
        return pipeline.synthetic_observation(cfg, args.truth), np.array(args.truth)
    return pipeline.read_observation(args.obs)


def run(args) -> int:
    cfg = resolve_config(args)
    out = args.out_dir
    cmd = args.command
    if cmd == "mesh":
        d = cfg.domain
        changes = {k: v for k, v in (("length", args.length), ("height", args.height),
                                     ("mesh_size_h", args.mesh_size)) if v is not None}
        cfg = dataclasses.replace(cfg, domain=dataclasses.replace(d, **changes) if changes else d)
        print(pipeline.write_mesh(cfg, out, args.output))
    elif cmd == "generate":
        changes = {k: v for k, v in (("n_E", args.n_E), ("n_nu", args.n_nu), ("n_val", args.n_val))
                   if v is not None}
        if changes:
            cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, **changes))
        print(json.dumps(pipeline.generate(cfg, out, args.jobs)))
    elif cmd == "train":
        if args.epochs is not None:
            cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, total_epochs=args.epochs))
        _, hist = pipeline.train_surrogate(cfg, out, args.data_dir)
        print(json.dumps({"initial_val_loss": hist.initial_val_loss, "final_val_loss": hist.final_val_loss,
                          "winners": hist.winners}))
    elif cmd == "estimate":
        est = cfg.estimator
        if args.max_iter is not None:
            est = dataclasses.replace(est, max_iter=args.max_iter)
        if args.clamp:
            est = dataclasses.replace(est, clamp_to_box=True)
        cfg = dataclasses.replace(cfg, estimator=est)
        u_obs, truth = _u_obs(args, cfg)
        res, summary = pipeline.estimate(cfg, out, args.method, u_obs, truth, args.start, args.network)
        print(json.dumps(summary))
        if not res.converged:
            log.error("estimation stopped with status %s after %d iterations", res.status, res.n_iter)
            return EXIT_NUMERIC
    elif cmd == "surface":
        u_obs, _ = _u_obs(args, cfg)
        surf = pipeline.surfaces(cfg, out, u_obs, args.which, args.n_E, args.n_nu, args.jobs, args.network)
        print(json.dumps({k: {"shape": list(s.values.shape), "argmin": list(s.argmin())} for k, s in surf.items()}))
    elif cmd == "solve":
        for path in pipeline.solve(cfg, out, args.params, args.all_steps):
            print(path)
    elif cmd == "bench":
        print(json.dumps(pipeline.bench(cfg, out, args.calls, args.fe_solves, network_path=args.network)))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except (SchemaError, OSError) as exc:
        print(f"elastid: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"elastid: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"elastid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
