"""Command-line entry point: ``hbuq generate|calibrate|predict|report``.

Exit codes: 0 success, 1 calibration finished but below the convergence
policy, 2 error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import HbuqError
from .pipeline import PipelineConfig, cmd_calibrate, cmd_generate, cmd_predict, cmd_report

log = logging.getLogger("hbuq")


def _parser():
    p = argparse.ArgumentParser(prog="hbuq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("generate", "write a synthetic record and its ground truth"),
                        ("calibrate", "segment inference and hyper-parameter estimation"),
                        ("predict", "propagate a calibrated hyper distribution")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="pipeline configuration JSON")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--workers", type=int, help="worker processes (overrides the config)")
        s.add_argument("--seed", type=int, help="global seed (overrides the config)")
        if name == "predict":
            s.add_argument("--hyper", required=True, help="hyper.json written by calibrate")
    r = sub.add_parser("report", help="print the summary of a calibration run")
    r.add_argument("--out", required=True, help="run directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    cfg = PipelineConfig.load(args.config)
    if args.out is not None:
        cfg.out = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.out))
            return 0
        cfg = _config(args)
        if args.command == "generate":
            path = cmd_generate(cfg)
            print(f"wrote {path}")
            return 0
        if args.command == "calibrate":
            report, code = cmd_calibrate(cfg)
            s = report["summary"]
            print(f"{s['n_converged']}/{s['n_segments']} segments converged; "
                  f"hyper {'converged' if report['hyper']['converged'] else 'did not converge'}; "
                  f"wrote {Path(cfg.out) / 'report.json'}")
            return code
        paths, coverage = cmd_predict(cfg, args.hyper)
        for q, path in paths.items():
            extra = f" (truth coverage {coverage[q]:.3f})" if coverage else ""
            print(f"wrote {path}{extra}")
        return 0
    except (HbuqError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
