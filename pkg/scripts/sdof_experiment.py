"""Calibrate the SDOF experiment for a few seeds and print the hyper estimates.

    python3 scripts/sdof_experiment.py --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

from hbuq.pipeline import PipelineConfig, calibrate

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "sdof_reference.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    base = json.loads(Path(args.config).read_text())
    print(f"{'seed':>4} {'init mu':>9} {'init sd':>9} {'mu':>9} {'sd':>9} {'segments':>9}")
    for seed in args.seeds:
        cfg = PipelineConfig.from_dict({**base, "seed": seed, "workers": args.workers})
        report, _, timing = calibrate(cfg)
        init, fit = report["hyper"]["initial"], report["hyper"]["map"]
        s = report["summary"]
        print(f"{seed:>4} {init['mean'][0]:9.5f} {init['std'][0]:9.5f} {fit['mean'][0]:9.5f} "
              f"{fit['std'][0]:9.5f} {s['n_converged']:>4}/{s['n_segments']:<4}"
              f"  ({timing['total_seconds']:.1f}s)")


if __name__ == "__main__":
    main()
