"""Calibrate the three-story synthetic twin and compare with the generating law.

    python3 scripts/shear_twin.py --workers 4
"""

import argparse
import json
from pathlib import Path

import numpy as np

from hbuq.hyper import HyperParameters
from hbuq.pipeline import PipelineConfig, calibrate, format_hyper_table

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "shear_twin.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    base = json.loads(Path(args.config).read_text())
    cfg = PipelineConfig.from_dict({**base, "seed": args.seed, "workers": args.workers})
    report, _, timing = calibrate(cfg)
    g = cfg.generator_config()
    hp = HyperParameters.from_dict(report["hyper"]["map"])
    s = report["summary"]
    print(f"{s['n_converged']}/{s['n_segments']} segments converged in {timing['total_seconds']:.1f}s")
    print(format_hyper_table(report["hyper"]["map"]))
    print()
    print(f"{'param':<10}{'true mean':>11}{'mean err':>10}{'true std':>10}{'var ratio':>11}")
    for name, m, t, sd, v in zip(cfg.spec.parameter_names, hp.mean, g.theta_mean, g.theta_std,
                                 np.diag(hp.cov)):
        print(f"{name:<10}{t:>11.4f}{(m - t) / t:>10.2%}{sd:>10.4f}{v / sd ** 2:>11.3f}")


if __name__ == "__main__":
    main()
