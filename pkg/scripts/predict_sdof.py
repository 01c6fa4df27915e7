"""Calibrate the SDOF experiment, predict a fresh 50 s event and report how
often the credible band contains the simulated truth.

    python3 scripts/predict_sdof.py --out runs/sdof_prediction
"""

import argparse
import json
from pathlib import Path

import numpy as np

from hbuq.hyper import HyperParameters
from hbuq.pipeline import PipelineConfig, calibrate, predict
from hbuq.prediction import credible_band, write_prediction

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "sdof_reference.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write prediction CSVs here")
    args = ap.parse_args()
    base = json.loads(Path(args.config).read_text())
    cfg = PipelineConfig.from_dict({**base, "seed": args.seed})
    report, _, _ = calibrate(cfg)
    hp = HyperParameters.from_dict(report["hyper"]["map"])
    summary, truth, coverage = predict(cfg, hp)
    print(f"hyper: mean {hp.mean[0]:.5f} Hz, std {hp.std[0]:.5f} Hz")
    print(f"truth frequency of the predicted event: {summary.metadata['truth_theta'][0]:.5f} Hz")
    bands = credible_band(summary, cfg.prediction.level)
    for q, c in coverage.items():
        lo, hi = bands[q]
        half = 0.5 * (hi - lo)[0]
        print(f"{q:<13} coverage {c:.3f}  band half-width: first 5 s {half[:1000].mean():.3g}, "
              f"last 5 s {half[-1000:].mean():.3g}  peak |truth| {np.abs(truth.quantity(q)).max():.3g}")
    if args.out:
        write_prediction(summary, args.out, cfg.prediction.level)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
