"""Hyper estimates for every (samples per segment, number of segments) grouping
of one SDOF record.

    python3 scripts/grouping_sweep.py --seed 0
"""

import argparse
import json
from pathlib import Path

from hbuq.pipeline import PipelineConfig, calibrate

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "sdof_reference.json"
SAMPLES = (1000, 2000, 4000, 8000)
COUNTS = (20, 40, 50)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    base = json.loads(Path(args.config).read_text())
    dt = base["data"]["generator"]["dt"]
    header = "".join(f"{f'N_D={n}':>22}" for n in COUNTS)
    print(f"{'n_i':>6}{'L_i (s)':>9}{header}")
    for n_i in SAMPLES:
        cells = []
        for n_d in COUNTS:
            cfg = PipelineConfig.from_dict({
                **base, "seed": args.seed, "workers": args.workers,
                "segmentation": {"segment_seconds": n_i * dt, "n_segments": n_d}})
            report, _, _ = calibrate(cfg)
            h = report["hyper"]["map"]
            cells.append(f"{h['mean'][0]:11.4f}{h['std'][0]:11.5f}")
        print(f"{n_i:>6}{n_i * dt:>9g}" + "".join(cells))


if __name__ == "__main__":
    main()
