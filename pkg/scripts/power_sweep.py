"""FGSM and AWGN accuracy penalty as a function of PNR.

    python3 scripts/power_sweep.py --pnr 4 6.7 8.1 10 --seeds 0 1 --out results/power

Writes one row per (kind, pnr, seed) to ``power_sweep.csv`` and prints the
seed-averaged table.
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from fedpoison import config as fcfg
from fedpoison import fedsim


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=Path(__file__).resolve().parents[1] / "configs" / "acceptance.yaml")
    ap.add_argument("--pnr", type=float, nargs="+", default=[4.0, 6.7, 8.1, 10.0])
    ap.add_argument("--kinds", nargs="+", default=["fgsm", "awgn"])
    ap.add_argument("--fraction", type=float, default=0.3)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", type=Path, default=Path("results/power"))
    args = ap.parse_args()

    cfg = fcfg.load(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        base = fcfg.RunConfig(cfg.dataset, cfg.partition, cfg.schedule, cfg.attack, cfg.model, cfg.train, seed)
        clean_rc = dataclasses.replace(
            base,
            attack=dataclasses.replace(cfg.attack, kind="none"),
            schedule=dataclasses.replace(cfg.schedule, adversary_fraction=0.0),
        )
        clean = fedsim.run_experiment(clean_rc).accuracies()
        for kind in args.kinds:
            for pnr in args.pnr:
                rc = dataclasses.replace(
                    base,
                    attack=dataclasses.replace(cfg.attack, kind=kind, pnr_db=pnr),
                    schedule=dataclasses.replace(cfg.schedule, adversary_fraction=args.fraction),
                )
                acc = fedsim.run_experiment(rc).accuracies()
                pen = fedsim.accuracy_penalty(acc, clean)
                rows.append({"kind": kind, "pnr_db": pnr, "seed": seed, "final_accuracy": fedsim.final_accuracy(acc), "penalty": pen})
                print(f"seed {seed} {kind} {pnr:5.1f} dB  penalty {pen:6.2f}", flush=True)

    with open(args.out / "power_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"\n{'kind':<6}{'PNR dB':>8}{'penalty':>10}")
    for kind in args.kinds:
        for pnr in args.pnr:
            vals = [r["penalty"] for r in rows if r["kind"] == kind and r["pnr_db"] == pnr]
            print(f"{kind:<6}{pnr:>8.1f}{np.mean(vals):>10.2f}")


if __name__ == "__main__":
    main()
