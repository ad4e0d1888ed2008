"""Penalty for a fixed number of adversaries as the network grows.

    python3 scripts/network_scale.py --sizes 10 15 20 25 --adversaries 1 2 4

The training set is fixed, so larger networks mean smaller shards.
"""

import argparse
import dataclasses
from pathlib import Path

from fedpoison import config as fcfg
from fedpoison import fedsim


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=Path(__file__).resolve().parents[1] / "configs" / "acceptance.yaml")
    ap.add_argument("--sizes", type=int, nargs="+", default=[10, 15, 20, 25])
    ap.add_argument("--adversaries", type=int, nargs="+", default=[1, 2, 4])
    ap.add_argument("--partition", choices=fcfg.PARTITIONS, default="iid")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = fcfg.load(args.config)
    print(f"{'K':>4}{'A':>4}{'penalty':>10}")
    for K in args.sizes:
        # keep the non-iid quantity draw consistent with the shard size
        part = dataclasses.replace(
            cfg.partition,
            mode=args.partition,
            K=K,
            quantity_mean=cfg.partition.quantity_mean * 10 / K,
            quantity_std=cfg.partition.quantity_std * 10 / K,
        )
        base = fcfg.RunConfig(cfg.dataset, part, cfg.schedule, cfg.attack, cfg.model, cfg.train, args.seed)
        clean = fedsim.run_experiment(
            dataclasses.replace(
                base,
                attack=dataclasses.replace(cfg.attack, kind="none"),
                schedule=dataclasses.replace(cfg.schedule, adversary_fraction=0.0, adversaries=0),
            )
        ).accuracies()
        for A in args.adversaries:
            rc = dataclasses.replace(base, schedule=dataclasses.replace(cfg.schedule, adversaries=A))
            acc = fedsim.run_experiment(rc).accuracies()
            print(f"{K:>4}{A:>4}{fedsim.accuracy_penalty(acc, clean):>10.2f}", flush=True)


if __name__ == "__main__":
    main()
