"""Command line front-end: ``generate``, ``run`` and ``report``.

``FEDPOISON_SEED`` and ``FEDPOISON_OUT`` override the master seed and the
output location when the matching flags are absent.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
import zlib
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fedpoison import config as fcfg
from fedpoison import datakit as dk
from fedpoison import fedsim
from fedpoison.binio import atomic_write_bytes, atomic_write_text
from fedpoison.errors import FedPoisonError

log = logging.getLogger("fedpoison")

BASE_COLUMNS = ("round", "accuracy", "mean_loss", "attack_active", "mean_delta_norm", "degenerate_count")
RUN_NAME = re.compile(r"^(clean|fgsm|awgn|flip)_(iid|noniid)_([0-9.eE+-]+)_(\d+)\.csv$")


class ReportError(FedPoisonError):
    def __init__(self, message: str, path: str | os.PathLike, line: int | None = None):
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


# ------------------------------------------------------------------- generate


def cmd_generate(cfg: fcfg.ExperimentConfig, out_path: str | os.PathLike, seed: int) -> dict:
    d = cfg.dataset
    ds = dk.generate_dataset(
        d.schemes,
        d.frames_per_class,
        dk.ChannelSpec(d.snr_db, d.fading, seed),
        length=d.length,
        seed=seed,
        samples_per_symbol=d.samples_per_symbol,
    )
    raw = dk.dataset_to_bytes(ds)
    atomic_write_bytes(out_path, raw)
    return {
        "path": str(out_path),
        "count": len(ds),
        "class_counts": dict(zip(ds.scheme_names, ds.class_counts().tolist())),
        "snr_db": d.snr_db,
        "seed": seed,
        "crc32": f"{zlib.crc32(raw) & 0xFFFFFFFF:08x}",
    }


# ------------------------------------------------------------------------ run


def run_file_name(entry: fcfg.MatrixEntry, seed: int) -> str:
    return f"{entry.name}_{seed}.csv"


def metrics_csv(metrics: list[fedsim.RoundMetrics], num_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(BASE_COLUMNS) + [f"class_{c}" for c in range(num_classes)])
    for m in metrics:
        per = ["" if a is None else repr(float(a)) for a in m.per_class_accuracy]
        w.writerow(
            [m.round, repr(m.global_accuracy), repr(m.mean_loss), int(m.attack_active), repr(m.mean_delta_norm), m.degenerate_count]
            + per
        )
    return buf.getvalue()


def _run_one(job):
    name, rc = job
    try:
        res = fedsim.run_experiment(rc)
    except Exception as exc:  # recorded in the summary, the batch carries on
        return name, None, f"{type(exc).__name__}: {exc}"
    return name, metrics_csv(res.metrics, len(res.scheme_names)), None


def summarise(results: dict[str, list[float]], entries, seeds, cfg_hash: str, failures: dict[str, str]) -> dict:
    """``results`` maps CSV file name to its accuracy series."""
    variants = {}
    for entry in entries:
        files = [run_file_name(entry, s) for s in seeds]
        done = [f for f in files if f in results]
        finals = [fedsim.final_accuracy(results[f]) for f in done]
        variants[entry.name] = {
            "variant": entry.variant,
            "partition": entry.partition,
            "fraction": entry.fraction,
            "csv": done,
            "final_accuracy": float(np.mean(finals)) if finals else None,
            "final_accuracy_per_seed": finals,
            "penalty": None,
        }
    for entry in entries:
        v = variants[entry.name]
        if entry.variant == "clean":
            v["penalty"] = 0.0 if v["final_accuracy"] is not None else None
            continue
        clean = next((e for e in entries if e.variant == "clean" and e.partition == entry.partition), None)
        if clean is None:
            continue
        pairs = [
            (results[run_file_name(clean, s)], results[run_file_name(entry, s)])
            for s in seeds
            if run_file_name(clean, s) in results and run_file_name(entry, s) in results
        ]
        if pairs:
            v["penalty"] = float(np.mean([fedsim.accuracy_penalty(a, c) for c, a in pairs])) + 0.0
    return {"config_hash": cfg_hash, "seeds": list(seeds), "variants": variants, "failures": failures}


def cmd_run(
    cfg: fcfg.ExperimentConfig, out_dir: str | os.PathLike, workers: int = 1, variants: list[str] | None = None
) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = cfg.expand(variants)
    entries = []
    for entry, _, _ in runs:
        if entry not in entries:
            entries.append(entry)
    jobs = [(run_file_name(entry, seed), rc) for entry, seed, rc in runs]
    results: dict[str, list[float]] = {}
    failures: dict[str, str] = {}

    def collect(name, text, err):
        if err is not None:
            log.error("%s failed: %s", name, err)
            failures[name] = err
            return
        atomic_write_text(out_dir / name, text)
        results[name] = [float(r["accuracy"]) for r in csv.DictReader(io.StringIO(text))]
        log.info("%s final accuracy %.4f", name, fedsim.final_accuracy(results[name]))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_run_one, jobs):
                collect(*out)
    else:
        for job in jobs:
            collect(*_run_one(job))
    summary = summarise(results, entries, cfg.seeds.seeds(), fcfg.config_hash(cfg), failures)
    atomic_write_text(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out_dir / "config.yaml", fcfg.dumps(cfg))
    return summary


# --------------------------------------------------------------------- report


def read_metrics(path: Path) -> dict:
    """Parse one metrics CSV, checking column count and value types per line."""
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ReportError(str(exc), path) from exc
    if not lines:
        raise ReportError("empty file", path, 1)
    rows = list(csv.reader(lines))
    header = rows[0]
    if tuple(header[:6]) != BASE_COLUMNS or len(header) < 8:
        raise ReportError("unexpected header", path, 1)
    rounds, acc = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ReportError(f"expected {len(header)} fields, got {len(row)}", path, i)
        try:
            rounds.append(int(row[0]))
            a = float(row[1])
            float(row[2]), int(row[3]), float(row[4]), int(row[5])
            [float(x) for x in row[6:] if x != ""]
        except ValueError as exc:
            raise ReportError(f"bad value: {exc}", path, i) from None
        if not 0 <= a <= 1:
            raise ReportError(f"accuracy {a} outside [0, 1]", path, i)
        acc.append(a)
    if not acc:
        raise ReportError("no data rows", path, 2)
    return {"rounds": rounds, "accuracy": acc, "num_classes": len(header) - 6}


def collect_runs(run_dir: Path) -> dict[str, dict[int, dict]]:
    """Group CSVs as ``{variant_partition_fraction: {seed: metrics}}``."""
    groups: dict[str, dict[int, dict]] = defaultdict(dict)
    for path in sorted(run_dir.glob("*.csv")):
        m = RUN_NAME.match(path.name)
        if not m:
            continue
        variant, partition, fraction, seed = m.groups()
        groups[f"{variant}_{partition}_{fraction}"][int(seed)] = read_metrics(path)
    if not groups:
        raise ReportError("no metrics CSV found", run_dir)
    return dict(groups)


def report_table(groups: dict[str, dict[int, dict]]) -> list[dict]:
    rows = []
    for name, seeds in groups.items():
        variant, partition, fraction = name.split("_")
        finals = {s: fedsim.final_accuracy(r["accuracy"]) for s, r in seeds.items()}
        clean = next((groups[k] for k in sorted(groups) if k.startswith(f"clean_{partition}_")), None)
        penalty = None
        if variant == "clean":
            penalty = 0.0
        elif clean:
            common = sorted(set(seeds) & set(clean))
            if common:
                penalty = float(
                    np.mean([fedsim.accuracy_penalty(seeds[s]["accuracy"], clean[s]["accuracy"]) for s in common])
                )
        rows.append(
            {
                "name": name,
                "variant": variant,
                "partition": partition,
                "fraction": float(fraction),
                "seeds": sorted(seeds),
                "final_accuracy": float(np.mean(list(finals.values()))),
                "penalty": penalty,
            }
        )
    return rows


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "fedpoison"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def accuracy_plot(groups: dict[str, dict[int, dict]]) -> bytes:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in sorted(groups):
        runs = list(groups[name].values())
        n = min(len(r["accuracy"]) for r in runs)
        acc = np.array([r["accuracy"][:n] for r in runs])
        x = np.asarray(runs[0]["rounds"][:n])
        ax.plot(x, acc.mean(axis=0), label=name, lw=1.4)
        if len(runs) > 1:
            ax.fill_between(x, acc.min(axis=0), acc.max(axis=0), alpha=0.2, lw=0)
    ax.set_xlabel("round")
    ax.set_ylabel("global test accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = _svg_bytes(fig)
    plt.close(fig)
    return out


def penalty_plot(rows: list[dict]) -> bytes:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    series = defaultdict(list)
    for r in rows:
        if r["penalty"] is not None and r["variant"] != "clean":
            series[f"{r['variant']}_{r['partition']}"].append((r["fraction"], r["penalty"]))
    fractions = sorted({f for pts in series.values() for f, _ in pts})
    width = 0.8 / max(len(series), 1)
    for i, key in enumerate(sorted(series)):
        pts = dict(series[key])
        xs = [j + (i - (len(series) - 1) / 2) * width for j, f in enumerate(fractions) if f in pts]
        ax.bar(xs, [pts[f] for f in fractions if f in pts], width=width, label=key)
    ax.set_xticks(range(len(fractions)), [f"{100 * f:g}%" for f in fractions])
    ax.set_xlabel("adversarial devices")
    ax.set_ylabel("accuracy penalty (points)")
    ax.axhline(0, color="black", lw=0.8)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = _svg_bytes(fig)
    plt.close(fig)
    return out


def format_table(rows: list[dict]) -> str:
    lines = [f"{'run':<24}{'seeds':>8}{'final acc':>12}{'penalty':>10}"]
    for r in sorted(rows, key=lambda r: r["name"]):
        pen = "-" if r["penalty"] is None else f"{r['penalty']:.2f}"
        lines.append(f"{r['name']:<24}{len(r['seeds']):>8}{r['final_accuracy']:>12.4f}{pen:>10}")
    return "\n".join(lines) + "\n"


def cmd_report(run_dir: str | os.PathLike) -> list[dict]:
    run_dir = Path(run_dir)
    groups = collect_runs(run_dir)
    rows = report_table(groups)
    atomic_write_bytes(run_dir / "accuracy.svg", accuracy_plot(groups))
    atomic_write_bytes(run_dir / "penalty.svg", penalty_plot(rows))
    table = format_table(rows)
    atomic_write_text(run_dir / "report.txt", table)
    atomic_write_text(run_dir / "report.json", json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return rows


# ----------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpoison", description="Federated modulation-classifier poisoning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="synthesise a dataset file")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    r = sub.add_parser("run", help="run the experiment matrix")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--variants", help="comma separated subset of clean,fgsm,awgn,flip")
    rp = sub.add_parser("report", help="plots and a table from a run directory")
    rp.add_argument("run_dir", nargs="?")
    return p


def _env_seed(flag: int | None, cfg: fcfg.ExperimentConfig) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("FEDPOISON_SEED")
    return int(env) if env else cfg.seeds.master


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = getattr(args, "out", None) or os.environ.get("FEDPOISON_OUT")
    try:
        if args.command == "report":
            target = args.run_dir or out
            if not target:
                raise FedPoisonError("report needs a run directory")
            cmd_report(target)
            return 0
        cfg = fcfg.load(args.config)
        cfg.seeds.master = _env_seed(args.seed, cfg)
        if not out:
            raise FedPoisonError("--out is required (or set FEDPOISON_OUT)")
        if args.command == "generate":
            print(json.dumps(cmd_generate(cfg, out, cfg.seeds.master), indent=2))
            return 0
        variants = None
        if args.variants:
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            bad = [v for v in variants if v not in fcfg.VARIANTS]
            if bad:
                raise FedPoisonError(f"--variants: unknown variant(s) {bad}")
        summary = cmd_run(cfg, out, workers=args.workers, variants=variants)
        for name, v in summary["variants"].items():
            pen = "-" if v["penalty"] is None else f"{v['penalty']:.2f}"
            acc = "-" if v["final_accuracy"] is None else f"{v['final_accuracy']:.4f}"
            print(f"{name:<24} final {acc}  penalty {pen}")
        return 0 if not summary["failures"] else 1
    except (FedPoisonError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
