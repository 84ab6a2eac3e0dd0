"""Command line runner: ``run``, ``ablation`` and ``validate``.

Exit codes: 0 success, 2 configuration error, 3 data error. Independent
seeds run in parallel when ``ICON_WORKERS`` is set above 1.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, apply_overrides, load_config
from .errors import BadConfig, ConfigError, DataCoverageError, DimMismatch, ParseError
from .scenario import check_coverage, index_cells, load_csv, synth_dataset
from .trainer import run_experiment

log = logging.getLogger("icon_vil")

WORKERS_ENV = "ICON_WORKERS"
EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

ABLATION_GRID = (
    ("baseline", dict(cast_enabled=False, ic_enabled=False)),
    ("cast-only", dict(cast_enabled=True, ic_enabled=False)),
    ("ic-only", dict(cast_enabled=False, ic_enabled=True)),
    ("full", dict(cast_enabled=True, ic_enabled=True)),
    ("full-dt-off", dict(cast_enabled=True, ic_enabled=True, dynamic_threshold_enabled=False)),
)
TABLE_COLUMNS = ("config", "avg_acc_mean", "avg_acc_std", "forgetting_mean", "forgetting_std")


def build_cells(cfg: RunConfig):
    ds = cfg.dataset
    if ds.source == "csv":
        try:
            cells = load_csv(ds.csv_path, ds.feature_dim)
        except OSError as exc:
            raise DataCoverageError(f"cannot read {ds.csv_path}: {exc.strerror}") from None
    else:
        cells = synth_dataset(ds.num_classes, ds.num_domains, ds.feature_dim, ds.per_cell,
                              ds.shift_strength, ds.noise_sigma, ds.test_fraction, seed=ds.seed)
    return index_cells(cells)


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _task_record(result) -> dict:
    doc = result.to_dict()
    joint = doc.pop("joint_losses")
    cast = doc.pop("cast_losses")
    warm = doc.pop("warmup_losses")
    doc["final_warmup_loss"] = warm[-1] if warm else None
    doc["final_joint_loss"] = joint[-1] if joint else None
    doc["mean_cast_loss"] = float(np.mean(cast)) if cast else 0.0
    return doc


def run_seed(cfg: RunConfig, seed: int, out_dir: Path) -> dict:
    """One full run; writes its files under ``out_dir/seed_<seed>`` and returns the summary."""
    cells = build_cells(cfg)
    stream = cfg.stream(seed)
    check_coverage(cells, stream)
    matrix, results, summary, learner = run_experiment(
        stream, cells, cfg.model_config(seed), cfg.trainer, seed=seed)
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    echo.pop("run")
    doc = dict(summary, config=echo, tasks=[_task_record(r) for r in results],
               expansion_thresholds=learner.clf.thresholds)
    (seed_dir / "summary.json").write_text(_dumps(doc), encoding="utf-8")
    (seed_dir / "acc_matrix.csv").write_text(matrix.to_csv(), encoding="utf-8")
    if cfg.run.emit_node_report:
        rows = learner.clf.node_report()
        columns = ("class_id", "node_count", "node_id", "created_task", "created_domain",
                   "thresholds")
        (seed_dir / "node_report.csv").write_text(_csv_text(rows, columns), encoding="utf-8")
    if cfg.run.emit_shift_pool:
        pool = {"k_configured": learner.pool.k_configured,
                "shifts_per_task": learner.pool.shifts_per_task,
                "shifts": learner.pool.dump()}
        (seed_dir / "shift_pool.json").write_text(_dumps(pool), encoding="utf-8")
    log.info("seed %d: A=%.4f F=%.4f nodes=%d", seed, summary["avg_acc"],
             summary["forgetting"], summary["total_nodes"])
    return summary


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", path=WORKERS_ENV) from None
    if n < 1:
        raise ConfigError("must be >= 1", path=WORKERS_ENV)
    return n


def run_seeds(cfg: RunConfig, out_dir: Path) -> list[dict]:
    seeds = list(cfg.run.seeds)
    workers = min(_workers(), len(seeds))
    if workers <= 1:
        return [run_seed(cfg, s, out_dir) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_seed, [cfg] * len(seeds), seeds, [out_dir] * len(seeds)))


def aggregate(summaries) -> dict:
    """Mean and population standard deviation of A_T and F_T across seeds."""
    acc = np.array([s["avg_acc"] for s in summaries])
    fgt = np.array([s["forgetting"] for s in summaries])
    return {"seeds": [s["seed"] for s in summaries],
            "avg_acc": acc.tolist(), "forgetting": fgt.tolist(),
            "avg_acc_mean": float(acc.mean()), "avg_acc_std": float(acc.std()),
            "forgetting_mean": float(fgt.mean()), "forgetting_std": float(fgt.std()),
            "total_nodes": [s["total_nodes"] for s in summaries]}


def cmd_run(cfg: RunConfig) -> int:
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = run_seeds(cfg, out_dir)
    agg = aggregate(summaries)
    (out_dir / "aggregate.json").write_text(_dumps(agg), encoding="utf-8")
    print(f"avg_acc {agg['avg_acc_mean']:.4f} +- {agg['avg_acc_std']:.4f}  "
          f"forgetting {agg['forgetting_mean']:.4f} +- {agg['forgetting_std']:.4f}  "
          f"({len(summaries)} seeds) -> {out_dir}")
    return EXIT_OK


def ablation_rows(cfg: RunConfig, out_dir: Path) -> list[dict]:
    rows = []
    for name, flags in ABLATION_GRID:
        variant = dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, **flags))
        agg = aggregate(run_seeds(variant, out_dir / name))
        (out_dir / name / "aggregate.json").write_text(_dumps(agg), encoding="utf-8")
        rows.append({"config": name, **{k: agg[k] for k in TABLE_COLUMNS[1:]}})
    return rows


def cmd_ablation(cfg: RunConfig) -> int:
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ablation_rows(cfg, out_dir)
    (out_dir / "ablation.csv").write_text(_csv_text(rows, TABLE_COLUMNS), encoding="utf-8")
    print(" ".join(f"{c:>15s}" for c in TABLE_COLUMNS))
    for row in rows:
        print(f"{row['config']:>15s} " + " ".join(f"{row[c]:15.4f}" for c in TABLE_COLUMNS[1:]))
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    resolved = json.loads(json.dumps(cfg.to_dict()))
    print(yaml.safe_dump(resolved, sort_keys=False), end="")
    derived = cfg.derived()
    print(f"tasks: {derived['tasks']}")
    print(f"node_upper_bound: {derived['node_upper_bound']}")
    print(f"shift_length: {derived['shift_length']}")
    print(f"k_clusters: {derived['k_clusters']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icon-vil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-seed progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "train over the configured seeds"),
                            ("ablation", "run the cast/ic ablation grid"),
                            ("validate", "check a config and print derived quantities")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML file or a name under configs/")
        p.add_argument("--seed", type=int, help="run this single seed instead of run.seeds")
        p.add_argument("--out", help="output directory (overrides run.out_dir)")
        p.add_argument("--scenario", help="stream kind: cil, dil, vil or cdil")
        if name != "ablation":
            p.add_argument("--ablate", default="",
                           help="comma list of no-cast, no-ic, no-dt")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    commands = {"run": cmd_run, "ablation": cmd_ablation, "validate": cmd_validate}
    try:
        ablate = [a.strip() for a in getattr(args, "ablate", "").split(",") if a.strip()]
        cfg = apply_overrides(load_config(args.config), seed=args.seed, out=args.out,
                              ablate=ablate, scenario=args.scenario)
        return commands[args.command](cfg)
    except BadConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataCoverageError, ParseError, DimMismatch) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
