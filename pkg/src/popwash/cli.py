"""Operator surface: JSON manifests, subcommands, deterministic artifacts.

Config files are JSON mappings with the documented sections (net, data,
train, opt, strategy, run, telemetry); see the README for every key.  A
train manifest is either one run config, or ``{"output_dir": ...,
"runs": [config, ...]}``.  A sweep manifest is ``{"base": config,
"axes": {"strategy.p": [...], ...}, "seeds": [...], "output_dir": ...}``.

Artifacts per run: ``config.json``, ``metrics.csv``, ``eval.json``,
``ledger.json``.  All files are byte-identical across re-runs (no
timestamps); CSV floats carry 17 significant digits.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from dataclasses import replace
from pathlib import Path

from .coordination import expected_comm_fraction
from .errors import NumericAbort, ValidationError
from .population import (RunResult, run_config_from_dict, run_config_to_dict,
                         train_population)
from .rng import derive_seed
from . import toy2d

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_MANIFEST_KEYS = ("output_dir", "runs", "name", "base", "axes", "seeds")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_metrics_csv(metrics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(metrics[0].CSV_HEADER if metrics else
                          ("step", "lr", "mean_loss", "avg_consensus_dist", "sum_sq_dist",
                           "comm_scalars_cum", "comm_scalars_effective_cum")) + "\n")
        for record in metrics:
            fh.write(",".join(_fmt(v) for v in record.as_row()) + "\n")


def _json_dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_run_artifacts(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    _json_dump(run_config_to_dict(cfg), out_dir / "config.json")
    write_metrics_csv(result.metrics, out_dir / "metrics.csv")
    _json_dump(result.eval_summary.to_dict(), out_dir / "eval.json")

    cost = expected_comm_fraction(cfg.strategy)
    ledger = result.ledger.as_dict()
    ledger.update({
        "strategy": cfg.strategy.kind,
        "p": cfg.strategy.p,
        "schedule": cfg.strategy.schedule,
        "period": cfg.strategy.normalized().period if cfg.strategy.kind in ("papa", "papa_all") else None,
        "d": cfg.net.layout().total_size,
        "total_steps": result.total_steps,
        "expected_fraction_per_step": cost.fraction,
        "ratio_vs_papa": cost.ratio_vs_papa,
    })
    _json_dump(ledger, out_dir / "ledger.json")


def _load_manifest(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}")
    except json.JSONDecodeError as err:
        raise ValidationError(f"manifest is not valid JSON: {err}")


def _strategy_kind(config) -> str:
    strategy = config.get("strategy", {}) if isinstance(config, dict) else {}
    kind = strategy.get("kind", "none") if isinstance(strategy, dict) else "none"
    return str(kind)


def _split_manifest(manifest: dict) -> tuple[list[tuple[str, dict]], str | None]:
    """Return [(run name, config dict)] and the manifest's output_dir."""
    out_dir = manifest.get("output_dir")
    if "runs" in manifest:
        runs = manifest["runs"]
        if not isinstance(runs, list) or not runs:
            raise ValidationError("manifest 'runs' must be a non-empty list")
        named = []
        for i, entry in enumerate(runs):
            name = entry.pop("name", None) if isinstance(entry, dict) else None
            named.append((name or f"run{i:03d}_{_strategy_kind(entry)}", entry))
        if len({n for n, _ in named}) != len(named):
            raise ValidationError("run names in a manifest must be distinct")
        return named, out_dir
    config = {k: v for k, v in manifest.items() if k not in _MANIFEST_KEYS}
    name = manifest.get("name") or "run000_" + _strategy_kind(config)
    return [(name, config)], out_dir


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    runs, out_dir = _split_manifest(manifest)
    out_root = Path(args.out or out_dir or ".")
    for name, raw in runs:
        cfg = run_config_from_dict(raw)
        result = train_population(cfg)
        write_run_artifacts(result, out_root / name)
        print(f"{name}: ensemble={result.eval_summary.ensemble_acc:.4f} "
              f"averaged={result.eval_summary.averaged_acc:.4f}")
    return EXIT_OK


def cmd_toy2d(args) -> int:
    result = toy2d.run_toy(strategy=args.strategy, seed=args.seed, steps=args.steps,
                           lr=args.lr, noise_sigma=args.sigma, shuffle_p=args.shuffle_p)
    out = Path(args.out or f"toy2d_{args.strategy}_seed{args.seed}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    toy2d.write_trajectory_csv(result, out)
    print(f"endpoints: {result.labels[0]} {result.labels[1]} -> {out}")
    return EXIT_OK


def _set_dotted(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ValidationError(f"axis key must look like section.key, got {dotted!r}")
    config.setdefault(parts[0], {})[parts[1]] = value


def cmd_sweep(args) -> int:
    manifest = _load_manifest(args.manifest)
    base = manifest.get("base")
    axes = manifest.get("axes", {})
    seeds = manifest.get("seeds", [0])
    out_root = Path(args.out or manifest.get("output_dir") or ".")
    if not isinstance(base, dict):
        raise ValidationError("sweep manifest requires a 'base' config")
    if not isinstance(axes, dict) or not axes:
        raise ValidationError("sweep manifest requires non-empty 'axes'")

    axis_names = sorted(axes)
    combos = list(itertools.product(*(axes[a] for a in axis_names)))
    rows = []
    run_idx = 0
    for combo in combos:
        for seed in seeds:
            raw = json.loads(json.dumps(base))
            for axis, value in zip(axis_names, combo):
                _set_dotted(raw, axis, value)
            cfg = run_config_from_dict(raw)
            # every sweep entry gets its own derived seeds and directory
            cfg = replace(cfg,
                          init_seed=derive_seed(cfg.init_seed, "sweep-init", run_idx),
                          shuffle_seed=derive_seed(cfg.shuffle_seed, "sweep-shuffle", run_idx),
                          data=replace(cfg.data, seed=derive_seed(cfg.data.seed, "sweep-data", seed)))
            result = train_population(cfg)
            run_dir = out_root / f"sweep{run_idx:04d}"
            write_run_artifacts(result, run_dir)
            rows.append((combo, seed, result))
            run_idx += 1

    sweep_csv = out_root / "sweep.csv"
    with open(sweep_csv, "w", encoding="utf-8") as fh:
        fh.write(",".join([*axis_names, "seed", "ensemble_acc", "averaged_acc",
                           "best_model_acc", "final_avg_consensus_dist"]) + "\n")
        for combo, seed, result in rows:
            summary = result.eval_summary
            fh.write(",".join([*(_fmt(v) for v in combo), str(seed),
                               _fmt(summary.ensemble_acc), _fmt(summary.averaged_acc),
                               _fmt(summary.best_model_acc),
                               _fmt(result.metrics[-1].avg_consensus_dist)]) + "\n")
    print(f"wrote {sweep_csv} ({len(rows)} runs)")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.run_dirs:
        run_dir = Path(run_dir)
        try:
            with open(run_dir / "ledger.json", encoding="utf-8") as fh:
                ledger = json.load(fh)
            with open(run_dir / "eval.json", encoding="utf-8") as fh:
                summary = json.load(fh)
        except FileNotFoundError as err:
            raise ValidationError(f"{run_dir} is not a finished run directory: {err}")
        soup = summary.get("greedy_soup")
        rows.append({
            "run": run_dir.name,
            "strategy": ledger["strategy"],
            "comm_ratio_vs_papa": ledger["ratio_vs_papa"],
            "ensemble_acc": summary["ensemble_acc"],
            "averaged_acc": summary["averaged_acc"],
            "greedy_soup_acc": soup["test_accuracy"] if soup else None,
        })

    header = ("run", "strategy", "comm_ratio_vs_papa", "ensemble_acc", "averaged_acc",
              "greedy_soup_acc")
    widths = [max(len(h), *(len(_short(r[h])) for r in rows)) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(_short(r[h]).ljust(w) for h, w in zip(header, widths)))

    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join("" if r[h] is None else _fmt(r[h]) for h in header) + "\n")
    return EXIT_OK


def _short(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popwash",
                                     description="Population training with shuffle/averaging coordination")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the manifest's training configs")
    p_train.add_argument("manifest")
    p_train.add_argument("--out", default=None, help="output root (overrides manifest)")
    p_train.set_defaults(func=cmd_train)

    p_toy = sub.add_parser("toy2d", help="two-point 2D descent experiment")
    p_toy.add_argument("--strategy", choices=toy2d.TOY_STRATEGIES, default="none")
    p_toy.add_argument("--seed", type=int, default=0)
    p_toy.add_argument("--sigma", type=float, default=0.25)
    p_toy.add_argument("--steps", type=int, default=1000)
    p_toy.add_argument("--lr", type=float, default=0.1)
    p_toy.add_argument("--shuffle-p", type=float, default=0.01)
    p_toy.add_argument("--out", default=None)
    p_toy.set_defaults(func=cmd_toy2d)

    p_sweep = sub.add_parser("sweep", help="cartesian sweep over config axes")
    p_sweep.add_argument("manifest")
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="side-by-side table over finished runs")
    p_report.add_argument("run_dirs", nargs="+")
    p_report.add_argument("--csv", default=None)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as err:
        print(f"numeric abort at step {err.step} (model {err.model}): {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
