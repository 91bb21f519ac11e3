"""Command-line entry point: reproducible experiments over the library.

Subcommands:

* ``theory-verify`` -- run the oracle studies (exact identities, enumeration
  matches, dominant orders, tail coverage, stability sweep) plus a Monte
  Carlo report grid over (estimator, floor); exit status is nonzero iff any
  check fails.
* ``train`` -- train one method on a dataset, writing history.csv,
  summary.json and a prediction checkpoint.
* ``evaluate`` -- score a saved checkpoint on a dataset's MAR split.
* ``sweep`` -- rerun training across an eta grid, one row per cell.

Every command writes a ``manifest.json`` (command, arguments, config hash,
seed, package version) sufficient to reproduce its outputs bit-identically.
Sweep cells fan out over processes when STABLEDR_WORKERS is set above 1;
results merge in grid order either way.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .configio import read_kv_config
from .data import (
    SyntheticWorldConfig,
    generate_synthetic_world,
    load_ascii_matrix_dataset,
    load_triple_dataset,
    sample_indicators,
    world_to_interaction_set,
)
from .models import config_hash_of, load_checkpoint, save_checkpoint
from .theory import ENUMERATION_CAP, monte_carlo_report
from .training import (
    METHODS,
    TrainConfig,
    evaluate_on_mar,
    train_method,
)
from .verification import (
    verify_dominant_orders,
    verify_double_robustness_identity,
    verify_exact_ips_dr,
    verify_stability_contrast,
    verify_tail_coverage,
    verify_violation_identity,
)

_SYNTH_KEYS = {
    "synthetic_seed": ("seed", int),
    "synthetic_users": ("num_users", int),
    "synthetic_items": ("num_items", int),
    "synthetic_latent_dim": ("latent_dim", int),
    "synthetic_slope": ("propensity_slope", float),
    "synthetic_center": ("propensity_center", float),
    "synthetic_floor": ("propensity_floor", float),
    "synthetic_noise": ("rating_noise", float),
    "synthetic_threshold": ("threshold", float),
}


def _load_config_file(path: str | None) -> tuple[dict[str, str], dict[str, str]]:
    """Split a flat config file into TrainConfig keys and extras."""
    if path is None:
        return {}, {}
    flat = read_kv_config(path)
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    train = {k: v for k, v in flat.items() if k in train_keys}
    extra = {k: v for k, v in flat.items() if k not in train_keys}
    return train, extra


def _build_train_config(args, train_flat: dict[str, str]) -> TrainConfig:
    config = TrainConfig.from_flat_dict(train_flat) if train_flat else TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    if getattr(args, "eta", None) is not None:
        config = config.replace(eta=args.eta)
    return config


def _build_dataset(spec: str, extra: dict[str, str], config: TrainConfig):
    """--dataset accepts coat:DIR, triples:TRAIN[,TEST], or synthetic."""
    threshold = float(extra.get("threshold", 4.0))
    if spec == "synthetic":
        kwargs = {}
        for key, (field_name, cast) in _SYNTH_KEYS.items():
            if key in extra:
                kwargs[field_name] = cast(extra[key])
        kwargs.setdefault("seed", config.seed)
        kwargs.setdefault("num_users", 30)
        kwargs.setdefault("num_items", 30)
        world_config = SyntheticWorldConfig(**kwargs)
        world = generate_synthetic_world(world_config)
        indicators = sample_indicators(world, (world_config.seed, 0x0B5))
        return world_to_interaction_set(world, indicators), world
    kind, _, rest = spec.partition(":")
    if kind == "coat":
        root = Path(rest)
        return (
            load_ascii_matrix_dataset(
                root / "train.ascii", root / "test.ascii", threshold=threshold
            ),
            None,
        )
    if kind == "triples":
        paths = rest.split(",")
        train_path = paths[0]
        mar_path = paths[1] if len(paths) > 1 else None
        index_base = int(extra.get("index_base", 1))
        return (
            load_triple_dataset(
                train_path,
                threshold=threshold,
                mar_path=mar_path,
                index_base=index_base,
            ),
            None,
        )
    raise SystemExit(
        f"unknown dataset spec {spec!r}; use coat:DIR, triples:TRAIN[,TEST] or synthetic"
    )


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _write_manifest(out: Path, command: str, args_dict: dict, config_hash: str, seed):
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(args_dict.items()) if k != "func"},
        "config_hash": config_hash,
        "seed": seed,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


# ---------------------------------------------------------------------------
# theory-verify
# ---------------------------------------------------------------------------


def cmd_theory_verify(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    floors = _float_list(args.floors)
    if args.size > ENUMERATION_CAP:
        print(
            f"error: exact mode supports at most {ENUMERATION_CAP} pairs, got {args.size}",
            file=sys.stderr,
        )
        return 2
    checks: dict[str, dict] = {
        "double_robustness_identity": verify_double_robustness_identity(seed=args.seed),
        "violation_identity": verify_violation_identity(seed=args.seed),
        "exact_ips_dr_formulas": verify_exact_ips_dr(
            max_size=min(16, args.size + 4), seeds=args.formula_seeds
        ),
        "dominant_orders": verify_dominant_orders(),
        "tail_coverage": verify_tail_coverage(
            n=args.size, replicates=args.replicates, eta=args.eta
        ),
        "stability_contrast": verify_stability_contrast(
            seed=args.seed, floors=tuple(floors), eta=args.eta
        ),
    }

    # Monte Carlo report grid: one row per (floor, estimator) on a fixed
    # world whose propensities are floored on half the coordinates.
    rng = np.random.default_rng((args.seed, 0x7E0))
    n = args.size
    p = rng.uniform(0.3, 0.8, size=n)
    e = rng.uniform(0.1, 2.0, size=n)
    e_hat = 0.5 * e
    floored_idx = rng.permutation(n)[: n // 2]
    rows = []
    reports = []
    for floor in floors:
        p_hat = p.copy()
        p_hat[floored_idx] = floor
        for kind in ("ips", "dr", "sdr"):
            report = monte_carlo_report(
                p, p_hat, e, e_hat, kind,
                replicates=args.replicates, eta=args.eta, seed=args.seed,
            )
            reports.append(report.to_dict())
            rows.append(
                {
                    "floor": floor,
                    "estimator": kind,
                    "bias_formula": report.formula_bias_dominant,
                    "bias_mc": report.empirical_bias,
                    "var_formula": report.formula_variance_dominant,
                    "var_mc": report.empirical_variance,
                    "tail_bound": report.tail_bound_value,
                    "exceedance": report.tail_exceedance_rate,
                }
            )
    grid_ok = all(row["exceedance"] <= args.eta for row in rows)
    checks["report_grid_exceedance"] = {"ok": grid_ok, "eta": args.eta}

    _write_csv(
        out / "summary.csv",
        rows,
        [
            "floor",
            "estimator",
            "bias_formula",
            "bias_mc",
            "var_formula",
            "var_mc",
            "tail_bound",
            "exceedance",
        ],
    )
    serializable = {
        name: {k: v for k, v in result.items() if k != "rows"}
        for name, result in checks.items()
    }
    (out / "checks.json").write_text(json.dumps(serializable, indent=2, default=str))
    (out / "theory_report.json").write_text(json.dumps(reports, indent=2))
    _write_manifest(
        out, "theory-verify", _args_dict(args), config_hash_of(_args_dict(args)), args.seed
    )
    all_ok = True
    for name, result in checks.items():
        status = "PASS" if result["ok"] else "FAIL"
        all_ok = all_ok and result["ok"]
        print(f"CHECK {name}: {status}")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# train / evaluate / sweep
# ---------------------------------------------------------------------------


def _history_columns() -> list[str]:
    return [
        "cycle",
        "loss_imputation",
        "loss_propensity",
        "loss_ce",
        "loss_stable",
        "loss_prediction",
        "constraint_residual",
        "val_mse",
        "val_auc",
    ]


def _run_train(args, write_outputs: bool = True):
    train_flat, extra = _load_config_file(args.config)
    config = _build_train_config(args, train_flat)
    data, _world = _build_dataset(args.dataset, extra, config)
    result = train_method(data, config, args.method)
    metrics = evaluate_on_mar(result.best_prediction, data)
    if write_outputs:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "history.csv", result.history, _history_columns())
        summary = {
            "method": args.method,
            "config_hash": config.config_hash,
            "best_cycle": result.best_cycle,
            "cycles_run": len(result.history),
            "metrics": metrics.to_dict(),
            "final_constraint_residual": result.history[-1]["constraint_residual"]
            if result.history
            else None,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        save_checkpoint(out / "prediction.npz", result.best_prediction, config.config_hash)
        _write_manifest(out, "train", _args_dict(args), config.config_hash, config.seed)
    return config, result, metrics


def cmd_train(args) -> int:
    _config, result, metrics = _run_train(args)
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    train_flat, extra = _load_config_file(args.config)
    config = _build_train_config(args, train_flat)
    data, _world = _build_dataset(args.dataset, extra, config)
    model, meta = load_checkpoint(args.checkpoint, (data.num_users, data.num_items))
    metrics = evaluate_on_mar(model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps(metrics.to_dict(), indent=2, sort_keys=True)
    )
    _write_manifest(out, "evaluate", _args_dict(args), meta["config_hash"], config.seed)
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def _sweep_cell(payload: tuple) -> dict:
    args_dict, eta = payload
    ns = argparse.Namespace(**args_dict)
    ns.eta = eta
    _config, result, metrics = _run_train(ns, write_outputs=False)
    row = {"eta": eta, **metrics.to_dict()}
    row["final_constraint_residual"] = (
        result.history[-1]["constraint_residual"] if result.history else ""
    )
    return row


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _float_list(args.eta_grid)
    base = {k: v for k, v in vars(args).items() if k not in ("func", "eta_grid")}
    payloads = [(base, eta) for eta in grid]
    workers = int(os.environ.get("STABLEDR_WORKERS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, payloads))
    else:
        rows = [_sweep_cell(p) for p in payloads]
    columns = ["eta", "mse", "auc", "ndcg@5", "ndcg@10", "num_test_points",
               "final_constraint_residual"]
    _write_csv(out / "sweep.csv", rows, columns)
    _write_manifest(out, "sweep", _args_dict(args), config_hash_of(base), args.seed)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stabledr",
        description="Stabilized doubly robust rating prediction experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    tv = sub.add_parser("theory-verify", help="run the oracle verification suite")
    tv.add_argument("--out", required=True)
    tv.add_argument("--seed", type=int, default=0)
    tv.add_argument("--size", type=int, default=12, help="pair universe for reports")
    tv.add_argument("--floors", default="1e-1,1e-3,1e-6")
    tv.add_argument("--eta", type=float, default=0.1, help="tail confidence level")
    tv.add_argument("--replicates", type=int, default=100_000)
    tv.add_argument("--formula-seeds", type=int, default=20)
    tv.set_defaults(func=cmd_theory_verify)

    def add_common(p):
        p.add_argument("--dataset", required=True,
                       help="coat:DIR | triples:TRAIN[,TEST] | synthetic")
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None, help="overrides config seed")

    tr = sub.add_parser("train", help="train one method end to end")
    add_common(tr)
    tr.add_argument("--method", required=True, choices=METHODS)
    tr.add_argument("--eta", type=float, default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score a checkpoint on the MAR split")
    add_common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.set_defaults(func=cmd_evaluate)

    sw = sub.add_parser("sweep", help="eta sensitivity sweep")
    add_common(sw)
    sw.add_argument("--method", required=True, choices=METHODS)
    sw.add_argument("--eta-grid", required=True, help="comma-separated eta values")
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
