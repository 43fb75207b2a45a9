"""Batch command-line entry point.

Every subcommand resolves its configuration from built-in defaults, an
optional JSON config file, and flat overrides (``key=value`` or
``--key value``), in that order of precedence. Each run writes into its
output directory a ``manifest.json`` (resolved config, config hash,
derived seeds, artifact version, wall time, timestamp) plus the
experiment's CSV/JSON outputs. Timestamps never enter the CSVs, so
repeated runs with the same master seed are byte-identical there.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime
failure, 4 check-mode run whose result violates its stated bounds.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, datagen, recovery, theory, trainer
from .seeds import child_int

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4

THEORY_COLUMNS = ("experiment", "kind", "trials", "mean", "variance",
                  "predicted_mean", "predicted_variance", "seed")
SWEEP_COLUMNS = ("d", "n", "k", "sigma", "kind", "trial", "error",
                 "iterations", "converged", "theory_rate")
METRIC_COLUMNS = ("variant", "seed", "class", "iou", "f1", "mcc", "map", "miou")

_TRAIN_KEYS = {
    "variant": "complementary", "mask_ratio": 0.6, "patch": None,
    "lambda_cm": 0.01, "lam": 0.5, "threshold": 0.7, "ema_decay": 0.99,
    "lr": 2e-3, "iterations": 2000, "batch_size": 2, "adain_align": False,
    "size": 64, "classes": 3,
    "shift_offset": datagen.DEFAULT_SHIFT["offset"],
    "shift_noise": datagen.DEFAULT_SHIFT["noise"],
    "shift_frequency_factor": datagen.DEFAULT_SHIFT["frequency_factor"],
}

DEFAULTS = {
    "theory-ip": {"trials": 100_000, "dim": 256, "signal": "ones"},
    "theory-multiview": {"trials": 1000, "dim": 256, "ways": [2, 3, 4],
                         "signal": "ones"},
    "theory-fce": {"trials": 10_000, "dim": 256, "sigma": 0.05,
                   "env_norm": 1.0, "env_freq": 2.0, "sparse_support": 0,
                   "feature_dim": 16, "feature_kind": "linear", "beta": 1.0},
    "theory-gap": {"n_values": [32, 64, 128, 256, 512, 1024, 2048, 4096],
                   "trials": 20, "dim": 64, "feature_dim": 16,
                   "feature_kind": "linear", "beta": 1.0,
                   "reference_samples": 1_000_000},
    "recovery-sweep": {"d": 128, "n": 256,
                       "sigma": list(recovery.DEFAULT_GRID["sigma"]),
                       "k": list(recovery.DEFAULT_GRID["k"]),
                       "trials": recovery.DEFAULT_GRID["trials"],
                       "eps_multiplier": 1.0},
    "train": dict(_TRAIN_KEYS),
    "ablate": {"seeds": 5, **{k: v for k, v in _TRAIN_KEYS.items()
                              if k != "variant"}},
    "eval": {"params": "", "dataset": "", "classes": 3},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """``key=value`` and ``--key value`` forms; values parsed as JSON
    when possible, kept as strings otherwise."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        key = tok[2:] if tok.startswith("--") else tok
        if "=" in key:
            key, _, val = key.partition("=")
            out[key] = _parse_value(val)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ValueError(f"override '{tok}' is missing a value")
            out[key] = _parse_value(tokens[i + 1])
            i += 2
    return out


def resolve_config(subcommand: str, config_path, overrides: dict) -> dict:
    config = dict(DEFAULTS[subcommand])
    if config_path is not None:
        loaded = json.loads(Path(config_path).read_text())
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        for key in loaded:
            if key not in config:
                raise KeyError(key)
        config.update(loaded)
    for key in overrides:
        if key not in config:
            raise KeyError(key)
    config.update(overrides)
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _signal(config: dict) -> np.ndarray:
    dim = int(config["dim"])
    if config["signal"] == "ones":
        return np.ones(dim)
    if config["signal"] == "gaussian":
        return np.random.default_rng(0).normal(size=dim)
    raise ValueError(f"unknown signal kind '{config['signal']}'")


# -- subcommand bodies ------------------------------------------------
# each returns (files: {name: (columns, rows) | dict}, report, check_ok)

def cmd_theory_ip(config, seed):
    x = _signal(config)
    rows, checks = [], []
    for i, kind in enumerate(("complementary", "random")):
        s = theory.ip_experiment(x, kind, int(config["trials"]), child_int(seed, i))
        rows.append(("ip", s.kind, s.trials, s.mean, s.variance,
                     s.predicted_mean, s.predicted_variance, seed))
        if kind == "complementary":
            checks.append(s.mean == 0.0 and s.variance == 0.0)
        else:
            checks.append(abs(s.mean - 0.25) <= 0.01
                          and abs(s.variance - s.predicted_variance)
                          <= 0.1 * s.predicted_variance)
    return ({"results.csv": (THEORY_COLUMNS, rows)},
            {"derived_seeds": [child_int(seed, i) for i in range(2)]},
            all(checks))


def cmd_theory_multiview(config, seed):
    x = _signal(config)
    rows, flags, checks = [], {}, []
    for i, k in enumerate(config["ways"]):
        s = theory.multiview_experiment(x, int(k), int(config["trials"]),
                                        child_int(seed, i))
        rows.append((f"multiview_k{k}", s.kind, s.trials, s.mean, s.variance,
                     s.predicted_mean, s.predicted_variance, seed))
        flags[f"k={k}"] = {"discrepancy": s.discrepancy,
                           "measured_mean": s.mean,
                           "predicted_mean": s.predicted_mean}
        checks.append(s.mean == 0.0 and s.discrepancy)
    report = {"discrepancy_flags": flags,
              "note": "disjoint supports force the measured mean to 0; the "
                      "1/K^2 prediction is reported alongside, not asserted",
              "derived_seeds": [child_int(seed, i)
                                for i in range(len(config["ways"]))]}
    return ({"results.csv": (THEORY_COLUMNS, rows), "report.json": report},
            report, all(checks))


def cmd_theory_fce(config, seed):
    model = theory.DataModelSpec(
        dims=(int(config["dim"]),), sparse_support=int(config["sparse_support"]),
        env_norm=float(config["env_norm"]), env_freq=float(config["env_freq"]),
        sigma=float(config["sigma"]))
    fmap = theory.FeatureMapSpec(kind=config["feature_kind"],
                                 out_dim=int(config["feature_dim"]),
                                 weight_seed=child_int(seed, 0),
                                 beta=float(config["beta"]))
    summary = theory.fce_experiment(model, fmap, int(config["trials"]),
                                    child_int(seed, 1))
    bound = {"complementary": summary.bound_complementary_unit,
             "random": summary.bound_random_unit}
    rows = [("fce", s.kind, summary.trials, s.mean, s.variance,
             bound[s.kind], float("nan"), seed) for s in summary.stats]
    report = {"bound_complementary": summary.bound_complementary,
              "bound_random": summary.bound_random,
              "bound_complementary_unit": summary.bound_complementary_unit,
              "bound_random_unit": summary.bound_random_unit,
              "p95": {s.kind: s.p95 for s in summary.stats},
              "delta": summary.delta,
              "derived_seeds": [child_int(seed, 0), child_int(seed, 1)]}
    return ({"results.csv": (THEORY_COLUMNS, rows), "report.json": report},
            report, None)


def cmd_theory_gap(config, seed):
    fmap = theory.FeatureMapSpec(kind=config["feature_kind"],
                                 out_dim=int(config["feature_dim"]),
                                 weight_seed=child_int(seed, 0),
                                 beta=float(config["beta"]))
    table = theory.gap_experiment(
        fmap, theory.bounded_pair_loss, [int(n) for n in config["n_values"]],
        int(config["trials"]), child_int(seed, 1), dim=int(config["dim"]),
        reference_samples=int(config["reference_samples"]))
    rows = [(f"gap_n{r.n}", r.kind, int(config["trials"]), r.mean_gap,
             float("nan"), float("nan"), float("nan"), seed)
            for r in table.rows]
    for kind, slope in sorted(table.slopes.items()):
        rows.append(("gap_slope", kind, int(config["trials"]), slope,
                     float("nan"), float("nan"), float("nan"), seed))
    report = {"slopes": table.slopes, "population_loss": table.population,
              "derived_seeds": [child_int(seed, 0), child_int(seed, 1)]}
    ok = -0.8 <= table.slopes["complementary"] <= -0.2
    return ({"results.csv": (THEORY_COLUMNS, rows), "report.json": report},
            report, ok)


def cmd_recovery_sweep(config, seed):
    grid = {"sigma": tuple(config["sigma"]), "k": tuple(config["k"]),
            "trials": int(config["trials"])}
    cells = recovery.sweep_compare(grid, seed=seed, d=int(config["d"]),
                                   n=int(config["n"]),
                                   eps_multiplier=float(config["eps_multiplier"]))
    rows = [(c.d, c.n, c.k, c.sigma, c.kind, c.trial, c.error, c.iterations,
             int(c.converged), c.theory_rate) for c in cells]
    medians = recovery.sweep_medians(cells)
    won = total = 0
    for sigma in grid["sigma"]:
        for k in grid["k"]:
            total += 1
            comp = medians[(float(sigma), int(k), "complementary")][0]
            rand = medians[(float(sigma), int(k), "random")][0]
            won += comp <= rand
    report = {"medians": {f"sigma={s},k={k},{kind}": list(v)
                          for (s, k, kind), v in sorted(medians.items())},
              "cells_where_complementary_wins": won, "cells_total": total,
              "derived_seeds": [seed]}
    return ({"results.csv": (SWEEP_COLUMNS, rows), "report.json": report},
            report, won >= math.ceil(0.9 * total))


def _domain_pair(config):
    base = datagen.DomainSpec(size=int(config["size"]),
                              classes=int(config["classes"]))
    shift = {"offset": float(config["shift_offset"]),
             "noise": float(config["shift_noise"]),
             "frequency_factor": float(config["shift_frequency_factor"])}
    return datagen.make_shift_pair(base, shift)


def _train_config(config, variant, seed):
    patch = config["patch"]
    return trainer.TrainConfig(
        variant=variant, mask_ratio=float(config["mask_ratio"]),
        patch=None if patch is None else int(patch),
        lambda_cm=float(config["lambda_cm"]), lam=float(config["lam"]),
        threshold=float(config["threshold"]),
        ema_decay=float(config["ema_decay"]), lr=float(config["lr"]),
        iterations=int(config["iterations"]),
        batch_size=int(config["batch_size"]),
        adain_align=bool(config["adain_align"]), seed=seed)


def _metric_rows(variant, seed, result):
    tm = result.target_metrics
    rows = []
    for c in range(len(tm["iou"])):
        rows.append((variant, seed, c, float(tm["iou"][c]), float(tm["f1"][c]),
                     float(tm["mcc"][c]), tm["map"], tm["miou"]))
    return rows


def cmd_train(config, seed):
    src, tgt = _domain_pair(config)
    result = trainer.train_run(_train_config(config, config["variant"], seed),
                               src, tgt)
    rows = _metric_rows(config["variant"], seed, result)
    report = {"source_miou": result.source_metrics["miou"],
              "target_miou": result.target_metrics["miou"],
              "derived_seeds": [seed]}
    files = {"results.csv": (METRIC_COLUMNS, rows), "report.json": report,
             "loss_log.jsonl": result.loss_log,
             "params.npz": {n: p.value for n, p in result.params.items()}}
    return files, report, None


def cmd_ablate(config, seed):
    src, tgt = _domain_pair(config)
    seeds = [child_int(seed, s) for s in range(int(config["seeds"]))]
    rows, mious, maps = [], {}, {}
    for variant in trainer.VARIANTS:
        mious[variant], maps[variant] = [], []
        for run_seed in seeds:
            result = trainer.train_run(_train_config(config, variant, run_seed),
                                       src, tgt)
            rows.extend(_metric_rows(variant, run_seed, result))
            mious[variant].append(result.target_metrics["miou"])
            maps[variant].append(result.target_metrics["map"])
    means = {v: float(np.mean(mious[v])) for v in trainer.VARIANTS}
    for variant in trainer.VARIANTS:
        rows.append((variant, "all", "mean", "", "", "",
                     float(np.mean(maps[variant])), means[variant]))
    ok = (means["complementary"] >= means["random_mask"] >=
          means["source_only"]
          and means["complementary"] - means["source_only"] >= 0.05)
    report = {"mean_target_miou": means,
              "per_seed_target_miou": mious, "derived_seeds": seeds}
    return ({"results.csv": (METRIC_COLUMNS, rows), "report.json": report},
            report, ok)


def cmd_eval(config, seed):
    if not config["params"]:
        raise ValueError("eval needs params=<path to params.npz>")
    loaded = np.load(config["params"])
    params = {name: trainer.Param(name, loaded[name]) for name in loaded.files}
    if config["dataset"]:
        samples = datagen.load_dataset(config["dataset"])
    else:
        _, tgt = datagen.make_shift_pair(datagen.DomainSpec(
            classes=int(config["classes"])))
        samples = datagen.gen_domain(tgt, trainer.DATASET_SIZES["target_val"],
                                     start=3000)
    m = trainer.evaluate(params, samples, int(config["classes"]))
    rows = [("eval", seed, c, float(m["iou"][c]), float(m["f1"][c]),
             float(m["mcc"][c]), m["map"], m["miou"])
            for c in range(len(m["iou"]))]
    return ({"results.csv": (METRIC_COLUMNS, rows)},
            {"miou": m["miou"], "map": m["map"], "derived_seeds": [seed]}, None)


COMMANDS = {
    "theory-ip": cmd_theory_ip,
    "theory-multiview": cmd_theory_multiview,
    "theory-fce": cmd_theory_fce,
    "theory-gap": cmd_theory_gap,
    "recovery-sweep": cmd_recovery_sweep,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="compmask",
        description="batch experiment runner; see module docstring for the "
                    "config resolution and exit code conventions")
    p.add_argument("subcommand", choices=sorted(COMMANDS))
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--check", action="store_true",
                   help="exit 4 unless the run meets its stated bounds")
    return p


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        overrides = parse_overrides(rest)
        config = resolve_config(args.subcommand, args.config, overrides)
    except KeyError as exc:
        print(f"unknown config key {exc} for '{args.subcommand}'; valid keys: "
              f"{', '.join(sorted(DEFAULTS[args.subcommand]))}",
              file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        files, report, check_ok = COMMANDS[args.subcommand](config, args.seed)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    for name, payload in files.items():
        path = out / name
        if name.endswith(".csv"):
            write_csv(path, *payload)
        elif name.endswith(".jsonl"):
            path.write_text("".join(json.dumps(r) + "\n" for r in payload))
        elif name.endswith(".npz"):
            np.savez(path, **payload)
        else:
            path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    manifest = {
        "schema_version": 1,
        "artifact_version": __version__,
        "subcommand": args.subcommand,
        "config": config,
        "config_hash": config_hash(config),
        "master_seed": args.seed,
        "derived_seeds": report.get("derived_seeds", [args.seed]),
        "wall_time_s": time.time() - started,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"{args.subcommand}: wrote {', '.join(sorted(files))} to {out}")
    if args.check and check_ok is False:
        print("check failed: run violates its stated bounds", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
