"""Command-line workflow: simulate, train, eval, ablate, explain and glm.

Exit codes: 0 ok, 2 usage/config/data error, 3 simulation error,
4 training divergence, 5 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, IncompatibleCheckpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import DataError, Dataset, compute_class_weights, compute_type_frequencies, parse_sequences, split_dataset, write_sequences
from .evaluation import evaluate, export_explanations
from .glm import GlmParams, fit_glm, glm_evaluate
from .simulate import CohortConfig, SimulationError, make_imbalanced_cohort
from .training import TrainingDiverged, train, write_metrics

EXIT_OK, EXIT_CONFIG, EXIT_SIMULATION, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5

log = logging.getLogger("thphealth")


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config, inputs, outputs, seed, started) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "checksums": {k: _sha256(v) for k, v in outputs.items() if Path(v).is_file()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _now():
    return datetime.now(timezone.utc).isoformat()


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return data


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training config keys (flag > --config file > default)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _parse_bool if f.type in (bool, "bool") else type(f.default)
        group.add_argument(flag, dest=f"cfg_{f.name}", type=kind, default=None, metavar=f.name.upper(), help=f"default: {f.default}")


def _resolve_train_config(args) -> TrainConfig:
    data = _read_json(args.config)
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            data[f.name] = value
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from None


def _load_data(path, K=None, type_names=None) -> Dataset:
    if not Path(path).is_file():
        raise CliError(f"data file not found: {path}")
    try:
        return parse_sequences(path, K=K, type_names=type_names)
    except DataError as exc:
        raise CliError(f"{path}: {exc}") from None


def _load_for_checkpoint(path, ckpt, num_types=None) -> Dataset:
    if num_types is not None and num_types != ckpt.K:
        raise CliError(f"incompatible event-type count: checkpoint has K={ckpt.K}, --num-types={num_types}", EXIT_INCOMPATIBLE)
    try:
        return parse_sequences(path, type_names=ckpt.type_names)
    except DataError as exc:
        if "out of range" in str(exc):
            raise CliError(f"incompatible event-type count: {exc}", EXIT_INCOMPATIBLE) from None
        raise CliError(f"{path}: {exc}") from None
    except FileNotFoundError:
        raise CliError(f"data file not found: {path}") from None


def _load_ckpt(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE) from None


def _splits(args, cfg_seed, fraction, K, type_names=None):
    data = _load_data(args.data, K=K, type_names=type_names)
    if args.eval_data:
        return data, _load_data(args.eval_data, type_names=data.type_names)
    if len(data) < 2:
        raise CliError("need at least 2 patients to split; pass --eval-data explicitly")
    return split_dataset(data, fraction, cfg_seed)


# commands


def cmd_simulate(args) -> int:
    started = _now()
    raw = _read_json(args.config)
    for key in ("n_patients", "seed", "horizon_days", "min_events"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    if args.preset:
        raw["preset"] = args.preset
    try:
        cohort = CohortConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid cohort config: {exc}") from None
    try:
        dataset = make_imbalanced_cohort(cohort, threads=args.threads)
    except SimulationError as exc:
        raise CliError(str(exc), EXIT_SIMULATION) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sequences(dataset, out)
    manifest = Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json")
    write_manifest(manifest, "simulate", cohort.to_dict(), {"config": args.config}, {"dataset": out}, cohort.seed, started)
    print(f"wrote {len(dataset)} sequences ({dataset.n_events} events) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve_train_config(args)
    train_set, eval_set = _splits(args, cfg.seed, cfg.train_fraction, cfg.K)
    if train_set.K != cfg.K:
        raise CliError("data K does not match config K")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": out / "checkpoint.thp",
        "metrics": out / "metrics.csv",
        "train_split": out / "train.jsonl",
        "eval_split": out / "eval.jsonl",
    }
    write_sequences(train_set, paths["train_split"])
    write_sequences(eval_set, paths["eval_split"])
    code = EXIT_OK
    try:
        ckpt = train(cfg, train_set, eval_set, metrics_path=paths["metrics"], progress=args.verbose)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        ckpt = exc.checkpoint
        write_metrics(exc.metrics, paths["metrics"])
        code = EXIT_DIVERGED
    except (ValueError, DataError) as exc:
        raise CliError(str(exc)) from None
    if ckpt is not None:
        save_checkpoint(ckpt, paths["checkpoint"])
    if cfg.epochs == 0:
        write_metrics([], paths["metrics"])
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), {"data": args.data, "eval_data": args.eval_data}, paths, cfg.seed, started)
    if code == EXIT_OK:
        best = {k: v for k, v in ckpt.best.items() if k != "metrics"}
        print(json.dumps({"best": best}, sort_keys=True))
    return code


def cmd_eval(args) -> int:
    started = _now()
    ckpt = _load_ckpt(args.checkpoint)
    data = _load_for_checkpoint(args.data, ckpt, args.num_types)
    try:
        report = evaluate(ckpt, data, intensity_time=not args.no_intensity_time)
    except IncompatibleCheckpoint as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    write_manifest(out.with_suffix(".manifest.json"), "eval", {"intensity_time": not args.no_intensity_time}, {"checkpoint": args.checkpoint, "data": args.data}, {"report": out}, ckpt.config.seed, started)
    print(report.to_json())
    return EXIT_OK


def cmd_explain(args) -> int:
    started = _now()
    ckpt = _load_ckpt(args.checkpoint)
    data = _load_for_checkpoint(args.data, ckpt)
    try:
        seq = data.by_id(args.patient_id)
    except KeyError:
        raise CliError(f"unknown patient id {args.patient_id!r}") from None
    paths = export_explanations(ckpt, seq, args.out, n_points=args.n_points, bucket_width=args.bucket_width)
    write_manifest(
        Path(args.out) / f"{Path(paths['heatmap']).stem.rsplit('_', 1)[0]}_manifest.json",
        "explain",
        {"patient_id": args.patient_id, "n_points": args.n_points, "bucket_width": args.bucket_width},
        {"checkpoint": args.checkpoint, "data": args.data},
        paths,
        ckpt.config.seed,
        started,
    )
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_glm_train(args) -> int:
    started = _now()
    cfg = _read_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    fraction = args.train_fraction if args.train_fraction is not None else float(cfg.get("train_fraction", 0.8))
    window = args.window if args.window is not None else float(cfg.get("window_days", 100.0))
    l2 = args.l2 if args.l2 is not None else float(cfg.get("l2", 1e-3))
    weighted = args.class_weighted if args.class_weighted is not None else bool(cfg.get("class_weighted", False))
    train_set, eval_set = _splits(args, seed, fraction, args.num_types)
    weights = compute_class_weights(compute_type_frequencies(train_set)).as_array() if weighted else None
    params = fit_glm(train_set, window_days=window, l2=l2, class_weights=weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"params": out / "glm_params.json", "report": out / "glm_report.json", "eval_split": out / "eval.jsonl"}
    params.save(paths["params"])
    write_sequences(eval_set, paths["eval_split"])
    report = glm_evaluate(params, eval_set)
    report.to_json(paths["report"])
    resolved = {"seed": seed, "train_fraction": fraction, "window_days": window, "l2": l2, "class_weighted": weighted}
    write_manifest(out / "manifest.json", "glm train", resolved, {"data": args.data, "eval_data": args.eval_data}, paths, seed, started)
    print(report.to_json())
    return EXIT_OK


def cmd_glm_eval(args) -> int:
    started = _now()
    if not Path(args.params).is_file():
        raise CliError(f"GLM parameter file not found: {args.params}")
    params = GlmParams.load(args.params)
    data = _load_data(args.data, K=params.K)
    try:
        report = glm_evaluate(params, data, window_days=args.window)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    write_manifest(out.with_suffix(".manifest.json"), "glm eval", {"window_days": report.extra["window_days"]}, {"params": args.params, "data": args.data}, {"report": out}, None, started)
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Weighted vs unweighted cross-entropy (and the GLM) over several seeds."""
    started = _now()
    base = _resolve_train_config(args)
    data = _load_data(args.data, K=base.K)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in seeds:
        cfg = base.replace(seed=seed)
        tr, ev = split_dataset(data, cfg.train_fraction, seed)
        row = {"seed": seed}
        for arm, weighted in (("weighted", True), ("unweighted", False)):
            t0 = time.time()
            try:
                ckpt = train(cfg.replace(weighted_ce=weighted), tr, ev, progress=args.verbose)
            except TrainingDiverged as exc:
                raise CliError(str(exc), EXIT_DIVERGED) from None
            row[arm] = evaluate(ckpt, ev, intensity_time=False).to_dict()
            row[arm]["seconds"] = time.time() - t0
        row["glm"] = glm_evaluate(fit_glm(tr, window_days=args.window), ev).to_dict()
        runs.append(row)
        log.info("seed %d done", seed)

    def med(arm, key, idx=None):
        vals = [r[arm][key] if idx is None else r[arm][key][idx] for r in runs]
        return float(np.median(vals))

    K = data.K
    summary = {
        arm: {
            "macro_f1": med(arm, "macro_f1"),
            "medae_days": med(arm, "medae_days"),
            "per_class_f1": [med(arm, "per_class_f1", k) for k in range(K)],
        }
        for arm in ("weighted", "unweighted", "glm")
    }
    result = {"type_names": list(data.type_names), "seeds": seeds, "median": summary, "runs": runs}
    path = out / "ablation.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.json", "ablate", base.to_dict(), {"data": args.data}, {"ablation": path}, seeds, started)
    print(json.dumps({"median": summary}, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thphealth", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a synthetic Hawkes cohort to JSON Lines")
    p.add_argument("--config", help="cohort config JSON (mu, A, delta, horizon_days, n_patients, seed, min_events, type_names, preset)")
    p.add_argument("--preset", help="named parameter preset: two-type, paper-like")
    p.add_argument("--out", required=True, help="output dataset path (.jsonl)")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--n-patients", dest="n_patients", type=int, help="default: 500")
    p.add_argument("--seed", type=int, help="default: 0")
    p.add_argument("--horizon-days", dest="horizon_days", type=float, help="default: 730")
    p.add_argument("--min-events", dest="min_events", type=int, help="drop patients with fewer events (default: 0)")
    p.add_argument("--threads", type=int, default=1, help="worker processes (default: 1)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the Hawkes transformer", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--data", required=True, help="dataset JSON Lines")
    p.add_argument("--eval-data", dest="eval_data", help="explicit evaluation split (skips the random split)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--num-types", dest="num_types", type=int, help="expected number of event types")
    p.add_argument("--no-intensity-time", action="store_true", help="skip the intensity-based time estimator")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="export intensity, recency and attention CSVs for one patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient-id", dest="patient_id", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-points", dest="n_points", type=int, default=101, help="s-grid size (default: 101)")
    p.add_argument("--bucket-width", dest="bucket_width", type=float, default=7.0, help="recency lag bucket in days (default: 7)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="weighted vs unweighted CE and the GLM over several seeds")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: 0,1,2)")
    p.add_argument("--window", type=float, default=100.0, help="GLM window in days (default: 100)")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("glm", help="count-feature GLM baseline")
    gsub = p.add_subparsers(dest="glm_command", required=True)
    g = gsub.add_parser("train", help="fit on a split and report on the held-out part")
    g.add_argument("--config", help="JSON with seed, train_fraction, window_days, l2, class_weighted")
    g.add_argument("--data", required=True)
    g.add_argument("--eval-data", dest="eval_data")
    g.add_argument("--out", required=True)
    g.add_argument("--num-types", dest="num_types", type=int, help="default: 3")
    g.add_argument("--seed", type=int, help="default: 0")
    g.add_argument("--train-fraction", dest="train_fraction", type=float, help="default: 0.8")
    g.add_argument("--window", type=float, help="window_days, default: 100")
    g.add_argument("--l2", type=float, help="default: 0.001")
    g.add_argument("--class-weighted", dest="class_weighted", type=_parse_bool, help="default: false")
    g.set_defaults(func=cmd_glm_train)
    g = gsub.add_parser("eval", help="evaluate fitted GLM parameters")
    g.add_argument("--params", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--window", type=float, help="override the fitted window")
    g.set_defaults(func=cmd_glm_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
