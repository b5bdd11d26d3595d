"""
EffIQ command line
Runs the energy-efficiency pipeline stage by stage:
synth | ingest | label | featurize | split | gridsearch | train | predict | evaluate | report
"""

import argparse
import glob
import json
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import baselines
import config
import energy_labels
import ensemble
import eval_stats
import featurize
import figures
import synth
import ved_ingest
from featurize import TASKS, Task, task_label
from logger_config import attach_run_log, detach_run_log, get_logger
from validation import InsufficientDataError, RunConfigValidator, ValidationError, require_file
from ved_ingest import VehicleType

logger = get_logger("CLI")

ENN, NN, LR = "ENN", "NN", "LR"
ENN_DIR, NN_DIR, LR_FILE = "enn", "nn", "lr.meta"
TARGET_UNITS = {Task.FUEL: "km/L", Task.BATTERY: "km/kWh"}

# flag dest -> RunConfig field
COMMON_FLAGS = {
    "seed": "seed", "members": "members", "epochs": "epochs", "batch": "batch", "lr": "lr",
    "adv_eps": "adv_eps", "clusters": "clusters", "train_frac": "train_frac",
    "vehicle_type": "vehicle_type", "energy": "energy", "out": "out",
}
SYNTH_FLAGS = {"days": "synth_days", "trips_per_day": "synth_trips_per_day", "noise_scale": "synth_noise_scale"}


class Workspace:
    """Paths of every stage file inside the --out directory"""

    def __init__(self, out: str):
        self.out = out

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def require(self, name: str, stage: str) -> str:
        return require_file(self.path(name), stage)


def selected_tasks(cfg: config.RunConfig) -> List[Tuple[VehicleType, Task]]:
    """The six tasks filtered by --vehicle-type / --energy"""
    chosen = []
    for vehicle_type, task in TASKS:
        if cfg.vehicle_type and vehicle_type.value != cfg.vehicle_type.upper():
            continue
        if cfg.energy and task.value != cfg.energy.lower():
            continue
        chosen.append((vehicle_type, task))
    if not chosen:
        raise ValidationError(f"No task matches vehicle type {cfg.vehicle_type} and energy {cfg.energy}")
    return chosen


def write_snapshot(cfg: config.RunConfig, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, config.RUN_CONFIG_FILE), "w", encoding="utf-8", newline="\n") as handle:
        handle.write(cfg.to_text())


def write_json(document: Dict, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _load_trips(ws: Workspace, cfg: config.RunConfig, stage: str):
    static_map = ved_ingest.read_vehicles(ws.require(config.VEHICLES_FILE, "ingest"))
    trips = ved_ingest.read_trips(ws.require(config.TRIPS_FILE, "ingest"), static_map, cfg.epoch_date)
    logger.info(f"{stage}: loaded {len(trips)} trips")
    return trips


def cmd_synth(cfg: config.RunConfig, args, ws: Workspace) -> None:
    result = synth.generate(synth.SynthConfig.from_run_config(cfg), ws.out)
    logger.info(f"Synthetic dataset: {result.n_trips} trips in {len(result.dynamic_paths)} files")


def _dynamic_paths(sources: Sequence[str]) -> List[str]:
    paths = []
    for source in sources:
        if os.path.isdir(source):
            paths.extend(sorted(glob.glob(os.path.join(source, "*.csv"))))
        else:
            paths.append(require_file(source, "synth"))
    if not paths:
        raise InsufficientDataError(f"No dynamic CSV files found in {list(sources)}")
    return paths


def cmd_ingest(cfg: config.RunConfig, args, ws: Workspace) -> None:
    dynamic = _dynamic_paths(args.dynamic or [ws.path(config.RAW_DIR)])
    statics = args.static or [ws.require(config.STATIC_FILE, "synth")]
    for path in statics:
        require_file(path, "synth")
    static = ved_ingest.parse_static_files(statics)
    parsed = ved_ingest.parse_dynamic_files(dynamic, threads=cfg.threads)
    assembled = ved_ingest.assemble_trips(parsed.groups, static.vehicles, cfg.epoch_date)
    if not assembled.trips:
        raise InsufficientDataError("No trip could be assembled from the dynamic files")

    ved_ingest.write_trips(assembled.trips, ws.path(config.TRIPS_FILE))
    ved_ingest.write_vehicles(static.vehicles, ws.path(config.VEHICLES_FILE))
    summary = ved_ingest.summarize(assembled.trips, static.vehicles)
    write_json({
        "summary": summary.to_dict(),
        "skipped_rows": parsed.skipped.to_dict(),
        "rejected_static_rows": static.rejected,
        "dropped_trips": assembled.dropped_trips,
        "missing_vehicles": assembled.missing_vehicles,
        "duplicate_samples": assembled.duplicate_samples,
        "files": [os.path.basename(p) for p in dynamic],
    }, ws.path(config.INGEST_SUMMARY_FILE))
    logger.info(f"Ingested {summary.n_trips} trips, {summary.total_distance_km:.1f} km "
                f"from {summary.n_vehicles} vehicles")


def cmd_label(cfg: config.RunConfig, args, ws: Workspace) -> None:
    trips = _load_trips(ws, cfg, "label")
    constants = energy_labels.FcrConstants(afr=cfg.afr, rho_air=cfg.rho_air, fuel_density=cfg.fuel_density)
    filters = energy_labels.LabelFilters(
        min_duration_s=cfg.min_duration_s, min_distance_km=cfg.min_distance_km,
        max_fuel_eff=cfg.max_fuel_eff, max_batt_eff=cfg.max_batt_eff,
        fcr_min_coverage=cfg.fcr_min_coverage, battery_sign=cfg.battery_sign,
    )
    energies, report = energy_labels.label_trips(trips, constants, filters, threads=cfg.threads)
    energy_labels.write_labeled(energies, ws.path(config.LABELED_FILE))
    write_json(report.to_dict(), ws.path(config.LABEL_REPORT_FILE))


def cmd_featurize(cfg: config.RunConfig, args, ws: Workspace) -> None:
    energies = energy_labels.read_labeled(ws.require(config.LABELED_FILE, "label"))
    trips = _load_trips(ws, cfg, "featurize")
    by_key = energy_labels.energies_by_key(energies)
    labeled_trips = [t for t in trips if t.key in by_key and not by_key[t.key].rejected]
    if not labeled_trips:
        raise InsufficientDataError("No labeled trip to featurize")

    clusters = featurize.fit_od_clusters(labeled_trips, cfg.clusters, cfg.seed, cfg.kmeans_max_iter)
    rows = featurize.build_labeled_trips(trips, by_key, clusters)
    featurize.write_features(rows, ws.path(config.FEATURES_FILE), featurize.feature_names(clusters.k))
    featurize.write_clusters(clusters, ws.path(config.CLUSTERS_FILE))

    od = featurize.od_matrix(labeled_trips)
    od_rows = [[t.veh_id, t.trip_id] + [ved_ingest.format_cell(float(v)) for v in point]
               + [str(featurize.assign_cluster(clusters, point))]
               for t, point in zip(labeled_trips, od)]
    pd.DataFrame(od_rows, columns=["veh_id", "trip_id", "origin_lat", "origin_lon", "dest_lat", "dest_lon",
                                   "cluster"], dtype=str).to_csv(ws.path(config.OD_FILE), index=False)


def cmd_split(cfg: config.RunConfig, args, ws: Workspace) -> None:
    rows = featurize.read_features(ws.require(config.FEATURES_FILE, "featurize"))
    names = rows[0].feature_names if rows else None
    train_rows, test_rows = [], []
    for vehicle_type, task in TASKS:
        task_rows = featurize.select_task(rows, vehicle_type, task)
        if not task_rows:
            continue
        train, test = featurize.stratified_split(task_rows, cfg.train_frac, cfg.seed)
        train_rows.extend(train)
        test_rows.extend(test)
        logger.info(f"{task_label(vehicle_type, task)}: {len(train)} train / {len(test)} test trips")
    if not train_rows:
        raise InsufficientDataError("features.csv holds no labeled trip")
    featurize.write_features(train_rows, ws.path(config.TRAIN_FILE), names)
    featurize.write_features(test_rows, ws.path(config.TEST_FILE), names)


def _task_rows(rows, cfg: config.RunConfig) -> List[Tuple[VehicleType, Task, list]]:
    usable = []
    for vehicle_type, task in selected_tasks(cfg):
        task_rows = featurize.select_task(rows, vehicle_type, task)
        if len(task_rows) < cfg.min_task_trips:
            logger.warning(f"{task_label(vehicle_type, task)}: only {len(task_rows)} training trips "
                           f"(minimum {cfg.min_task_trips}); skipped")
            continue
        usable.append((vehicle_type, task, task_rows))
    if not usable:
        raise InsufficientDataError("No selected task has enough training trips")
    return usable


def _grid_lrs(ws: Workspace) -> Dict[str, float]:
    path = require_file(ws.path(config.GRIDSEARCH_FILE), "gridsearch")
    with open(path, "r", encoding="utf-8") as handle:
        return {label: result["best_lr"] for label, result in json.load(handle).items()}


def cmd_gridsearch(cfg: config.RunConfig, args, ws: Workspace) -> None:
    rows = featurize.read_features(ws.require(config.TRAIN_FILE, "split"))
    base = ensemble.EnsembleConfig.from_run_config(cfg)
    results = {}
    for vehicle_type, task, task_rows in _task_rows(rows, cfg):
        result = ensemble.grid_search_lr(task_rows, None, cfg.lr_grid, base, cfg.grid_epochs, cfg.grid_train_frac)
        results[task_label(vehicle_type, task)] = result.to_dict()
    write_json(results, ws.path(config.GRIDSEARCH_FILE))


def cmd_train(cfg: config.RunConfig, args, ws: Workspace) -> None:
    rows = featurize.read_features(ws.require(config.TRAIN_FILE, "split"))
    base = ensemble.EnsembleConfig.from_run_config(cfg)
    grid = _grid_lrs(ws) if args.use_grid else {}
    models_dir = ws.path(config.MODELS_DIR)
    for vehicle_type, task, task_rows in _task_rows(rows, cfg):
        label = task_label(vehicle_type, task)
        member_cfg = replace(base, lr=grid[label]) if label in grid else base
        task_dir = os.path.join(models_dir, label)
        ensemble.save_model(ensemble.train(task_rows, member_cfg), os.path.join(task_dir, ENN_DIR))
        ensemble.save_model(baselines.single_nn(task_rows, member_cfg), os.path.join(task_dir, NN_DIR))
        baselines.save_linear(baselines.fit_linear_baseline(task_rows, cfg.ridge_eps),
                              os.path.join(task_dir, LR_FILE))
    write_snapshot(cfg, models_dir)


def _trained_tasks(ws: Workspace, cfg: config.RunConfig) -> List[Tuple[VehicleType, Task, str]]:
    models_dir = ws.path(config.MODELS_DIR)
    require_file(models_dir, "train")
    found = []
    for vehicle_type, task in selected_tasks(cfg):
        task_dir = os.path.join(models_dir, task_label(vehicle_type, task))
        if os.path.isdir(task_dir):
            found.append((vehicle_type, task, task_dir))
    if not found:
        raise InsufficientDataError(f"No trained model under {models_dir} for the selected tasks")
    return found


def cmd_predict(cfg: config.RunConfig, args, ws: Workspace) -> None:
    rows = featurize.read_features(ws.require(config.TEST_FILE, "split"))
    preds_dir = ws.path(config.PREDS_DIR)
    for vehicle_type, task, task_dir in _trained_tasks(ws, cfg):
        label = task_label(vehicle_type, task)
        test_rows = featurize.select_task(rows, vehicle_type, task)
        if not test_rows:
            logger.warning(f"{label}: no test trips; nothing to predict")
            continue
        out_dir = os.path.join(preds_dir, label)
        os.makedirs(out_dir, exist_ok=True)
        enn = ensemble.load_model(require_file(os.path.join(task_dir, ENN_DIR), "train"))
        ensemble.write_predictions(ensemble.predict(enn, test_rows), os.path.join(out_dir, f"{ENN}.csv"))
        nn = ensemble.load_model(require_file(os.path.join(task_dir, NN_DIR), "train"))
        ensemble.write_predictions(ensemble.predict(nn, test_rows), os.path.join(out_dir, f"{NN}.csv"))
        linear = baselines.load_linear(require_file(os.path.join(task_dir, LR_FILE), "train"))
        ensemble.write_predictions(baselines.predict_linear(linear, test_rows), os.path.join(out_dir, f"{LR}.csv"))
    write_snapshot(cfg, preds_dir)


def _external_sources(specs: Optional[Sequence[str]]) -> List[Tuple[str, str]]:
    """'NAME=path' or 'path' (named after the file stem)"""
    sources = []
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(spec))[0], spec
        sources.append((name, require_file(path, "an external baseline")))
    return sources


def _predicted_tasks(ws: Workspace, cfg: config.RunConfig) -> List[Tuple[VehicleType, Task, str]]:
    preds_dir = ws.path(config.PREDS_DIR)
    require_file(preds_dir, "predict")
    found = []
    for vehicle_type, task in selected_tasks(cfg):
        task_dir = os.path.join(preds_dir, task_label(vehicle_type, task))
        if os.path.exists(os.path.join(task_dir, f"{ENN}.csv")):
            found.append((vehicle_type, task, task_dir))
    if not found:
        raise InsufficientDataError(f"No {ENN} predictions under {preds_dir} for the selected tasks")
    return found


def cmd_evaluate(cfg: config.RunConfig, args, ws: Workspace) -> None:
    externals = [(name, ensemble.read_predictions(path)) for name, path in _external_sources(args.external)]
    reports = []
    for vehicle_type, task, task_dir in _predicted_tasks(ws, cfg):
        predictions = {}
        for name in (ENN, NN, LR):
            path = os.path.join(task_dir, f"{name}.csv")
            if os.path.exists(path):
                predictions[name] = ensemble.read_predictions(path)
        for name, records in externals:
            matching = [r for r in records if r.task is task]
            if matching:
                predictions[name] = matching
        reports.append(eval_stats.evaluate_task(predictions, vehicle_type, task, level=cfg.coverage_level,
                                                exact_max_n=cfg.wilcoxon_exact_max_n))
    eval_dir = ws.path(config.EVAL_DIR)
    eval_stats.write_report(reports, eval_dir, extras={"external": [name for name, _ in externals]})
    write_snapshot(cfg, eval_dir)


def cmd_report(cfg: config.RunConfig, args, ws: Workspace) -> None:
    ws.require(os.path.join(config.EVAL_DIR, config.REPORT_JSON), "evaluate")
    figures_dir = ws.path(config.FIGURES_DIR)
    written = []
    for vehicle_type, task, task_dir in _predicted_tasks(ws, cfg):
        label = task_label(vehicle_type, task)
        monthly = eval_stats.monthly_report(ensemble.read_predictions(os.path.join(task_dir, f"{ENN}.csv")))
        fig = figures.month_band_figure(monthly, f"{vehicle_type.value} {task.value} efficiency per month",
                                        TARGET_UNITS[task])
        written.append(figures.write_svg(fig, os.path.join(figures_dir, f"{label}.svg")))

    energies = energy_labels.read_labeled(ws.require(config.LABELED_FILE, "label"))
    durations: Dict[str, List[float]] = {}
    for e in energies:
        durations.setdefault(e.vehicle_type.value, []).append(e.duration_s / 60.0)
    written.append(figures.write_svg(figures.duration_histogram_figure(durations),
                                     os.path.join(figures_dir, "duration_hist.svg")))

    clusters = featurize.read_clusters(ws.require(config.CLUSTERS_FILE, "featurize"))
    od = pd.read_csv(ws.require(config.OD_FILE, "featurize"), dtype=str, keep_default_na=False)
    points = np.array([[float(v) for v in row] for row in
                       od[["origin_lat", "origin_lon", "dest_lat", "dest_lon"]].to_numpy()], dtype=float)
    labels = [int(v) for v in od["cluster"]]
    written.append(figures.write_svg(figures.cluster_scatter_figure(points, labels, clusters.centroids),
                                     os.path.join(figures_dir, "clusters.svg")))
    write_snapshot(cfg, figures_dir)
    logger.info(f"Wrote {len(written)} figures to {figures_dir}")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic VED-format dataset"),
    "ingest": (cmd_ingest, "parse dynamic/static CSVs into trips.csv"),
    "label": (cmd_label, "compute per-trip efficiency labels"),
    "featurize": (cmd_featurize, "build feature vectors and OD clusters"),
    "split": (cmd_split, "month-stratified train/test split per task"),
    "gridsearch": (cmd_gridsearch, "learning-rate grid search per task"),
    "train": (cmd_train, "train the ensemble and baselines per task"),
    "predict": (cmd_predict, "predict the test split"),
    "evaluate": (cmd_evaluate, "score models and write report.json/report.csv"),
    "report": (cmd_report, "render SVG figures"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--members", type=int, help="ensemble size")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int, help="mini-batch size")
    common.add_argument("--lr", type=float, help="Adam learning rate")
    common.add_argument("--adv-eps", dest="adv_eps", type=float, help="FGSM step in standardized units")
    common.add_argument("--clusters", type=int, help="number of OD clusters")
    common.add_argument("--train-frac", dest="train_frac", type=float)
    common.add_argument("--vehicle-type", dest="vehicle_type", choices=[v.value for v in VehicleType],
                        type=str.upper)
    common.add_argument("--energy", choices=[t.value for t in Task], type=str.lower)
    common.add_argument("--out", help="working directory shared by all stages")

    parser = argparse.ArgumentParser(prog="effiq", description="Vehicle energy-efficiency prediction with "
                                                               "deep ensembles")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}

    parsers["synth"].add_argument("--days", type=int)
    parsers["synth"].add_argument("--trips-per-day", dest="trips_per_day", type=float)
    parsers["synth"].add_argument("--noise-scale", dest="noise_scale", type=float)
    parsers["ingest"].add_argument("--dynamic", nargs="+", help="dynamic CSV files or directories")
    parsers["ingest"].add_argument("--static", nargs="+", help="static vehicle tables")
    parsers["train"].add_argument("--use-grid", dest="use_grid", action="store_true",
                                  help="use the per-task learning rate from gridsearch.json")
    parsers["evaluate"].add_argument("--external", action="append",
                                     help="external prediction CSV, optionally NAME=path; repeatable")
    return parser


def resolve(args: argparse.Namespace) -> config.RunConfig:
    flags = {field: getattr(args, dest) for dest, field in COMMON_FLAGS.items()}
    flags.update({field: getattr(args, dest, None) for dest, field in SYNTH_FLAGS.items()})
    try:
        cfg = config.resolve_run_config(args.config, flags)
    except (KeyError, ValueError) as e:
        raise ValidationError(f"Invalid configuration: {e}") from e
    except FileNotFoundError as e:
        raise ValidationError(f"Configuration file not found: {args.config}") from e
    ok, errors = RunConfigValidator.validate_run_config(cfg)
    if not ok:
        raise ValidationError("Invalid configuration: " + "; ".join(errors))
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = None
    try:
        cfg = resolve(args)
        ws = Workspace(cfg.out)
        handler = attach_run_log(ws.out)
        write_snapshot(cfg, ws.out)
        logger.info(f"Stage '{args.command}' in {ws.out} (seed={cfg.seed}, threads={cfg.threads})")
        COMMANDS[args.command][0](cfg, args, ws)
        logger.info(f"Stage '{args.command}' finished")
        return 0
    except ValidationError as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    finally:
        if handler is not None:
            detach_run_log(handler)


if __name__ == "__main__":
    sys.exit(main())
