"""``plmodel`` command-line interface.

Exit codes: 0 success, 1 I/O or schema problem, 2 validation failure
(invalid scene, failed acceptance gate), 3 training failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import empirical, metrics, raysim
from .config import SCALES, ConfigError, RunConfig, load_config, scale_defaults
from .dataset import (Dataset, DatasetError, SweepValues, load_csv, load_features_csv, samples_from_power, save_csv,
                      train_test_split)
from .ml import ModelFileError, ModelSpec, TrainingError, load_model, save_model, train_model
from .pipeline import GateFailure, build_scene, cost231_predict, pl_curve_csv, reproduce
from .scene import (ReceiverGrid, SceneError, SceneValidationError, TransmitterSite, atomic_write_text, dumps_scene,
                    generate_scene, load_scene, save_scene)

log = logging.getLogger("plmodel")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_TRAINING = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers

def _resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    return cfg.with_seed(seed)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, text)
    log.info("wrote %s", path)


def _scene_for(args, cfg: RunConfig):
    path = getattr(args, "scene", None) or cfg.scene.path
    if path:
        return load_scene(path)
    return build_scene(cfg)


def _num(v: float) -> str:
    return format(float(v), "g")


def _report_outputs(out: Path, stem: str, report, title: str) -> None:
    _write(out / f"{stem}.csv", report.to_csv())
    text = report.to_text(title)
    _write(out / f"{stem}.txt", text)
    sys.stdout.write(text)


# --------------------------------------------------------------------------
# scene

def cmd_scene(args) -> int:
    cfg = _resolve_config(args)
    if args.action == "gen":
        if args.buildings is not None:
            if args.buildings < 0:
                raise CliError("--buildings must be >= 0", EXIT_VALIDATION)
            cfg = replace(cfg, scene=replace(cfg.scene, n_buildings=args.buildings))
        try:
            scene = generate_scene(cfg.seed, cfg.generation_spec())
        except SceneError as exc:
            raise CliError(str(exc), EXIT_VALIDATION) from None
        path = Path(args.output) if args.output else _out_dir(args) / "scene.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_scene(scene, path)
        log.info("wrote %s (%d buildings)", path, len(scene.buildings))
        return EXIT_OK
    try:
        scene = load_scene(args.path)
    except SceneValidationError as exc:
        raise CliError(f"invalid scene {args.path}: {exc}", EXIT_VALIDATION) from None
    print(f"{args.path}: valid scene with {len(scene.buildings)} buildings")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate / dataset

def _coverage_name(site: str, f: float, h: float, p: float) -> str:
    return f"coverage_{site}_f{_num(f)}_h{_num(h)}_p{_num(p)}.csv"


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    scene = _scene_for(args, cfg)
    out = _out_dir(args)
    grid = cfg.grid.build(scene)
    sites = [cfg.site(n) for n in args.site] if args.site else list(cfg.sites)
    freqs = tuple(args.frequency) if args.frequency else cfg.sweep.frequencies_ghz
    heights = tuple(args.height) if args.height else cfg.sweep.heights_m
    powers = tuple(args.power) if args.power else cfg.sweep.powers_w
    _write(out / "scene.json", dumps_scene(scene))
    entries = []
    for site in sites:
        tables = {}
        for f, h, p in SweepValues(freqs, heights, powers).combinations():
            if h not in tables:
                tx_h = TransmitterSite(site.name, site.position, h, site.power_w, site.gain_dbi)
                tables[h] = raysim.grid_table(scene, raysim.site_position(scene, tx_h), grid, cfg.sim)
            tx = TransmitterSite(site.name, site.position, h, p, site.gain_dbi)
            cov = raysim.coverage(scene, tx, grid, replace(cfg.sim, frequency_ghz=f), table=tables[h])
            name = _coverage_name(site.name, f, h, p)
            _write(out / name, raysim.coverage_csv(scene, cov))
            if args.pgm:
                (out / name.replace(".csv", ".pgm")).write_bytes(raysim.coverage_pgm(cov))
            entries.append({"file": name, "site": site.name, "x": site.position[0], "y": site.position[1],
                            "height_agl": h, "power_w": p, "gain_dbi": site.gain_dbi, "f_ghz": f,
                            "covered_cells": cov.covered_count()})
            log.info("%s: %d of %d cells covered", name, cov.covered_count(), len(cov.results))
    index = {"version": 1, "scene": "scene.json", "grid": {
        "extent": list(grid.extent), "spacing_m": grid.spacing, "rx_height_m": grid.rx_height,
        "rx_gain_dbi": grid.rx_gain_dbi, "max_distance_m": grid.max_distance}, "entries": entries}
    _write(out / "coverage_index.json", json.dumps(index, indent=1) + "\n")
    return EXIT_OK


def _read_coverage_power(path: Path, n_cells: int):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise CliError(f"cannot read coverage file {path}: {exc}") from None
    if len(rows) != n_cells:
        raise CliError(f"{path}: expected {n_cells} cells, found {len(rows)}")
    try:
        p_rx = np.array([float(r["p_rx_dbm"]) if r["p_rx_dbm"] else np.nan for r in rows])
        los = np.array([r["los"] == "1" for r in rows])
    except (KeyError, ValueError) as exc:
        raise CliError(f"{path}: malformed coverage file ({exc})") from None
    return p_rx, los


def cmd_dataset(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    if args.action == "split":
        ds = load_csv(args.data)
        spec = replace(cfg.split, test_fraction=args.test_fraction) if args.test_fraction else cfg.split
        train, test = train_test_split(ds, spec)
        save_csv(train, out / "train.csv")
        save_csv(test, out / "test.csv")
        log.info("split %d rows into %d train / %d test", len(ds), len(train), len(test))
        return EXIT_OK
    cov_dir = Path(args.coverage)
    try:
        index = json.loads((cov_dir / "coverage_index.json").read_text(encoding="utf-8"))
        scene = load_scene(cov_dir / index["scene"])
        g = index["grid"]
        grid = ReceiverGrid(tuple(g["extent"]), g["spacing_m"], g["rx_height_m"], g["rx_gain_dbi"],
                            g["max_distance_m"])
        entries = index["entries"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read coverage index in {cov_dir}: {exc}") from None
    rx = raysim.receiver_positions(scene, grid)
    parts: dict[str, list[Dataset]] = {}
    for e in entries:
        site = TransmitterSite(e["site"], (e["x"], e["y"]), e["height_agl"], e["power_w"], e["gain_dbi"])
        p_rx, los = _read_coverage_power(cov_dir / e["file"], len(rx))
        tx_xyz = raysim.site_position(scene, site)
        parts.setdefault(site.name, []).append(
            samples_from_power(scene, tx_xyz, rx, site, e["f_ghz"], p_rx, los, grid))
    for name, ds_parts in parts.items():
        ds = Dataset.concat(ds_parts)
        save_csv(ds, out / f"dataset_{name}.csv")
        log.info("site %s: %d sub-datasets merged, %d samples", name, len(ds_parts), len(ds))
    return EXIT_OK


# --------------------------------------------------------------------------
# baselines

def cmd_baseline(args) -> int:
    _resolve_config(args)  # reject a bad --config early
    out = _out_dir(args)
    ds = load_csv(args.data)
    if len(ds) == 0:
        raise CliError(f"{args.data}: dataset is empty")
    d, f = ds.column("distance_m"), ds.column("f_ghz")
    kind = args.kind
    if kind == "ci-fit":
        params = empirical.ci_fit(d, ds.target, f)
        _write(out / "ci_params.json", json.dumps({"n": params.n, "sigma_db": params.sigma_db, "d0_m": params.d0},
                                                  indent=1) + "\n")
        print(f"CI fit: n = {params.n:.6f}, sigma = {params.sigma_db:.4f} dB")
        pred = empirical.ci_pathloss(params, f, d)
    elif kind == "ci-eval":
        if args.params:
            try:
                doc = json.loads(Path(args.params).read_text(encoding="utf-8"))
                params = empirical.CiParams(float(doc["n"]), float(doc.get("sigma_db", 0.0)),
                                            float(doc.get("d0_m", 1.0)))
            except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CliError(f"cannot read CI parameters {args.params}: {exc}") from None
        elif args.n is not None:
            params = empirical.CiParams(args.n)
        else:
            raise CliError("ci-eval needs --params or --n")
        pred = empirical.ci_pathloss(params, f, d)
    elif kind == "cost231":
        pred, warns = cost231_predict(ds, args.rx_height)
        for w in warns:
            print(f"warning: COST-231 {w}", file=sys.stderr)
    else:
        pred = empirical.fspl(f, d)
    report = metrics.evaluate_stratified(ds.target, pred, ds.los)
    stem = kind.replace("-", "_")
    _report_outputs(out, f"{stem}_report", report, f"{kind} baseline on {args.data} ({len(ds)} samples)")
    _write(out / f"{stem}_curve.csv", pl_curve_csv(d, pred, ds.target, args.bin_width))
    return EXIT_OK


# --------------------------------------------------------------------------
# models

def _model_config(kind: str, cfg: RunConfig, args):
    base = getattr(cfg.models, kind)
    changes = {}
    if kind in ("dtr", "rfr"):
        if args.max_depth is not None:
            changes["max_depth"] = None if args.max_depth.lower() == "none" else int(args.max_depth)
        if args.min_samples_split is not None:
            changes["min_samples_split"] = args.min_samples_split
    if kind == "rfr":
        if args.trees is not None:
            changes["n_estimators"] = args.trees
        if args.no_bootstrap:
            changes["bootstrap"] = False
        if args.feature_subsampling:
            changes["feature_subsampling"] = True
    if kind == "knn" and args.k is not None:
        changes["k"] = args.k
    if kind == "mlp":
        for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                          ("patience", "patience")):
            if getattr(args, flag) is not None:
                changes[key] = getattr(args, flag)
    return replace(base, **changes)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    train = load_csv(args.data)
    try:
        mcfg = _model_config(args.kind, cfg, args)
        model = train_model(ModelSpec(args.kind, mcfg, cfg.split), train, progress=log.info)
    except (TrainingError, ValueError) as exc:
        raise CliError(f"training failed: {exc}", EXIT_TRAINING) from None
    path = Path(args.output) if args.output else out / f"{args.kind}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    log.info("wrote %s", path)
    fitted = model.predict(train.features)
    train_log = {"model_type": args.kind, "training_samples": len(train),
                 "training_rmse_db": metrics.rmse(train.target, fitted)}
    if args.kind == "mlp":
        train_log["loss_history"] = model.history
    _write(path.with_name(path.stem + "_log.json"), json.dumps(train_log, indent=1) + "\n")
    return EXIT_OK


def _check_model_features(model, x):
    if x.shape[1] != model.n_features:
        raise CliError(f"model expects {model.n_features} features, dataset has {x.shape[1]}")


def cmd_evaluate(args) -> int:
    _resolve_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    ds = load_csv(args.data)
    _check_model_features(model, ds.features)
    pred = model.predict(ds.features)
    report = metrics.evaluate_stratified(ds.target, pred, ds.los)
    _report_outputs(out, args.name, report, f"{model.model_type} on {args.data} ({len(ds)} samples)")
    return EXIT_OK


def cmd_predict(args) -> int:
    _resolve_config(args)
    model = load_model(args.model)
    header, rows, x = load_features_csv(args.input)
    _check_model_features(model, x)
    pred = model.predict(x) if len(x) else np.empty(0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header + ["pl_pred_db"])
    for row, p in zip(rows, pred):
        writer.writerow(row + [format(float(p), ".17g")])
    path = Path(args.output) if args.output else _out_dir(args) / "predictions.csv"
    _write(path, buf.getvalue())
    return EXIT_OK


def cmd_reproduce(args) -> int:
    cfg = _resolve_config(args, scale_defaults(args.scale))
    out = Path(args.out or f"reproduce_{args.scale}")
    manifest = reproduce(out, args.scale, cfg, progress=log.info)
    print(f"reproduce ({args.scale}): {len(manifest['files'])} files in {out}; all gates passed")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default 42)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="less logging")

    p = argparse.ArgumentParser(prog="plmodel", parents=[common],
                                description="Path loss simulation, baselines and ML models.")
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scene", parents=[common], help="generate or validate a scene file")
    scs = sc.add_subparsers(dest="action", required=True)
    g = scs.add_parser("gen", parents=[common], help="generate a synthetic suburb")
    g.add_argument("--buildings", type=int)
    g.add_argument("-o", "--output", help="scene file (default OUT/scene.json)")
    v = scs.add_parser("validate", parents=[common], help="validate a scene file")
    v.add_argument("path")
    sc.set_defaults(func=cmd_scene)

    s = sub.add_parser("simulate", parents=[common], help="coverage per (site, f, h, P)")
    s.add_argument("--scene", help="scene file (default: config scene or generated from the seed)")
    s.add_argument("--site", action="append", help="site name (repeatable; default all)")
    s.add_argument("--frequency", type=float, action="append", help="GHz (repeatable)")
    s.add_argument("--height", type=float, action="append", help="tx height above ground, m (repeatable)")
    s.add_argument("--power", type=float, action="append", help="tx power, W (repeatable)")
    s.add_argument("--pgm", action="store_true", help="also write grayscale PGM heat maps")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("dataset", parents=[common], help="build or split datasets")
    ds = d.add_subparsers(dest="action", required=True)
    b = ds.add_parser("build", parents=[common], help="merge coverage outputs into per-site datasets")
    b.add_argument("--coverage", required=True, help="directory written by `simulate`")
    sp = ds.add_parser("split", parents=[common], help="train/test split")
    sp.add_argument("data")
    sp.add_argument("--test-fraction", type=float)
    d.set_defaults(func=cmd_dataset)

    bl = sub.add_parser("baseline", parents=[common], help="empirical baselines")
    bl.add_argument("kind", choices=("ci-fit", "ci-eval", "cost231", "fspl"))
    bl.add_argument("--data", required=True, help="dataset CSV")
    bl.add_argument("--params", help="CI parameter file for ci-eval")
    bl.add_argument("--n", type=float, help="path loss exponent for ci-eval")
    bl.add_argument("--rx-height", type=float, default=1.5, help="receiver height for COST-231 (m)")
    bl.add_argument("--bin-width", type=float, default=50.0, help="distance bin of the curve CSV (m)")
    bl.set_defaults(func=cmd_baseline)

    t = sub.add_parser("train", parents=[common], help="train a regressor")
    t.add_argument("kind", choices=("dtr", "rfr", "knn", "mlp"))
    t.add_argument("--data", required=True, help="training dataset CSV")
    t.add_argument("-o", "--output", help="model file (default OUT/<kind>.json)")
    t.add_argument("--max-depth", help="tree depth limit or 'none'")
    t.add_argument("--min-samples-split", type=int)
    t.add_argument("--trees", type=int)
    t.add_argument("--no-bootstrap", action="store_true")
    t.add_argument("--feature-subsampling", action="store_true")
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="LoS/NLoS/Total report")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--name", default="evaluation", help="report file stem")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", parents=[common], help="append pl_pred_db to a CSV")
    pr.add_argument("--model", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("-o", "--output", help="output CSV (default OUT/predictions.csv)")
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("reproduce", parents=[common], help="full comparison into a fresh directory")
    r.add_argument("--scale", choices=SCALES, default="small")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except GateFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigError, DatasetError, ModelFileError, SceneError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
