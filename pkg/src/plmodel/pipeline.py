"""End-to-end comparison run: scene -> sweep -> baselines and models -> reports.

Everything written here is a pure function of the run configuration, so two
runs with the same seed produce byte-identical files.  No timings or host
details are recorded.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, empirical, metrics
from .config import RunConfig, scale_defaults
from .dataset import Dataset, save_csv, sweep, train_test_split
from .ml import ModelSpec, save_model, train_model
from .scene import Scene, atomic_write_text, dumps_scene, generate_scene, load_scene

MODEL_ORDER = ("dtr", "rfr", "knn", "mlp")
BASELINES = ("ci", "cost231")
COST231_FREQ_GHZ = 1.5
CURVE_BIN_M = 50.0
GATE_RMSE_DB = 7.0
GATE_COST231_MIN_DB = 15.0


class GateFailure(RuntimeError):
    """Raised after a complete run when at least one acceptance gate failed."""


def build_scene(cfg: RunConfig) -> Scene:
    if cfg.scene.path:
        return load_scene(cfg.scene.path)
    return generate_scene(cfg.seed, cfg.generation_spec())


def cost231_predict(ds: Dataset, rx_height_m: float):
    """COST-231 suburban PL for every row of ``ds`` plus summarized range warnings."""
    f_mhz = ds.column("f_ghz") * 1000.0
    h_t = ds.column("h_tx_m")
    d_km = ds.column("distance_m") / 1000.0
    pred = empirical.cost231_array(f_mhz, h_t, rx_height_m, d_km)
    return np.asarray(pred, dtype=float), empirical.cost231_range_warnings(f_mhz, h_t, rx_height_m, d_km)


def frequency_subset(ds: Dataset, f_ghz: float) -> Dataset:
    return ds.subset(np.nonzero(ds.column("f_ghz") == f_ghz)[0])


def pl_curve_csv(distance_m, predicted_db, simulated_db, bin_m: float = CURVE_BIN_M) -> str:
    """Mean predicted and mean simulated PL per distance bin (empty bins are skipped)."""
    d = np.asarray(distance_m, dtype=float)
    pred = np.asarray(predicted_db, dtype=float)
    sim = np.asarray(simulated_db, dtype=float)
    lines = ["distance_lo_m,distance_hi_m,count,mean_predicted_db,mean_simulated_db"]
    if len(d):
        idx = np.floor(d / bin_m).astype(np.int64)
        for b in np.unique(idx):
            sel = idx == b
            lines.append(f"{b * bin_m:.17g},{(b + 1) * bin_m:.17g},{int(sel.sum())},"
                         f"{pred[sel].mean():.17g},{sim[sel].mean():.17g}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Gate:
    name: str
    passed: bool
    detail: str

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Writer:
    """Writes into a fresh directory and remembers every file for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def text(self, rel: str, content: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(path, content)
        self.files.append(rel)
        return path

    def dataset(self, rel: str, ds: Dataset) -> None:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        save_csv(ds, path)
        self.files.append(rel)

    def model(self, rel: str, model) -> None:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, path)
        self.files.append(rel)


def _fresh_dir(out_dir) -> Path:
    root = Path(out_dir)
    if root.exists() and (not root.is_dir() or any(root.iterdir())):
        raise FileExistsError(f"output directory {root} is not empty; reproduce writes into a fresh directory")
    root.mkdir(parents=True, exist_ok=True)
    return root


def _comparison_rows(results: dict) -> tuple[str, str]:
    csv_lines = ["model,split,stratum,count,rmse_db,mape_pct,msle,rho"]
    head = f"{'model':<9}{'split':<8}{'stratum':<8}{'count':>8}{'RMSE dB':>10}{'MAPE %':>9}{'MSLE':>11}{'rho':>8}"
    txt = [head, "-" * len(head)]
    for (model, split), rep in results.items():
        for stratum in metrics.STRATA:
            r = rep[stratum]
            if r is None:
                csv_lines.append(f"{model},{split},{stratum},0,,,,")
                txt.append(f"{model:<9}{split:<8}{stratum:<8}{0:>8}{'-':>10}{'-':>9}{'-':>11}{'-':>8}")
                continue
            rho = "" if r.rho is None else format(r.rho, ".17g")
            csv_lines.append(f"{model},{split},{stratum},{r.count},{r.rmse_db:.17g},{r.mape_pct:.17g},"
                             f"{r.msle:.17g},{rho}")
            rho_t = "-" if r.rho is None else f"{r.rho:.3f}"
            txt.append(f"{model:<9}{split:<8}{stratum:<8}{r.count:>8}{r.rmse_db:>10.3f}{r.mape_pct:>9.3f}"
                       f"{r.msle:>11.3e}{rho_t:>8}")
    return "\n".join(csv_lines) + "\n", "\n".join(txt) + "\n"


def run_notes(cfg: RunConfig) -> list[str]:
    """Deviations from the reference setup, echoed into the report and manifest."""
    sim = cfg.sim
    return [
        f"ray tracing: image method, up to {sim.max_reflections} reflections of which at most "
        f"{sim.wall_limit} on walls (reference setup: 4 reflections, diffraction excluded)",
        "MSLE uses the natural logarithm; Total rows are pooled over all samples",
        f"COST-231 is evaluated on the f = {COST231_FREQ_GHZ:g} GHz rows only (model valid 1500-2000 MHz)",
        "CI baseline is scored with zero shadow fading (mean prediction)",
        "MLP inputs are min-max normalized on the training fit split; targets stay in dB",
        f"MLP epochs: {cfg.models.mlp.epochs} (reference setup: 1000)",
        "per-site RMSE: training sites use their rows of the test split; the held-out site uses all its rows",
    ]


def evaluate_gates(results: dict) -> list[Gate]:
    """Acceptance gates on the comparative results ``{(model, split): report}``."""
    def total(model, split):
        return results[(model, split)]["Total"].rmse_db

    gates = []
    for m in ("dtr", "rfr"):
        v = total(m, "test")
        gates.append(Gate(f"{m}_test_total_rmse_le_{GATE_RMSE_DB:g}db", v <= GATE_RMSE_DB, f"{v:.3f} dB"))
        for b in BASELINES:
            vb = total(b, "test")
            gates.append(Gate(f"{m}_test_total_below_{b}", v < vb, f"{v:.3f} < {vb:.3f} dB"))
        los = results[(m, "test")]["LoS"]
        nlos = results[(m, "test")]["NLoS"]
        ok = los is not None and nlos is not None and los.rmse_db <= nlos.rmse_db
        detail = "missing stratum" if los is None or nlos is None else f"{los.rmse_db:.3f} <= {nlos.rmse_db:.3f} dB"
        gates.append(Gate(f"{m}_test_los_rmse_le_nlos", ok, detail))
    best = min(MODEL_ORDER, key=lambda m: total(m, "site_C"))
    vbest = total(best, "site_C")
    gates.append(Gate(f"best_model_site_c_rmse_le_{GATE_RMSE_DB:g}db", vbest <= GATE_RMSE_DB,
                      f"{best}: {vbest:.3f} dB"))
    for b in BASELINES:
        vb = total(b, "site_C")
        gates.append(Gate(f"best_model_site_c_below_{b}", vbest < vb, f"{best}: {vbest:.3f} < {vb:.3f} dB"))
    vc = total("cost231", "test")
    gates.append(Gate(f"cost231_test_rmse_gt_{GATE_COST231_MIN_DB:g}db", vc > GATE_COST231_MIN_DB, f"{vc:.3f} dB"))
    return gates


def reproduce(out_dir, scale: str = "small", cfg: RunConfig | None = None, progress=None) -> dict:
    """Run the full comparison into the fresh directory ``out_dir``; returns the manifest.

    Raises :class:`GateFailure` (after writing everything) when a gate fails.
    """
    cfg = cfg if cfg is not None else scale_defaults(scale)
    log = progress or (lambda msg: None)
    root = _fresh_dir(out_dir)
    w = _Writer(root)
    w.text("config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    scene = build_scene(cfg)
    w.text("scene.json", dumps_scene(scene))
    grid = cfg.grid.build(scene)
    log(f"scene: {len(scene.buildings)} buildings; grid {grid.rows}x{grid.cols} at {grid.spacing:g} m")

    per_site = sweep(scene, cfg.sites, cfg.sweep, grid, cfg.sim, progress=log)
    for name in sorted(per_site):
        w.dataset(f"datasets/site_{name}.csv", per_site[name])
    pooled = Dataset.concat([per_site[s] for s in cfg.train_sites])
    train, test = train_test_split(pooled, cfg.split)
    heldout = per_site[cfg.heldout_site]
    w.dataset("datasets/train.csv", train)
    w.dataset("datasets/test.csv", test)
    log(f"datasets: train {len(train)}, test {len(test)}, site {cfg.heldout_site} {len(heldout)}")

    held_key = f"site_{cfg.heldout_site}"
    splits = {"test": test, held_key: heldout}
    predictions: dict = {}
    results: dict = {}

    # baselines
    ci = empirical.ci_fit(train.column("distance_m"), train.target, train.column("f_ghz"))
    w.text("models/ci.json", json.dumps({"model_type": "ci", "n": ci.n, "sigma_db": ci.sigma_db, "d0_m": ci.d0},
                                        indent=1) + "\n")
    warn_lines = []
    for split, ds in splits.items():
        predictions[("ci", split)] = (ds, empirical.ci_pathloss(ci, ds.column("f_ghz"), ds.column("distance_m")))
        sub = frequency_subset(ds, COST231_FREQ_GHZ)
        pred, warns = cost231_predict(sub, cfg.grid.rx_height_m)
        predictions[("cost231", split)] = (sub, pred)
        warn_lines += [f"{split}: {msg}" for msg in warns]
    w.text("reports/cost231_warnings.txt", "\n".join(warn_lines) + ("\n" if warn_lines else ""))

    # learned models
    for kind in MODEL_ORDER:
        log(f"training {kind}")
        model = train_model(ModelSpec(kind, getattr(cfg.models, kind), cfg.split), train, progress=log)
        w.model(f"models/{kind}.json", model)
        if kind == "mlp":
            hist = model.history
            w.text("models/mlp_training_log.csv", "epoch,train_mse,val_mse\n" + "".join(
                f"{i + 1},{t:.17g},{'' if i >= len(hist['val_mse']) else format(hist['val_mse'][i], '.17g')}\n"
                for i, t in enumerate(hist["train_mse"])))
        for split, ds in splits.items():
            predictions[(kind, split)] = (ds, model.predict(ds.features))

    order = list(MODEL_ORDER) + list(BASELINES)
    for split in splits:
        for name in order:
            ds, pred = predictions[(name, split)]
            rep = metrics.evaluate_stratified(ds.target, pred, ds.los)
            results[(name, split)] = rep
            w.text(f"reports/{name}_{split}.csv", rep.to_csv())
            w.text(f"reports/{name}_{split}.txt", rep.to_text(f"{name} on {split} ({len(ds)} samples)"))
    comp_csv, comp_txt = _comparison_rows(results)
    w.text("comparison.csv", comp_csv)
    notes = run_notes(cfg)
    w.text("comparison.txt", comp_txt + "\nNotes:\n" + "".join(f"- {n}\n" for n in notes))

    # per-site RMSE: training sites on their share of the test split, held-out site in full
    lines = ["model,site,count,rmse_db"]
    for name in order:
        for site in list(cfg.train_sites) + [cfg.heldout_site]:
            if site == cfg.heldout_site:
                ds, pred = predictions[(name, held_key)]
            else:
                ds_all, pred_all = predictions[(name, "test")]
                sel = np.nonzero(ds_all.sites == site)[0]
                ds, pred = ds_all.subset(sel), pred_all[sel]
            val = metrics.rmse(ds.target, pred) if len(ds) else float("nan")
            lines.append(f"{name},{site},{len(ds)},{val:.17g}")
    w.text("fig6_site_rmse.csv", "\n".join(lines) + "\n")

    # PL versus distance at the COST-231 frequency, all sites pooled
    every = frequency_subset(Dataset.concat([per_site[s] for s in sorted(per_site)]), COST231_FREQ_GHZ)
    pred, _ = cost231_predict(every, cfg.grid.rx_height_m)
    w.text("fig7_pl_vs_distance.csv", pl_curve_csv(every.column("distance_m"), pred, every.target))

    gates = evaluate_gates({(m, "site_C" if s == held_key else s): r for (m, s), r in results.items()})
    gates_doc = [g.to_dict() for g in gates]
    w.text("gates.json", json.dumps(gates_doc, indent=1) + "\n")
    for g in gates:
        log(f"gate {'PASS' if g.passed else 'FAIL'} {g.name}: {g.detail}")

    manifest = {
        "version": 1,
        "package_version": __version__,
        "scale": scale,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "notes": notes,
        "gates": gates_doc,
        "all_gates_passed": all(g.passed for g in gates),
        "files": [{"path": rel, "sha256": _sha256(root / rel), "bytes": (root / rel).stat().st_size}
                  for rel in sorted(w.files)],
    }
    text = json.dumps(manifest, indent=1) + "\n"
    atomic_write_text(root / "manifest.json", text)
    manifest = json.loads(text)  # return exactly what was written
    if not manifest["all_gates_passed"]:
        failed = ", ".join(g.name for g in gates if not g.passed)
        raise GateFailure(f"acceptance gates failed: {failed}")
    return manifest
