"""Run configuration shared by the command-line tools.

A configuration file is a JSON object whose keys mirror :class:`RunConfig`;
any key left out keeps its default.  Example::

    {"seed": 7, "grid": {"spacing_m": 20}, "sweep": {"heights_m": [12, 21]}}

The resolved configuration (defaults included) is what gets echoed into
output manifests.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dataset import SplitSpec, SweepValues
from .ml import DtrConfig, KnnConfig, RfrConfig, TrainConfig
from .raysim import SimConfig
from .scene import GenerationSpec, ReceiverGrid, Scene, TransmitterSite


class ConfigError(ValueError):
    pass


# Three mast sites inside the default 1.1 km x 1.1 km suburb: A and B sit in
# the built-up interior (training), C near the south-east edge (held out).
DEFAULT_SITES = (
    TransmitterSite("A", (-150.0, -100.0), 12.0, 5.0, 0.0),
    TransmitterSite("B", (220.0, 180.0), 12.0, 5.0, 0.0),
    TransmitterSite("C", (430.0, -400.0), 12.0, 5.0, 0.0),
)
SITE_KEEPOUT_M = 20.0

SMALL_SWEEP = SweepValues((1.5, 2.3, 3.5), (12.0, 21.0), (5.0, 15.0))
FULL_SWEEP = SweepValues()
SMALL_MLP_EPOCHS = 100
SCALES = ("small", "full-sweep")


@dataclass(frozen=True)
class GridConfig:
    spacing_m: float = 15.0
    extent: tuple[float, float, float, float] | None = None  # None: the scene bounds
    rx_height_m: float = 1.5
    rx_gain_dbi: float = 2.1
    max_distance_m: float = 1500.0

    def build(self, scene: Scene) -> ReceiverGrid:
        extent = tuple(self.extent) if self.extent is not None else scene.bounds
        return ReceiverGrid(extent, self.spacing_m, self.rx_height_m, self.rx_gain_dbi, self.max_distance_m)


@dataclass(frozen=True)
class SceneConfig:
    path: str | None = None  # None: generate from the global seed
    n_buildings: int = 50
    bounds: tuple[float, float, float, float] = (-550.0, -550.0, 550.0, 550.0)
    anchor: tuple[float, float] = (22.311359, 39.102723)


@dataclass(frozen=True)
class ModelsConfig:
    dtr: DtrConfig = field(default_factory=DtrConfig)
    rfr: RfrConfig = field(default_factory=RfrConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    mlp: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    scene: SceneConfig = field(default_factory=SceneConfig)
    sites: tuple[TransmitterSite, ...] = DEFAULT_SITES
    train_sites: tuple[str, ...] = ("A", "B")
    heldout_site: str = "C"
    sweep: SweepValues = FULL_SWEEP
    grid: GridConfig = field(default_factory=GridConfig)
    sim: SimConfig = field(default_factory=lambda: SimConfig(max_reflections=4, max_wall_reflections=2))
    split: SplitSpec = field(default_factory=SplitSpec)
    models: ModelsConfig = field(default_factory=ModelsConfig)

    def __post_init__(self):
        names = [s.name for s in self.sites]
        if len(set(names)) != len(names):
            raise ConfigError("site names must be unique")
        for name in tuple(self.train_sites) + (self.heldout_site,):
            if name not in names:
                raise ConfigError(f"unknown site {name!r}")

    def site(self, name: str) -> TransmitterSite:
        for s in self.sites:
            if s.name == name:
                return s
        raise ConfigError(f"unknown site {name!r}")

    def generation_spec(self) -> GenerationSpec:
        keepout = tuple((s.position[0], s.position[1], SITE_KEEPOUT_M) for s in self.sites)
        return GenerationSpec(n_buildings=self.scene.n_buildings, bounds=tuple(self.scene.bounds),
                              anchor=tuple(self.scene.anchor), keepout=keepout)

    def with_seed(self, seed: int) -> "RunConfig":
        """Thread ``seed`` into the split and every model seed."""
        models = replace(self.models, rfr=replace(self.models.rfr, seed=seed),
                         mlp=replace(self.models.mlp, seed=seed))
        return replace(self, seed=seed, split=replace(self.split, seed=seed), models=models)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = [_site_to_dict(s) for s in self.sites]
        return d


def _site_to_dict(s: TransmitterSite) -> dict:
    return {"name": s.name, "x": s.position[0], "y": s.position[1], "height_agl": s.height_agl,
            "power_w": s.power_w, "gain_dbi": s.gain_dbi}


def _site_from_dict(d: dict) -> TransmitterSite:
    unknown = set(d) - {"name", "x", "y", "height_agl", "power_w", "gain_dbi"}
    if unknown:
        raise ConfigError(f"unknown site keys {sorted(unknown)}")
    try:
        return TransmitterSite(str(d["name"]), (float(d["x"]), float(d["y"])), float(d.get("height_agl", 12.0)),
                               float(d.get("power_w", 5.0)), float(d.get("gain_dbi", 0.0)))
    except KeyError as exc:
        raise ConfigError(f"site entry missing {exc.args[0]!r}") from None


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _merge(obj, overrides: dict, where: str):
    """Copy of dataclass ``obj`` with ``overrides`` applied (recursively)."""
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, val in overrides.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        cur = getattr(obj, key)
        if hasattr(cur, "__dataclass_fields__") and isinstance(val, dict):
            changes[key] = _merge(cur, val, f"{where}.{key}")
        else:
            changes[key] = _tuplify(val)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    doc = dict(doc)
    sites = doc.pop("sites", None)
    if sites is not None:
        if not isinstance(sites, list) or not sites:
            raise ConfigError("sites: expected a non-empty list")
        base = replace(base, sites=tuple(_site_from_dict(s) for s in sites))
    return _merge(base, doc, "config")


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(doc, base)


def scale_defaults(scale: str) -> RunConfig:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}")
    if scale == "full-sweep":
        return RunConfig()
    return RunConfig(sweep=SMALL_SWEEP, models=ModelsConfig(mlp=TrainConfig(epochs=SMALL_MLP_EPOCHS)))
