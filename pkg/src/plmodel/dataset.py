"""Labeled path loss samples: construction from coverage, CSV I/O, splits.

A :class:`Dataset` is stored column-wise (numpy arrays) and keeps sample
order.  The eight model features are, in order::

    h_tx_m, p_tx_dbm, f_ghz, distance_m, elevation_deg, los, dlat_deg, dlon_deg

Transmitter power enters the features in dBm.  The elevation angle is
measured at the receiver, above the horizontal, positive when the
transmitter is higher.  Azimuth (compass bearing tx -> rx, degrees in
[0, 360)) and received power are metadata only.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import raysim
from .scene import ReceiverGrid, Scene, TransmitterSite, atomic_write_text, geodetic_offsets

SCHEMA_VERSION = 1
FEATURES = ("h_tx_m", "p_tx_dbm", "f_ghz", "distance_m", "elevation_deg", "los", "dlat_deg", "dlon_deg")
COLUMNS = ("site",) + FEATURES + ("azimuth_deg", "p_rx_dbm", "pl_db")
_NUMERIC = COLUMNS[1:]
_OPTIONAL = ("azimuth_deg", "p_rx_dbm")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    h_tx_m: float
    p_tx_dbm: float
    f_ghz: float
    distance_m: float
    elevation_deg: float
    los: int
    dlat_deg: float
    dlon_deg: float
    pl_db: float
    site: str = ""
    azimuth_deg: float | None = None
    p_rx_dbm: float | None = None

    def features(self) -> tuple[float, ...]:
        return tuple(float(getattr(self, f)) for f in FEATURES)


class Dataset:
    """Ordered, immutable collection of samples with column access."""

    def __init__(self, columns: dict | None = None):
        columns = columns or {}
        n = len(columns["pl_db"]) if "pl_db" in columns else 0
        self._cols = {}
        for c in _NUMERIC:
            arr = np.asarray(columns.get(c, np.full(n, np.nan)), dtype=float).copy()
            if arr.shape != (n,):
                raise DatasetError(f"column {c!r} has shape {arr.shape}, expected ({n},)")
            arr.setflags(write=False)
            self._cols[c] = arr
        site = np.asarray(columns.get("site", [""] * n), dtype=object).copy()
        if site.shape != (n,):
            raise DatasetError("site column length mismatch")
        self._cols["site"] = site
        self.schema_version = SCHEMA_VERSION
        self._check()

    def _check(self):
        if len(self) == 0:
            return
        los = self._cols["los"]
        if not np.all((los == 0) | (los == 1)):
            raise DatasetError("los must be 0 or 1")
        if not np.all(self._cols["distance_m"] > 0):
            raise DatasetError("distance_m must be > 0")
        pl = self._cols["pl_db"]
        if not np.all(np.isfinite(pl) & (pl > 0)):
            raise DatasetError("pl_db must be finite and > 0")
        for c in FEATURES:
            if not np.all(np.isfinite(self._cols[c])):
                raise DatasetError(f"feature {c!r} contains non-finite values")

    def __len__(self) -> int:
        return len(self._cols["pl_db"])

    def __getitem__(self, i: int) -> Sample:
        c = self._cols
        opt = {k: (None if np.isnan(c[k][i]) else float(c[k][i])) for k in _OPTIONAL}
        return Sample(*(float(c[f][i]) for f in FEATURES[:5]), int(c["los"][i]),
                      float(c["dlat_deg"][i]), float(c["dlon_deg"][i]), float(c["pl_db"][i]),
                      site=str(c["site"][i]), **opt)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def column(self, name: str) -> np.ndarray:
        return self._cols[name]

    @property
    def features(self) -> np.ndarray:
        return np.column_stack([self._cols[f] for f in FEATURES]) if len(self) else np.zeros((0, len(FEATURES)))

    @property
    def target(self) -> np.ndarray:
        return self._cols["pl_db"]

    @property
    def los(self) -> np.ndarray:
        return self._cols["los"].astype(bool)

    @property
    def sites(self) -> np.ndarray:
        return self._cols["site"]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset({k: v[idx] for k, v in self._cols.items()})

    def equals(self, other: "Dataset") -> bool:
        if len(self) != len(other):
            return False
        for c in _NUMERIC:
            a, b = self._cols[c], other._cols[c]
            if not np.array_equal(a.view(np.int64), b.view(np.int64)):
                return False
        return list(self.sites) == list(other.sites)

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        cols = {c: [] for c in COLUMNS}
        for s in samples:
            for c in COLUMNS:
                v = getattr(s, c)
                cols[c].append(np.nan if v is None else v)
        if not samples:
            return cls()
        return cls(cols)

    @classmethod
    def concat(cls, parts) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls({c: np.concatenate([p._cols[c] for p in parts]) for c in COLUMNS})


# --------------------------------------------------------------------------
# construction

def _samples_from_arrays(scene, tx_xyz, rx, site, f_ghz, gain_db, los, grid: ReceiverGrid):
    p_rx = site.p_tx_dbm + site.gain_dbi + grid.rx_gain_dbi + gain_db
    return samples_from_power(scene, tx_xyz, rx, site, f_ghz, p_rx, los, grid)


def samples_from_power(scene, tx_xyz, rx, site, f_ghz, p_rx, los, grid: ReceiverGrid) -> Dataset:
    """Samples for the receivers with finite ``p_rx`` (dBm); NaN marks no coverage."""
    covered = np.isfinite(p_rx)
    rx = rx[covered]
    p_rx = p_rx[covered]
    los = np.asarray(los, dtype=bool)
    p_tx = site.p_tx_dbm
    pl = raysim.path_loss(p_tx, site.gain_dbi, grid.rx_gain_dbi, p_rx)
    d = rx - tx_xyz
    horiz = np.hypot(d[:, 0], d[:, 1])
    dist = np.sqrt(horiz ** 2 + d[:, 2] ** 2)
    elevation = np.degrees(np.arctan2(tx_xyz[2] - rx[:, 2], horiz))
    azimuth = np.mod(np.degrees(np.arctan2(d[:, 0], d[:, 1])), 360.0)
    rx_lat, rx_lon = geodetic_offsets(scene.anchor, rx[:, 0], rx[:, 1])
    tx_lat, tx_lon = geodetic_offsets(scene.anchor, np.array([tx_xyz[0]]), np.array([tx_xyz[1]]))
    n = int(covered.sum())
    return Dataset({
        "site": [site.name] * n,
        "h_tx_m": np.full(n, site.height_agl),
        "p_tx_dbm": np.full(n, p_tx),
        "f_ghz": np.full(n, f_ghz),
        "distance_m": dist,
        "elevation_deg": elevation,
        "los": los[covered].astype(float),
        "dlat_deg": (scene.anchor[0] + rx_lat) - (scene.anchor[0] + tx_lat[0]),
        "dlon_deg": (scene.anchor[1] + rx_lon) - (scene.anchor[1] + tx_lon[0]),
        "azimuth_deg": azimuth,
        "p_rx_dbm": p_rx,
        "pl_db": pl,
    })


def from_coverage(grid: raysim.CoverageGrid, tx: TransmitterSite, scene: Scene,
                  f_ghz: float | None = None, site_name: str | None = None) -> Dataset:
    """One sample per covered cell; cells with absent power are skipped."""
    if grid.site != tx:
        raise DatasetError("coverage grid was not produced for this transmitter")
    if f_ghz is not None and f_ghz != grid.frequency_ghz:
        raise DatasetError("frequency does not match the coverage grid")
    tx_xyz = raysim.site_position(scene, tx)
    if not np.allclose(tx_xyz, grid.tx_position, rtol=0, atol=1e-9):
        raise DatasetError("coverage grid was produced for a different scene or site position")
    if site_name is not None and site_name != tx.name:
        tx = TransmitterSite(site_name, tx.position, tx.height_agl, tx.power_w, tx.gain_dbi)
    rx = np.array([r.rx_position for r in grid.results], dtype=float).reshape(-1, 3)
    gain = np.array([np.nan if r.p_rx_dbm is None else r.p_rx_dbm - (tx.p_tx_dbm + tx.gain_dbi + grid.grid.rx_gain_dbi)
                     for r in grid.results])
    los = np.array([r.los for r in grid.results], dtype=bool)
    if len(rx) == 0:
        return Dataset()
    return _samples_from_arrays(scene, tx_xyz, rx, tx, grid.frequency_ghz, gain, los, grid.grid)


@dataclass(frozen=True)
class SweepValues:
    frequencies_ghz: tuple[float, ...] = (1.5, 2.3, 2.5, 3.5, 6.0)
    heights_m: tuple[float, ...] = (12.0, 16.0, 21.0)
    powers_w: tuple[float, ...] = (5.0, 10.0, 15.0)

    def combinations(self):
        """(f, h, P) triples in sweep order: frequency outermost, power innermost."""
        if not (self.frequencies_ghz and self.heights_m and self.powers_w):
            raise ValueError("sweep value sets must be non-empty")
        return list(itertools.product(self.frequencies_ghz, self.heights_m, self.powers_w))


def sweep(scene: Scene, sites, values: SweepValues, grid: ReceiverGrid,
          cfg: raysim.SimConfig, progress=None) -> dict[str, Dataset]:
    """Simulate every (f, h, P) combination per site and merge per site.

    Path geometry depends only on the transmitter height, so it is traced
    once per (site, height) and re-weighted per frequency.
    """
    combos = values.combinations()
    out = {}
    rx = raysim.receiver_positions(scene, grid)
    for site in sites:
        tables = {}
        for h in values.heights_m:
            s = TransmitterSite(site.name, site.position, h, site.power_w, site.gain_dbi)
            tx_xyz = raysim.site_position(scene, s)
            tables[h] = (tx_xyz, raysim.grid_table(scene, tx_xyz, grid, cfg))
            if progress:
                progress(f"traced site {site.name} h={h:g} m: {len(tables[h][1].owner)} paths")
        gains = {}
        parts = []
        for f, h, p in combos:
            if (f, h) not in gains:
                gains[(f, h)] = tables[h][1].gain_db(scene, f, cfg.polarization)
            s = TransmitterSite(site.name, site.position, h, p, site.gain_dbi)
            tx_xyz, table = tables[h]
            parts.append(_samples_from_arrays(scene, tx_xyz, rx, s, f, gains[(f, h)], table.los, grid))
        out[site.name] = Dataset.concat(parts)
    return out


# --------------------------------------------------------------------------
# CSV

def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    return format(float(v), ".17g")


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(COLUMNS) + "\n")
    cols = [ds.column(c) for c in _NUMERIC]
    sites = ds.sites
    for i in range(len(ds)):
        fields = [str(sites[i])]
        for c, arr in zip(_NUMERIC, cols):
            v = arr[i]
            fields.append(str(int(v)) if c == "los" else _fmt(v))
        buf.write(",".join(fields) + "\n")
    return buf.getvalue()


def save_csv(ds: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


def read_table(path, required) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DatasetError(f"{path}: missing header")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise DatasetError(f"{path}: missing columns {missing}")
    return header, rows[1:]


def load_csv(path, strict: bool = True) -> Dataset:
    """Load a dataset CSV.  ``strict`` also rejects extra columns."""
    header, rows = read_table(path, COLUMNS)
    extra = [c for c in header if c not in COLUMNS]
    if strict and extra:
        raise DatasetError(f"{path}: unexpected columns {extra}")
    pos = {c: header.index(c) for c in COLUMNS}
    cols = {c: np.empty(len(rows)) for c in _NUMERIC}
    sites = []
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        sites.append(row[pos["site"]])
        for c in _NUMERIC:
            text = row[pos[c]].strip()
            if text == "":
                if c not in _OPTIONAL:
                    raise DatasetError(f"{path}: row {r}: empty value for required column {c!r}")
                cols[c][r - 2] = np.nan
                continue
            try:
                cols[c][r - 2] = float(text)
            except ValueError:
                raise DatasetError(f"{path}: row {r}: cannot parse {c}={text!r}") from None
    cols["site"] = sites
    try:
        return Dataset(cols) if rows else Dataset()
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def load_features_csv(path):
    """Read a CSV that carries at least the feature columns (target optional).

    Returns (header, rows, feature matrix).
    """
    header, rows = read_table(path, FEATURES)
    pos = [header.index(c) for c in FEATURES]
    x = np.empty((len(rows), len(FEATURES)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {r + 2} has {len(row)} fields, expected {len(header)}")
        try:
            x[r] = [float(row[p]) for p in pos]
        except ValueError:
            raise DatasetError(f"{path}: row {r + 2}: unparsable feature value") from None
    return header, rows, x


# --------------------------------------------------------------------------
# splits and normalization

@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    validation_fraction_of_train: float = 0.15
    k: int = 10
    seed: int = 42

    def __post_init__(self):
        for name in ("test_fraction", "validation_fraction_of_train"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.k < 2:
            raise ValueError("k must be >= 2")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(n: int, fraction: float, seed: int):
    """(kept, held) index arrays, each in ascending order; |held| = round(fraction * n)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_held = _round_half_up(fraction * n)
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def train_test_split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    if len(ds) == 0:
        raise DatasetError("cannot split an empty dataset")
    train, test = split_indices(len(ds), spec.test_fraction, spec.seed)
    return ds.subset(train), ds.subset(test)


def validation_split(train: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    fit, val = split_indices(len(train), spec.validation_fraction_of_train, spec.seed)
    return train.subset(fit), train.subset(val)


def kfold_indices(n: int, k: int, seed: int):
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise DatasetError(f"cannot make {k} folds from {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        hold = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, hold))
    return out


def kfold(ds: Dataset, k: int = 10, seed: int = 42) -> list[tuple[Dataset, Dataset]]:
    return [(ds.subset(tr), ds.subset(ho)) for tr, ho in kfold_indices(len(ds), k, seed)]


@dataclass(frozen=True)
class Normalizer:
    """Per-feature min-max scaling; constant features map to 0."""

    minimum: tuple[float, ...]
    maximum: tuple[float, ...]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo = np.array(self.minimum)
        span = np.array(self.maximum) - lo
        out = np.zeros_like(x)
        ok = span > 0
        out[..., ok] = (x[..., ok] - lo[ok]) / span[ok]
        return out

    def to_dict(self) -> dict:
        return {"min": list(self.minimum), "max": list(self.maximum)}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(tuple(float(v) for v in d["min"]), tuple(float(v) for v in d["max"]))


def fit_normalizer(x: np.ndarray) -> Normalizer:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise DatasetError("normalizer needs a non-empty 2-D feature matrix")
    return Normalizer(tuple(float(v) for v in x.min(axis=0)), tuple(float(v) for v in x.max(axis=0)))


def normalize_fit(train: Dataset) -> Normalizer:
    return fit_normalizer(train.features)


def normalize_apply(norm: Normalizer, ds: Dataset) -> np.ndarray:
    """Normalized feature matrix of ``ds`` (targets are left untouched)."""
    return norm.apply(ds.features)

