"""2.5-D propagation environment: terrain, extruded buildings, materials.

Local coordinates are meters with x pointing east and y pointing north; the
scene anchor (latitude, longitude) sits at local (0, 0).  Scene files are
JSON documents (see ``docs/scene_schema.json``).
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6371000.0
GEODETIC_VALID_RADIUS_M = 100e3
SCENE_FILE_VERSION = 1

Point2 = tuple[float, float]


class SceneError(Exception):
    """Scene file could not be read or parsed."""


class SceneValidationError(SceneError):
    """Scene content violates an invariant."""


@dataclass(frozen=True)
class Material:
    """Dielectric half-space parameters.

    Conductivity follows ``conductivity * f_ghz ** conductivity_exponent``;
    an exponent of 0 gives a frequency-independent value.
    """

    name: str
    rel_permittivity: float
    conductivity: float
    conductivity_exponent: float = 0.0

    def conductivity_at(self, f_ghz: float) -> float:
        if self.conductivity_exponent == 0.0:
            return self.conductivity
        return self.conductivity * f_ghz ** self.conductivity_exponent

    def validate(self) -> None:
        if not self.rel_permittivity > 1.0:
            raise SceneValidationError(
                f"material {self.name!r}: rel_permittivity must be > 1, got {self.rel_permittivity}")
        if not self.conductivity >= 0.0:
            raise SceneValidationError(
                f"material {self.name!r}: conductivity must be >= 0, got {self.conductivity}")
        if not math.isfinite(self.conductivity_exponent):
            raise SceneValidationError(f"material {self.name!r}: non-finite conductivity_exponent")


# Parametric concrete fit: eps_r = 5.31, sigma = 0.0326 * f_GHz ** 0.8095 S/m.
CONCRETE = Material("concrete", 5.31, 0.0326, 0.8095)


@dataclass(frozen=True)
class Building:
    footprint: tuple[Point2, ...]
    height: float
    material: str

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.footprint]
        ys = [p[1] for p in self.footprint]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass(frozen=True)
class Terrain:
    """Flat ground or a row-major elevation grid.

    For ``kind == "grid"`` the elevation samples sit at
    ``origin + (col * cell_size, row * cell_size)`` and are interpolated
    bilinearly (clamped at the edges).
    """

    kind: str = "flat"
    elevation: float = 0.0
    material: str = "concrete"
    origin: Point2 = (0.0, 0.0)
    cell_size: float = 0.0
    rows: int = 0
    cols: int = 0
    elevations: tuple[float, ...] = ()

    @property
    def is_flat(self) -> bool:
        return self.kind == "flat"

    def height_at(self, x: float, y: float) -> float:
        if self.is_flat:
            return self.elevation
        grid = np.asarray(self.elevations, dtype=float).reshape(self.rows, self.cols)
        fx = min(max((x - self.origin[0]) / self.cell_size, 0.0), self.cols - 1.0)
        fy = min(max((y - self.origin[1]) / self.cell_size, 0.0), self.rows - 1.0)
        c0, r0 = int(math.floor(fx)), int(math.floor(fy))
        c1, r1 = min(c0 + 1, self.cols - 1), min(r0 + 1, self.rows - 1)
        tx, ty = fx - c0, fy - r0
        top = grid[r0, c0] * (1 - tx) + grid[r0, c1] * tx
        bottom = grid[r1, c0] * (1 - tx) + grid[r1, c1] * tx
        return float(top * (1 - ty) + bottom * ty)


@dataclass(frozen=True)
class Scene:
    anchor: tuple[float, float]
    materials: dict[str, Material]
    buildings: tuple[Building, ...]
    terrain: Terrain
    bounds: tuple[float, float, float, float]

    def material(self, name: str) -> Material:
        return self.materials[name]

    def ground_height(self, x: float, y: float) -> float:
        return self.terrain.height_at(x, y)

    def building_base(self, building: Building) -> float:
        if self.terrain.is_flat:
            return self.terrain.elevation
        xs, ys = zip(*building.footprint)
        return self.terrain.height_at(sum(xs) / len(xs), sum(ys) / len(ys))

    def contains(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax


@dataclass(frozen=True)
class TransmitterSite:
    name: str
    position: Point2
    height_agl: float
    power_w: float
    gain_dbi: float = 0.0

    def __post_init__(self):
        if not self.height_agl > 0:
            raise ValueError(f"site {self.name!r}: height_agl must be > 0")
        if not self.power_w > 0:
            raise ValueError(f"site {self.name!r}: power_w must be > 0")

    @property
    def p_tx_dbm(self) -> float:
        return 10.0 * math.log10(1000.0 * self.power_w)


@dataclass(frozen=True)
class ReceiverGrid:
    """Rectangular receiver lattice; cell centers sit at half-spacing offsets."""

    extent: tuple[float, float, float, float]
    spacing: float
    rx_height: float = 1.5
    rx_gain_dbi: float = 2.1
    max_distance: float = 1500.0

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.extent
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("receiver grid extent must have positive area")
        if not self.spacing > 0:
            raise ValueError("receiver grid spacing must be > 0")
        if not self.rx_height > 0:
            raise ValueError("receiver height must be > 0")
        if not self.max_distance > 0:
            raise ValueError("max_distance must be > 0")

    @property
    def cols(self) -> int:
        return max(1, int(math.floor((self.extent[2] - self.extent[0]) / self.spacing + 1e-9)))

    @property
    def rows(self) -> int:
        return max(1, int(math.floor((self.extent[3] - self.extent[1]) / self.spacing + 1e-9)))

    def cell_centers(self) -> np.ndarray:
        """(rows * cols, 2) array of cell centers in row-major order (rows along y)."""
        xs = self.extent[0] + (np.arange(self.cols) + 0.5) * self.spacing
        ys = self.extent[1] + (np.arange(self.rows) + 0.5) * self.spacing
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


# --------------------------------------------------------------------------
# polygon helpers

def signed_area(poly: Sequence[Point2]) -> float:
    s = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def _orient(a: Point2, b: Point2, c: Point2) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a: Point2, b: Point2, p: Point2) -> bool:
    return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))


def segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool:
    """Closed-segment intersection test (touching counts)."""
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if ((o1 > 0 > o2) or (o1 < 0 < o2)) and ((o3 > 0 > o4) or (o3 < 0 < o4)):
        return True
    if o1 == 0 and _on_segment(a, b, c):
        return True
    if o2 == 0 and _on_segment(a, b, d):
        return True
    if o3 == 0 and _on_segment(c, d, a):
        return True
    if o4 == 0 and _on_segment(c, d, b):
        return True
    return False


def is_simple_polygon(poly: Sequence[Point2]) -> bool:
    n = len(poly)
    if n < 3:
        return False
    for i in range(n):
        if poly[i] == poly[(i + 1) % n]:
            return False
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if segments_intersect(*edges[i], *edges[j]):
                return False
    return abs(signed_area(poly)) > 0.0


def point_in_polygon(x: float, y: float, poly: Sequence[Point2]) -> bool:
    inside = False
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xc:
                inside = not inside
    return inside


def polygons_overlap(p: Sequence[Point2], q: Sequence[Point2]) -> bool:
    """True when two simple polygons share any point (edges touching included)."""
    for i in range(len(p)):
        for j in range(len(q)):
            if segments_intersect(p[i], p[(i + 1) % len(p)], q[j], q[(j + 1) % len(q)]):
                return True
    return point_in_polygon(*p[0], q) or point_in_polygon(*q[0], p)


# --------------------------------------------------------------------------
# validation

def validate_scene(scene: Scene) -> Scene:
    """Check every invariant and return a scene with CCW footprints.

    All scenes (loaded or generated) pass through here.
    """
    lat, lon = scene.anchor
    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise SceneValidationError(f"anchor latitude {lat} outside [-90, 90]")
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise SceneValidationError(f"anchor longitude {lon} outside [-180, 180]")
    xmin, ymin, xmax, ymax = scene.bounds
    if not (xmax > xmin and ymax > ymin):
        raise SceneValidationError(f"bounds {scene.bounds} have no area")

    for name, mat in scene.materials.items():
        if name != mat.name:
            raise SceneValidationError(f"material key {name!r} does not match name {mat.name!r}")
        mat.validate()

    terrain = scene.terrain
    if terrain.material not in scene.materials:
        raise SceneValidationError(f"terrain references unknown material {terrain.material!r}")
    if terrain.kind == "flat":
        if not math.isfinite(terrain.elevation):
            raise SceneValidationError("terrain elevation is not finite")
    elif terrain.kind == "grid":
        if not terrain.cell_size > 0:
            raise SceneValidationError("terrain grid cell_size must be > 0")
        if terrain.rows < 1 or terrain.cols < 1 or len(terrain.elevations) != terrain.rows * terrain.cols:
            raise SceneValidationError("terrain grid elevations do not match rows * cols")
        if not all(math.isfinite(e) for e in terrain.elevations):
            raise SceneValidationError("terrain grid contains non-finite elevations")
    else:
        raise SceneValidationError(f"unknown terrain kind {terrain.kind!r}")

    fixed = []
    for i, b in enumerate(scene.buildings):
        label = f"building[{i}]"
        if b.material not in scene.materials:
            raise SceneValidationError(f"{label} references unknown material {b.material!r}")
        if not (math.isfinite(b.height) and b.height > 0):
            raise SceneValidationError(f"{label} height must be > 0, got {b.height}")
        poly = tuple((float(x), float(y)) for x, y in b.footprint)
        if not all(math.isfinite(c) for p in poly for c in p):
            raise SceneValidationError(f"{label} footprint has non-finite coordinates")
        if len(poly) < 3:
            raise SceneValidationError(f"{label} footprint needs at least 3 vertices")
        if not is_simple_polygon(poly):
            raise SceneValidationError(f"{label} footprint is not a simple polygon (self-intersecting or degenerate)")
        if signed_area(poly) < 0:
            poly = tuple(reversed(poly))
        bx0, by0, bx1, by1 = Building(poly, b.height, b.material).bbox
        if bx0 < xmin or by0 < ymin or bx1 > xmax or by1 > ymax:
            raise SceneValidationError(f"{label} footprint lies outside scene bounds {scene.bounds}")
        fixed.append(Building(poly, float(b.height), b.material))
    return Scene(scene.anchor, dict(scene.materials), tuple(fixed), terrain, scene.bounds)


# --------------------------------------------------------------------------
# serialization

def _material_to_dict(m: Material) -> dict:
    d = {"name": m.name, "rel_permittivity": m.rel_permittivity, "conductivity": m.conductivity}
    if m.conductivity_exponent:
        d["conductivity_exponent"] = m.conductivity_exponent
    return d


def scene_to_dict(scene: Scene) -> dict:
    t = scene.terrain
    if t.is_flat:
        terrain = {"kind": "flat", "elevation": t.elevation, "material": t.material}
    else:
        terrain = {"kind": "grid", "origin": list(t.origin), "cell_size": t.cell_size,
                   "rows": t.rows, "cols": t.cols, "elevations": list(t.elevations),
                   "material": t.material}
    return {
        "version": SCENE_FILE_VERSION,
        "anchor": {"lat": scene.anchor[0], "lon": scene.anchor[1]},
        "bounds": list(scene.bounds),
        "materials": [_material_to_dict(scene.materials[k]) for k in sorted(scene.materials)],
        "terrain": terrain,
        "buildings": [
            {"footprint": [list(p) for p in b.footprint], "height": b.height, "material": b.material}
            for b in scene.buildings
        ],
    }


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=1) + "\n"


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise SceneError(f"{where}: missing field {key!r}")
    return d[key]


def scene_from_dict(doc: dict) -> Scene:
    if not isinstance(doc, dict):
        raise SceneError("scene document must be a JSON object")
    version = _require(doc, "version", "scene")
    if version != SCENE_FILE_VERSION:
        raise SceneError(f"unsupported scene version {version!r}")
    try:
        anchor = _require(doc, "anchor", "scene")
        anchor = (float(anchor["lat"]), float(anchor["lon"]))
        materials = {}
        for m in _require(doc, "materials", "scene"):
            mat = Material(str(m["name"]), float(m["rel_permittivity"]), float(m["conductivity"]),
                           float(m.get("conductivity_exponent", 0.0)))
            if mat.name in materials:
                raise SceneValidationError(f"duplicate material name {mat.name!r}")
            materials[mat.name] = mat
        t = _require(doc, "terrain", "scene")
        if t.get("kind", "flat") == "flat":
            terrain = Terrain("flat", float(t.get("elevation", 0.0)), str(t.get("material", "concrete")))
        else:
            terrain = Terrain(str(t["kind"]), 0.0, str(t.get("material", "concrete")),
                              tuple(float(v) for v in t["origin"]), float(t["cell_size"]),
                              int(t["rows"]), int(t["cols"]), tuple(float(v) for v in t["elevations"]))
        buildings = tuple(
            Building(tuple((float(p[0]), float(p[1])) for p in b["footprint"]),
                     float(b["height"]), str(b["material"]))
            for b in _require(doc, "buildings", "scene")
        )
        bounds = tuple(float(v) for v in _require(doc, "bounds", "scene"))
        if len(bounds) != 4:
            raise SceneError("bounds must be [xmin, ymin, xmax, ymax]")
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneError(f"malformed scene document: {exc!r}") from exc
    return validate_scene(Scene(anchor, materials, buildings, terrain, bounds))


def loads_scene(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"scene file is not valid JSON: {exc}") from exc
    return scene_from_dict(doc)


def load_scene(path) -> Scene:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc}") from exc
    return loads_scene(text)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_scene(scene: Scene, path) -> None:
    atomic_write_text(path, dumps_scene(scene))


def demo_scene_path() -> Path:
    return Path(__file__).parent / "data" / "suburb_demo.json"


# --------------------------------------------------------------------------
# generation

@dataclass(frozen=True)
class GenerationSpec:
    """Parameters for the synthetic suburb generator.

    Buildings are rotated rectangles.  A ``campus_fraction`` share of them
    are large campus buildings, the rest small houses.  ``keepout`` lists
    (x, y, radius) discs that stay free of buildings (e.g. mast sites).
    """

    n_buildings: int = 50
    bounds: tuple[float, float, float, float] = (-550.0, -550.0, 550.0, 550.0)
    anchor: tuple[float, float] = (22.311359, 39.102723)
    campus_fraction: float = 0.2
    house_size: tuple[float, float] = (10.0, 22.0)
    house_height: tuple[float, float] = (3.0, 8.0)
    campus_size: tuple[float, float] = (30.0, 70.0)
    campus_height: tuple[float, float] = (12.0, 25.0)
    min_gap: float = 4.0
    margin: float = 10.0
    keepout: tuple[tuple[float, float, float], ...] = ()
    max_attempts: int = 200


def _rectangle(cx, cy, w, d, angle) -> tuple[Point2, ...]:
    c, s = math.cos(angle), math.sin(angle)
    corners = [(-w / 2, -d / 2), (w / 2, -d / 2), (w / 2, d / 2), (-w / 2, d / 2)]
    return tuple((cx + c * u - s * v, cy + s * u + c * v) for u, v in corners)


def _inflate(poly, gap):
    cx = sum(p[0] for p in poly) / len(poly)
    cy = sum(p[1] for p in poly) / len(poly)
    out = []
    for x, y in poly:
        dx, dy = x - cx, y - cy
        r = math.hypot(dx, dy)
        k = (r + gap) / r
        out.append((cx + dx * k, cy + dy * k))
    return out


def generate_scene(seed: int, spec: GenerationSpec = GenerationSpec()) -> Scene:
    """Place non-overlapping rectangular buildings deterministically from ``seed``."""
    if spec.n_buildings < 0:
        raise ValueError("n_buildings must be >= 0")
    xmin, ymin, xmax, ymax = spec.bounds
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("generation bounds must have positive area")
    rng = np.random.default_rng(seed)
    n_campus = int(round(spec.n_buildings * spec.campus_fraction))
    kinds = ["campus"] * n_campus + ["house"] * (spec.n_buildings - n_campus)
    placed: list[Building] = []
    inflated: list[list[Point2]] = []
    boxes: list[tuple[float, float, float, float]] = []
    for i, kind in enumerate(kinds):
        size = spec.campus_size if kind == "campus" else spec.house_size
        hrange = spec.campus_height if kind == "campus" else spec.house_height
        for _ in range(spec.max_attempts):
            w = rng.uniform(*size)
            d = rng.uniform(size[0], size[1])
            angle = rng.uniform(0.0, math.pi / 2)
            half = 0.5 * math.hypot(w, d) + spec.margin
            if xmax - xmin <= 2 * half or ymax - ymin <= 2 * half:
                continue
            cx = rng.uniform(xmin + half, xmax - half)
            cy = rng.uniform(ymin + half, ymax - half)
            poly = _rectangle(cx, cy, w, d, angle)
            if any(math.hypot(cx - kx, cy - ky) < kr + 0.5 * math.hypot(w, d) for kx, ky, kr in spec.keepout):
                continue
            grown = _inflate(poly, spec.min_gap)
            gx = [p[0] for p in grown]
            gy = [p[1] for p in grown]
            box = (min(gx), min(gy), max(gx), max(gy))
            clash = False
            for other, ob in zip(inflated, boxes):
                if box[0] > ob[2] or box[2] < ob[0] or box[1] > ob[3] or box[3] < ob[1]:
                    continue
                if polygons_overlap(grown, other):
                    clash = True
                    break
            if clash:
                continue
            height = round(float(rng.uniform(*hrange)), 1)
            poly = tuple((round(x, 3), round(y, 3)) for x, y in poly)
            placed.append(Building(poly, height, "concrete"))
            inflated.append(grown)
            boxes.append(box)
            break
        else:
            raise ValueError(
                f"cannot place building {i} ({kind}) without overlap after {spec.max_attempts} attempts")
    scene = Scene(spec.anchor, {"concrete": CONCRETE}, tuple(placed),
                  Terrain("flat", 0.0, "concrete"), spec.bounds)
    return validate_scene(scene)


# --------------------------------------------------------------------------
# geodetic conversion (spherical earth, equirectangular about the anchor)

def geodetic_from_local(scene_or_anchor, x: float, y: float) -> tuple[float, float]:
    lat0, lon0 = _anchor(scene_or_anchor)
    if math.hypot(x, y) > GEODETIC_VALID_RADIUS_M:
        raise ValueError(f"point ({x}, {y}) is more than 100 km from the anchor")
    lat = lat0 + math.degrees(y / EARTH_RADIUS_M)
    lon = lon0 + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return lat, lon


def local_from_geodetic(scene_or_anchor, lat: float, lon: float) -> tuple[float, float]:
    lat0, lon0 = _anchor(scene_or_anchor)
    y = math.radians(lat - lat0) * EARTH_RADIUS_M
    x = math.radians(lon - lon0) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    if math.hypot(x, y) > GEODETIC_VALID_RADIUS_M:
        raise ValueError(f"({lat}, {lon}) is more than 100 km from the anchor")
    return x, y


def geodetic_offsets(anchor: tuple[float, float], x: np.ndarray, y: np.ndarray):
    """Vectorized (dlat, dlon) in degrees of local offsets relative to the anchor."""
    lat0 = anchor[0]
    dlat = np.degrees(np.asarray(y, dtype=float) / EARTH_RADIUS_M)
    dlon = np.degrees(np.asarray(x, dtype=float) / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return dlat, dlon


def _anchor(scene_or_anchor) -> tuple[float, float]:
    if isinstance(scene_or_anchor, Scene):
        return scene_or_anchor.anchor
    return tuple(scene_or_anchor)


def scene_from_buildings(buildings: Iterable[Building], bounds, anchor=(0.0, 0.0),
                         materials: dict[str, Material] | None = None,
                         terrain: Terrain | None = None) -> Scene:
    """Convenience constructor that runs the validator."""
    materials = materials or {"concrete": CONCRETE}
    terrain = terrain or Terrain("flat", 0.0, next(iter(materials)))
    return validate_scene(Scene(tuple(anchor), materials, tuple(buildings), terrain, tuple(bounds)))
