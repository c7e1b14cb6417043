"""Deterministic image-method multipath simulator.

Paths are the direct ray plus specular reflections off building walls and
flat ground, found by mirroring the transmitter through candidate surface
sequences and back-tracking from each receiver.  Candidate wall sequences
are pruned with 2-D beam tracing (a wall is only considered if part of it
lies inside the beam reflected by the previous wall) and by an unfolded
length bound.  Received power is the coherent field sum over paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .scene import Material, ReceiverGrid, Scene, TransmitterSite, geodetic_offsets

SPEED_OF_LIGHT = 299792458.0
VACUUM_PERMITTIVITY = 8.8541878128e-12
# interaction vertices are excluded from visibility tests within this distance
_VERTEX_TOL_M = 1e-6
# |field sum| below this fraction of the summed magnitudes is treated as a null
_NULL_REL_TOL = 1e-12

POLARIZATIONS = ("perpendicular", "parallel", "surface")


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``max_reflections`` bounds the total interaction count; walls are
    further limited by ``max_wall_reflections`` (None = no extra limit).
    Orders above 4 need ``allow_high_order``.  ``polarization="surface"``
    uses the parallel coefficient on the ground and perpendicular on walls.
    """

    frequency_ghz: float = 2.3
    max_reflections: int = 4
    max_wall_reflections: int | None = None
    max_distance_m: float = 1500.0
    polarization: str = "surface"
    allow_high_order: bool = False

    def __post_init__(self):
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")
        if self.max_reflections > 4 and not self.allow_high_order:
            raise ValueError("max_reflections > 4 requires allow_high_order=True")
        if self.max_wall_reflections is not None and self.max_wall_reflections < 0:
            raise ValueError("max_wall_reflections must be >= 0")
        if not (0.1 <= self.frequency_ghz <= 100.0):
            raise ValueError(f"frequency {self.frequency_ghz} GHz outside [0.1, 100]")
        if not self.max_distance_m > 0:
            raise ValueError("max_distance_m must be > 0")
        if self.polarization not in POLARIZATIONS:
            raise ValueError(f"polarization must be one of {POLARIZATIONS}")

    @property
    def wall_limit(self) -> int:
        if self.max_wall_reflections is None:
            return self.max_reflections
        return min(self.max_wall_reflections, self.max_reflections)

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / (self.frequency_ghz * 1e9)


@dataclass(frozen=True)
class RayPath:
    """One multipath component.

    ``surfaces`` names each interaction ("ground" or "b<i>w<j>") and
    ``cos_incidence`` holds the cosine of its angle from the surface normal.
    """

    order: int
    vertices: tuple[tuple[float, float, float], ...]
    length: float
    reflection_coeffs: tuple[complex, ...] = ()
    surfaces: tuple[str, ...] = ()
    cos_incidence: tuple[float, ...] = ()

    @property
    def kind(self) -> str:
        return "direct" if self.order == 0 else "reflected"


@dataclass(frozen=True)
class PropagationResult:
    rx_position: tuple[float, float, float]
    distance_3d: float
    los: bool
    paths: tuple[RayPath, ...]
    p_rx_dbm: float | None
    path_loss_db: float | None


@dataclass(frozen=True)
class CoverageGrid:
    grid: ReceiverGrid
    site: TransmitterSite
    frequency_ghz: float
    tx_position: tuple[float, float, float]
    results: tuple[PropagationResult, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.rows, self.grid.cols

    def covered_count(self) -> int:
        return sum(r.p_rx_dbm is not None for r in self.results)


# --------------------------------------------------------------------------
# interaction physics

def fresnel_coefficients(rel_permittivity, conductivity, f_ghz, cos_theta, parallel):
    """Vectorized Fresnel reflection coefficients of a lossy dielectric half-space.

    ``cos_theta`` is measured from the surface normal.  The parallel
    coefficient uses the convention that tends to -1 at grazing incidence.
    """
    cos_t = np.asarray(cos_theta, dtype=float)
    sigma = np.asarray(conductivity, dtype=float)
    eps = np.asarray(rel_permittivity, dtype=float) - 1j * sigma / (2.0 * math.pi * f_ghz * 1e9 * VACUUM_PERMITTIVITY)
    root = np.sqrt(eps - (1.0 - cos_t * cos_t))
    perp = (cos_t - root) / (cos_t + root)
    par = (eps * cos_t - root) / (eps * cos_t + root)
    return np.where(np.asarray(parallel, dtype=bool), par, perp)


def fresnel_reflection(material: Material, frequency_ghz: float, incidence_angle: float,
                       polarization: str) -> complex:
    if not (0.0 <= incidence_angle < math.pi / 2):
        raise ValueError("incidence angle must lie in [0, pi/2)")
    if polarization not in ("perpendicular", "parallel"):
        raise ValueError("polarization must be 'perpendicular' or 'parallel'")
    g = fresnel_coefficients(material.rel_permittivity, material.conductivity_at(frequency_ghz),
                             frequency_ghz, math.cos(incidence_angle), polarization == "parallel")
    return complex(g)


def _coherent_sum(lengths, coeffs, owner, n_owner, wavelength):
    """Sum of path amplitudes per owner (receiver) in table order."""
    lengths = np.asarray(lengths, dtype=float)
    gprod = np.ones(lengths.shape[0], dtype=complex)
    for j in range(coeffs.shape[1]):
        gprod = gprod * coeffs[:, j]
    amp = (wavelength / (4.0 * math.pi * lengths)) * gprod * np.exp(-1j * (2.0 * math.pi / wavelength) * lengths)
    total = np.zeros(n_owner, dtype=complex)
    scale = np.zeros(n_owner, dtype=float)
    np.add.at(total, owner, amp)
    np.add.at(scale, owner, np.abs(amp))
    return total, scale


def _gain_db(total, scale):
    mag = np.abs(total)
    out = np.full(mag.shape, np.nan)
    ok = (scale > 0) & (mag > _NULL_REL_TOL * scale)
    out[ok] = 20.0 * np.log10(mag[ok])
    return out


def received_power(paths, cfg: SimConfig, p_tx_dbm: float, g_tx_dbi: float, g_rx_dbi: float):
    """Coherent received power in dBm, or None without paths or at an exact null."""
    if not paths:
        return None
    width = max(len(p.reflection_coeffs) for p in paths)
    coeffs = np.ones((len(paths), max(width, 1)), dtype=complex)
    for i, p in enumerate(paths):
        coeffs[i, :len(p.reflection_coeffs)] = p.reflection_coeffs
    total, scale = _coherent_sum([p.length for p in paths], coeffs, np.zeros(len(paths), dtype=np.int64),
                                 1, cfg.wavelength_m)
    gain = _gain_db(total, scale)[0]
    if np.isnan(gain):
        return None
    return p_tx_dbm + g_tx_dbi + g_rx_dbi + float(gain)


def path_loss(p_tx_dbm: float, g_tx_dbi: float, g_rx_dbi: float, p_rx_dbm: float) -> float:
    """Link-budget path loss: transmit power plus both gains minus received power."""
    return p_tx_dbm + g_tx_dbi + g_rx_dbi - p_rx_dbm


# --------------------------------------------------------------------------
# scene geometry in array form

@dataclass
class _Geometry:
    vstart: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    bbox: np.ndarray
    zhi: np.ndarray
    w_p0: np.ndarray
    w_p1: np.ndarray
    w_e: np.ndarray
    w_len: np.ndarray
    w_n: np.ndarray
    w_c: np.ndarray
    w_zlo: np.ndarray
    w_zhi: np.ndarray
    w_building: np.ndarray
    w_index: np.ndarray
    w_material: np.ndarray
    ground_z: float
    flat: bool
    material_names: list = field(default_factory=list)
    ground_material: int = 0


def _geometry(scene: Scene) -> _Geometry:
    cached = getattr(scene, "_geom_cache", None)
    if cached is not None:
        return cached
    names = sorted(scene.materials)
    mat_index = {n: i for i, n in enumerate(names)}
    vstart = [0]
    vx, vy, bbox, zhi = [], [], [], []
    walls = []
    for bi, b in enumerate(scene.buildings):
        base = scene.building_base(b)
        top = base + b.height
        pts = b.footprint
        for x, y in pts:
            vx.append(x)
            vy.append(y)
        vstart.append(len(vx))
        bbox.append(b.bbox)
        zhi.append(top)
        for j in range(len(pts)):
            p0, p1 = pts[j], pts[(j + 1) % len(pts)]
            walls.append((p0, p1, base, top, bi, j, mat_index[b.material]))
    nw = len(walls)
    w_p0 = np.array([w[0] for w in walls], dtype=float).reshape(nw, 2)
    w_p1 = np.array([w[1] for w in walls], dtype=float).reshape(nw, 2)
    d = w_p1 - w_p0
    w_len = np.hypot(d[:, 0], d[:, 1])
    w_e = d / w_len[:, None] if nw else d
    w_n = np.column_stack([w_e[:, 1], -w_e[:, 0]]) if nw else np.zeros((0, 2))
    w_c = np.einsum("ij,ij->i", w_n, w_p0) if nw else np.zeros(0)
    flat = scene.terrain.is_flat
    geom = _Geometry(
        vstart=np.array(vstart, dtype=np.int64),
        vx=np.array(vx, dtype=float), vy=np.array(vy, dtype=float),
        bbox=np.array(bbox, dtype=float).reshape(len(scene.buildings), 4),
        zhi=np.array(zhi, dtype=float),
        w_p0=np.ascontiguousarray(w_p0), w_p1=np.ascontiguousarray(w_p1),
        w_e=np.ascontiguousarray(w_e), w_len=w_len, w_n=np.ascontiguousarray(w_n), w_c=w_c,
        w_zlo=np.array([w[2] for w in walls], dtype=float),
        w_zhi=np.array([w[3] for w in walls], dtype=float),
        w_building=np.array([w[4] for w in walls], dtype=np.int64),
        w_index=np.array([w[5] for w in walls], dtype=np.int64),
        w_material=np.array([w[6] for w in walls], dtype=np.int64),
        ground_z=float(scene.terrain.elevation) if flat else 0.0,
        flat=flat,
        material_names=names,
        ground_material=mat_index[scene.terrain.material],
    )
    object.__setattr__(scene, "_geom_cache", geom)
    return geom


def _terrain_blocked(scene: Scene, verts: np.ndarray, nverts: np.ndarray) -> np.ndarray:
    """Sampled check of vertex chains against grid terrain."""
    t = scene.terrain
    out = np.zeros(len(verts), dtype=bool)
    step = t.cell_size / 4.0
    for m in range(len(verts)):
        for i in range(int(nverts[m]) - 1):
            a, b = verts[m, i], verts[m, i + 1]
            n = max(2, int(math.ceil(np.linalg.norm(b[:2] - a[:2]) / step)) + 1)
            for s in np.linspace(0.0, 1.0, n)[1:-1]:
                p = a + s * (b - a)
                if p[2] < t.height_at(p[0], p[1]) - 1e-9:
                    out[m] = True
                    break
            if out[m]:
                break
    return out


def _chains_blocked(scene: Scene, geom: _Geometry, verts, nverts, tol):
    blocked = K.chains_blocked(verts, nverts, tol, geom.vstart, geom.vx, geom.vy, geom.bbox,
                               geom.zhi, geom.ground_z, geom.flat)
    if not geom.flat and len(verts):
        blocked |= _terrain_blocked(scene, verts, nverts)
    return blocked


def los_blocked(scene: Scene, a, b) -> bool:
    """True if segment a-b touches any building volume or passes below the terrain."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        raise ValueError("segment endpoints must differ")
    geom = _geometry(scene)
    verts = np.stack([a, b])[None, :, :]
    return bool(_chains_blocked(scene, geom, verts, np.array([2]), 0.0)[0])


# --------------------------------------------------------------------------
# surface-sequence enumeration

def _mirror_wall(p, geom, w):
    n = geom.w_n[w]
    s = n[0] * p[0] + n[1] * p[1] - geom.w_c[w]
    return (p[0] - 2.0 * s * n[0], p[1] - 2.0 * s * n[1], p[2])


def _clip_segment(a, b, planes):
    """Clip 2-D segment a-b to {X : h(X) >= 0 for every affine h}; None if empty."""
    s0, s1 = 0.0, 1.0
    for (gx, gy, g0) in planes:
        fa = gx * a[0] + gy * a[1] + g0
        fb = gx * b[0] + gy * b[1] + g0
        tol = 1e-9 * (abs(gx) + abs(gy)) * (1.0 + abs(a[0]) + abs(a[1]) + abs(b[0]) + abs(b[1]))
        if fa < -tol and fb < -tol:
            return None
        if fa < -tol:
            s0 = max(s0, fa / (fa - fb))
        elif fb < -tol:
            s1 = min(s1, fa / (fa - fb))
        if s1 < s0:
            return None
    return ((a[0] + s0 * (b[0] - a[0]), a[1] + s0 * (b[1] - a[1])),
            (a[0] + s1 * (b[0] - a[0]), a[1] + s1 * (b[1] - a[1])))


def _beam_planes(apex, a, b, geom, w):
    """Half-planes bounding the beam reflected by wall w through its lit part a-b."""
    n = geom.w_n[w]
    planes = [(n[0], n[1], -geom.w_c[w])]
    ax, ay = a[0] - apex[0], a[1] - apex[1]
    bx, by = b[0] - apex[0], b[1] - apex[1]
    o = ax * by - ay * bx
    if o == 0.0:
        return None
    sgn = 1.0 if o > 0 else -1.0
    # sgn * cross(A - I, X - I) >= 0
    planes.append((-sgn * ay, sgn * ax, sgn * (ay * apex[0] - ax * apex[1])))
    # sgn * cross(X - I, B - I) >= 0
    planes.append((sgn * by, -sgn * bx, sgn * (bx * apex[1] - by * apex[0])))
    return planes


def _point_segment_distance(p, a, b):
    ax, ay = b[0] - a[0], b[1] - a[1]
    l2 = ax * ax + ay * ay
    t = 0.0 if l2 == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * ax + (p[1] - a[1]) * ay) / l2))
    return math.hypot(p[0] + 0.0 - (a[0] + t * ax), p[1] - (a[1] + t * ay))


def enumerate_sequences(scene: Scene, tx, cfg: SimConfig):
    """Candidate surface sequences with the transmitter images they produce.

    Returns {order: (surfs (S, k) int array, images (S, k+1, 3) array)};
    wall surfaces are indices into the scene's wall list, ground is -1.
    """
    geom = _geometry(scene)
    nw = len(geom.w_len)
    tx = (float(tx[0]), float(tx[1]), float(tx[2]))
    out: dict[int, tuple[list, list]] = {}
    ground_ok = geom.flat
    limit = cfg.max_distance_m

    def visit(seq, images, beam, n_walls):
        k = len(seq)
        if k >= cfg.max_reflections:
            return
        img = images[-1]
        last = seq[-1] if seq else None
        if ground_ok and last != K.GROUND and img[2] - geom.ground_z > 0:
            gimg = (img[0], img[1], 2.0 * geom.ground_z - img[2])
            _record(seq + (K.GROUND,), images + (gimg,))
            visit(seq + (K.GROUND,), images + (gimg,), beam, n_walls)
        if n_walls >= cfg.wall_limit:
            return
        for w in range(nw):
            if w == last:
                continue
            n = geom.w_n[w]
            if n[0] * img[0] + n[1] * img[1] - geom.w_c[w] <= 0.0:
                continue
            a, b = tuple(geom.w_p0[w]), tuple(geom.w_p1[w])
            if beam is not None:
                clipped = _clip_segment(a, b, beam)
                if clipped is None:
                    continue
                a, b = clipped
            if _point_segment_distance(img, a, b) > limit:
                continue
            wimg = _mirror_wall(img, geom, w)
            new_beam = _beam_planes(wimg, a, b, geom, w)
            if new_beam is None:
                continue
            _record(seq + (w,), images + (wimg,))
            visit(seq + (w,), images + (wimg,), new_beam, n_walls + 1)

    def _record(seq, images):
        bucket = out.setdefault(len(seq), ([], []))
        bucket[0].append(seq)
        bucket[1].append(images)

    visit((), (tx,), None, 0)
    return {k: (np.array(v[0], dtype=np.int64), np.array(v[1], dtype=float)) for k, v in sorted(out.items())}


# --------------------------------------------------------------------------
# path tables

@dataclass
class PathTable:
    """Frequency-independent multipath geometry for one transmitter and many receivers.

    Rows are sorted by (receiver, order, length, surface sequence).
    """

    tx: np.ndarray
    rx: np.ndarray
    owner: np.ndarray
    order: np.ndarray
    length: np.ndarray
    verts: np.ndarray          # (P, kmax + 2, 3), padded
    surfs: np.ndarray          # (P, kmax), -2 = padding
    cos_inc: np.ndarray        # (P, kmax)
    los: np.ndarray            # per receiver
    distance: np.ndarray       # per receiver

    def coefficients(self, scene: Scene, f_ghz: float, polarization: str) -> np.ndarray:
        geom = _geometry(scene)
        coeffs = np.ones(self.surfs.shape, dtype=complex)
        mats = [scene.materials[n] for n in geom.material_names]
        used = self.surfs != -2
        if not used.any():
            return coeffs
        is_ground = self.surfs == K.GROUND
        mat_idx = np.where(is_ground, geom.ground_material,
                           geom.w_material[np.clip(self.surfs, 0, None)] if len(geom.w_material) else 0)
        eps = np.array([m.rel_permittivity for m in mats])[mat_idx]
        sig = np.array([m.conductivity_at(f_ghz) for m in mats])[mat_idx]
        if polarization == "surface":
            parallel = is_ground
        else:
            parallel = np.full(self.surfs.shape, polarization == "parallel")
        g = fresnel_coefficients(eps[used], sig[used], f_ghz, self.cos_inc[used], parallel[used])
        coeffs[used] = g
        return coeffs

    def gain_db(self, scene: Scene, f_ghz: float, polarization: str) -> np.ndarray:
        """20*log10 |field sum| per receiver; NaN where no power arrives."""
        coeffs = self.coefficients(scene, f_ghz, polarization)
        total, scale = _coherent_sum(self.length, coeffs, self.owner, len(self.rx),
                                     SPEED_OF_LIGHT / (f_ghz * 1e9))
        return _gain_db(total, scale)


def trace_table(scene: Scene, tx, rx, cfg: SimConfig) -> PathTable:
    geom = _geometry(scene)
    tx = np.asarray(tx, dtype=float).reshape(3)
    rx = np.ascontiguousarray(np.asarray(rx, dtype=float).reshape(-1, 3))
    n_rx = len(rx)
    kmax = cfg.max_reflections
    width = kmax + 2
    diff = rx - tx
    distance = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if np.any(distance == 0.0):
        raise ValueError("transmitter and receiver positions coincide")

    parts = []  # (owner, order, seq_rank, verts(k+2), surfs(k))
    # direct paths
    dverts = np.zeros((n_rx, 2, 3))
    dverts[:, 0] = tx
    dverts[:, 1] = rx
    in_range = distance <= cfg.max_distance_m
    blocked = np.ones(n_rx, dtype=bool)
    if in_range.any():
        idx = np.nonzero(in_range)[0]
        blocked[idx] = _chains_blocked(scene, geom, np.ascontiguousarray(dverts[idx]),
                                       np.full(len(idx), 2, dtype=np.int64), 0.0)
    los = ~blocked
    d_idx = np.nonzero(los)[0]
    parts.append((d_idx, 0, np.zeros(len(d_idx), dtype=np.int64), dverts[d_idx],
                  np.zeros((len(d_idx), 0), dtype=np.int64)))

    if kmax > 0 and n_rx:
        seqs = enumerate_sequences(scene, tx, cfg)
        for k, (surfs, images) in seqs.items():
            seq_idx, rx_idx, pts = K.backtrack(
                np.ascontiguousarray(images), np.ascontiguousarray(surfs), rx, cfg.max_distance_m,
                geom.w_p0, geom.w_e, geom.w_len, geom.w_n, geom.w_c, geom.w_zlo, geom.w_zhi,
                geom.ground_z)
            if len(seq_idx) == 0:
                continue
            verts = np.empty((len(seq_idx), k + 2, 3))
            verts[:, 0] = tx
            verts[:, 1:k + 1] = pts
            verts[:, k + 1] = rx[rx_idx]
            ok = ~_chains_blocked(scene, geom, verts, np.full(len(seq_idx), k + 2, dtype=np.int64),
                                  _VERTEX_TOL_M)
            parts.append((rx_idx[ok], k, seq_idx[ok], verts[ok], surfs[seq_idx[ok]]))

    owner = np.concatenate([p[0] for p in parts]).astype(np.int64)
    order = np.concatenate([np.full(len(p[0]), p[1], dtype=np.int64) for p in parts])
    rank = np.concatenate([p[2] for p in parts]).astype(np.int64)
    n_paths = len(owner)
    verts = np.zeros((n_paths, width, 3))
    surfs = np.full((n_paths, kmax), -2, dtype=np.int64)
    row = 0
    for p in parts:
        m, k = len(p[0]), p[1]
        verts[row:row + m, :k + 2] = p[3]
        surfs[row:row + m, :k] = p[4]
        row += m
    nverts = order + 2
    seg = np.diff(verts, axis=1)
    seg_len = np.sqrt(np.einsum("pij,pij->pi", seg, seg))
    seg_len[np.arange(width - 1)[None, :] >= (nverts - 1)[:, None]] = 0.0
    length = seg_len.sum(axis=1)

    keep = length <= cfg.max_distance_m
    sel = np.lexsort((rank, length, order, owner))
    sel = sel[keep[sel]]
    owner, order, rank, length = owner[sel], order[sel], rank[sel], length[sel]
    verts, surfs, seg, seg_len = verts[sel], surfs[sel], seg[sel], seg_len[sel]

    # drop duplicate chains (e.g. a reflection point on an edge shared by two faces)
    if len(owner) > 1:
        same = ((owner[1:] == owner[:-1]) & (order[1:] == order[:-1])
                & (np.abs(length[1:] - length[:-1]) <= 1e-9 * length[1:])
                & (np.abs(verts[1:] - verts[:-1]).reshape(len(owner) - 1, -1).max(axis=1) <= 1e-6))
        if same.any():
            keep = np.concatenate([[True], ~same])
            owner, order, rank, length = owner[keep], order[keep], rank[keep], length[keep]
            verts, surfs, seg, seg_len = verts[keep], surfs[keep], seg[keep], seg_len[keep]

    cos_inc = np.ones((len(owner), kmax))
    for j in range(kmax):
        active = surfs[:, j] != -2
        if not active.any():
            continue
        d_in = seg[active, j]
        nrm = np.zeros_like(d_in)
        g = surfs[active, j] == K.GROUND
        nrm[g, 2] = 1.0
        w = surfs[active, j][~g]
        nrm[~g, 0] = geom.w_n[w, 0]
        nrm[~g, 1] = geom.w_n[w, 1]
        cos_inc[active, j] = np.abs(np.einsum("ij,ij->i", d_in, nrm)) / seg_len[active, j]

    los = los & np.isin(np.arange(n_rx), owner[order == 0])
    return PathTable(tx=tx, rx=rx, owner=owner, order=order, length=length, verts=verts,
                     surfs=surfs, cos_inc=cos_inc, los=los, distance=distance)


def _surface_label(geom: _Geometry, s: int) -> str:
    if s == K.GROUND:
        return "ground"
    return f"b{int(geom.w_building[s])}w{int(geom.w_index[s])}"


def _materialize(scene: Scene, table: PathTable, coeffs: np.ndarray, rows) -> tuple[RayPath, ...]:
    geom = _geometry(scene)
    paths = []
    for r in rows:
        k = int(table.order[r])
        paths.append(RayPath(
            order=k,
            vertices=tuple(tuple(float(c) for c in v) for v in table.verts[r, :k + 2]),
            length=float(table.length[r]),
            reflection_coeffs=tuple(complex(c) for c in coeffs[r, :k]),
            surfaces=tuple(_surface_label(geom, int(s)) for s in table.surfs[r, :k]),
            cos_incidence=tuple(float(c) for c in table.cos_inc[r, :k]),
        ))
    return tuple(paths)


def trace_paths(scene: Scene, tx, rx, cfg: SimConfig) -> list[RayPath]:
    """All valid direct and specular paths between two points, ordered by (order, length)."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    if np.array_equal(tx, rx):
        raise ValueError("tx and rx must differ")
    table = trace_table(scene, tx, rx[None, :], cfg)
    coeffs = table.coefficients(scene, cfg.frequency_ghz, cfg.polarization)
    return list(_materialize(scene, table, coeffs, range(len(table.owner))))


def site_position(scene: Scene, site: TransmitterSite) -> np.ndarray:
    x, y = site.position
    return np.array([x, y, scene.ground_height(x, y) + site.height_agl])


def receiver_positions(scene: Scene, grid: ReceiverGrid) -> np.ndarray:
    xy = grid.cell_centers()
    if scene.terrain.is_flat:
        z = np.full(len(xy), scene.terrain.elevation + grid.rx_height)
    else:
        z = np.array([scene.ground_height(x, y) for x, y in xy]) + grid.rx_height
    return np.column_stack([xy, z])


def _check_grid(scene: Scene, grid: ReceiverGrid):
    xmin, ymin, xmax, ymax = grid.extent
    bx0, by0, bx1, by1 = scene.bounds
    if xmin < bx0 or ymin < by0 or xmax > bx1 or ymax > by1:
        raise ValueError(f"receiver grid {grid.extent} lies outside scene bounds {scene.bounds}")


def grid_table(scene: Scene, tx_xyz, grid: ReceiverGrid, cfg: SimConfig) -> PathTable:
    _check_grid(scene, grid)
    if cfg.max_distance_m != grid.max_distance:
        cfg = SimConfig(cfg.frequency_ghz, cfg.max_reflections, cfg.max_wall_reflections,
                        grid.max_distance, cfg.polarization, cfg.allow_high_order)
    return trace_table(scene, tx_xyz, receiver_positions(scene, grid), cfg)


def coverage(scene: Scene, tx: TransmitterSite, grid: ReceiverGrid, cfg: SimConfig,
             table: PathTable | None = None) -> CoverageGrid:
    """Per-cell propagation results; cells without a path carry absent power.

    The grid's ``max_distance`` overrides the configuration's distance limit.
    """
    tx_xyz = site_position(scene, tx)
    if table is None:
        table = grid_table(scene, tx_xyz, grid, cfg)
    coeffs = table.coefficients(scene, cfg.frequency_ghz, cfg.polarization)
    total, scale = _coherent_sum(table.length, coeffs, table.owner, len(table.rx), cfg.wavelength_m)
    gain = _gain_db(total, scale)
    p_tx = tx.p_tx_dbm
    starts = np.searchsorted(table.owner, np.arange(len(table.rx) + 1))
    results = []
    for i in range(len(table.rx)):
        rows = range(starts[i], starts[i + 1])
        paths = _materialize(scene, table, coeffs, rows)
        if np.isnan(gain[i]):
            p_rx = pl = None
        else:
            p_rx = p_tx + tx.gain_dbi + grid.rx_gain_dbi + float(gain[i])
            pl = path_loss(p_tx, tx.gain_dbi, grid.rx_gain_dbi, p_rx)
        results.append(PropagationResult(
            rx_position=tuple(float(c) for c in table.rx[i]),
            distance_3d=float(table.distance[i]),
            los=bool(table.los[i]),
            paths=paths,
            p_rx_dbm=p_rx,
            path_loss_db=pl,
        ))
    return CoverageGrid(grid=grid, site=tx, frequency_ghz=cfg.frequency_ghz,
                        tx_position=tuple(float(c) for c in tx_xyz), results=tuple(results))


# --------------------------------------------------------------------------
# exports

COVERAGE_COLUMNS = ("x_m", "y_m", "lat", "lon", "distance_m", "los", "p_rx_dbm", "pl_db")


def _fmt(v) -> str:
    return "" if v is None else format(v, ".17g")


def coverage_csv(scene: Scene, cov: CoverageGrid) -> str:
    lines = [",".join(COVERAGE_COLUMNS)]
    xs = np.array([r.rx_position[0] for r in cov.results])
    ys = np.array([r.rx_position[1] for r in cov.results])
    dlat, dlon = geodetic_offsets(scene.anchor, xs, ys)
    for r, la, lo in zip(cov.results, dlat, dlon):
        lines.append(",".join([
            _fmt(r.rx_position[0]), _fmt(r.rx_position[1]),
            _fmt(scene.anchor[0] + float(la)), _fmt(scene.anchor[1] + float(lo)),
            _fmt(r.distance_3d), "1" if r.los else "0", _fmt(r.p_rx_dbm), _fmt(r.path_loss_db),
        ]))
    return "\n".join(lines) + "\n"


def coverage_pgm(cov: CoverageGrid, pl_min: float = 60.0, pl_max: float = 160.0) -> bytes:
    """Binary grayscale heat map: PL mapped linearly onto 0..254, 255 = no coverage.

    Row 0 of the image is the northernmost grid row.
    """
    rows, cols = cov.shape
    img = np.full((rows, cols), 255, dtype=np.uint8)
    for i, r in enumerate(cov.results):
        if r.path_loss_db is None:
            continue
        frac = (r.path_loss_db - pl_min) / (pl_max - pl_min)
        img[i // cols, i % cols] = int(round(min(max(frac, 0.0), 1.0) * 254))
    img = img[::-1]
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    return header + img.tobytes()
