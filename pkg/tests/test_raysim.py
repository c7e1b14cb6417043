import math

import numpy as np
import pytest
from scipy.optimize import minimize

from plmodel import raysim
from plmodel.empirical import fspl
from plmodel.raysim import (RayPath, SimConfig, coverage, coverage_csv, coverage_pgm, fresnel_reflection,
                            los_blocked, path_loss, received_power, trace_paths)
from plmodel.scene import Material, ReceiverGrid, TransmitterSite, point_in_polygon, scene_from_buildings

from conftest import box

FREE = SimConfig(frequency_ghz=2.3, max_reflections=0)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def surface_plane(scene, label):
    """(point, unit normal) of the surface named by a RayPath label."""
    if label == "ground":
        return np.array([0.0, 0.0, scene.terrain.elevation]), np.array([0.0, 0.0, 1.0])
    b, w = label[1:].split("w")
    fp = scene.buildings[int(b)].footprint
    p0 = np.array([*fp[int(w)], 0.0])
    p1 = np.array([*fp[(int(w) + 1) % len(fp)], 0.0])
    d = p1 - p0
    return p0, unit([d[1], -d[0], 0.0])


def mirror(p, plane):
    q, n = plane
    return p - 2.0 * np.dot(p - q, n) * n


def outdoor_points(scene, rng, n, z, margin=2.0):
    xmin, ymin, xmax, ymax = scene.bounds
    out = []
    while len(out) < n:
        x, y = rng.uniform(xmin + 20, xmax - 20), rng.uniform(ymin + 20, ymax - 20)
        inside = any(point_in_polygon(x, y, b.footprint) for b in scene.buildings)
        near = any(b.bbox[0] - margin <= x <= b.bbox[2] + margin and b.bbox[1] - margin <= y <= b.bbox[3] + margin
                   for b in scene.buildings)
        if not inside and not near:
            out.append((x, y, z))
    return np.array(out)


# --- Fresnel ----------------------------------------------------------------

LOSSLESS4 = Material("m", 4.0, 0.0)


def test_fresnel_normal_incidence_lossless():
    perp = fresnel_reflection(LOSSLESS4, 1.0, 0.0, "perpendicular")
    par = fresnel_reflection(LOSSLESS4, 1.0, 0.0, "parallel")
    assert perp == pytest.approx(-1.0 / 3.0, abs=1e-15)
    # parallel sign convention tends to -1 at grazing, which makes it +1/3 here
    assert abs(par) == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert par == pytest.approx(-perp, abs=1e-15)


@pytest.mark.parametrize("pol", ["perpendicular", "parallel"])
def test_fresnel_grazing_tends_to_minus_one(pol):
    g = fresnel_reflection(Material("c", 5.31, 0.05), 2.3, math.pi / 2 - 1e-7, pol)
    assert abs(g + 1.0) < 1e-5


@pytest.mark.parametrize("pol", ["perpendicular", "parallel"])
def test_fresnel_conductor_limit(pol):
    g = fresnel_reflection(Material("metal", 5.0, 1e12), 2.3, 0.6, pol)
    assert abs(g) == pytest.approx(1.0, abs=1e-5)


def test_fresnel_magnitude_bounded(rng):
    for _ in range(200):
        mat = Material("m", rng.uniform(1.01, 80.0), rng.uniform(0.0, 10.0))
        ang = rng.uniform(0.0, math.pi / 2 - 1e-9)
        for pol in ("perpendicular", "parallel"):
            assert abs(fresnel_reflection(mat, rng.uniform(0.1, 100.0), ang, pol)) <= 1.0 + 1e-12


def test_fresnel_rejects_bad_angle():
    with pytest.raises(ValueError):
        fresnel_reflection(LOSSLESS4, 1.0, math.pi / 2, "parallel")


# --- link budget --------------------------------------------------------------

def test_path_loss_identity():
    assert path_loss(30.0, 0.0, 0.0, -70.0) == 100.0
    p_tx = 10 * math.log10(5000.0)
    assert p_tx == pytest.approx(36.9897, abs=1e-4)
    assert path_loss(p_tx, 0.0, 2.1, -60.0) == pytest.approx(99.0897, abs=1e-4)


def test_single_direct_path_is_friis():
    cfg = SimConfig(frequency_ghz=3.5)
    d = 123.4
    path = RayPath(0, ((0, 0, 10), (d, 0, 10)), d)
    p = received_power([path], cfg, 40.0, 3.0, 2.1)
    assert p == pytest.approx(40.0 + 3.0 + 2.1 - fspl(3.5, d), abs=1e-9)
    assert path_loss(40.0, 3.0, 2.1, p) == pytest.approx(fspl(3.5, d), abs=1e-9)


def test_no_paths_no_power():
    assert received_power([], SimConfig(), 30.0, 0.0, 0.0) is None


def test_half_wavelength_difference_is_a_null():
    cfg = SimConfig(frequency_ghz=2.0)
    lam = cfg.wavelength_m
    l1 = 100.0
    l2 = l1 + lam / 2
    # scale the shorter path so both amplitudes are equal
    a = RayPath(1, ((0, 0, 0), (50, 0, 0), (100, 0, 0)), l1, (complex(l1 / l2),), ("ground",), (0.5,))
    b = RayPath(0, ((0, 0, 0), (100, 0, 0)), l2)
    assert received_power([a, b], cfg, 30.0, 0.0, 0.0) is None


def test_coherent_sum_matches_direct_complex_oracle(rng):
    cfg = SimConfig(frequency_ghz=1.7)
    lam = cfg.wavelength_m
    paths = [RayPath(1, ((0, 0, 0), (1, 0, 0), (2, 0, 0)), float(L), (complex(g),), ("ground",), (0.3,))
             for L, g in zip(rng.uniform(50, 200, 6), rng.uniform(-1, 1, 6) + 1j * rng.uniform(-0.5, 0.5, 6))]
    total = sum(lam / (4 * math.pi * p.length) * p.reflection_coeffs[0] * np.exp(-2j * math.pi * p.length / lam)
                for p in paths)
    expect = 20.0 + 20 * math.log10(abs(total))
    assert received_power(paths, cfg, 20.0, 0.0, 0.0) == pytest.approx(expect, abs=1e-9)


# --- LoS ----------------------------------------------------------------------

@pytest.fixture
def one_block():
    return scene_from_buildings([box(-5, -5, 5, 5, height=10.0)], (-100, -100, 100, 100))


def test_los_empty_scene(empty_scene, rng):
    for _ in range(50):
        a = np.r_[rng.uniform(-150, 150, 2), rng.uniform(0.1, 50)]
        b = np.r_[rng.uniform(-150, 150, 2), rng.uniform(0.1, 50)]
        assert not los_blocked(empty_scene, a, b)


def test_los_through_and_over(one_block):
    assert los_blocked(one_block, (-20, 0, 5), (20, 0, 5))
    assert not los_blocked(one_block, (-20, 0, 12), (20, 0, 12))


def test_los_boundary_touch_counts_as_blocked(one_block):
    # grazes the roof edge exactly
    assert los_blocked(one_block, (-20, 0, 10), (20, 0, 10))
    # runs along a wall face
    assert los_blocked(one_block, (5, -20, 3), (5, 20, 3))


def test_los_below_ground(empty_scene):
    assert los_blocked(empty_scene, (-10, 0, 5), (10, 0, -1))


def _sampled_blocked(scene, a, b, n=20001):
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = a + t * (b - a)
    for bld in scene.buildings:
        x0, y0, x1, y1 = bld.bbox
        cand = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1) & (pts[:, 2] <= bld.height)
        for p in pts[cand]:
            if point_in_polygon(p[0], p[1], bld.footprint):
                return True
    return bool(np.any(pts[:, 2] < scene.terrain.elevation))


def test_los_matches_segment_sampling_oracle(demo_scene):
    rng = np.random.default_rng(99)
    pts_a = outdoor_points(demo_scene, rng, 60, 0.0)
    pts_b = outdoor_points(demo_scene, rng, 60, 0.0)
    agree = 0
    for a, b in zip(pts_a, pts_b):
        a = a + [0, 0, rng.uniform(1.0, 30.0)]
        b = b + [0, 0, rng.uniform(1.0, 30.0)]
        if np.hypot(*(a - b)[:2]) > 400:
            b = a + (b - a) * 400 / np.hypot(*(a - b)[:2])
        assert los_blocked(demo_scene, a, b) == _sampled_blocked(demo_scene, a, b)
        agree += 1
    assert agree == 60


# --- path tracing -------------------------------------------------------------

def test_empty_scene_direct_only(empty_scene):
    tx, rx = np.array([0.0, 0.0, 10.0]), np.array([70.0, 20.0, 1.5])
    paths = trace_paths(empty_scene, tx, rx, FREE)
    assert len(paths) == 1 and paths[0].kind == "direct"
    assert paths[0].length == pytest.approx(np.linalg.norm(tx - rx), rel=1e-12)
    assert paths[0].reflection_coeffs == ()


def test_empty_scene_ground_reflection(empty_scene):
    tx, rx = np.array([0.0, 0.0, 10.0]), np.array([70.0, 20.0, 1.5])
    paths = trace_paths(empty_scene, tx, rx, SimConfig(max_reflections=2))
    assert [p.order for p in paths] == [0, 1]
    ground = paths[1]
    assert ground.surfaces == ("ground",)
    image = tx * [1, 1, -1]
    assert ground.length == pytest.approx(np.linalg.norm(image - rx), rel=1e-12)
    assert ground.vertices[1][2] == pytest.approx(0.0, abs=1e-12)


def test_single_wall_reflection_matches_brute_force():
    # a long thin wall; tx and rx on its south side
    scene = scene_from_buildings([box(-30, 20, 30, 22, height=15.0)], (-100, -100, 100, 100))
    tx, rx = np.array([-12.0, 5.0, 8.0]), np.array([17.0, 2.0, 1.5])
    cfg = SimConfig(max_reflections=1)
    walls = [p for p in trace_paths(scene, tx, rx, cfg) if p.order == 1 and p.surfaces[0] != "ground"]
    assert len(walls) == 1
    path = walls[0]

    # brute force: minimize |tx - p| + |p - rx| over the finite face y = 20
    def total(uv):
        p = np.array([uv[0], 20.0, uv[1]])
        return np.linalg.norm(tx - p) + np.linalg.norm(p - rx)

    grid = [(x, z) for x in np.linspace(-30, 30, 121) for z in np.linspace(0, 15, 31)]
    start = min(grid, key=total)
    best = minimize(total, start, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    assert -30 <= best.x[0] <= 30 and 0 <= best.x[1] <= 15
    assert path.length == pytest.approx(best.fun, abs=1e-8)
    assert np.allclose(path.vertices[1], [best.x[0], 20.0, best.x[1]], atol=1e-4)
    image = tx.copy()
    image[1] = 40.0 - tx[1]
    assert path.length == pytest.approx(np.linalg.norm(image - rx), rel=1e-12)


def test_reflection_point_must_lie_on_face():
    # the specular point would fall beyond the wall's end: no wall path
    scene = scene_from_buildings([box(-5, 20, 5, 22, height=15.0)], (-100, -100, 100, 100))
    tx, rx = np.array([40.0, 5.0, 8.0]), np.array([60.0, 5.0, 1.5])
    paths = trace_paths(scene, tx, rx, SimConfig(max_reflections=1))
    assert all(p.surfaces in ((), ("ground",)) for p in paths)


def _check_path(scene, tx, rx, path):
    verts = np.array(path.vertices)
    assert len(verts) == path.order + 2
    assert np.allclose(verts[0], tx) and np.allclose(verts[-1], rx)
    chain = float(np.sum(np.linalg.norm(np.diff(verts, axis=0), axis=1)))
    assert path.length == pytest.approx(chain, rel=1e-9)
    image = np.asarray(tx, dtype=float)
    for k, label in enumerate(path.surfaces):
        plane = surface_plane(scene, label)
        image = mirror(image, plane)
        # specular law: reflecting the incoming direction in the plane gives the outgoing one
        d_in = unit(verts[k + 1] - verts[k])
        d_out = unit(verts[k + 2] - verts[k + 1])
        n = plane[1]
        expect = d_in - 2 * np.dot(d_in, n) * n
        ang = math.acos(min(1.0, max(-1.0, float(np.dot(expect, d_out)))))
        assert ang < 1e-9 or np.linalg.norm(expect - d_out) < 1e-9
        # the interaction point lies on the surface plane
        assert abs(np.dot(verts[k + 1] - plane[0], n)) < 1e-9
        assert abs(path.reflection_coeffs[k]) <= 1.0 + 1e-12
    assert path.length == pytest.approx(np.linalg.norm(image - rx), rel=1e-9)


def test_specular_law_and_unfolded_length_on_demo(demo_scene):
    rng = np.random.default_rng(5)
    cfg = SimConfig(max_reflections=3, max_wall_reflections=2)
    txs = outdoor_points(demo_scene, rng, 12, 0.0) + [0, 0, 14.0]
    rxs = outdoor_points(demo_scene, rng, 12, 0.0) + [0, 0, 1.5]
    n_reflected = 0
    for tx, rx in zip(txs, rxs):
        paths = trace_paths(demo_scene, tx, rx, cfg)
        keys = [(p.order, p.length) for p in paths]
        assert keys == sorted(keys)
        assert len({(p.surfaces) for p in paths}) == len(paths)
        for p in paths:
            if p.order:
                n_reflected += 1
                _check_path(demo_scene, tx, rx, p)
    assert n_reflected > 20


def test_direct_path_iff_not_blocked(demo_scene):
    rng = np.random.default_rng(8)
    cfg = SimConfig(max_reflections=1)
    for tx, rx in zip(outdoor_points(demo_scene, rng, 30, 12.0), outdoor_points(demo_scene, rng, 30, 1.5)):
        has_direct = any(p.order == 0 for p in trace_paths(demo_scene, tx, rx, cfg))
        assert has_direct == (not los_blocked(demo_scene, tx, rx))


def test_reciprocity_100_pairs(demo_scene):
    rng = np.random.default_rng(21)
    cfg = SimConfig(frequency_ghz=2.3, max_reflections=3, max_wall_reflections=2)
    a_pts = outdoor_points(demo_scene, rng, 100, 0.0) + np.c_[np.zeros((100, 2)), rng.uniform(1.5, 25, 100)]
    b_pts = outdoor_points(demo_scene, rng, 100, 0.0) + np.c_[np.zeros((100, 2)), rng.uniform(1.5, 25, 100)]
    covered = 0
    for a, b in zip(a_pts, b_pts):
        fwd = received_power(trace_paths(demo_scene, a, b, cfg), cfg, 30.0, 3.0, 1.0)
        back = received_power(trace_paths(demo_scene, b, a, cfg), cfg, 30.0, 1.0, 3.0)
        assert (fwd is None) == (back is None)
        if fwd is not None:
            covered += 1
            assert abs(path_loss(30.0, 3.0, 1.0, fwd) - path_loss(30.0, 1.0, 3.0, back)) <= 1e-9
    assert covered >= 50


def test_two_ray_far_field_slope():
    scene = scene_from_buildings([], (-40000.0, -40000.0, 40000.0, 40000.0))
    cfg = SimConfig(frequency_ghz=1.5, max_reflections=1, max_distance_m=1e6, polarization="parallel")
    d = np.logspace(math.log10(3000.0), math.log10(30000.0), 60)
    pl = []
    for di in d:
        paths = trace_paths(scene, (0.0, 0.0, 10.0), (di, 0.0, 1.5), cfg)
        assert len(paths) == 2
        pl.append(path_loss(0.0, 0.0, 0.0, received_power(paths, cfg, 0.0, 0.0, 0.0)))
    slope = np.polyfit(np.log10(d), pl, 1)[0]
    assert 39.0 <= slope <= 41.0


def test_max_distance_prunes_paths(empty_scene):
    cfg = SimConfig(max_reflections=1, max_distance_m=50.0)
    assert trace_paths(empty_scene, (0, 0, 10), (100, 0, 1.5), cfg) == []


def test_config_limits():
    with pytest.raises(ValueError):
        SimConfig(max_reflections=5)
    assert SimConfig(max_reflections=5, allow_high_order=True).max_reflections == 5
    with pytest.raises(ValueError):
        SimConfig(frequency_ghz=200.0)
    with pytest.raises(ValueError):
        SimConfig(polarization="circular")


# --- coverage -----------------------------------------------------------------

def test_free_space_coverage_is_fspl(empty_scene, small_grid, site):
    cov = coverage(empty_scene, site, small_grid, FREE)
    assert len(cov.results) == small_grid.rows * small_grid.cols
    tx = raysim.site_position(empty_scene, site)
    centers = small_grid.cell_centers()
    for r, c in zip(cov.results, centers):
        assert r.rx_position[:2] == pytest.approx(tuple(c))
        assert r.los
        d = float(np.linalg.norm(np.asarray(r.rx_position) - tx))
        assert abs(r.path_loss_db - fspl(FREE.frequency_ghz, d)) < 0.01
    by_distance = sorted(cov.results, key=lambda r: r.distance_3d)
    for a, b in zip(by_distance, by_distance[1:]):
        if b.distance_3d > a.distance_3d + 1e-9:
            assert b.path_loss_db > a.path_loss_db


def test_hidden_cell_has_no_power(site):
    scene = scene_from_buildings([box(20, -40, 30, 40, height=30.0)], (-100, -100, 100, 100))
    grid = ReceiverGrid((40.0, -10.0, 60.0, 10.0), 10.0)
    cov = coverage(scene, site, grid, FREE)
    assert cov.covered_count() == 0
    assert all(r.p_rx_dbm is None and r.path_loss_db is None and not r.los for r in cov.results)


def test_cells_beyond_max_distance_absent(empty_scene, site):
    grid = ReceiverGrid((-200.0, -200.0, 200.0, 200.0), 50.0, max_distance=150.0)
    cov = coverage(empty_scene, site, grid, SimConfig(max_reflections=1))
    for r in cov.results:
        assert (r.p_rx_dbm is None) == (r.distance_3d > 150.0)


def test_taller_mast_covers_at_least_as_much(demo_scene):
    grid = ReceiverGrid(demo_scene.bounds, 30.0)
    cfg = SimConfig(max_reflections=2, max_wall_reflections=1)
    counts = {}
    for h in (12.0, 21.0):
        counts[h] = coverage(demo_scene, TransmitterSite("A", (-150.0, -100.0), h, 5.0), grid, cfg).covered_count()
    assert counts[21.0] >= counts[12.0]


def test_coverage_deterministic_and_exports(demo_scene):
    grid = ReceiverGrid((-300.0, -300.0, 0.0, 0.0), 30.0)
    tx = TransmitterSite("A", (-150.0, -100.0), 12.0, 5.0)
    cfg = SimConfig(max_reflections=2, max_wall_reflections=1)
    a = coverage(demo_scene, tx, grid, cfg)
    b = coverage(demo_scene, tx, grid, cfg)
    assert a == b
    text = coverage_csv(demo_scene, a)
    assert text == coverage_csv(demo_scene, b)
    lines = text.splitlines()
    assert lines[0] == "x_m,y_m,lat,lon,distance_m,los,p_rx_dbm,pl_db"
    assert len(lines) == 1 + grid.rows * grid.cols
    empties = sum(line.endswith(",,") for line in lines[1:])
    assert empties == grid.rows * grid.cols - a.covered_count()
    pgm = coverage_pgm(a)
    header = f"P5\n{grid.cols} {grid.rows}\n255\n".encode()
    assert pgm.startswith(header) and len(pgm) == len(header) + grid.rows * grid.cols
    img = np.frombuffer(pgm[len(header):], dtype=np.uint8).reshape(grid.rows, grid.cols)[::-1]
    assert int((img.ravel() == 255).sum()) == grid.rows * grid.cols - a.covered_count()


def test_grid_outside_scene_rejected(empty_scene, site):
    with pytest.raises(ValueError, match="outside"):
        coverage(empty_scene, site, ReceiverGrid((0.0, 0.0, 500.0, 500.0), 50.0), FREE)


def test_result_invariants(demo_scene):
    grid = ReceiverGrid((-250.0, -250.0, -50.0, -50.0), 20.0)
    cov = coverage(demo_scene, TransmitterSite("A", (-150.0, -100.0), 12.0, 5.0), grid,
                   SimConfig(max_reflections=2, max_wall_reflections=1))
    for r in cov.results:
        assert (r.p_rx_dbm is None) == (r.path_loss_db is None)
        if r.paths:
            assert r.los == any(p.order == 0 for p in r.paths)
        else:
            assert r.p_rx_dbm is None


def test_grid_terrain_blocks_and_has_no_ground_path():
    from plmodel.scene import Scene, Terrain, validate_scene
    # a 40 m ridge along x = 0
    elev = tuple(40.0 if c == 2 else 0.0 for r in range(5) for c in range(5))
    terrain = Terrain("grid", 0.0, "concrete", (-100.0, -100.0), 50.0, 5, 5, elev)
    base = scene_from_buildings([], (-100, -100, 100, 100))
    scene = validate_scene(Scene(base.anchor, base.materials, (), terrain, base.bounds))
    assert los_blocked(scene, (-80, 0, 5), (80, 0, 5))
    assert not los_blocked(scene, (-80, 0, 60), (80, 0, 60))
    paths = trace_paths(scene, (-80, 0, 60), (80, 0, 60), SimConfig(max_reflections=2))
    assert [p.kind for p in paths] == ["direct"]
