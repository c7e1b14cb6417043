"""Compiled geometry kernels for the ray simulator.

Buildings are passed as flat arrays: ``vstart`` offsets into the vertex
arrays ``vx``/``vy`` (CCW rings, not closed), ``bbox`` rows of
(xmin, ymin, xmax, ymax) and base/top elevations ``zlo``/``zhi``.
Walls are vertical faces given by their 2-D start ``p0``, unit edge
direction ``e``, length, outward unit normal ``n`` and plane offset ``c``
(``n . p = c`` on the face).
"""
import numpy as np
from numba import njit

GROUND = -1


@njit(cache=True)
def _pip(x, y, vx, vy, s, e):
    inside = False
    j = e - 1
    for i in range(s, e):
        yi, yj = vy[i], vy[j]
        if (yi > y) != (yj > y):
            xc = vx[i] + (y - yi) * (vx[j] - vx[i]) / (yj - yi)
            if x < xc:
                inside = not inside
        j = i
    return inside


@njit(cache=True)
def _seg_hits_prism(ax, ay, az, bx, by, bz, lo, hi, vx, vy, s, e, zhi):
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    z_lo = az + lo * dz
    z_hi = az + hi * dz
    if min(z_lo, z_hi) > zhi:
        return False
    l2 = dx * dx + dy * dy
    if l2 < 1e-18:
        # vertical segment
        return _pip(ax, ay, vx, vy, s, e) and min(z_lo, z_hi) <= zhi
    ts = np.empty(2 * (e - s) + 2)
    nt = 0
    ts[nt] = lo
    nt += 1
    ts[nt] = hi
    nt += 1
    j = e - 1
    for i in range(s, e):
        px, py = vx[j], vy[j]
        ex, ey = vx[i] - px, vy[i] - py
        denom = dx * ey - dy * ex
        wx, wy = px - ax, py - ay
        if abs(denom) <= 1e-14 * np.sqrt(l2 * (ex * ex + ey * ey)):
            # parallel: touching only if collinear
            if abs(wx * dy - wy * dx) <= 1e-9 * np.sqrt(l2):
                t0 = (wx * dx + wy * dy) / l2
                t1 = ((vx[i] - ax) * dx + (vy[i] - ay) * dy) / l2
                a = max(min(t0, t1), lo)
                b = min(max(t0, t1), hi)
                if a <= b:
                    if min(az + a * dz, az + b * dz) <= zhi:
                        return True
        else:
            t = (wx * ey - wy * ex) / denom
            u = (wx * dy - wy * dx) / denom
            if 0.0 <= u <= 1.0 and lo <= t <= hi:
                if az + t * dz <= zhi:
                    # boundary contact below the roof counts as blocked
                    return True
                ts[nt] = t
                nt += 1
        j = i
    tt = np.sort(ts[:nt])
    for k in range(nt - 1):
        t0 = tt[k]
        t1 = tt[k + 1]
        if t1 <= t0:
            continue
        tm = 0.5 * (t0 + t1)
        if _pip(ax + tm * dx, ay + tm * dy, vx, vy, s, e):
            if min(az + t0 * dz, az + t1 * dz) <= zhi:
                return True
    return False


@njit(cache=True)
def segment_blocked(ax, ay, az, bx, by, bz, lo, hi,
                    vstart, vx, vy, bbox, zhi, ground_z, flat_ground):
    """True if the sub-segment t in [lo, hi] touches a building or dips below flat ground."""
    if flat_ground:
        dz = bz - az
        if min(az + lo * dz, az + hi * dz) < ground_z - 1e-9:
            return True
    dx = bx - ax
    dy = by - ay
    x0 = ax + lo * dx
    x1 = ax + hi * dx
    y0 = ay + lo * dy
    y1 = ay + hi * dy
    sxmin, sxmax = min(x0, x1), max(x0, x1)
    symin, symax = min(y0, y1), max(y0, y1)
    for b in range(bbox.shape[0]):
        if sxmax < bbox[b, 0] or sxmin > bbox[b, 2] or symax < bbox[b, 1] or symin > bbox[b, 3]:
            continue
        if _seg_hits_prism(ax, ay, az, bx, by, bz, lo, hi, vx, vy,
                           vstart[b], vstart[b + 1], zhi[b]):
            return True
    return False


@njit(cache=True)
def chains_blocked(verts, nverts, tol_m, vstart, vx, vy, bbox, zhi, ground_z, flat_ground):
    """Visibility of vertex chains; interaction vertices are excluded by ``tol_m``.

    ``verts`` is (M, V, 3); row m uses its first ``nverts[m]`` vertices, the
    first and last being the true endpoints (tx, rx).
    """
    m_rows = verts.shape[0]
    out = np.zeros(m_rows, dtype=np.bool_)
    for m in range(m_rows):
        nv = nverts[m]
        for i in range(nv - 1):
            ax, ay, az = verts[m, i, 0], verts[m, i, 1], verts[m, i, 2]
            bx, by, bz = verts[m, i + 1, 0], verts[m, i + 1, 1], verts[m, i + 1, 2]
            length = np.sqrt((bx - ax) ** 2 + (by - ay) ** 2 + (bz - az) ** 2)
            if length <= 0.0:
                out[m] = True
                break
            lo = 0.0 if i == 0 else min(tol_m / length, 0.5)
            hi = 1.0 if i == nv - 2 else max(1.0 - tol_m / length, 0.5)
            if segment_blocked(ax, ay, az, bx, by, bz, lo, hi,
                               vstart, vx, vy, bbox, zhi, ground_z, flat_ground):
                out[m] = True
                break
    return out


@njit(cache=True)
def _backtrack_one(images, surf, k, qx, qy, qz, w_p0, w_e, w_len, w_n, w_c,
                   w_zlo, w_zhi, ground_z, pts):
    for j in range(k - 1, -1, -1):
        ix, iy, iz = images[j + 1, 0], images[j + 1, 1], images[j + 1, 2]
        w = surf[j]
        if w == GROUND:
            s_i = iz - ground_z
            s_q = qz - ground_z
        else:
            s_i = w_n[w, 0] * ix + w_n[w, 1] * iy - w_c[w]
            s_q = w_n[w, 0] * qx + w_n[w, 1] * qy - w_c[w]
        if not (s_i < 0.0 and s_q > 0.0):
            return False
        t = s_i / (s_i - s_q)
        px = ix + t * (qx - ix)
        py = iy + t * (qy - iy)
        pz = iz + t * (qz - iz)
        if w == GROUND:
            pz = ground_z
        else:
            u = (px - w_p0[w, 0]) * w_e[w, 0] + (py - w_p0[w, 1]) * w_e[w, 1]
            if u < 0.0 or u > w_len[w] or pz < w_zlo[w] or pz > w_zhi[w]:
                return False
        pts[j, 0] = px
        pts[j, 1] = py
        pts[j, 2] = pz
        qx, qy, qz = px, py, pz
    return True


@njit(cache=True)
def backtrack(images, surfs, rx, max_len, w_p0, w_e, w_len, w_n, w_c, w_zlo, w_zhi, ground_z):
    """Image-method reflection points for every (sequence, receiver) pair.

    ``images`` is (S, k+1, 3) with images[s, 0] the transmitter and
    images[s, j] its mirror through the first j surfaces of ``surfs[s]``.
    Returns (seq_index, rx_index, points) for geometrically valid pairs;
    visibility is not checked here.
    """
    n_seq = images.shape[0]
    k = surfs.shape[1]
    n_rx = rx.shape[0]
    pts = np.empty((k, 3))
    count = 0
    for s in range(n_seq):
        for r in range(n_rx):
            ix = images[s, k, 0] - rx[r, 0]
            iy = images[s, k, 1] - rx[r, 1]
            iz = images[s, k, 2] - rx[r, 2]
            if ix * ix + iy * iy + iz * iz > max_len * max_len:
                continue
            if _backtrack_one(images[s], surfs[s], k, rx[r, 0], rx[r, 1], rx[r, 2],
                              w_p0, w_e, w_len, w_n, w_c, w_zlo, w_zhi, ground_z, pts):
                count += 1
    seq_idx = np.empty(count, dtype=np.int64)
    rx_idx = np.empty(count, dtype=np.int64)
    points = np.empty((count, k, 3))
    c = 0
    for s in range(n_seq):
        for r in range(n_rx):
            ix = images[s, k, 0] - rx[r, 0]
            iy = images[s, k, 1] - rx[r, 1]
            iz = images[s, k, 2] - rx[r, 2]
            if ix * ix + iy * iy + iz * iz > max_len * max_len:
                continue
            if _backtrack_one(images[s], surfs[s], k, rx[r, 0], rx[r, 1], rx[r, 2],
                              w_p0, w_e, w_len, w_n, w_c, w_zlo, w_zhi, ground_z, pts):
                seq_idx[c] = s
                rx_idx[c] = r
                points[c] = pts
                c += 1
    return seq_idx, rx_idx, points
