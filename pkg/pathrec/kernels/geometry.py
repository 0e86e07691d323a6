"""Ray geometry: box clipping, voxel DDA, surface intersection, pinhole projection."""
import math

import numpy as np
from numba import njit

SURF_SPHERE = 0
SURF_RECT = 1

_INF = np.inf


@njit(cache=True, nogil=True)
def clip_box(ox, oy, oz, dx, dy, dz, lo, hi):
    """Parametric interval (t0, t1) of the ray inside the box; t0 > t1 means a miss"""
    t0 = -_INF
    t1 = _INF
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] != 0.0:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif o[a] < lo[a] or o[a] > hi[a]:
            return 1.0, 0.0
    return t0, t1


@njit(cache=True, nogil=True)
def _axis_index(p, lo, size, n):
    i = int(math.floor((p - lo) / size))
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


@njit(cache=True, nogil=True)
def _next_crossing(o, d, lo, size, i):
    if d > 0.0:
        return (lo + (i + 1) * size - o) / d
    if d < 0.0:
        return (lo + i * size - o) / d
    return _INF


@njit(cache=True, nogil=True)
def walk(ox, oy, oz, dx, dy, dz, t_start, t_end, lo, size, dims, beta_tot, tau, out_vox, out_len, pos):
    """Amanatides-Woo walk over [t_start, t_end] of the ray.

    Writes (voxel, length) pairs at out_*[pos:] and stops early where the
    optical depth accumulated with beta_tot exceeds tau. Returns
    (count, t_scatter, v_scatter); t_scatter < 0 when no collision happened.
    Callers guarantee room for dims.sum() + 3 entries.
    """
    nx = dims[0]
    ny = dims[1]
    nz = dims[2]
    if t_end <= t_start:
        return 0, -1.0, -1
    px = ox + dx * t_start
    py = oy + dy * t_start
    pz = oz + dz * t_start
    ix = _axis_index(px, lo[0], size[0], nx)
    iy = _axis_index(py, lo[1], size[1], ny)
    iz = _axis_index(pz, lo[2], size[2], nz)
    step_x = 1 if dx > 0.0 else -1
    step_y = 1 if dy > 0.0 else -1
    step_z = 1 if dz > 0.0 else -1
    t = t_start
    tau_acc = 0.0
    n = 0
    while True:
        tnx = _next_crossing(ox, dx, lo[0], size[0], ix)
        tny = _next_crossing(oy, dy, lo[1], size[1], iy)
        tnz = _next_crossing(oz, dz, lo[2], size[2], iz)
        tn = min(tnx, tny, tnz)
        seg_end = tn if tn < t_end else t_end
        length = seg_end - t
        if length > 0.0:
            v = ix + nx * (iy + ny * iz)
            b = beta_tot[v]
            if b > 0.0 and tau_acc + b * length > tau:
                t_hit = t + (tau - tau_acc) / b
                if t_hit > t:
                    out_vox[pos + n] = v
                    out_len[pos + n] = t_hit - t
                    n += 1
                return n, t_hit, v
            tau_acc += b * length
            out_vox[pos + n] = v
            out_len[pos + n] = length
            n += 1
            t = seg_end
        if seg_end >= t_end:
            break
        if tnx <= tny and tnx <= tnz:
            ix += step_x
            if ix < 0 or ix >= nx:
                break
        elif tny <= tnz:
            iy += step_y
            if iy < 0 or iy >= ny:
                break
        else:
            iz += step_z
            if iz < 0 or iz >= nz:
                break
    return n, -1.0, -1


@njit(cache=True, nogil=True)
def voxel_of(px, py, pz, lo, size, dims):
    ix = _axis_index(px, lo[0], size[0], dims[0])
    iy = _axis_index(py, lo[1], size[1], dims[1])
    iz = _axis_index(pz, lo[2], size[2], dims[2])
    return ix + dims[0] * (iy + dims[1] * iz)


@njit(cache=True, nogil=True)
def _rect_axes(axis):
    if axis == 0:
        return 1, 2
    if axis == 1:
        return 0, 2
    return 0, 1


@njit(cache=True, nogil=True)
def hit_surfaces(ox, oy, oz, dx, dy, dz, t_min, t_max, kinds, geom):
    """Nearest surface hit in (t_min, t_max); returns (t, id) with id -1 on a miss"""
    best_t = t_max
    best_id = -1
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for k in range(kinds.shape[0]):
        if kinds[k] == SURF_SPHERE:
            cx = ox - geom[k, 0]
            cy = oy - geom[k, 1]
            cz = oz - geom[k, 2]
            r = geom[k, 3]
            b = cx * dx + cy * dy + cz * dz
            c = cx * cx + cy * cy + cz * cz - r * r
            disc = b * b - c
            if disc < 0.0:
                continue
            s = math.sqrt(disc)
            t = -b - s
            if t <= t_min:
                t = -b + s
            if t > t_min and t < best_t:
                best_t = t
                best_id = k
        else:
            axis = int(geom[k, 0])
            if d[axis] == 0.0:
                continue
            t = (geom[k, 1] - o[axis]) / d[axis]
            if t <= t_min or t >= best_t:
                continue
            a1, a2 = _rect_axes(axis)
            p1 = o[a1] + d[a1] * t
            p2 = o[a2] + d[a2] * t
            if geom[k, 2] <= p1 <= geom[k, 4] and geom[k, 3] <= p2 <= geom[k, 5]:
                best_t = t
                best_id = k
    return best_t, best_id


@njit(cache=True, nogil=True)
def surface_normal(kind, geom_row, px, py, pz, dx, dy, dz):
    """Unit normal at the hit point, oriented against the incoming direction"""
    if kind == SURF_SPHERE:
        nx = (px - geom_row[0]) / geom_row[3]
        ny = (py - geom_row[1]) / geom_row[3]
        nz = (pz - geom_row[2]) / geom_row[3]
    else:
        axis = int(geom_row[0])
        nx = 1.0 if axis == 0 else 0.0
        ny = 1.0 if axis == 1 else 0.0
        nz = 1.0 if axis == 2 else 0.0
    if nx * dx + ny * dy + nz * dz > 0.0:
        nx, ny, nz = -nx, -ny, -nz
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


@njit(cache=True, nogil=True)
def orthonormal_frame(dx, dy, dz):
    """Two unit vectors completing (dx, dy, dz) to a right-handed basis"""
    if abs(dz) < 0.999:
        tx, ty, tz = -dy, dx, 0.0
    else:
        tx, ty, tz = 0.0, -dz, dy
    norm = math.sqrt(tx * tx + ty * ty + tz * tz)
    tx /= norm
    ty /= norm
    tz /= norm
    bx = dy * tz - dz * ty
    by = dz * tx - dx * tz
    bz = dx * ty - dy * tx
    return tx, ty, tz, bx, by, bz


@njit(cache=True, nogil=True)
def rotate(dx, dy, dz, mu, phi):
    """Direction at polar cosine mu and azimuth phi around (dx, dy, dz)"""
    tx, ty, tz, bx, by, bz = orthonormal_frame(dx, dy, dz)
    sin_t = math.sqrt(max(0.0, 1.0 - mu * mu))
    c = math.cos(phi) * sin_t
    s = math.sin(phi) * sin_t
    nx = mu * dx + c * tx + s * bx
    ny = mu * dy + c * ty + s * by
    nz = mu * dz + c * tz + s * bz
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


@njit(cache=True, nogil=True)
def project(det_pos, det_basis, tan_h, tan_v, px, py, pz):
    """Tangent-plane coordinates (inside, u, v) of a point seen from the pinhole"""
    qx = px - det_pos[0]
    qy = py - det_pos[1]
    qz = pz - det_pos[2]
    z = qx * det_basis[0, 0] + qy * det_basis[0, 1] + qz * det_basis[0, 2]
    if z <= 0.0:
        return False, 0.0, 0.0
    u = (qx * det_basis[1, 0] + qy * det_basis[1, 1] + qz * det_basis[1, 2]) / z
    v = (qx * det_basis[2, 0] + qy * det_basis[2, 1] + qz * det_basis[2, 2]) / z
    if abs(u) >= tan_h or abs(v) >= tan_v:
        return False, u, v
    return True, u, v


@njit(cache=True, nogil=True)
def pixel_of(u, v, tan_h, tan_v, rows, cols):
    """Flat pixel index (row-major) of tangent coordinates, -1 outside the frame"""
    col = int(math.floor((u / tan_h + 1.0) * 0.5 * cols))
    row = int(math.floor((1.0 - v / tan_v) * 0.5 * rows))
    if col < 0 or col >= cols or row < 0 or row >= rows:
        return -1
    return row * cols + col


@njit(cache=True, nogil=True)
def segment_walk(ox, oy, oz, dx, dy, dz, max_distance, lo, hi, size, dims):
    """Voxel ids and lengths of the ray over [0, max_distance], clipped to the box"""
    room = dims[0] + dims[1] + dims[2] + 3
    out_vox = np.empty(room, dtype=np.int64)
    out_len = np.empty(room, dtype=np.float64)
    t0, t1 = clip_box(ox, oy, oz, dx, dy, dz, lo, hi)
    t_start = t0 if t0 > 0.0 else 0.0
    t_end = t1 if t1 < max_distance else max_distance
    empty = np.zeros(dims[0] * dims[1] * dims[2], dtype=np.float64)
    n, _, _ = walk(ox, oy, oz, dx, dy, dz, t_start, t_end, lo, size, dims, empty, _INF, out_vox, out_len, 0)
    return out_vox[:n].copy(), out_len[:n].copy()


@njit(cache=True, nogil=True)
def optical_depth(ox, oy, oz, dx, dy, dz, max_distance, lo, hi, size, dims, beta_tot):
    """Integral of beta_tot along the ray over [0, max_distance] inside the box"""
    t0, t1 = clip_box(ox, oy, oz, dx, dy, dz, lo, hi)
    t_start = t0 if t0 > 0.0 else 0.0
    t_end = t1 if t1 < max_distance else max_distance
    if t_end <= t_start:
        return 0.0
    room = dims[0] + dims[1] + dims[2] + 3
    out_vox = np.empty(room, dtype=np.int64)
    out_len = np.empty(room, dtype=np.float64)
    n, _, _ = walk(ox, oy, oz, dx, dy, dz, t_start, t_end, lo, size, dims, beta_tot, _INF, out_vox, out_len, 0)
    tau = 0.0
    for k in range(n):
        tau += beta_tot[out_vox[k]] * out_len[k]
    return tau
