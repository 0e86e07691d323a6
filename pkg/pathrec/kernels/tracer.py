"""Forward path sampling from the light source with local-estimation bookkeeping.

Every traced path stores its vertices, the voxel intersections of every
segment and, per vertex and detector, the local-estimation connection with its
own voxel intersections. Nothing stored here depends on extinction values
except the sampled positions themselves, so a store can be re-evaluated under
any parameters without casting rays again.
"""
import math

import numpy as np
from numba import njit

from pathrec.kernels.geometry import (
    clip_box,
    hit_surfaces,
    project,
    rotate,
    surface_normal,
    voxel_of,
    walk,
)
from pathrec.kernels.optics import sample_phase_cos, species_weight, uses_fallback
from pathrec.kernels.rng import new_stream, next_uniform

KIND_EMISSION = 0
KIND_SCATTER = 1
KIND_REFLECT = 2
KIND_ESCAPE = 3

LIGHT_SUN = 0
LIGHT_POINT = 1

_TWO_PI = 2.0 * math.pi
_INF = np.inf


@njit(cache=True, nogil=True)
def _grow_float(a, need):
    if need <= a.shape[0]:
        return a
    out = np.empty(max(2 * a.shape[0], need), dtype=np.float64)
    out[: a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def _grow_int(a, need):
    if need <= a.shape[0]:
        return a
    out = np.empty(max(2 * a.shape[0], need), dtype=np.int64)
    out[: a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def _grow_vec(a, need):
    if need <= a.shape[0]:
        return a
    out = np.empty((max(2 * a.shape[0], need), 3), dtype=np.float64)
    out[: a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def sample_species(beta, v, albedo, mode, u):
    fallback = uses_fallback(beta, v, albedo, mode)
    total = 0.0
    for s in range(beta.shape[0]):
        total += species_weight(beta, s, v, albedo, mode, fallback)
    target = u * total
    acc = 0.0
    last = -1
    for s in range(beta.shape[0]):
        w = species_weight(beta, s, v, albedo, mode, fallback)
        if w <= 0.0:
            continue
        acc += w
        last = s
        if target < acc:
            return s
    return last


@njit(cache=True, nogil=True)
def emit(state, light_kind, light_pos, light_dir, face_cdf, lo, hi):
    """Emission point and direction; a sun path enters through one of the sun-facing faces"""
    if light_kind == LIGHT_SUN:
        u = next_uniform(state)
        axis = 2
        for a in range(3):
            if u < face_cdf[a]:
                axis = a
                break
        p = np.empty(3, dtype=np.float64)
        for a in range(3):
            if a == axis:
                p[a] = hi[a] if light_dir[a] < 0.0 else lo[a]
            else:
                p[a] = lo[a] + next_uniform(state) * (hi[a] - lo[a])
        return p[0], p[1], p[2], light_dir[0], light_dir[1], light_dir[2]
    mu = 2.0 * next_uniform(state) - 1.0
    phi = _TWO_PI * next_uniform(state)
    s = math.sqrt(max(0.0, 1.0 - mu * mu))
    return light_pos[0], light_pos[1], light_pos[2], s * math.cos(phi), s * math.sin(phi), mu


@njit(cache=True, nogil=True)
def local_estimates(
    px, py, pz, inx, iny, inz, on_surface, nx, ny, nz,
    lo, hi, size, dims, beta_tot, surf_kinds, surf_geom, eps,
    det_pos, det_basis, det_tan_h, det_tan_v,
    le_det, le_u, le_v, le_cos, le_geom, le_seg_count, n_le,
    le_ix_vox, le_ix_len, n_le_ix,
):
    """Append one connection per detector that sees the vertex.

    (inx, iny, inz) is the incoming direction for a volume vertex and the
    mirror direction for a surface vertex. Returns (entries, intersections) added.
    """
    added = 0
    added_ix = 0
    for k in range(det_pos.shape[0]):
        inside, u, v = project(det_pos[k], det_basis[k], det_tan_h[k], det_tan_v[k], px, py, pz)
        if not inside:
            continue
        wx = det_pos[k, 0] - px
        wy = det_pos[k, 1] - py
        wz = det_pos[k, 2] - pz
        r = math.sqrt(wx * wx + wy * wy + wz * wz)
        if r <= eps:
            continue
        wx /= r
        wy /= r
        wz /= r
        if on_surface:
            ndot = nx * wx + ny * wy + nz * wz
            if ndot <= 0.0:
                continue
            geom = ndot / (math.pi * r * r)
        else:
            geom = 1.0 / (r * r)
        _, blocker = hit_surfaces(px, py, pz, wx, wy, wz, eps, r - eps, surf_kinds, surf_geom)
        if blocker >= 0:
            continue
        t0, t1 = clip_box(px, py, pz, wx, wy, wz, lo, hi)
        t_start = t0 if t0 > 0.0 else 0.0
        t_end = t1 if t1 < r else r
        count, _, _ = walk(
            px, py, pz, wx, wy, wz, t_start, t_end, lo, size, dims,
            beta_tot, _INF, le_ix_vox, le_ix_len, n_le_ix + added_ix,
        )
        e = n_le + added
        le_det[e] = k
        le_u[e] = u
        le_v[e] = v
        le_cos[e] = inx * wx + iny * wy + inz * wz
        le_geom[e] = geom
        le_seg_count[e] = count
        added += 1
        added_ix += count
    return added, added_ix


@njit(cache=True, nogil=True)
def trace_chunk(
    seed, first_index, count, max_bounces,
    lo, hi, size, dims, beta, beta_tot, albedo, kinds, gs, mode,
    surf_kinds, surf_geom, eps,
    light_kind, light_pos, light_dir, face_cdf,
    det_pos, det_basis, det_tan_h, det_tan_v,
):
    walk_room = dims[0] + dims[1] + dims[2] + 3
    n_det = det_pos.shape[0]
    diag = math.sqrt((hi[0] - lo[0]) ** 2 + (hi[1] - lo[1]) ** 2 + (hi[2] - lo[2]) ** 2)

    path_vertices = np.zeros(count, dtype=np.int64)
    truncated = np.zeros(count, dtype=np.int64)
    direction0 = np.zeros((count, 3), dtype=np.float64)

    cap = 4 * count + 16
    vpos = np.empty((cap, 3), dtype=np.float64)
    vkind = np.empty(cap, dtype=np.int64)
    vspecies = np.empty(cap, dtype=np.int64)
    vcos = np.empty(cap, dtype=np.float64)
    vsurf = np.empty(cap, dtype=np.int64)
    vvoxel = np.empty(cap, dtype=np.int64)
    vseg = np.empty(cap, dtype=np.int64)
    vle = np.empty(cap, dtype=np.int64)
    ix_vox = np.empty(cap * 4, dtype=np.int64)
    ix_len = np.empty(cap * 4, dtype=np.float64)
    le_det = np.empty(cap, dtype=np.int64)
    le_u = np.empty(cap, dtype=np.float64)
    le_v = np.empty(cap, dtype=np.float64)
    le_cos = np.empty(cap, dtype=np.float64)
    le_geom = np.empty(cap, dtype=np.float64)
    le_seg = np.empty(cap, dtype=np.int64)
    le_ix_vox = np.empty(cap * 4, dtype=np.int64)
    le_ix_len = np.empty(cap * 4, dtype=np.float64)

    n_v = 0
    n_ix = 0
    n_le = 0
    n_le_ix = 0

    for i in range(count):
        state = new_stream(seed, first_index + i)
        ox, oy, oz, dx, dy, dz = emit(state, light_kind, light_pos, light_dir, face_cdf, lo, hi)
        direction0[i, 0] = dx
        direction0[i, 1] = dy
        direction0[i, 2] = dz

        vpos = _grow_vec(vpos, n_v + 1)
        vkind = _grow_int(vkind, n_v + 1)
        vspecies = _grow_int(vspecies, n_v + 1)
        vcos = _grow_float(vcos, n_v + 1)
        vsurf = _grow_int(vsurf, n_v + 1)
        vvoxel = _grow_int(vvoxel, n_v + 1)
        vseg = _grow_int(vseg, n_v + 1)
        vle = _grow_int(vle, n_v + 1)
        vpos[n_v, 0] = ox
        vpos[n_v, 1] = oy
        vpos[n_v, 2] = oz
        vkind[n_v] = KIND_EMISSION
        vspecies[n_v] = -1
        vcos[n_v] = 0.0
        vsurf[n_v] = -1
        vvoxel[n_v] = -1
        vseg[n_v] = 0
        vle[n_v] = 0
        n_v += 1
        n_path = 1
        events = 0

        while True:
            vpos = _grow_vec(vpos, n_v + 1)
            vkind = _grow_int(vkind, n_v + 1)
            vspecies = _grow_int(vspecies, n_v + 1)
            vcos = _grow_float(vcos, n_v + 1)
            vsurf = _grow_int(vsurf, n_v + 1)
            vvoxel = _grow_int(vvoxel, n_v + 1)
            vseg = _grow_int(vseg, n_v + 1)
            vle = _grow_int(vle, n_v + 1)
            ix_vox = _grow_int(ix_vox, n_ix + walk_room)
            ix_len = _grow_float(ix_len, n_ix + walk_room)
            le_det = _grow_int(le_det, n_le + n_det)
            le_u = _grow_float(le_u, n_le + n_det)
            le_v = _grow_float(le_v, n_le + n_det)
            le_cos = _grow_float(le_cos, n_le + n_det)
            le_geom = _grow_float(le_geom, n_le + n_det)
            le_seg = _grow_int(le_seg, n_le + n_det)
            le_ix_vox = _grow_int(le_ix_vox, n_le_ix + n_det * walk_room)
            le_ix_len = _grow_float(le_ix_len, n_le_ix + n_det * walk_room)

            t0, t1 = clip_box(ox, oy, oz, dx, dy, dz, lo, hi)
            t_start = t0 if t0 > 0.0 else 0.0
            inside = t1 > t_start
            stop_now = events >= max_bounces
            t_stop = t1 if inside else t_start + diag
            surface = -1
            if inside:
                t_surf, surface = hit_surfaces(ox, oy, oz, dx, dy, dz, eps, t1, surf_kinds, surf_geom)
                if surface >= 0:
                    t_stop = t_surf
            tau = _INF
            if not stop_now:
                tau = -math.log(1.0 - next_uniform(state))
            n_seg = 0
            t_hit = -1.0
            v_hit = -1
            if inside:
                n_seg, t_hit, v_hit = walk(
                    ox, oy, oz, dx, dy, dz, t_start, t_stop, lo, size, dims,
                    beta_tot, tau, ix_vox, ix_len, n_ix,
                )
            n_ix += n_seg
            vseg[n_v] = n_seg
            vle[n_v] = 0

            if t_hit >= 0.0:
                px = ox + dx * t_hit
                py = oy + dy * t_hit
                pz = oz + dz * t_hit
                j = sample_species(beta, v_hit, albedo, mode, next_uniform(state))
                mu = sample_phase_cos(kinds[j], gs[j], next_uniform(state))
                phi = _TWO_PI * next_uniform(state)
                ndx, ndy, ndz = rotate(dx, dy, dz, mu, phi)
                vpos[n_v, 0] = px
                vpos[n_v, 1] = py
                vpos[n_v, 2] = pz
                vkind[n_v] = KIND_SCATTER
                vspecies[n_v] = j
                vcos[n_v] = dx * ndx + dy * ndy + dz * ndz
                vsurf[n_v] = -1
                vvoxel[n_v] = v_hit
                added, added_ix = local_estimates(
                    px, py, pz, dx, dy, dz, False, 0.0, 0.0, 0.0,
                    lo, hi, size, dims, beta_tot, surf_kinds, surf_geom, eps,
                    det_pos, det_basis, det_tan_h, det_tan_v,
                    le_det, le_u, le_v, le_cos, le_geom, le_seg, n_le,
                    le_ix_vox, le_ix_len, n_le_ix,
                )
                vle[n_v] = added
                n_le += added
                n_le_ix += added_ix
                n_v += 1
                n_path += 1
                events += 1
                ox, oy, oz = px, py, pz
                dx, dy, dz = ndx, ndy, ndz
                continue

            px = ox + dx * t_stop
            py = oy + dy * t_stop
            pz = oz + dz * t_stop
            vpos[n_v, 0] = px
            vpos[n_v, 1] = py
            vpos[n_v, 2] = pz
            vspecies[n_v] = -1
            vvoxel[n_v] = voxel_of(px, py, pz, lo, size, dims)

            if surface >= 0 and not stop_now:
                nx, ny, nz = surface_normal(surf_kinds[surface], surf_geom[surface], px, py, pz, dx, dy, dz)
                dn = dx * nx + dy * ny + dz * nz
                rx = dx - 2.0 * dn * nx
                ry = dy - 2.0 * dn * ny
                rz = dz - 2.0 * dn * nz
                mu = math.sqrt(next_uniform(state))
                phi = _TWO_PI * next_uniform(state)
                ndx, ndy, ndz = rotate(nx, ny, nz, mu, phi)
                vkind[n_v] = KIND_REFLECT
                vcos[n_v] = rx * ndx + ry * ndy + rz * ndz
                vsurf[n_v] = surface
                added, added_ix = local_estimates(
                    px, py, pz, rx, ry, rz, True, nx, ny, nz,
                    lo, hi, size, dims, beta_tot, surf_kinds, surf_geom, eps,
                    det_pos, det_basis, det_tan_h, det_tan_v,
                    le_det, le_u, le_v, le_cos, le_geom, le_seg, n_le,
                    le_ix_vox, le_ix_len, n_le_ix,
                )
                vle[n_v] = added
                n_le += added
                n_le_ix += added_ix
                n_v += 1
                n_path += 1
                events += 1
                ox, oy, oz = px, py, pz
                dx, dy, dz = ndx, ndy, ndz
                continue

            vkind[n_v] = KIND_ESCAPE
            vcos[n_v] = 0.0
            vsurf[n_v] = surface if stop_now else -1
            n_v += 1
            n_path += 1
            if stop_now:
                truncated[i] = 1
            break

        path_vertices[i] = n_path

    return (
        path_vertices, truncated, direction0,
        vpos[:n_v].copy(), vkind[:n_v].copy(), vspecies[:n_v].copy(), vcos[:n_v].copy(),
        vsurf[:n_v].copy(), vvoxel[:n_v].copy(), vseg[:n_v].copy(), vle[:n_v].copy(),
        ix_vox[:n_ix].copy(), ix_len[:n_ix].copy(),
        le_det[:n_le].copy(), le_u[:n_le].copy(), le_v[:n_le].copy(), le_cos[:n_le].copy(),
        le_geom[:n_le].copy(), le_seg[:n_le].copy(),
        le_ix_vox[:n_le_ix].copy(), le_ix_len[:n_le_ix].copy(),
    )
