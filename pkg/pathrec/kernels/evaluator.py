"""Re-evaluation of stored paths under new parameters.

Per-record work (phase A) writes only into slots owned by that record, so it can
run in any order and on any number of workers. Reductions (phase B) walk path
indices in ascending order over fixed chunks; callers add chunk partials in
chunk order, which keeps every sum independent of scheduling and sorting.
"""
import math

import numpy as np
from numba import njit

from pathrec.kernels.geometry import pixel_of
from pathrec.kernels.optics import mixture_terms, phase_value, phong_factor, phong_log_derivatives
from pathrec.kernels.tracer import KIND_REFLECT, KIND_SCATTER

EXP_CLAMP = 700.0

PROBLEM_TOMOGRAPHY = 0
PROBLEM_PHONG = 1


@njit(cache=True, nogil=True)
def assign_rows(le_det, le_u, le_v, tan_h, tan_v, rows, cols, offsets):
    out = np.empty(le_det.shape[0], dtype=np.int64)
    for e in range(le_det.shape[0]):
        k = le_det[e]
        pix = pixel_of(le_u[e], le_v[e], tan_h[k], tan_v[k], rows[k], cols[k])
        out[e] = -1 if pix < 0 else offsets[k] + pix
    return out


@njit(cache=True, nogil=True)
def _optical_depth(tot, offsets, vox, lengths, e):
    tau = 0.0
    for k in range(offsets[e], offsets[e + 1]):
        tau += tot[vox[k]] * lengths[k]
    return tau


@njit(cache=True, nogil=True)
def _clamped_exp(x):
    if x > EXP_CLAMP:
        return math.exp(EXP_CLAMP), 1
    if x < -EXP_CLAMP:
        return math.exp(-EXP_CLAMP), 1
    return math.exp(x), 0


@njit(cache=True, nogil=True)
def evaluate_paths(
    paths, path_off, vkind, vcos, vsurf, vvoxel,
    ix_off, ix_vox, ix_len, le_off, le_row, le_cos, le_geom, le_ix_off, le_ix_vox, le_ix_len,
    truncated, beta_t, beta_ref, tot_t, tot_ref, albedo, kinds, gs, mode,
    surf_rho, kappa, gamma, prefactor,
    le_value, path_logr,
):
    """Event values f/mu_ref for every local-estimation entry of the given paths.

    Also writes the full-path log correction factor log(mu_t / mu_ref).
    Returns (clamp events, invariant violations, zero-BRDF vertices).
    """
    clamps = 0
    violations = 0
    zero_brdf = 0
    for q in range(paths.shape[0]):
        p = paths[q]
        first = path_off[p]
        last = path_off[p + 1]
        logw = 0.0
        logr = 0.0
        alive = True
        for g in range(first + 1, last):
            dtau = 0.0
            for k in range(ix_off[g], ix_off[g + 1]):
                v = ix_vox[k]
                dtau += (tot_t[v] - tot_ref[v]) * ix_len[k]
            if not (g == last - 1 and truncated[p] == 1):
                logr -= dtau
            logw -= dtau
            kind = vkind[g]
            if kind == KIND_SCATTER:
                v = vvoxel[g]
                b_ref = tot_ref[v]
                if b_ref <= 0.0:
                    violations += 1
                    alive = False
                    break
                a_t, m_t, w_t = mixture_terms(beta_t, v, albedo, kinds, gs, mode, vcos[g])
                _, m_ref, w_ref = mixture_terms(beta_ref, v, albedo, kinds, gs, mode, vcos[g])
                if m_ref <= 0.0 or w_ref <= 0.0:
                    violations += 1
                    alive = False
                    break
                if alive:
                    log_b_ref = math.log(b_ref)
                    for e in range(le_off[g], le_off[g + 1]):
                        if le_row[e] < 0:
                            continue
                        a_bd, _, _ = mixture_terms(beta_t, v, albedo, kinds, gs, mode, le_cos[e])
                        if a_bd <= 0.0:
                            continue
                        tau_le = _optical_depth(tot_t, le_ix_off, le_ix_vox, le_ix_len, e)
                        value, clamped = _clamped_exp(logw + math.log(a_bd) - log_b_ref - tau_le)
                        clamps += clamped
                        le_value[e] = prefactor * value * le_geom[e]
                    if a_t <= 0.0:
                        alive = False
                    else:
                        logw += math.log(a_t) + math.log(w_ref) - log_b_ref - math.log(m_ref)
                if tot_t[v] <= 0.0 or m_t <= 0.0 or w_t <= 0.0:
                    logr = -np.inf
                else:
                    logr += math.log(tot_t[v] * m_t / w_t) - math.log(b_ref * m_ref / w_ref)
            elif kind == KIND_REFLECT:
                s = vsurf[g]
                if alive:
                    for e in range(le_off[g], le_off[g + 1]):
                        if le_row[e] < 0:
                            continue
                        brdf = phong_factor(kappa[s], gamma[s], le_cos[e])
                        if brdf <= 0.0:
                            continue
                        tau_le = _optical_depth(tot_t, le_ix_off, le_ix_vox, le_ix_len, e)
                        value, clamped = _clamped_exp(logw - tau_le)
                        clamps += clamped
                        le_value[e] = prefactor * value * surf_rho[s] * brdf * le_geom[e]
                    weight = surf_rho[s] * phong_factor(kappa[s], gamma[s], vcos[g])
                    if weight <= 0.0:
                        zero_brdf += 1
                        alive = False
                    else:
                        logw += math.log(weight)
            else:
                break
        path_logr[p] = logr
    return clamps, violations, zero_brdf


@njit(cache=True, nogil=True)
def reduce_images(first_path, last_path, path_off, le_off, le_row, le_value, n_rows):
    partial = np.zeros(n_rows, dtype=np.float64)
    for p in range(first_path, last_path):
        for g in range(path_off[p], path_off[p + 1]):
            for e in range(le_off[g], le_off[g + 1]):
                row = le_row[e]
                if row >= 0:
                    partial[row] += le_value[e]
    return partial


@njit(cache=True, nogil=True)
def tomography_score(beta_t, tot_t, v, albedo, kinds, gs, mode, target, compat, mu):
    """d log A / d beta_target at voxel v for scattering cosine mu"""
    if compat:
        if tot_t[v] <= 0.0:
            return 0.0
        return 1.0 / tot_t[v]
    a, _, _ = mixture_terms(beta_t, v, albedo, kinds, gs, mode, mu)
    if a <= 0.0:
        return 0.0
    return albedo[target] * phase_value(kinds[target], gs[target], mu) / a


@njit(cache=True, nogil=True)
def loss_gradient_paths(
    paths, path_off, vkind, vcos, vsurf, vvoxel,
    ix_off, ix_len, le_off, le_row, le_cos, le_ix_off, le_ix_len,
    beta_t, tot_t, albedo, kinds, gs, mode, kappa, gamma,
    problem, target, compat, residual, le_value,
    ix_grad, le_ix_grad, vtx_grad, vtx_dk, vtx_dg,
):
    """Per-slot loss-gradient contributions, linear in path length.

    Each event carries w = value * residual[row]; a segment is weighted by the
    sum of w over events at or after its end vertex.
    """
    for q in range(paths.shape[0]):
        p = paths[q]
        first = path_off[p]
        last = path_off[p + 1]
        suffix = 0.0
        for g in range(last - 1, first, -1):
            own = 0.0
            own_score = 0.0
            own_dk = 0.0
            own_dg = 0.0
            kind = vkind[g]
            for e in range(le_off[g], le_off[g + 1]):
                row = le_row[e]
                if row < 0 or le_value[e] == 0.0:
                    for k in range(le_ix_off[e], le_ix_off[e + 1]):
                        le_ix_grad[k] = 0.0
                    continue
                w = le_value[e] * residual[row]
                own += w
                for k in range(le_ix_off[e], le_ix_off[e + 1]):
                    le_ix_grad[k] = -w * le_ix_len[k]
                if kind == KIND_SCATTER and problem == PROBLEM_TOMOGRAPHY:
                    own_score += w * tomography_score(
                        beta_t, tot_t, vvoxel[g], albedo, kinds, gs, mode, target, compat, le_cos[e]
                    )
                elif kind == KIND_REFLECT and problem == PROBLEM_PHONG and vsurf[g] == target:
                    dk, dg = phong_log_derivatives(kappa[target], gamma[target], le_cos[e])
                    own_dk += w * dk
                    own_dg += w * dg
            vtx_grad[g] = 0.0
            vtx_dk[g] = 0.0
            vtx_dg[g] = 0.0
            if kind == KIND_SCATTER and problem == PROBLEM_TOMOGRAPHY:
                cont = 0.0
                if suffix != 0.0:
                    cont = suffix * tomography_score(
                        beta_t, tot_t, vvoxel[g], albedo, kinds, gs, mode, target, compat, vcos[g]
                    )
                vtx_grad[g] = own_score + cont
            elif kind == KIND_REFLECT and problem == PROBLEM_PHONG and vsurf[g] == target:
                dk = 0.0
                dg = 0.0
                if suffix != 0.0:
                    dk, dg = phong_log_derivatives(kappa[target], gamma[target], vcos[g])
                vtx_dk[g] = own_dk + suffix * dk
                vtx_dg[g] = own_dg + suffix * dg
            suffix += own
            for k in range(ix_off[g], ix_off[g + 1]):
                ix_grad[k] = -suffix * ix_len[k]
        vtx_grad[first] = 0.0
        vtx_dk[first] = 0.0
        vtx_dg[first] = 0.0


@njit(cache=True, nogil=True)
def reduce_voxel_gradient(
    first_path, last_path, path_off, vkind, vvoxel, ix_off, ix_vox, le_off, le_ix_off, le_ix_vox,
    ix_grad, le_ix_grad, vtx_grad, n_voxels,
):
    partial = np.zeros(n_voxels, dtype=np.float64)
    for p in range(first_path, last_path):
        for g in range(path_off[p], path_off[p + 1]):
            for k in range(ix_off[g], ix_off[g + 1]):
                partial[ix_vox[k]] += ix_grad[k]
            for e in range(le_off[g], le_off[g + 1]):
                for k in range(le_ix_off[e], le_ix_off[e + 1]):
                    partial[le_ix_vox[k]] += le_ix_grad[k]
            if vkind[g] == KIND_SCATTER:
                partial[vvoxel[g]] += vtx_grad[g]
    return partial


@njit(cache=True, nogil=True)
def reduce_phong_gradient(first_path, last_path, path_off, vtx_dk, vtx_dg):
    partial = np.zeros(2, dtype=np.float64)
    for p in range(first_path, last_path):
        for g in range(path_off[p], path_off[p + 1]):
            partial[0] += vtx_dk[g]
            partial[1] += vtx_dg[g]
    return partial


@njit(cache=True, nogil=True)
def _grow_triplets(rows, cols, vals, need):
    if need <= rows.shape[0]:
        return rows, cols, vals
    size = max(2 * rows.shape[0], need)
    new_rows = np.empty(size, dtype=np.int64)
    new_cols = np.empty(size, dtype=np.int64)
    new_vals = np.empty(size, dtype=np.float64)
    new_rows[: rows.shape[0]] = rows
    new_cols[: cols.shape[0]] = cols
    new_vals[: vals.shape[0]] = vals
    return new_rows, new_cols, new_vals


@njit(cache=True, nogil=True)
def jacobian_paths(
    first_path, last_path, path_off, vkind, vcos, vsurf, vvoxel,
    ix_off, ix_vox, ix_len, le_off, le_row, le_cos, le_ix_off, le_ix_vox, le_ix_len,
    beta_t, tot_t, albedo, kinds, gs, mode, kappa, gamma,
    problem, target, compat, le_value, n_rows,
):
    """Per-event derivative entries dF_row/dm as (row, col, value) triplets.

    Phong problems accumulate into a dense (n_rows, 2) block instead.
    """
    rows = np.empty(1024, dtype=np.int64)
    cols = np.empty(1024, dtype=np.int64)
    vals = np.empty(1024, dtype=np.float64)
    n = 0
    dense = np.zeros((n_rows if problem == PROBLEM_PHONG else 0, 2), dtype=np.float64)
    for p in range(first_path, last_path):
        first = path_off[p]
        last = path_off[p + 1]
        for b in range(first + 1, last):
            for e in range(le_off[b], le_off[b + 1]):
                row = le_row[e]
                value = le_value[e]
                if row < 0 or value == 0.0:
                    continue
                if problem == PROBLEM_PHONG:
                    if vkind[b] == KIND_REFLECT and vsurf[b] == target:
                        dk, dg = phong_log_derivatives(kappa[target], gamma[target], le_cos[e])
                        dense[row, 0] += value * dk
                        dense[row, 1] += value * dg
                    for g in range(first + 1, b):
                        if vkind[g] == KIND_REFLECT and vsurf[g] == target:
                            dk, dg = phong_log_derivatives(kappa[target], gamma[target], vcos[g])
                            dense[row, 0] += value * dk
                            dense[row, 1] += value * dg
                    continue
                need = n + (ix_off[b + 1] - ix_off[first]) + (le_ix_off[e + 1] - le_ix_off[e]) + (b - first) + 1
                rows, cols, vals = _grow_triplets(rows, cols, vals, need)
                for k in range(ix_off[first + 1], ix_off[b + 1]):
                    rows[n] = row
                    cols[n] = ix_vox[k]
                    vals[n] = -value * ix_len[k]
                    n += 1
                for k in range(le_ix_off[e], le_ix_off[e + 1]):
                    rows[n] = row
                    cols[n] = le_ix_vox[k]
                    vals[n] = -value * le_ix_len[k]
                    n += 1
                for g in range(first + 1, b):
                    if vkind[g] == KIND_SCATTER:
                        rows[n] = row
                        cols[n] = vvoxel[g]
                        vals[n] = value * tomography_score(
                            beta_t, tot_t, vvoxel[g], albedo, kinds, gs, mode, target, compat, vcos[g]
                        )
                        n += 1
                if vkind[b] == KIND_SCATTER:
                    rows[n] = row
                    cols[n] = vvoxel[b]
                    vals[n] = value * tomography_score(
                        beta_t, tot_t, vvoxel[b], albedo, kinds, gs, mode, target, compat, le_cos[e]
                    )
                    n += 1
    return rows[:n].copy(), cols[:n].copy(), vals[:n].copy(), dense
