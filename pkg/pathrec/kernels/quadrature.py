"""Deterministic single-scatter line integrals used as a reference for the tracer."""
import math

import numpy as np
from numba import njit

from pathrec.kernels.geometry import clip_box, optical_depth, segment_walk
from pathrec.kernels.optics import phase_value
from pathrec.kernels.tracer import LIGHT_SUN


@njit(cache=True, nogil=True)
def _light_factor(px, py, pz, light_kind, light_pos, light_dir, lo, hi, size, dims, beta_tot):
    """(incoming direction, attenuated source strength per unit radiance) at a medium point"""
    if light_kind == LIGHT_SUN:
        tau = optical_depth(px, py, pz, -light_dir[0], -light_dir[1], -light_dir[2], np.inf, lo, hi, size, dims, beta_tot)
        return light_dir[0], light_dir[1], light_dir[2], math.exp(-tau)
    wx = px - light_pos[0]
    wy = py - light_pos[1]
    wz = pz - light_pos[2]
    r2 = wx * wx + wy * wy + wz * wz
    if r2 <= 0.0:
        return 0.0, 0.0, 0.0, 0.0
    r = math.sqrt(r2)
    wx /= r
    wy /= r
    wz /= r
    tau = optical_depth(px, py, pz, -wx, -wy, -wz, r, lo, hi, size, dims, beta_tot)
    return wx, wy, wz, math.exp(-tau) / r2


@njit(cache=True, nogil=True)
def line_integral(
    ox, oy, oz, dx, dy, dz, nodes, weights,
    lo, hi, size, dims, beta, albedo, kinds, gs,
    light_kind, light_pos, light_dir,
):
    """Integral over t of beta_s f T(light -> y) T(y -> origin) for y = o + t d.

    Gauss-Legendre nodes on [-1, 1] are mapped onto every voxel segment of the
    ray, where extinction is constant and the integrand is smooth.
    """
    n_species = beta.shape[0]
    beta_tot = np.zeros(beta.shape[1], dtype=np.float64)
    for s in range(n_species):
        beta_tot += beta[s]
    vox, lens = segment_walk(ox, oy, oz, dx, dy, dz, np.inf, lo, hi, size, dims)
    if vox.shape[0] == 0:
        return 0.0
    t0, _ = clip_box(ox, oy, oz, dx, dy, dz, lo, hi)
    t_entry = t0 if t0 > 0.0 else 0.0

    total = 0.0
    tau_before = 0.0
    t_a = t_entry
    for k in range(vox.shape[0]):
        v = vox[k]
        length = lens[k]
        half = 0.5 * length
        scat = 0.0
        for s in range(n_species):
            scat += albedo[s] * beta[s, v]
        if scat > 0.0:
            for q in range(nodes.shape[0]):
                t = t_a + half * (nodes[q] + 1.0)
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                inx, iny, inz, source = _light_factor(
                    px, py, pz, light_kind, light_pos, light_dir, lo, hi, size, dims, beta_tot
                )
                if source <= 0.0:
                    continue
                mu = -(inx * dx + iny * dy + inz * dz)
                a_mix = 0.0
                for s in range(n_species):
                    a_mix += albedo[s] * beta[s, v] * phase_value(kinds[s], gs[s], mu)
                t_origin = math.exp(-(tau_before + beta_tot[v] * (t - t_a)))
                total += half * weights[q] * a_mix * source * t_origin
        tau_before += beta_tot[v] * length
        t_a += length
    return total


@njit(cache=True, nogil=True)
def pixel_integrals(
    det_pos, det_basis, tan_h, tan_v, rows, cols, sub, nodes, weights,
    lo, hi, size, dims, beta, albedo, kinds, gs,
    light_kind, light_pos, light_dir,
):
    """Solid-angle integral of the line integral over every pixel (sub x sub midpoint grid)"""
    out = np.zeros(rows * cols, dtype=np.float64)
    du = 2.0 * tan_h / cols
    dv = 2.0 * tan_v / rows
    for row in range(rows):
        for col in range(cols):
            acc = 0.0
            for i in range(sub):
                v = tan_v - (row + (i + 0.5) / sub) * dv
                for j in range(sub):
                    u = -tan_h + (col + (j + 0.5) / sub) * du
                    wx = det_basis[0, 0] + u * det_basis[1, 0] + v * det_basis[2, 0]
                    wy = det_basis[0, 1] + u * det_basis[1, 1] + v * det_basis[2, 1]
                    wz = det_basis[0, 2] + u * det_basis[1, 2] + v * det_basis[2, 2]
                    norm = math.sqrt(wx * wx + wy * wy + wz * wz)
                    value = line_integral(
                        det_pos[0], det_pos[1], det_pos[2], wx / norm, wy / norm, wz / norm, nodes, weights,
                        lo, hi, size, dims, beta, albedo, kinds, gs,
                        light_kind, light_pos, light_dir,
                    )
                    acc += value / (1.0 + u * u + v * v) ** 1.5
            out[row * cols + col] = acc * du * dv / (sub * sub)
    return out
