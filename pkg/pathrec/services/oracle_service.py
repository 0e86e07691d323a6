import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import roots_legendre

from pathrec.kernels.quadrature import line_integral, pixel_integrals
from pathrec.models.errors import ConfigError, InvariantViolation
from pathrec.models.path import ProblemKind, Ray, SparseGradient
from pathrec.models.scene import Scene, SceneParams
from pathrec.services.pathstore_service import ParamArrays
from pathrec.services.scene_service import SceneService

logger = logging.getLogger(__name__)

MIN_GAUSS_ORDER = 64


class Integrand1D(BaseModel):
    """f on [0, 1] with an optional proposal density and its sampler"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    f: Callable[[np.ndarray], np.ndarray]
    density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None


def default_step(m: np.ndarray) -> np.ndarray:
    return 1e-4 * (1.0 + np.abs(m))


class OracleService:
    """Brute-force and analytic references for the estimators"""

    # ------------------------------------------------------- 1D integration

    @staticmethod
    def riemann_integrate(integrand: Integrand1D, n: int) -> float:
        """Midpoint rule over n equal partitions of [0, 1]"""
        if n < 1:
            error_msg = f"Riemann sum needs at least one partition, got {n}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        u = (np.arange(n, dtype=np.float64) + 0.5) / n
        return float(np.sum(integrand.f(u)) / n)

    @staticmethod
    def _mean_and_error(samples: np.ndarray) -> Tuple[float, float]:
        n = samples.shape[0]
        return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n))

    @staticmethod
    def mc_uniform(integrand: Integrand1D, n: int, rng: np.random.Generator) -> Tuple[float, float]:
        """(estimate, standard error) with u ~ U[0, 1)"""
        if n < 2:
            error_msg = f"Monte-Carlo estimate needs at least 2 samples, got {n}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        u = rng.random(n)
        return OracleService._mean_and_error(np.asarray(integrand.f(u), dtype=np.float64))

    @staticmethod
    def mc_importance(integrand: Integrand1D, n: int, rng: np.random.Generator) -> Tuple[float, float]:
        """(estimate, standard error) of f/mu with u drawn from the integrand's sampler"""
        if n < 2:
            error_msg = f"Monte-Carlo estimate needs at least 2 samples, got {n}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        if integrand.density is None or integrand.sampler is None:
            error_msg = "Importance sampling needs a proposal density and a sampler"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        u = np.asarray(integrand.sampler(rng, n), dtype=np.float64)
        f = np.asarray(integrand.f(u), dtype=np.float64)
        mu = np.asarray(integrand.density(u), dtype=np.float64)
        bad = (mu <= 0.0) & (f != 0.0)
        if bad.any():
            first = int(np.flatnonzero(bad)[0])
            error_msg = f"Proposal density vanishes at u={u[first]!r} where f={f[first]!r}"
            logger.error(f"❌ {error_msg}")
            raise InvariantViolation(error_msg)
        ratio = np.divide(f, mu, out=np.zeros_like(f), where=mu > 0.0)
        return OracleService._mean_and_error(ratio)

    # ------------------------------------------------------- optical depth

    @staticmethod
    def piecewise_optical_depth(scene: Scene, params: SceneParams, x, y) -> float:
        """Optical depth of x -> y from every grid-plane crossing, without the voxel walk.

        Extinction is constant between consecutive crossings, so the sum over the
        sorted crossing intervals is exact up to rounding.
        """
        x = np.asarray(x, dtype=np.float64)
        d = np.asarray(y, dtype=np.float64) - x
        length = float(np.linalg.norm(d))
        if length == 0.0:
            return 0.0
        grid = scene.grid
        lo = np.array(scene.bounds_lo, dtype=np.float64)
        hi = np.array(scene.bounds_hi, dtype=np.float64)
        size = np.array(grid.voxel_size, dtype=np.float64)
        dims = np.array(grid.dims, dtype=np.int64)
        s0, s1 = 0.0, 1.0
        crossings = []
        for a in range(3):
            if d[a] == 0.0:
                if x[a] < lo[a] or x[a] > hi[a]:
                    return 0.0
                continue
            ta, tb = sorted(((lo[a] - x[a]) / d[a], (hi[a] - x[a]) / d[a]))
            s0, s1 = max(s0, ta), min(s1, tb)
            planes = grid.lo[a] + np.arange(dims[a] + 1) * size[a]
            crossings.append((planes - x[a]) / d[a])
        if s1 <= s0:
            return 0.0
        s = np.concatenate([[s0, s1]] + crossings)
        s = np.unique(s[(s >= s0) & (s <= s1)])
        mids = x[None, :] + 0.5 * (s[:-1] + s[1:])[:, None] * d[None, :]
        idx = np.clip(np.floor((mids - grid.lo) / size).astype(np.int64), 0, dims - 1)
        flat = idx[:, 0] + dims[0] * (idx[:, 1] + dims[1] * idx[:, 2])
        return float(np.dot(params.beta_total[flat], np.diff(s)) * length)

    # ------------------------------------------------------ single scatter

    @staticmethod
    def _quadrature_args(scene: Scene, params: Optional[SceneParams], order: int):
        if order < MIN_GAUSS_ORDER:
            error_msg = f"Gauss-Legendre order {order} is below {MIN_GAUSS_ORDER}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        packed = SceneService.pack(scene)
        arrays = ParamArrays(params or SceneService.scene_params(scene))
        nodes, weights = roots_legendre(order)
        return packed, arrays, np.ascontiguousarray(nodes), np.ascontiguousarray(weights)

    @staticmethod
    def line_of_sight_integral(
        scene: Scene, ray: Ray, params: Optional[SceneParams] = None, order: int = MIN_GAUSS_ORDER
    ) -> float:
        """Single-scattered radiance arriving at ray.origin from direction ray.direction"""
        packed, arrays, nodes, weights = OracleService._quadrature_args(scene, params, order)
        o = ray.origin
        d = ray.direction
        value = line_integral(
            o[0], o[1], o[2], d[0], d[1], d[2], nodes, weights,
            packed.lo, packed.hi, packed.size, packed.dims, arrays.beta, packed.albedo, packed.kinds, packed.gs,
            packed.light_kind, packed.light_pos, packed.light_dir,
        )
        return float(scene.light.radiance * value)

    @staticmethod
    def single_scatter_analytic(
        scene: Scene,
        detector: int,
        quadrature_order: int = MIN_GAUSS_ORDER,
        params: Optional[SceneParams] = None,
        subpixels: int = 4,
    ) -> np.ndarray:
        """Image of once-scattered light, integrated over each pixel's solid angle.

        Surfaces are ignored; the result matches render() with max_bounces=1 on
        scenes without surfaces.
        """
        if not 0 <= detector < len(scene.detectors):
            error_msg = f"Detector index {detector} out of range"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        if scene.surfaces:
            logger.warning(f"⚠️  Single-scatter reference ignores {len(scene.surfaces)} surface(s)")
        packed, arrays, nodes, weights = OracleService._quadrature_args(scene, params, quadrature_order)
        det = scene.detectors[detector]
        logger.info(f"🔄 Single-scatter reference - detector {detector}, {det.rows}x{det.cols}, order {quadrature_order}")
        flat = pixel_integrals(
            packed.det_pos[detector], packed.det_basis[detector], packed.det_tan_h[detector],
            packed.det_tan_v[detector], det.rows, det.cols, int(subpixels), nodes, weights,
            packed.lo, packed.hi, packed.size, packed.dims, arrays.beta, packed.albedo, packed.kinds, packed.gs,
            packed.light_kind, packed.light_pos, packed.light_dir,
        )
        return scene.light.radiance * flat.reshape(det.rows, det.cols)

    # ------------------------------------------------- finite differences

    @staticmethod
    def finite_difference_grad(
        eval_fn: Callable[[np.ndarray], float],
        m: np.ndarray,
        indices: Optional[Sequence[int]] = None,
        h_rule: Callable[[np.ndarray], np.ndarray] = default_step,
        kind: ProblemKind = ProblemKind.tomography,
    ) -> SparseGradient:
        """Central differences of eval_fn at m for the selected unknowns"""
        m = np.array(m, dtype=np.float64)
        indices = np.arange(m.size) if indices is None else np.asarray(indices, dtype=np.int64)
        steps = np.broadcast_to(np.asarray(h_rule(m), dtype=np.float64), m.shape)
        values = np.empty(indices.shape[0], dtype=np.float64)
        for k, v in enumerate(indices):
            h = float(steps[v])
            plus = m.copy()
            minus = m.copy()
            plus[v] += h
            minus[v] -= h
            values[k] = (float(eval_fn(plus)) - float(eval_fn(minus))) / (2.0 * h)
        logger.debug(f"   Finite differences over {indices.shape[0]} unknowns")
        return SparseGradient(kind=kind, size=m.size, indices=indices, values=values)
