"""Desk-scale checks runnable from the command line without a test framework."""
import logging
import math
import time
from typing import Callable, List

import numpy as np
from pydantic import BaseModel

from pathrec.models.inverse import PHONG_ADAM, AdamConfig, Schedule, Stage
from pathrec.models.scene import PhaseFunction, PhaseKind
from pathrec.services.gradient_service import GradientService
from pathrec.services.inverse_service import InverseService
from pathrec.services.oracle_service import Integrand1D, OracleService
from pathrec.services.pathstore_service import PathStoreService
from pathrec.services.scene_service import SceneService
from pathrec.services.synthetic_service import SyntheticSceneService
from pathrec.services.transport_service import TransportService

logger = logging.getLogger(__name__)

RECYCLE_PERIOD = 30


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str
    seconds: float


class SelftestService:
    def __init__(self, workers: int = 1, seed: int = 0):
        self.workers = workers
        self.seed = seed
        self.transport = TransportService(workers=workers)
        self.store_service = PathStoreService(workers=workers)
        self.gradients = GradientService(workers=workers)

    def run(self, suite: str = "unit") -> List[CheckResult]:
        checks: List[Callable[[], CheckResult]] = [
            self.check_phase_normalization,
            self.check_transmittance,
            self.check_mc_oracles,
            self.check_recycling_identity,
            self.check_sorting_invariance,
            self.check_fixed_path_gradient,
        ]
        if suite == "acceptance":
            checks += [
                self.check_single_scatter,
                self.check_unbiasedness,
                self.check_reflectometry_recovery,
                self.check_toy_tomography,
                self.check_recycling_speedup,
            ]
        results = []
        for check in checks:
            start = time.time()
            name, passed, detail = check()
            result = CheckResult(name=name, passed=passed, detail=detail, seconds=time.time() - start)
            if passed:
                logger.info(f"✅ {name}: {detail} ({result.seconds:.2f}s)")
            else:
                logger.error(f"❌ {name}: {detail} ({result.seconds:.2f}s)")
            results.append(result)
        return results

    # ------------------------------------------------------------- checks

    def check_phase_normalization(self):
        phases = [PhaseFunction(kind=PhaseKind.hg, g=g) for g in (0.0, 0.5, 0.85)]
        phases.append(PhaseFunction(kind=PhaseKind.rayleigh))
        worst = max(abs(SceneService.phase_normalization(p) - 1.0) for p in phases)
        return "phase normalization", worst <= 1e-6, f"max |integral - 1| = {worst:.2e}"

    def check_transmittance(self):
        scene = SyntheticSceneService.tomography_scene(n=4, peak=5.0, seed=self.seed, air=False)
        params = SceneService.scene_params(scene)
        rng = np.random.default_rng(self.seed)
        worst = 0.0
        for _ in range(100):
            x, y = rng.random(3), rng.random(3)
            walked = TransportService.optical_depth(scene, params, x, y)
            crossed = OracleService.piecewise_optical_depth(scene, params, x, y)
            worst = max(worst, abs(walked - crossed) / max(crossed, 1e-6))

        uniform = SyntheticSceneService.tomography_scene(n=4, values=np.full(64, 3.0), air=False)
        uniform_params = SceneService.scene_params(uniform)
        worst_uniform = 0.0
        for _ in range(20):
            x, y = rng.random(3), rng.random(3)
            exact = 3.0 * float(np.linalg.norm(y - x))
            walked = TransportService.optical_depth(uniform, uniform_params, x, y)
            worst_uniform = max(worst_uniform, abs(walked - exact) / exact)
        passed = worst <= 1e-9 and worst_uniform <= 1e-12
        return "transmittance", passed, f"max relative error: gridded {worst:.2e}, homogeneous {worst_uniform:.2e}"

    def check_mc_oracles(self):
        rng = np.random.default_rng(self.seed)
        cubic = Integrand1D(
            f=lambda u: 3.0 * u * u,
            density=lambda u: 3.0 * u * u,
            sampler=lambda r, n: r.random(n) ** (1.0 / 3.0),
        )
        estimate, error = OracleService.mc_uniform(cubic, 1_000_000, rng)
        exact, spread = OracleService.mc_importance(cubic, 1000, rng)
        ns = np.array([10, 20, 40, 80, 160])
        errors = [abs(OracleService.riemann_integrate(Integrand1D(f=np.exp), int(n)) - (math.e - 1.0)) for n in ns]
        slope = float(np.polyfit(np.log(ns), np.log(errors), 1)[0])
        passed = abs(estimate - 1.0) <= 4.0 * error and spread == 0.0 and abs(slope + 2.0) <= 0.2
        return "mc oracles", passed, f"uniform {estimate:.5f}+-{error:.1e}, importance sd {spread:.1e}, slope {slope:.2f}"

    def check_recycling_identity(self):
        scene = SyntheticSceneService.tomography_scene(n=4, peak=5.0, seed=self.seed, rows=8, cols=8)
        params = SceneService.scene_params(scene)
        output, store = self.transport.render(scene, params, 20_000, self.seed)
        again = self.store_service.recycled_render(store, scene, params, params)
        same = all(np.array_equal(a, b) for a, b in zip(output.images, again.images))
        return "recycling identity", same, "r = 1 reproduces the render bit for bit" if same else "images differ"

    def check_sorting_invariance(self):
        scene = SyntheticSceneService.tomography_scene(n=4, peak=5.0, seed=self.seed, rows=8, cols=8)
        params = SceneService.scene_params(scene)
        store = self.transport.trace_store(scene, params, 20_000, self.seed)
        perturbed = params.scaled(1.05)
        plain = self.store_service.recycled_render(store, scene, perturbed, params)
        ordered = self.store_service.recycled_render(PathStoreService.sort_by_size(store), scene, perturbed, params)
        same = all(np.array_equal(a, b) for a, b in zip(plain.images, ordered.images))
        return "sorting invariance", same, "sorted and unsorted stores agree bit for bit" if same else "images differ"

    def check_fixed_path_gradient(self):
        values = np.random.default_rng(self.seed).uniform(1.0, 3.0, 8)
        scene = SyntheticSceneService.tomography_scene(n=2, values=values, rows=4, cols=4)
        params = SceneService.scene_params(scene)
        store = self.transport.trace_store(scene, params, 5_000, self.seed)
        m0 = GradientService.unknowns(scene, params)
        forward = self.gradients.grad_forward(store, scene, params, params)
        analytic = GradientService.detector_sum_gradient(forward, [0])

        def total(m):
            out = self.store_service.recycled_render(store, scene, GradientService.with_unknowns(scene, params, m), params)
            return float(out.images[0].sum())

        numeric = OracleService.finite_difference_grad(total, m0, h_rule=lambda m: 1e-6 * (1.0 + np.abs(m))).to_dense()
        scale = float(np.abs(analytic).max()) or 1.0
        gap = np.abs(numeric - analytic)
        # entries near zero are held to a floor of 1e-10 of the largest one
        passed = bool(np.all(gap <= 1e-6 * np.abs(analytic) + 1e-10 * scale))
        mask = np.abs(analytic) > 1e-8 * scale
        worst = float(np.max(gap[mask] / np.abs(analytic[mask]))) if mask.any() else 0.0
        return "fixed-path gradient", passed, f"max relative error vs central differences = {worst:.2e}"

    # --------------------------------------------------- acceptance checks

    def check_single_scatter(self, n_paths: int = 10_000_000, batches: int = 20):
        """Per-pixel agreement of the B=1 render with quadrature, sigma from independent batches"""
        scene = SyntheticSceneService.slab_scene(rows=16, cols=16)
        per_batch = n_paths // batches
        images = np.stack([
            self.transport.render(scene, None, per_batch, self.seed + b, max_bounces=1)[0].images[0]
            for b in range(batches)
        ])
        mc = images.mean(axis=0)
        sigma = images.std(axis=0, ddof=1) / math.sqrt(batches)
        reference = OracleService.single_scatter_analytic(scene, 0)
        bound = np.maximum(0.01 * np.abs(reference), 3.0 * sigma)
        ratio = np.abs(mc - reference) / np.where(bound > 0.0, bound, np.inf)
        worst = float(ratio.max())
        return "single scatter", worst <= 1.0, f"worst pixel at {worst:.2f} of max(1%, 3 sigma) over {mc.size} pixels"

    def check_unbiasedness(self, n_paths: int = 1_000_000, repetitions: int = 30):
        """Recycled estimate of a +1% single-voxel change vs fresh renders of the changed scene"""
        scene = SyntheticSceneService.tomography_scene(n=4, peak=5.0, seed=self.seed, rows=8, cols=8)
        params_ref = SceneService.scene_params(scene)
        m = GradientService.unknowns(scene, params_ref)
        m[int(np.argmax(m))] *= 1.01
        params_t = GradientService.with_unknowns(scene, params_ref, m)
        recycled = np.empty(repetitions)
        fresh = np.empty(repetitions)
        for rep in range(repetitions):
            store = self.transport.trace_store(scene, params_ref, n_paths, self.seed + rep)
            out = self.store_service.recycled_render(store, scene, params_t, params_ref)
            recycled[rep] = sum(float(image.sum()) for image in out.images)
            out, _ = self.transport.render(scene, params_t, n_paths, self.seed + 1000 + rep)
            fresh[rep] = sum(float(image.sum()) for image in out.images)
        gap = abs(float(recycled.mean() - fresh.mean()))
        error = math.sqrt(recycled.var(ddof=1) / repetitions + fresh.var(ddof=1) / repetitions)
        return (
            "unbiasedness",
            gap <= 3.0 * error,
            f"recycled {recycled.mean():.6e} vs fresh {fresh.mean():.6e}, gap {gap / error if error else 0.0:.2f} sigma",
        )

    def check_reflectometry_recovery(self, n_paths: int = 1_800_000, iterations: int = 150):
        truth_scene = SyntheticSceneService.reflectometry_scene(kappa_s=0.7, gamma=50.0, rows=60, cols=60, seed=self.seed)
        gt, _ = self.transport.render(truth_scene, None, 4 * n_paths, self.seed + 1000)
        initial = SceneService.scene_params(truth_scene).with_phong(0, 0.5, 10.0)
        schedule = Schedule(
            recycle_period=RECYCLE_PERIOD, stages=[Stage(rows=60, cols=60, n_paths=n_paths)],
            max_iterations=iterations,
        )
        inverse = InverseService(workers=self.workers)
        truth = np.array([0.7, 50.0])
        result = inverse.reconstruct(truth_scene, gt.images, PHONG_ADAM, schedule, self.seed, initial=initial, truth=truth)
        eps, _ = InverseService.metrics(result.m, truth)
        return (
            "reflectometry recovery",
            eps <= 0.05,
            f"kappa_s {result.m[0]:.4f}, gamma {result.m[1]:.3f}, eps {eps:.2%} after {len(result.history)} iterations",
        )

    def _tomography_problem(self, n_paths: int):
        truth_scene = SyntheticSceneService.tomography_scene(n=16, peak=10.0, seed=self.seed, rows=16, cols=16)
        truth = GradientService.unknowns(truth_scene, SceneService.scene_params(truth_scene))
        gt, _ = self.transport.render(truth_scene, None, 4 * n_paths, self.seed + 1000)
        start = SyntheticSceneService.tomography_scene(n=16, values=np.full(truth.size, 2.0), rows=16, cols=16)
        return start, gt.images, truth

    def check_toy_tomography(self, n_paths: int = 100_000, iterations: int = 120):
        """Loss halves, eps drops across every stage boundary, one sampling phase per recycle period"""
        start, gt_images, truth = self._tomography_problem(n_paths)
        schedule = Schedule(
            recycle_period=RECYCLE_PERIOD,
            stages=[Stage(rows=8, cols=8, n_paths=n_paths // 2), Stage(rows=16, cols=16, n_paths=n_paths)],
            max_iterations=iterations,
            saturation_window=10,
        )
        initial, _ = self.transport.render(start, None, n_paths, self.seed + 2000)
        initial_loss = InverseService.loss(initial.images, gt_images)
        inverse = InverseService(workers=self.workers)
        result = inverse.reconstruct(start, gt_images, AdamConfig(alpha=0.2), schedule, self.seed, truth=truth)

        eps = [InverseService.metrics(GradientService.unknowns(start, SceneService.scene_params(start)), truth)[0]]
        eps += [result.history[change - 1].eps for change in result.stage_changes]
        eps.append(result.history[-1].eps)
        decreasing = all(b < a for a, b in zip(eps, eps[1:]))
        final_loss = result.loss_history[-1]
        phases = math.ceil(len(result.history) / RECYCLE_PERIOD)
        passed = final_loss <= 0.5 * initial_loss and decreasing and result.sampling_phases == phases
        return (
            "toy tomography",
            passed,
            f"loss {initial_loss:.3e} -> {final_loss:.3e}, eps at stage boundaries "
            f"{', '.join(f'{e:.3f}' for e in eps)}, phases {result.sampling_phases}/{phases}",
        )

    def check_recycling_speedup(self, n_paths: int = 100_000, iterations: int = 100):
        start, gt_images, _ = self._tomography_problem(n_paths)
        inverse = InverseService(workers=self.workers)
        rates = {}
        for period in (RECYCLE_PERIOD, 1):
            schedule = Schedule(
                recycle_period=period, stages=[Stage(rows=16, cols=16, n_paths=n_paths)], max_iterations=iterations
            )
            result = inverse.reconstruct(start, gt_images, AdamConfig(alpha=0.2), schedule, self.seed)
            rates[period] = result.iterations_per_second
        speedup = rates[RECYCLE_PERIOD] / rates[1] if rates[1] > 0.0 else math.inf
        return (
            "recycling speedup",
            speedup >= 2.0,
            f"{rates[RECYCLE_PERIOD]:.2f} it/s with N_r={RECYCLE_PERIOD} vs "
            f"{rates[1]:.2f} it/s with N_r=1 ({speedup:.1f}x)",
        )
