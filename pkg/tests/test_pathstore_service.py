import math

import numpy as np
import pytest

from pathrec.models.errors import ConfigError, GridFormatError
from pathrec.services.gradient_service import GradientService
from pathrec.services.pathstore_service import CHUNK_PATHS, PathStoreService, path_chunks
from pathrec.services.scene_service import SceneService
from pathrec.services.transport_service import TransportService


@pytest.fixture
def traced(two_species_scene):
    params = SceneService.scene_params(two_species_scene)
    store = TransportService().trace_store(two_species_scene, params, 5000, seed=21, max_bounces=100)
    return two_species_scene, params, store


def perturb_voxel(scene, params, voxel, factor):
    m = GradientService.unknowns(scene, params)
    m[voxel] *= factor
    return GradientService.with_unknowns(scene, params, m)


def test_path_chunks_cover_range():
    chunks = path_chunks(2 * CHUNK_PATHS + 5)
    assert chunks[0] == (0, CHUNK_PATHS)
    assert chunks[-1] == (2 * CHUNK_PATHS, 2 * CHUNK_PATHS + 5)


def test_identity_at_reference_is_bit_exact(two_species_scene):
    transport = TransportService()
    params = SceneService.scene_params(two_species_scene)
    output, store = transport.render(two_species_scene, params, 5000, seed=2)
    again = PathStoreService().recycled_render(store, two_species_scene, params, params)
    for a, b in zip(output.images, again.images):
        assert np.array_equal(a, b)


def test_correction_factor_is_one_at_reference(traced):
    scene, params, store = traced
    for p in range(5):
        assert PathStoreService.correction_factor(store.record(p), scene, params, params) == 1.0


def test_correction_factor_matches_density_ratio(traced):
    scene, params, store = traced
    changed = perturb_voxel(scene, params, 5, 1.3)
    for p in range(20):
        record = store.record(p)
        expected = TransportService.log_path_pdf(scene, changed, record) - TransportService.log_path_pdf(
            scene, params, record
        )
        logr = PathStoreService.log_correction_factor(record, scene, changed, params)
        assert logr == pytest.approx(expected, abs=1e-9)
        assert PathStoreService.correction_factor(record, scene, changed, params) == pytest.approx(math.exp(logr))


def test_sorting_keeps_estimates_bit_identical(traced):
    scene, params, store = traced
    service = PathStoreService(workers=2)
    changed = perturb_voxel(scene, params, 7, 1.1)
    plain = service.recycled_render(store, scene, changed, params)
    for secondary in (False, True):
        ordered = PathStoreService.sort_by_size(store, secondary_key=secondary)
        assert np.all(np.diff(ordered.sizes[ordered.order]) >= 0)
        again = service.recycled_render(ordered, scene, changed, params)
        for a, b in zip(plain.images, again.images):
            assert np.array_equal(a, b)


def test_mismatched_reference_is_rejected(traced):
    scene, params, store = traced
    other = params.scaled(2.0)
    with pytest.raises(ConfigError):
        PathStoreService().recycled_render(store, scene, params, other)


def test_stored_lengths_match_recomputed_walk(traced):
    scene, _, store = traced
    n_voxels = scene.grid.n_voxels
    for p in range(50):
        record = store.record(p)
        recomputed = PathStoreService.segment_lengths(record, scene)
        assert len(recomputed) == record.size
        for stored, again in zip(record.segments, recomputed):
            a = np.zeros(n_voxels)
            b = np.zeros(n_voxels)
            np.add.at(a, stored.voxels, stored.lengths)
            np.add.at(b, again.voxels, again.lengths)
            np.testing.assert_allclose(a, b, rtol=0.0, atol=1e-9)


def test_segment_lengths_sum_to_vertex_spacing(traced):
    scene, _, store = traced
    record = store.record(3)
    for b, segment in enumerate(PathStoreService.segment_lengths(record, scene)):
        full = float(np.linalg.norm(record.vertices[b + 1] - record.vertices[b]))
        assert segment.total_length == pytest.approx(full, rel=1e-9)


def test_store_dump_round_trip(tmp_path, traced):
    scene, params, store = traced
    PathStoreService.dump(store, tmp_path / "paths.pstr")
    loaded = PathStoreService.load(tmp_path / "paths.pstr")
    assert loaded.n_paths == store.n_paths
    a = PathStoreService().recycled_render(store, scene, params, params)
    b = PathStoreService().recycled_render(loaded, scene, params, params)
    for x, y in zip(a.images, b.images):
        assert np.array_equal(x, y)


def test_store_load_rejects_garbage(tmp_path):
    (tmp_path / "bad.pstr").write_bytes(b"nope" + bytes(80))
    with pytest.raises(GridFormatError):
        PathStoreService.load(tmp_path / "bad.pstr")


def test_recycled_estimate_is_unbiased_after_perturbation(two_species_scene):
    params = SceneService.scene_params(two_species_scene)
    changed = perturb_voxel(two_species_scene, params, 21, 1.5)
    transport = TransportService()
    store_service = PathStoreService()
    recycled, fresh = [], []
    for rep in range(8):
        store = transport.trace_store(two_species_scene, params, 4000, seed=100 + rep)
        recycled.append(store_service.recycled_render(store, two_species_scene, changed, params).images[0].sum())
        fresh.append(transport.render(two_species_scene, changed, 4000, seed=500 + rep)[0].images[0].sum())
    recycled, fresh = np.array(recycled), np.array(fresh)
    error = math.sqrt(recycled.var(ddof=1) / recycled.size + fresh.var(ddof=1) / fresh.size)
    assert abs(recycled.mean() - fresh.mean()) <= 4.0 * error


@pytest.mark.parametrize("c", [0.5, 1.01, 2.0])
def test_uniform_rescale_has_closed_form_correction(traced, c):
    scene, params, store = traced
    scaled = params.scaled(c)
    checked = 0
    for p in range(200):
        record = store.record(p)
        if record.truncated:
            continue
        optical_length = sum(float(np.dot(params.beta_total[s.voxels], s.lengths)) for s in record.segments)
        expected = record.n_scatter * math.log(c) - (c - 1.0) * optical_length
        logr = PathStoreService.log_correction_factor(record, scene, scaled, params)
        assert logr == pytest.approx(expected, rel=1e-9, abs=1e-12)
        checked += 1
    assert checked > 100


def test_correction_factor_is_log_additive_across_a_split(traced):
    scene, params, store = traced
    changed = perturb_voxel(scene, params, 9, 1.4).scaled(0.9)
    checked = 0
    for p in range(store.n_paths):
        record = store.record(p)
        if record.size < 3:
            continue
        whole = PathStoreService.log_correction_factor(record, scene, changed, params)
        for k in range(1, record.size):
            head, tail = record.split(k)
            assert head.size == k and tail.size == record.size - k
            parts = PathStoreService.log_correction_factor(head, scene, changed, params)
            parts += PathStoreService.log_correction_factor(tail, scene, changed, params)
            assert parts == pytest.approx(whole, rel=1e-12, abs=1e-12)
        checked += 1
        if checked == 20:
            break
    assert checked == 20


def test_split_rejects_end_vertices(traced):
    _, _, store = traced
    record = next(store.record(p) for p in range(store.n_paths) if store.record(p).size >= 2)
    with pytest.raises(ValueError):
        record.split(0)
    with pytest.raises(ValueError):
        record.split(record.size)


def test_segment_lengths_are_stored_in_double_precision(tmp_path, traced):
    _, _, store = traced
    assert store.segment_lengths.dtype == np.float64
    PathStoreService.dump(store, tmp_path / "paths.pstr")
    loaded = PathStoreService.load(tmp_path / "paths.pstr")
    assert loaded.segment_lengths.dtype == np.float64
    assert np.array_equal(loaded.segment_lengths, store.segment_lengths)
