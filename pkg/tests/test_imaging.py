import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimarray.geometry import ArrayLayout, PositionGrid, SamplingFunction, rectangular_grid, sampling_function
from aimarray.imaging import (
    ComplexImage,
    RasterError,
    SceneImage,
    SceneSpec,
    VisibilityGrid,
    circular_convolve,
    draw_shapes,
    generate_random_scene,
    image_axis,
    psf,
    read_pgm,
    reconstruct,
    reconstruct_direct,
    render_shapes,
    sample_visibility,
    scene_visibility,
    simulate_reconstruction,
    write_pgm,
    write_raster_csv,
    write_sidecar,
)


def delta_scene(R, cell, at=((0, 0, 1.0),)):
    ax = image_axis(R, cell)
    px = np.zeros((R, R))
    for m, n, val in at:
        px[R // 2 + n, R // 2 + m] = val
    return SceneImage(px, ax, ax)


def cells(pq, cell=0.5):
    return SamplingFunction({tuple(k): 1 for k in pq}, cell_size=cell)


def test_image_axis():
    ax = image_axis(256, 0.5)
    assert ax[128] == 0 and ax[0] == -1 and ax[-1] == pytest.approx(1 - 1 / 128)


def test_scene_image_validation():
    ax = image_axis(8, 0.5)
    with pytest.raises(RasterError):
        SceneImage(-np.ones((8, 8)), ax, ax)
    with pytest.raises(RasterError):
        SceneImage(np.ones((8, 7)), ax, ax)


def test_dc_only_psf_is_flat():
    p = psf(SamplingFunction({(0, 0): 5}), 32)
    assert np.allclose(np.abs(p.pixels), 1.0)


def test_psf_raster_too_small():
    with pytest.raises(RasterError, match="raster_size >= 22"):
        psf(cells([(10, 0), (-10, 0), (0, 0)]), 16)


def dirichlet_first_sidelobe_db(M, R):
    """Closed form |sin(pi M x / R) / (M sin(pi x / R))|, maximised past the first null."""
    x = np.linspace(R / M, 2 * R / M, 200001)
    d = np.abs(np.sin(np.pi * M * x / R) / (M * np.sin(np.pi * x / R)))
    return 20 * np.log10(d.max())


def test_dense_block_dirichlet_on_axis():
    from aimarray.metrics import sll_profile

    K, R = 15, 1024
    s = cells([(p, q) for p in range(-K, K + 1) for q in range(-K, K + 1)])
    prof = sll_profile(psf(s, R))
    oracle = dirichlet_first_sidelobe_db(2 * K + 1, R)
    for ang in (0, 90, 180, 270):
        assert prof.levels[ang] == pytest.approx(oracle, abs=0.02)
        assert abs(prof.levels[ang] + 13.26) <= 0.1


def test_psf_peak_centred_and_parseval():
    rng = np.random.default_rng(0)
    pq = {(0, 0)}
    for p, q in rng.integers(-10, 11, (30, 2)):
        pq |= {(p, q), (-p, -q)}
    s = SamplingFunction({k: int(rng.integers(1, 4)) for k in pq})
    s = SamplingFunction({k: s.cells[k] for k in pq} | {(-p, -q): s.cells[(p, q)] for p, q in pq})
    R = 64
    for w in ("binary", "multiplicity"):
        p = psf(s, R, weighting=w, normalize=False)
        mass = np.array([1 if w == "binary" else m for m in s.cells.values()], float)
        assert np.sum(np.abs(p.pixels) ** 2) == pytest.approx(np.sum(mass**2) / R**2)
        assert np.unravel_index(np.argmax(np.abs(p.pixels)), (R, R)) == (R // 2, R // 2)


def test_impulse_visibility_constant():
    v = scene_visibility(delta_scene(32, 0.5))
    assert np.allclose(v.cells, 1.0)


def test_shifted_impulse_phase_slope():
    R, cell, m0 = 64, 0.5, 5
    sc = delta_scene(R, cell, [(m0, 0, 1.0)])
    a0 = sc.alpha_axis[R // 2 + m0]
    v = scene_visibility(sc)
    u = (np.arange(R) - R // 2) * cell
    row = v.cells[R // 2]
    assert np.allclose(np.abs(row), 1.0)
    # V = sum I exp(+j 2 pi u a): phase slope +2 pi a0 per unit u
    assert np.allclose(row, np.exp(2j * np.pi * u * a0))


def test_symmetric_pair_visibility_is_real_cosine():
    R, cell = 64, 0.5
    v = scene_visibility(delta_scene(R, cell, [(6, 0, 1.0), (-6, 0, 1.0)]))
    u = (np.arange(R) - R // 2) * cell
    a0 = 6 / (R * cell)
    assert np.abs(v.cells.imag).max() < 1e-9
    assert np.allclose(v.cells[R // 2], 2 * np.cos(2 * np.pi * u * a0))


def test_sample_visibility_masks():
    R = 32
    v = scene_visibility(generate_random_scene(1, SceneSpec(raster=R)))
    full = SamplingFunction({(p, q): 1 for p in range(-R // 2 + 1, R // 2) for q in range(-R // 2 + 1, R // 2)})
    # a full mask except the unpaired -R/2 row/column keeps everything it covers
    kept = sample_visibility(v, SamplingFunction({(0, 0): 1}))
    assert np.count_nonzero(kept.cells) == 1 and kept.cells[R // 2, R // 2] == v.cells[R // 2, R // 2]
    allv = VisibilityGrid(v.cells, 0.5)
    assert np.array_equal(sample_visibility(allv, full).cells[1:, 1:], v.cells[1:, 1:])


def test_three_element_line_keeps_five_cells(lam):
    g = PositionGrid((1, 2, 3), np.array([[0, 0], [lam / 2, 0], [lam, 0]]), min_spacing=0)
    s = sampling_function(ArrayLayout("g", (1, 2, 3)), g, lam)
    v = scene_visibility(delta_scene(32, 0.5, [(3, 0, 1.0), (-3, 0, 1.0)]))
    vs = sample_visibility(v, s)
    assert np.count_nonzero(vs.cells) == 5
    assert vs.mask[16, 16] == 3 and vs.mask[16, 17] == 2 and vs.mask[16, 18] == 1


def test_sample_visibility_cell_mismatch():
    v = scene_visibility(delta_scene(16, 0.5))
    with pytest.raises(RasterError, match="cell size"):
        sample_visibility(v, SamplingFunction({(0, 0): 1}, cell_size=1.0))


def test_round_trip_recovers_delta():
    R = 64
    img = reconstruct(scene_visibility(delta_scene(R, 0.5, [(3, -2, 1.0)])))
    flat = np.sort(img.pixels.ravel())
    assert img.pixels[R // 2 - 2, R // 2 + 3] == pytest.approx(1.0)
    assert 20 * np.log10(flat[-1] / max(flat[-2], 1e-300)) >= 60


def test_delta_reconstruction_is_psf():
    rng = np.random.default_rng(4)
    pq = {(0, 0)}
    for p, q in rng.integers(-12, 13, (20, 2)):
        pq |= {(p, q), (-p, -q)}
    s = cells(pq)
    img = reconstruct(sample_visibility(scene_visibility(delta_scene(64, 0.5)), s), normalize=True)
    assert np.allclose(img.pixels, np.abs(psf(s, 64).pixels), atol=1e-12)


def test_aliased_copy_inside_fov(lam):
    # 3x3 lattice at 2 lambda pitch: FOV lambda/(2d) = 0.25, sampled cells every 4th
    g = rectangular_grid(3, 3, 2 * lam, 2 * lam, min_spacing=0)
    s = sampling_function(ArrayLayout("g", tuple(range(1, 10))), g, lam)
    R = 64
    at = int(0.5 * R * 0.5)  # alpha = 0.5, outside the FOV
    img = reconstruct(sample_visibility(scene_visibility(delta_scene(R, 0.5, [(at, 0, 1.0)])), s))
    assert img.pixels[R // 2, R // 2] == pytest.approx(img.pixels.max())
    assert img.pixels[R // 2, R // 2 + at] == pytest.approx(img.pixels.max())


def test_simulate_reconstruction_delta_and_linearity():
    R = 64
    rng = np.random.default_rng(2)
    pq = {(0, 0)}
    for p, q in rng.integers(-12, 13, (25, 2)):
        pq |= {(p, q), (-p, -q)}
    p = psf(cells(pq), R)
    out = simulate_reconstruction(delta_scene(R, 0.5), p)
    assert np.allclose(out.pixels, np.abs(p.pixels), atol=1e-12)
    a = delta_scene(R, 0.5, [(5, 3, 1.0)])
    b = delta_scene(R, 0.5, [(-7, 1, 0.5)])
    both = delta_scene(R, 0.5, [(5, 3, 1.0), (-7, 1, 0.5)])
    ca = circular_convolve(a.pixels, p.pixels)
    cb = circular_convolve(b.pixels, p.pixels)
    cab = circular_convolve(both.pixels, p.pixels)
    assert np.abs(cab - ca - cb).max() < 1e-9


def test_simulate_reconstruction_checks_geometry():
    p = psf(SamplingFunction({(0, 0): 1}), 32)
    with pytest.raises(RasterError):
        simulate_reconstruction(delta_scene(16, 0.5), p)
    with pytest.raises(RasterError, match="cell"):
        simulate_reconstruction(delta_scene(32, 1.0), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_path_equivalence_property(seed, n_el):
    rng = np.random.default_rng(seed)
    R = 32
    scene = generate_random_scene(seed, SceneSpec(raster=R, size=(0.05, 0.3)))
    pts = rng.integers(-7, 8, (n_el, 2))
    pq = {(int(a - c), int(b - d)) for a, b in pts for c, d in pts}
    s = cells(pq)
    direct = reconstruct(sample_visibility(scene_visibility(scene), s), normalize=True).pixels
    conv = simulate_reconstruction(scene, psf(s, R)).pixels
    if conv.max() > 0:
        assert np.sqrt(np.mean((direct - conv) ** 2)) <= 1e-6 * np.sqrt(np.mean(conv**2)) + 1e-15


def test_direct_sum_matches_fft():
    rng = np.random.default_rng(5)
    R = 8
    v = VisibilityGrid(rng.normal(size=(R, R)) + 1j * rng.normal(size=(R, R)), 0.5)
    assert np.allclose(reconstruct(v).pixels, reconstruct_direct(v), atol=1e-12)


def test_hermitian_error_of_real_scene():
    v = scene_visibility(generate_random_scene(3, SceneSpec(raster=32)))
    assert v.hermitian_error() < 1e-9
    bad = v.cells.copy()
    bad[10, 12] += 1j
    assert VisibilityGrid(bad, 0.5).hermitian_error() > 0.5


def test_scene_determinism_and_empty():
    spec = SceneSpec(raster=64)
    assert np.array_equal(generate_random_scene(9, spec).pixels, generate_random_scene(9, spec).pixels)
    assert not generate_random_scene(9, SceneSpec(raster=64, shape_count=(0, 0))).pixels.any()


def test_scene_intensity_histogram_uniform():
    spec = SceneSpec()
    lo, hi = spec.intensity
    vals = []
    for seed in range(1000):
        vals += [s.intensity for s in draw_shapes(np.random.default_rng(seed), spec)]
    vals = np.array(vals)
    assert vals.min() >= lo and vals.max() <= hi
    bins = 10
    counts, _ = np.histogram(vals, bins=bins, range=(lo, hi))
    n, p = len(vals), 1 / bins
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_render_painter_order():
    from aimarray.imaging import Shape

    a = Shape("rect", (0.0, 0.0), (0.2, 0.2), 0.3)
    b = Shape("circle", (0.0, 0.0), (0.1, 0.1), 0.9)
    img = render_shapes([a, b], 64, 0.5)
    assert img.pixels[32, 32] == 0.9
    assert render_shapes([b, a], 64, 0.5).pixels[32, 32] == 0.3


def test_pgm_csv_sidecar(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((16, 16))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert np.abs(back - img / img.max()).max() <= 0.5 / 65535 + 1e-12
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n65535\n") and len(raw) == len(b"P5\n16 16\n65535\n") + 512
    write_raster_csv(tmp_path / "a.csv", img)
    assert np.allclose(np.loadtxt(tmp_path / "a.csv", delimiter=","), img, rtol=1e-8)
    write_sidecar(tmp_path / "a.json", 0.5, 16, 7.889)
    assert json.loads((tmp_path / "a.json").read_text()) == {"cell_size": 0.5, "raster": 16, "wavelength_mm": 7.889}
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]
