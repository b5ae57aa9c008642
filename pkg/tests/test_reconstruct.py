import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import pair_scene, scan_grid, rel_err
from qsi.estimate import fit_gaussian2d
from qsi.model import Detector, Emitter, ModelError, ScanGrid, Scene, elementary_symmetric, emitter_rates
from qsi.reconstruct import (
    FLAG_BELOW_NOISE,
    FLAG_CLAMPED,
    FLAG_OK,
    calibrated_moments,
    estimate_background,
    reconstruct,
    solve_pair,
    solve_symmetric,
    subtract_background,
)
from qsi.simulate import ScanData, dwell_for_budget, expected_scan, simulate_scan


# -- solve_pair ------------------------------------------------------------------

def test_solve_pair_examples():
    assert solve_pair(10.0, 21.0) == (7.0, 3.0, "ok")
    assert solve_pair(10.0, 25.0) == (5.0, 5.0, "ok")
    assert solve_pair(10.0, 26.0) == (5.0, 5.0, "clamped_discriminant")
    assert solve_pair(0.0, 0.0) == (0.0, 0.0, "ok")
    with pytest.raises(ModelError):
        solve_pair(-1.0, 0.0)
    with pytest.raises(ModelError):
        solve_pair(1.0, -1.0)


phys = st.one_of(st.just(0.0), st.floats(1e-3, 1e6))


@given(phys, phys)
def test_solve_pair_roundtrip(a, b):
    ia, ib, flag = solve_pair(a + b, a * b)
    # a double root may round to a slightly negative discriminant
    assert flag == "ok" or abs(a - b) <= 1e-6 * (a + b)
    assert ia >= ib >= 0
    assert ia + ib == pytest.approx(a + b, rel=1e-12, abs=1e-300)
    assert ia * ib == pytest.approx(a * b, rel=1e-9, abs=1e-300)
    assert (ia, ib) == pytest.approx((max(a, b), min(a, b)), rel=1e-6, abs=1e-6 * (a + b) + 1e-300)


@given(st.floats(0, 1e6), st.floats(0, 1e12))
def test_solve_pair_preserves_sum(s1, p2):
    ia, ib, _ = solve_pair(s1, p2)
    assert ia + ib == pytest.approx(s1, rel=1e-12, abs=1e-300)
    assert ia >= ib >= 0


# -- solve_symmetric ----------------------------------------------------------------

def test_solve_symmetric_examples():
    r, flag = solve_symmetric([6.0, 11.0, 6.0])
    assert np.allclose(r, [3, 2, 1], rtol=1e-12) and flag == "ok"
    r, flag = solve_symmetric([5.0])
    assert r.tolist() == [5.0] and flag == "ok"
    e = [sum([4, 3, 2, 1]), 35.0, 50.0, 24.0]
    r, _ = solve_symmetric(e)
    assert np.all(rel_err(r, [4, 3, 2, 1]) < 1e-9)
    with pytest.raises(ModelError):
        solve_symmetric([1.0, np.nan])


def test_solve_symmetric_complex_pair_is_flagged():
    # t^2 - 2t + 5 has roots 1 +- 2i
    r, flag = solve_symmetric([2.0, 5.0])
    assert flag == "clamped_discriminant"
    assert r.tolist() == [1.0, 1.0]


def test_solve_symmetric_negative_root_clamped():
    # roots 5, 2, -1
    r, flag = solve_symmetric([6.0, 3.0, -10.0])
    assert flag == "clamped_discriminant"
    assert r.min() >= 0 and r.sum() == pytest.approx(6.0, rel=1e-12)


@given(st.lists(st.floats(0.01, 1e5), min_size=1, max_size=4))
def test_solve_symmetric_roundtrip(rates):
    rates = np.sort(np.array(rates))[::-1]
    # well-separated roots; clustered ones are ill-conditioned by nature
    if rates.size > 1 and np.min(-np.diff(rates) / rates[0]) < 1e-2:
        return
    e = elementary_symmetric(rates)[1:]
    r, flag = solve_symmetric(e)
    assert flag == "ok"
    assert np.all(rel_err(r, rates) < 1e-9 * rates[0] / rates)


@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 1e4)), min_size=2, max_size=5),
       st.lists(st.floats(-1, 1), min_size=5, max_size=5))
def test_solve_symmetric_noisy_preserves_e1(rates, noise):
    e = elementary_symmetric(rates)[1:]
    e = e * (1 + 0.3 * np.array(noise[:e.size]))
    e[0] = sum(rates)
    r, _ = solve_symmetric(e)
    assert r.min() >= 0
    assert r.sum() == pytest.approx(e[0], rel=1e-9, abs=1e-9)


# -- background ----------------------------------------------------------------------

def _uniform_scan(rate_counts, dwell=2.0, shape=(4, 5)):
    g = ScanGrid(0.0, 0.0, 1.0, shape[1], shape[0], dwell)
    a = np.full(shape, rate_counts, dtype=np.int64)
    return ScanData(g, a, a.copy(), {2: np.zeros(shape, np.int64)}, Detector())


def test_subtract_background_examples():
    sd = _uniform_scan(100)
    assert np.array_equal(subtract_background(sd, 0.0), np.full((4, 5), 100.0))
    assert not subtract_background(sd, 100.0).any()
    with pytest.raises(ModelError):
        subtract_background(sd, -1.0)


def test_background_estimate_within_3_se():
    bg = 400.0
    s = Scene((Emitter(0, 0, 2e4), Emitter(100, 0, 1e4)), detector=Detector(bg_cps=bg))
    g = ScanGrid(-1500.0, -1500.0, 100.0, 31, 31, 0.5)
    est = np.array([estimate_background(simulate_scan(s, g, [2], k)) for k in range(30)])
    # standard error of one pixel's background rate; picking the dimmest
    # pixels biases the mean low by under two of these
    se = np.sqrt(bg * g.dwell_s) / g.dwell_s
    assert np.all(np.abs(est - bg) < 3 * se)


# -- reconstruct --------------------------------------------------------------------

def _truth(s, g):
    X, Y = g.coords()
    return np.moveaxis(emitter_rates(s, X, Y), -1, 0)


def _match(images, truth):
    """Truth reordered to the label order found by reconstruct."""
    out = []
    for im in images:
        k = int(np.argmin([np.abs(im - t).max() for t in truth]))
        out.append(truth[k])
    return np.array(out)


def test_noiseless_pair_recovers_fields():
    s, g = pair_scene(), scan_grid(1.0)
    im = reconstruct(expected_scan(s, g, [2]), s.detector, 2)
    t = _match(im.images, _truth(s, g))
    ok = im.flags == FLAG_OK
    assert ok.all()
    assert np.max(np.abs(im.images - t) / t.sum(0)) < 1e-9


def test_single_emitter_second_image_vanishes():
    s = Scene((Emitter(0, 0, 2e4),))
    g = scan_grid(50.0, n=15, pitch=40.0)
    sd = simulate_scan(Scene(s.emitters + (Emitter(0, 0, 0.0),)), g, [2], 3)
    im = reconstruct(sd, s.detector, 2)
    assert np.allclose(im.images[1], 0.0)
    # with background present, the accidental floor flags nearly the whole grid
    det = Detector(bg_cps=500.0)
    sd = simulate_scan(Scene(s.emitters + (Emitter(0, 0, 0.0),), detector=det), g, [2], 3)
    im = reconstruct(sd, det, 2)
    assert np.mean(im.flags == FLAG_BELOW_NOISE) > 0.8
    assert np.mean(im.flags == FLAG_OK) < 0.05
    assert np.allclose(im.images.sum(0), im.singles, rtol=1e-12)


def _noisy_pair(seed, d=150.0, budget=3e3, bg=0.0):
    s = pair_scene(d, a=15000.0, b=7000.0, bg_cps=bg)
    g = scan_grid(1.0, n=24, pitch=30.0)
    g = ScanGrid(g.x0_nm, g.y0_nm, g.pitch_nm, g.nx, g.ny, dwell_for_budget(s, g, budget))
    return s, simulate_scan(s, g, [2], seed)


@given(st.integers(0, 10 ** 6), st.sampled_from([0.0, 300.0]))
def test_sum_conservation(seed, bg):
    s, sd = _noisy_pair(seed, bg=bg)
    im = reconstruct(sd, s.detector, 2)
    assert np.all(im.images >= 0)
    assert np.allclose(im.images.sum(0), im.singles, rtol=1e-9, atol=0)
    assert np.allclose(im.singles, subtract_background(sd, bg), rtol=0, atol=0)


@given(st.integers(0, 10 ** 6))
def test_product_consistency(seed):
    s, sd = _noisy_pair(seed)
    im = reconstruct(sd, s.detector, 2)
    E, _, _ = calibrated_moments(sd, s.detector, 2)
    ok = im.flags == FLAG_OK
    prod = im.images[0] * im.images[1]
    assert np.allclose(prod[ok], E[..., 1][ok], rtol=1e-9, atol=0)
    assert np.all(im.images[0][im.flags == FLAG_CLAMPED] == im.images[1][im.flags == FLAG_CLAMPED])


def test_permutation_sanity():
    s, sd = _noisy_pair(5)
    swapped = Scene(s.emitters[::-1], detector=s.detector)
    sd2 = ScanData(sd.grid, sd.singles_d1, sd.singles_d2, sd.coincidences, sd.detector)
    a = reconstruct(sd, s.detector, 2)
    b = reconstruct(sd2, swapped.detector, 2)
    assert np.array_equal(np.sort(a.images, axis=0), np.sort(b.images, axis=0))
    # and noiselessly the labelled images swap with the scene
    g = scan_grid(1.0, n=20)
    ia = reconstruct(expected_scan(s, g, [2]), s.detector, 2).images
    ib = reconstruct(expected_scan(swapped, g, [2]), s.detector, 2).images
    assert np.allclose(np.sort(ia, 0), np.sort(ib, 0), rtol=1e-12)


def _local_maxima(img):
    p = np.pad(img, 1, constant_values=-np.inf)
    c = p[1:-1, 1:-1]
    is_max = np.ones_like(c, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                is_max &= c > p[1 + dy:p.shape[0] - 1 + dy, 1 + dx:p.shape[1] - 1 + dx]
    return int(is_max.sum())


@pytest.mark.parametrize("d, ratio", [(366.1, 2.0), (100.0, 1.5), (8.5, 3.0), (250.0, 1.0)])
def test_label_continuity_noiseless(d, ratio):
    s = pair_scene(d, a=1e4 * ratio, b=1e4)
    # offset so no peak ties between two pixels
    g = ScanGrid(-574.0, -578.0, 30.0, 40, 40, 1.0)
    im = reconstruct(expected_scan(s, g, [2]), s.detector, 2)
    for k in range(2):
        assert _local_maxima(im.images[k]) == 1


@pytest.mark.parametrize("n", [3, 4])
def test_noiseless_higher_orders(n):
    rng = np.random.default_rng(n)
    ems = tuple(Emitter(*rng.uniform(-150, 150, 2), a) for a in rng.uniform(5e3, 2e4, n))
    s = Scene(ems)
    g = scan_grid(1e12 if n == 3 else 1e20, n=16, pitch=40.0)
    im = reconstruct(expected_scan(s, g, list(range(2, n + 1))), s.detector, n)
    t = _match(im.images, _truth(s, g))
    ok = im.flags == FLAG_OK
    assert ok.mean() > 0.9
    assert np.max((np.abs(im.images - t) / t.sum(0))[:, ok]) < 1e-9


def test_close_8p5_pair_gives_two_single_peak_images():
    s = pair_scene(8.5, a=15000.0, b=5000.0)
    g = scan_grid(1.0)
    g = ScanGrid(g.x0_nm, g.y0_nm, g.pitch_nm, g.nx, g.ny, dwell_for_budget(s, g, 1e5))
    im = reconstruct(simulate_scan(s, g, [2], 1), s.detector, 2)
    for k in range(2):
        f = fit_gaussian2d(im.images[k], g, im.variances[k], im.flags != FLAG_BELOW_NOISE)
        assert abs(f.x0_nm) < 30 and abs(f.y0_nm) < 30
        assert 100 < f.sigma_x_nm < 200 and 100 < f.sigma_y_nm < 200


def test_reconstruct_errors():
    s, sd = _noisy_pair(1)
    with pytest.raises(ModelError):
        reconstruct(sd, s.detector, 3)
    with pytest.raises(ModelError):
        reconstruct(sd, s.detector, 0)
    with pytest.raises(ModelError):
        reconstruct(sd, s.detector, 3, eta={3: -1.0})


def test_single_label_is_background_subtracted_singles():
    s, sd = _noisy_pair(2, bg=200.0)
    im = reconstruct(sd, s.detector, 1)
    assert np.array_equal(im.images[0], subtract_background(sd, 200.0))
