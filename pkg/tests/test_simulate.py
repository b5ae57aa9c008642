import numpy as np
import pytest

from conftest import pair_scene
from qsi.model import (
    Detector,
    Emitter,
    ModelError,
    ScanGrid,
    Scene,
    expected_coincidences_m,
    expected_singles,
    g2_tau,
    nominal_eta,
)
from qsi.simulate import (
    dwell_for_budget,
    expected_counts,
    simulate_g2,
    simulate_polarization_sweep,
    simulate_scan,
)
from qsi.estimate import fit_g2

GRID = ScanGrid(-300.0, -200.0, 40.0, 16, 11, 5.0)


def _bytes(sd):
    return b"".join(np.ascontiguousarray(a).tobytes() for a in
                    [sd.singles_d1, sd.singles_d2, *(sd.coincidences[m] for m in sd.orders)])


def test_determinism_byte_identical():
    s = pair_scene(100.0, a=2e5, b=1e5)
    assert _bytes(simulate_scan(s, GRID, [2], 7)) == _bytes(simulate_scan(s, GRID, [2], 7))
    assert _bytes(simulate_scan(s, GRID, [2], 7)) != _bytes(simulate_scan(s, GRID, [2], 8))


@pytest.mark.parametrize("workers", [2, 3, 4, 7])
def test_schedule_independence(workers):
    s = Scene((Emitter(0, 0, 3e5), Emitter(60, 20, 2e5), Emitter(-40, 50, 1e5)))
    serial = simulate_scan(s, GRID, [2, 3], 11, workers=1)
    parallel = simulate_scan(s, GRID, [2, 3], 11, workers=workers)
    assert _bytes(serial) == _bytes(parallel)


def test_pixel_streams_independent_of_grid_extent():
    # a pixel's draws depend on (seed, index, channel) only
    s = pair_scene(100.0, a=2e5, b=1e5)
    g1 = ScanGrid(0.0, 0.0, 10.0, 4, 1, 1.0)
    g2 = ScanGrid(0.0, 0.0, 10.0, 8, 1, 1.0)
    a, b = simulate_scan(s, g1, [2], 3), simulate_scan(s, g2, [2], 3)
    assert np.array_equal(a.singles_d1[0], b.singles_d1[0, :4])


def test_zero_rate_scene_gives_zero_grids():
    s = Scene((Emitter(0, 0, 0.0), Emitter(5, 0, 0.0)))
    sd = simulate_scan(s, GRID, [2], 1)
    assert not sd.singles_d1.any() and not sd.singles_d2.any() and not sd.coincidences[2].any()


def test_single_emitter_has_no_true_pairs():
    s = Scene((Emitter(0, 0, 1e6), Emitter(0, 0, 0.0)), detector=Detector(tw_ns=1e-12))
    sd = simulate_scan(s, GRID, [2], 1)
    assert sd.singles_d1.sum() > 0
    assert not sd.coincidences[2].any()


def test_orders_validated():
    with pytest.raises(ModelError):
        simulate_scan(pair_scene(), GRID, [3], 1)
    with pytest.raises(ModelError):
        simulate_scan(pair_scene(), GRID, [1], 1)


def test_counts_are_nonnegative_integers_with_grid_shape():
    sd = simulate_scan(pair_scene(100.0), GRID, [2], 5)
    for arr in (sd.singles_d1, sd.singles_d2, sd.coincidences[2]):
        assert arr.shape == GRID.shape
        assert arr.dtype.kind == "i" and arr.min() >= 0
        assert not arr.flags.writeable


def test_large_dwell_sample_near_expectation():
    s = pair_scene(120.0, a=2e4, b=1e4)
    g = ScanGrid(-200.0, -100.0, 50.0, 9, 5, 100.0)
    sd = simulate_scan(s, g, [2], 4)
    X, Y = g.coords()
    lam = expected_singles(s, X, Y) * g.dwell_s
    tot = sd.singles_d1 + sd.singles_d2
    assert np.all(np.abs(tot - lam) < 5 * np.sqrt(lam))


def test_statistical_consistency_over_seeds():
    s = pair_scene(80.0, a=3000.0, b=1000.0, bg_cps=50.0)
    g = ScanGrid(10.0, 0.0, 1.0, 1, 1, 0.01)
    d1 = np.array([simulate_scan(s, g, [2], seed).singles_d1[0, 0] for seed in range(1000)])
    lam = s.detector.t * expected_singles(s, 10.0, 0.0) * g.dwell_s
    se = np.sqrt(lam / d1.size)
    assert abs(d1.mean() - lam) < 5 * se


def test_rate_scaling_order_m():
    base = Scene((Emitter(0, 0, 2e4), Emitter(30, 0, 1e4), Emitter(0, 40, 5e3)))
    c = 3.0
    scaled = Scene(tuple(Emitter(e.x_nm, e.y_nm, c * e.alpha_cps) for e in base.emitters))
    g = ScanGrid(0.0, 0.0, 10.0, 3, 2, 1.0)
    mu0 = expected_counts(base, g, [2, 3])
    mu1 = expected_counts(scaled, g, [2, 3])
    assert np.allclose(mu1[2], c ** 2 * mu0[2], rtol=1e-12)
    assert np.allclose(mu1[3], c ** 3 * mu0[3], rtol=1e-12)
    # sample means follow within statistical error
    g = ScanGrid(0.0, 0.0, 10.0, 1, 1, 2e4)
    n2 = np.array([simulate_scan(base, g, [2], k).coincidences[2][0, 0] for k in range(200)])
    m2 = np.array([simulate_scan(scaled, g, [2], k).coincidences[2][0, 0] for k in range(200)])
    ratio = m2.mean() / n2.mean()
    err = ratio * np.sqrt(1 / n2.sum() + 1 / m2.sum())
    assert abs(ratio - c ** 2) < 5 * err


def test_expected_counts_include_accidentals():
    d = Detector(bg_cps=1000.0)
    s = Scene((Emitter(0, 0, 2e4), Emitter(0, 0, 1e4)), detector=d)
    g = ScanGrid(0.0, 0.0, 1.0, 1, 1, 1.0)
    mu = expected_counts(s, g, [2])
    true = expected_coincidences_m(s, 2, nominal_eta(d, 2), 0, 0)
    sig = 3e4
    acc = 2 * d.tw_s * d.r * d.t * ((sig + 1000.0) ** 2 - sig ** 2)
    assert mu[2][0, 0] == pytest.approx(true + acc, rel=1e-12)
    assert mu["d1"][0, 0] == pytest.approx(d.t * 31000.0, rel=1e-14)


def test_dwell_for_budget():
    s, g = pair_scene(), ScanGrid(-585.0, -585.0, 30.0, 40, 40, 1.0)
    dwell = dwell_for_budget(s, g, 1e4)
    g2 = ScanGrid(-585.0, -585.0, 30.0, 40, 40, dwell)
    assert expected_counts(s, g2, [2])[2].sum() == pytest.approx(1e4, rel=1e-12)
    with pytest.raises(ModelError):
        dwell_for_budget(Scene((Emitter(0, 0, 0.0), Emitter(0, 0, 0.0))), g, 1e4)


# -- sweeps ----------------------------------------------------------------------

def test_sweep_without_modulation_has_constant_expectation():
    s = Scene((Emitter(0, 0, 2e4), Emitter(8, 0, 1e4)))
    g = ScanGrid(4.0, 0.0, 1.0, 1, 1, 1.0)
    mus = [expected_counts(s.with_angle(a), g, [2]) for a in (0, 30, 77)]
    for m in mus[1:]:
        assert m["d1"][0, 0] == mus[0]["d1"][0, 0] and m[2][0, 0] == mus[0][2][0, 0]


def test_sweep_single_angle_matches_scan_pixel():
    s = pair_scene(8.5, a=15000.0, b=5000.0)
    sw = simulate_polarization_sweep(s, 0.0, 0.0, [0.0], 50.0, 9)
    sd = simulate_scan(s, ScanGrid(0.0, 0.0, 1.0, 1, 1, 50.0), [2], 9)
    assert sw.singles_d1[0] == sd.singles_d1[0, 0]
    assert sw.coincidences[0] == sd.coincidences[2][0, 0]


def test_sweep_modulation_follows_model():
    s = Scene((Emitter(-4.25, 0, 37500, -21000), Emitter(4.25, 0, 23100, -10800)))
    ang = np.array([0.0, 90.0])
    sw = simulate_polarization_sweep(s, 0.0, 0.0, ang, 10.0, 3)
    tot = (sw.singles_d1 + sw.singles_d2) / 10.0
    fac = np.exp(-4.25 ** 2 / (2 * 150 ** 2))
    assert tot[1] - tot[0] == pytest.approx(31800 * fac, abs=5 * np.sqrt(tot.sum() / 10))
    with pytest.raises(ModelError):
        simulate_polarization_sweep(s, 0, 0, [], 1.0, 1)


# -- g2 histograms ----------------------------------------------------------------

def test_g2_histogram_shape_and_determinism():
    s = Scene((Emitter(-250, 0, 6e5), Emitter(250, 0, 6e5)))
    h1 = simulate_g2(s, 0.0, 0.0, 2.0, 2.0, 1)
    h2 = simulate_g2(s, 0.0, 0.0, 2.0, 2.0, 1)
    assert np.array_equal(h1.counts, h2.counts)
    assert np.all(np.diff(h1.tau_ns) > 0) and h1.counts.min() >= 0
    assert h1.tau_ns.size == 100 and h1.total_starts > 0
    assert len(h1.bins) == 100


def test_g2_background_only_is_flat():
    s = Scene((Emitter(0, 0, 0.0),), detector=Detector(bg_cps=3e5))
    h = simulate_g2(s, 0.0, 0.0, 3.0, 4.0, 2)
    f = fit_g2(h)
    assert abs(f.g2_zero - 1.0) < 4 * f.g2_zero_err + 0.02


def test_g2_converges_to_model():
    s = Scene((Emitter(-250, 0, 6e5), Emitter(250, 0, 6e5)))
    h = simulate_g2(s, 0.0, 0.0, 30.0, 2.0, 4)
    plateau = h.counts[np.abs(h.tau_ns) > 80].mean()
    model = g2_tau([1.0, 1.0], s.detector, h.tau_ns)
    resid = h.counts / plateau - model
    assert np.sqrt(np.mean(resid ** 2)) < 4 / np.sqrt(plateau)


def test_g2_errors():
    s = Scene((Emitter(0, 0, 0.0),))
    with pytest.raises(ModelError):
        simulate_g2(s, 0.0, 0.0, 1.0, 1.0, 1)
    with pytest.raises(ModelError):
        simulate_g2(pair_scene(), 0.0, 0.0, 0.0, 1.0, 1)
