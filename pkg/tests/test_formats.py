import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qsi.formats import (
    FormatError,
    dump_manifest,
    load_config,
    manifest_items,
    parse_kv,
    read_grid,
    read_report,
    write_grid,
    write_report,
)
from qsi.model import ScanGrid

BASE = """
seed = 7
emitter.0.x_nm = -10
emitter.0.y_nm = 0
emitter.0.alpha_cps = 1e4
emitter.1.x_nm = 10
emitter.1.y_nm = 0
emitter.1.alpha_cps = 5e3
grid.nx = 5
grid.dwell_s = 2
"""


def test_parse_kv_comments_and_lines():
    kv = parse_kv("# head\n a.b = 1  # note\n\nc = x y\n")
    assert kv == {"a.b": ("1", 2), "c": ("x y", 4)}
    with pytest.raises(FormatError, match=":2:"):
        parse_kv("a = 1\nbroken line\n")
    with pytest.raises(FormatError, match="duplicate"):
        parse_kv("a = 1\na = 2\n")


def test_config_defaults():
    cfg = load_config(BASE, "base")
    assert cfg.seed == 7 and cfg.scene.n == 2
    assert cfg.grid.nx == cfg.grid.ny == 5
    assert cfg.grid.x0_nm == -60.0 and cfg.grid.pitch_nm == 30.0
    assert cfg.orders == (2,) and cfg.n_emitters == 2
    assert cfg.scene.detector.r == 0.54 and cfg.weighting == "propagated"


@pytest.mark.parametrize("edit, msg", [
    (lambda t: t.replace("seed = 7\n", ""), "'seed'"),
    (lambda t: t + "colour = red\n", "unknown key 'colour'"),
    (lambda t: t.replace("grid.dwell_s = 2", "grid.dwell_s = 0"), "dwell_s"),
    (lambda t: t + "grid.coincidence_budget = 10\n", "exactly one"),
    (lambda t: t.replace("emitter.1.alpha_cps = 5e3", "emitter.1.alpha_cps = -5"), "emitter 1"),
    (lambda t: t + "detector.r = 0.7\n", r"r \+ t"),
    (lambda t: t + "orders = 3\n", "order 3"),
    (lambda t: t.replace("grid.nx = 5", "grid.nx = five"), ":9: grid.nx: cannot read 'five' as integer"),
    (lambda t: t + "emitter.3.x_nm = 1\n", "indices"),
    (lambda t: t + "eta.2 = 1\n", "orders >= 3"),
    (lambda t: t + "fit.resamples = 1\n", "resamples"),
])
def test_config_validation_names_the_problem(edit, msg):
    with pytest.raises(FormatError, match=msg):
        load_config(edit(BASE), "cfg")


def test_budget_sets_dwell():
    cfg = load_config(BASE.replace("grid.dwell_s = 2", "grid.coincidence_budget = 100"), "b")
    from qsi.simulate import expected_counts
    assert expected_counts(cfg.scene, cfg.grid, [2])[2].sum() == pytest.approx(100.0, rel=1e-12)


def test_manifest_roundtrip_and_completeness():
    text = BASE + "sweep.angles_deg = 0, 45, 90\nsweep.dwell_s = 3\ng2.duration_s = 1\neta.3 = 0.5\n"
    text = text.replace("emitter.1.alpha_cps = 5e3", "emitter.1.alpha_cps = 5e3\nemitter.2.x_nm = 0\n"
                        "emitter.2.y_nm = 3\nemitter.2.alpha_cps = 1e3")
    cfg = load_config(text, "full")
    again = load_config(dump_manifest(cfg), "manifest")
    assert again == cfg
    keys = {k for k, _ in manifest_items(cfg)}
    # every default the loader filled in is echoed
    for k in ("detector.r", "detector.t", "detector.tw_ns", "detector.k_bunch", "detector.tau_a_ns",
              "detector.capture_frac", "detector.bg_cps", "psf.sigma_nm", "pump_angle_deg",
              "grid.ny", "grid.pitch_nm", "grid.x0_nm", "grid.y0_nm", "orders", "eta.3",
              "emitter.0.beta_cps", "reconstruct.emitters", "reconstruct.bg_cps", "fit.weighting",
              "fit.resamples", "fit.workers", "sweep.x_nm", "sweep.y_nm", "g2.x_nm", "g2.y_nm",
              "g2.bin_width_ns", "g2.range_ns", "output_dir", "scan"):
        assert k in keys


@given(st.floats(-1e4, 1e4), st.floats(1e-3, 1e3), st.floats(1e-6, 1e6),
       st.floats(0, 1e6), st.floats(0.01, 0.99))
def test_config_roundtrip_exact(x, pitch, dwell, alpha, r):
    text = (f"seed = 3\nemitter.0.x_nm = {x!r}\nemitter.0.y_nm = 0\nemitter.0.alpha_cps = {alpha!r}\n"
            f"grid.pitch_nm = {pitch!r}\ngrid.nx = 3\ngrid.dwell_s = {dwell!r}\n"
            f"detector.r = {r!r}\ndetector.t = {1 - r!r}\n")
    try:
        cfg = load_config(text, "h")
    except FormatError:
        return  # r + t rounding off 1
    assert load_config(dump_manifest(cfg), "m") == cfg


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=64)),
       st.floats(-1e6, 1e6), st.floats(1e-3, 1e3), st.floats(1e-9, 1e9))
def test_rate_grid_roundtrip_exact(tmp_path_factory, values, x0, pitch, dwell):
    ny, nx = values.shape
    g = ScanGrid(x0, -x0, pitch, nx, ny, dwell)
    p = tmp_path_factory.mktemp("g") / "grid.txt"
    write_grid(p, values, g, "cps")
    back, g2, head = read_grid(p)
    assert g2 == g and head["unit"] == "cps"
    assert np.array_equal(back, values)


@given(hnp.arrays(np.int64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.integers(0, 2 ** 62)))
def test_count_grid_roundtrip_exact(tmp_path_factory, values):
    ny, nx = values.shape
    g = ScanGrid(0.0, 0.0, 1.0, nx, ny, 1.0)
    p = tmp_path_factory.mktemp("g") / "grid.txt"
    write_grid(p, values, g, "counts")
    back, _, _ = read_grid(p)
    assert back.dtype == np.int64 and np.array_equal(back, values)


def test_grid_file_layout(tmp_path):
    g = ScanGrid(-1.0, 2.0, 0.5, 3, 2, 4.0)
    write_grid(tmp_path / "a.txt", np.array([[1, 2, 3], [4, 5, 6]]), g, "counts")
    lines = (tmp_path / "a.txt").read_text().splitlines()
    assert lines[:7] == ["# nx = 3", "# ny = 2", "# pitch_nm = 0.5", "# x0_nm = -1", "# y0_nm = 2",
                         "# dwell_s = 4", "# unit = counts"]
    assert lines[7:] == ["1 2 3", "4 5 6"]


def test_grid_errors(tmp_path):
    g = ScanGrid(0.0, 0.0, 1.0, 3, 2, 1.0)
    p = tmp_path / "g.txt"
    write_grid(p, np.zeros((2, 3)), g, "counts")
    text = p.read_text()
    p.write_text(text.replace("# ny = 2", "# ny = 3"))
    with pytest.raises(FormatError, match="dimension mismatch"):
        read_grid(p)
    p.write_text(text + "0 0\n")
    with pytest.raises(FormatError, match="dimension mismatch"):
        read_grid(p)
    p.write_text(text.replace("0 0 0\n", "0 0\n", 1))
    with pytest.raises(FormatError, match="expected 3 values"):
        read_grid(p)
    p.write_text(text.replace("# unit = counts\n", ""))
    with pytest.raises(FormatError, match="unit"):
        read_grid(p)
    p.write_text(text.replace("0 0 0\n", "0 0.5 0\n", 1))
    with pytest.raises(FormatError, match="non-int"):
        read_grid(p)
    with pytest.raises(FormatError, match="not found"):
        read_grid(tmp_path / "missing.txt")
    with pytest.raises(FormatError, match="integer"):
        write_grid(p, np.full((2, 3), 0.5), g, "counts")


def test_report_roundtrip(tmp_path):
    items = [("distance_nm", 366.1), ("distance_nm.err", 2.8284271247461903), ("n", 3)]
    write_report(tmp_path / "r.txt", items)
    back = read_report(tmp_path / "r.txt")
    assert float(back["distance_nm.err"]) == 2.8284271247461903
    assert back["n"] == "3"
