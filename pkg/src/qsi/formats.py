"""Text formats: scenario configs, count/rate grids and reports.

Configs and reports are flat ``key = value`` lines with dotted prefixes and
``#`` comments. Grids carry a ``# key = value`` header followed by ``ny`` rows
of ``nx`` values, y increasing with the row. Floats are written with 17
significant digits so a write/read cycle is exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Detector, Emitter, ModelError, Psf, ScanGrid, Scene, nominal_eta

GRID_KEYS = ("nx", "ny", "pitch_nm", "x0_nm", "y0_nm", "dwell_s", "unit")
INT_UNITS = ("counts", "flag")


class FormatError(ModelError):
    """Malformed or inconsistent input file."""

    def __init__(self, msg, source=None, line=None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + msg)
        self.source = source
        self.line = line


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (list, tuple, np.ndarray)):
        return ", ".join(fmt(x) for x in v)
    return str(v)


# -- key = value ------------------------------------------------------------

def parse_kv(text: str, source="<string>") -> dict[str, tuple[str, int]]:
    """Map key -> (raw value, line number). Blank lines and '#' comments are skipped."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise FormatError(f"expected 'key = value', got {raw.strip()!r}", source, no)
        if key in out:
            raise FormatError(f"duplicate key {key!r} (first on line {out[key][1]})", source, no)
        out[key] = (val, no)
    return out


def dump_kv(items) -> str:
    return "".join(f"{k} = {fmt(v)}\n" for k, v in items)


def read_report(path) -> dict[str, str]:
    path = Path(path)
    return {k: v for k, (v, _) in parse_kv(path.read_text(), path).items()}


def write_report(path, items) -> None:
    Path(path).write_text(dump_kv(items))


# -- grids ------------------------------------------------------------------

def write_grid(path, values, grid: ScanGrid, unit: str, extra=()) -> None:
    values = np.asarray(values)
    if values.shape != grid.shape:
        raise FormatError(f"grid values have shape {values.shape}, expected {grid.shape}", path)
    head = [("nx", grid.nx), ("ny", grid.ny), ("pitch_nm", float(grid.pitch_nm)),
            ("x0_nm", float(grid.x0_nm)), ("y0_nm", float(grid.y0_nm)),
            ("dwell_s", float(grid.dwell_s)), ("unit", unit), *extra]
    lines = [f"# {k} = {fmt(v)}" for k, v in head]
    if unit in INT_UNITS:
        if not np.array_equal(values, np.round(values)):
            raise FormatError(f"unit {unit!r} needs integer values", path)
        rows = (" ".join(str(int(v)) for v in row) for row in values)
    else:
        rows = (" ".join(format(float(v), ".17g") for v in row) for row in values)
    Path(path).write_text("\n".join([*lines, *rows]) + "\n")


def read_grid(path) -> tuple[np.ndarray, ScanGrid, dict]:
    """Values, the grid geometry and the full header."""
    path = Path(path)
    if not path.is_file():
        raise FormatError("grid file not found", path)
    head = {}
    rows = []
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        s = raw.strip()
        if not s:
            continue
        if s.startswith("#"):
            k, sep, v = s[1:].partition("=")
            if sep:
                head[k.strip()] = (v.strip(), no)
            continue
        rows.append((s.split(), no))
    missing = [k for k in GRID_KEYS if k not in head]
    if missing:
        raise FormatError(f"header lacks {', '.join(missing)}", path)
    try:
        nx, ny = int(head["nx"][0]), int(head["ny"][0])
        g = ScanGrid(float(head["x0_nm"][0]), float(head["y0_nm"][0]),
                     float(head["pitch_nm"][0]), nx, ny, float(head["dwell_s"][0]))
    except ValueError as exc:
        raise FormatError(f"bad header: {exc}", path) from None
    unit = head["unit"][0]
    if len(rows) != ny:
        raise FormatError(f"dimension mismatch: header says ny = {ny}, found {len(rows)} rows", path)
    conv = int if unit in INT_UNITS else float
    out = np.empty((ny, nx), dtype=np.int64 if conv is int else float)
    for j, (cells, no) in enumerate(rows):
        if len(cells) != nx:
            raise FormatError(f"dimension mismatch: expected {nx} values, found {len(cells)}", path, no)
        try:
            out[j] = [conv(c) for c in cells]
        except ValueError:
            raise FormatError(f"non-numeric or non-{conv.__name__} value in row", path, no) from None
    return out, g, {k: v for k, (v, _) in head.items()}


# -- scenario config --------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    x_nm: float
    y_nm: float
    angles_deg: tuple
    dwell_s: float


@dataclass(frozen=True)
class G2Config:
    x_nm: float
    y_nm: float
    duration_s: float
    bin_width_ns: float
    range_ns: float


@dataclass(frozen=True)
class ScenarioConfig:
    scene: Scene
    grid: ScanGrid
    orders: tuple
    seed: int
    output_dir: str = "out"
    budget: float | None = None          # coincidences of the lowest order over the grid
    n_emitters: int = 2                  # labels to reconstruct
    bg_cps: float | str = "detector"     # number, 'detector' or 'estimate'
    weighting: str = "propagated"
    resamples: int = 0
    workers: int = 1
    sweep: SweepConfig | None = None
    g2: G2Config | None = None
    scan: bool = True                    # pipeline runs the image scan

    def replace(self, **kw) -> "ScenarioConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return ScenarioConfig(**d)


class _Keys:
    """Typed access to parsed config values with line-numbered errors."""

    def __init__(self, kv, source):
        self.kv = kv
        self.source = source
        self.used = set()

    def raw(self, key):
        self.used.add(key)
        return self.kv[key]

    def get(self, key, conv, default=None, required=False):
        if key not in self.kv:
            if required:
                raise FormatError(f"missing required key {key!r}", self.source)
            return default
        val, no = self.raw(key)
        try:
            return conv(val)
        except (ValueError, TypeError):
            what = _KINDS.get(conv, getattr(conv, "__name__", "value"))
            raise FormatError(f"{key}: cannot read {val!r} as {what}", self.source, no) from None

    def floats(self, key, default=None, required=False):
        return self.get(key, _floats, default, required)

    def line(self, key):
        return self.kv[key][1] if key in self.kv else None


def _floats(v):
    return tuple(float(x) for x in v.replace(",", " ").split())


def _ints(v):
    return tuple(_int(x) for x in v.replace(",", " ").split())


def _bool(v):
    v = v.lower()
    if v not in ("true", "false"):
        raise ValueError(v)
    return v == "true"


def _int(v):
    f = float(v)
    if f != int(f):
        raise ValueError(v)
    return int(f)


def load_config(path_or_text, source=None) -> ScenarioConfig:
    """Parse and validate a scenario config from a path or text."""
    if source is None:
        path = Path(path_or_text)
        text, source = path.read_text(), path
    else:
        text = path_or_text
    k = _Keys(parse_kv(text, source), source)

    det = Detector()
    det_kw = {f: k.get(f"detector.{f}", float, getattr(det, f)) for f in det.__dataclass_fields__}
    try:
        det = Detector(**det_kw)
    except ModelError as exc:
        raise FormatError(f"detector: {exc}", source) from None
    try:
        psf = Psf(k.get("psf.sigma_nm", float, Psf().sigma_nm))
    except ModelError as exc:
        raise FormatError(f"psf: {exc}", source, k.line("psf.sigma_nm")) from None

    idx = sorted({_emitter_index(key, k, source) for key in k.kv if key.startswith("emitter.")})
    if not idx:
        raise FormatError("no emitters configured (emitter.0.x_nm, ...)", source)
    if idx != list(range(len(idx))):
        raise FormatError(f"emitter indices must run 0..{len(idx) - 1}, got {idx}", source)
    ems = []
    for i in idx:
        p = f"emitter.{i}."
        try:
            ems.append(Emitter(k.get(p + "x_nm", float, required=True),
                               k.get(p + "y_nm", float, required=True),
                               k.get(p + "alpha_cps", float, required=True),
                               k.get(p + "beta_cps", float, 0.0)))
        except ModelError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"emitter {i}: {exc}", source, k.line(p + "alpha_cps")) from None
    n = len(ems)

    eta = {}
    for key in [key for key in k.kv if key.startswith("eta.")]:
        m = _int_suffix(key, k, source)
        if m < 3:
            raise FormatError("eta.<m> sets orders >= 3 only; order 2 is calibrated from the singles",
                              source, k.line(key))
        eta[m] = k.get(key, float)
        if not eta[m] > 0:
            raise FormatError(f"{key} must be > 0", source, k.line(key))
    scene = Scene(tuple(ems), psf, det, k.get("pump_angle_deg", float, 0.0), eta)

    nx = k.get("grid.nx", _int, 40)
    ny = k.get("grid.ny", _int, nx)
    pitch = k.get("grid.pitch_nm", float, 30.0)
    x0 = k.get("grid.x0_nm", float, -0.5 * (nx - 1) * pitch)
    y0 = k.get("grid.y0_nm", float, -0.5 * (ny - 1) * pitch)
    dwell = k.get("grid.dwell_s", float)
    budget = k.get("grid.coincidence_budget", float)
    scan = k.get("scan", _bool, True)
    if dwell is None and budget is None and not scan:
        dwell = 1.0     # geometry only; nothing is scanned
    if (dwell is None) == (budget is None):
        raise FormatError("set exactly one of grid.dwell_s and grid.coincidence_budget", source)

    orders = k.get("orders", _ints, tuple(range(2, n + 1)))
    for m in orders:
        if not 2 <= m <= n:
            raise FormatError(f"coincidence order {m} outside 2..{n}", source, k.line("orders"))
    if budget is not None:
        if not orders:
            raise FormatError("grid.coincidence_budget needs at least one coincidence order", source)
        if not budget > 0:
            raise FormatError("grid.coincidence_budget must be > 0", source,
                              k.line("grid.coincidence_budget"))
    try:
        grid = ScanGrid(x0, y0, pitch, nx, ny, dwell if dwell is not None else 1.0)
    except ModelError as exc:
        raise FormatError(f"grid: {exc}", source) from None
    if budget is not None:
        from .simulate import dwell_for_budget
        grid = ScanGrid(x0, y0, pitch, nx, ny, dwell_for_budget(scene, grid, budget, min(orders)))

    seed = k.get("seed", _int, required=True)
    n_em = k.get("reconstruct.emitters", _int, n)
    bg = k.get("reconstruct.bg_cps", str, "detector")
    if bg not in ("detector", "estimate"):
        try:
            bg = float(bg)
        except ValueError:
            raise FormatError("reconstruct.bg_cps must be a rate, 'detector' or 'estimate'",
                              source, k.line("reconstruct.bg_cps")) from None
    weighting = k.get("fit.weighting", str, "propagated")
    if weighting not in ("propagated", "poisson"):
        raise FormatError("fit.weighting must be 'propagated' or 'poisson'", source, k.line("fit.weighting"))
    resamples = k.get("fit.resamples", _int, 0)
    workers = k.get("fit.workers", _int, 1)
    if resamples < 0 or resamples == 1:
        raise FormatError("fit.resamples must be 0 (off) or >= 2", source, k.line("fit.resamples"))
    if workers < 1:
        raise FormatError("fit.workers must be >= 1", source, k.line("fit.workers"))

    sweep = None
    if any(key.startswith("sweep.") for key in k.kv):
        sweep = SweepConfig(k.get("sweep.x_nm", float, 0.0), k.get("sweep.y_nm", float, 0.0),
                            k.floats("sweep.angles_deg", required=True),
                            k.get("sweep.dwell_s", float, required=True))
        if not sweep.angles_deg:
            raise FormatError("sweep.angles_deg is empty", source, k.line("sweep.angles_deg"))
        if not sweep.dwell_s > 0:
            raise FormatError("sweep.dwell_s must be > 0", source, k.line("sweep.dwell_s"))
    g2 = None
    if any(key.startswith("g2.") for key in k.kv):
        g2 = G2Config(k.get("g2.x_nm", float, 0.0), k.get("g2.y_nm", float, 0.0),
                      k.get("g2.duration_s", float, required=True),
                      k.get("g2.bin_width_ns", float, 1.0),
                      k.get("g2.range_ns", float, 20.0 * det.tau_a_ns))
        if not (g2.duration_s > 0 and g2.bin_width_ns > 0 and g2.range_ns >= g2.bin_width_ns):
            raise FormatError("g2 needs duration_s > 0 and range_ns >= bin_width_ns > 0", source)

    output_dir = k.get("output_dir", str, "out")
    unknown = sorted(set(k.kv) - k.used, key=lambda key: k.kv[key][1])
    if unknown:
        raise FormatError(f"unknown key {unknown[0]!r}", source, k.line(unknown[0]))
    return ScenarioConfig(scene, grid, tuple(orders), seed, output_dir, budget, n_em, bg,
                          weighting, resamples, workers, sweep, g2, scan)


_KINDS = {float: "number", _int: "integer", _bool: "true or false", str: "text",
          _floats: "list of numbers", _ints: "list of integers"}


def _emitter_index(key, k, source):
    parts = key.split(".")
    if len(parts) != 3 or not parts[1].isdigit():
        raise FormatError(f"bad emitter key {key!r}; expected emitter.<i>.<field>", source, k.line(key))
    return int(parts[1])


def _int_suffix(key, k, source):
    parts = key.split(".")
    if len(parts) != 2 or not parts[1].isdigit():
        raise FormatError(f"bad key {key!r}; expected eta.<m>", source, k.line(key))
    return int(parts[1])


def manifest_items(cfg: ScenarioConfig):
    """Every resolved setting, defaults included, as (key, value) pairs."""
    s, g, d = cfg.scene, cfg.grid, cfg.scene.detector
    items = [("seed", cfg.seed), ("output_dir", cfg.output_dir), ("scan", cfg.scan),
             ("pump_angle_deg", float(s.pump_angle_deg)), ("psf.sigma_nm", float(s.psf.sigma_nm))]
    items += [(f"detector.{f}", float(getattr(d, f))) for f in d.__dataclass_fields__]
    for i, e in enumerate(s.emitters):
        items += [(f"emitter.{i}.{f}", float(getattr(e, f))) for f in e.__dataclass_fields__]
    items += [(f"eta.{m}", float(nominal_eta(d, m, s.eta))) for m in range(3, s.n + 1)]
    items += [("grid.nx", g.nx), ("grid.ny", g.ny), ("grid.pitch_nm", float(g.pitch_nm)),
              ("grid.x0_nm", float(g.x0_nm)), ("grid.y0_nm", float(g.y0_nm)),
              ("grid.dwell_s", float(g.dwell_s))]
    if cfg.budget is not None:
        items.append(("# grid.coincidence_budget", float(cfg.budget)))
    items += [("orders", list(cfg.orders)), ("reconstruct.emitters", cfg.n_emitters),
              ("reconstruct.bg_cps", cfg.bg_cps if isinstance(cfg.bg_cps, str) else float(cfg.bg_cps)),
              ("fit.weighting", cfg.weighting), ("fit.resamples", cfg.resamples),
              ("fit.workers", cfg.workers)]
    if cfg.sweep is not None:
        w = cfg.sweep
        items += [("sweep.x_nm", w.x_nm), ("sweep.y_nm", w.y_nm),
                  ("sweep.angles_deg", list(w.angles_deg)), ("sweep.dwell_s", w.dwell_s)]
    if cfg.g2 is not None:
        h = cfg.g2
        items += [("g2.x_nm", h.x_nm), ("g2.y_nm", h.y_nm), ("g2.duration_s", h.duration_s),
                  ("g2.bin_width_ns", h.bin_width_ns), ("g2.range_ns", h.range_ns)]
    return items


def dump_manifest(cfg: ScenarioConfig) -> str:
    """Resolved config text; loading it gives back the same scenario.

    A coincidence budget is echoed as a comment: the dwell it produced is
    what the manifest fixes.
    """
    return dump_kv(manifest_items(cfg))
