"""Command-line entry point.

    qsi simulate    --config C [--out D] [--seed S]
    qsi reconstruct SCAN_DIR [--out D] [--emitters N]
    qsi fit         SCAN_DIR [--out D] [--emitters N] [--resamples K] [--seed S]
    qsi axes        --config C [--out D] [--seed S]
    qsi g2          --config C [--out D] [--seed S]
    qsi pipeline    --config C [--out D] [--seed S] [--emitters N] [--resamples K]

``--config`` takes a path or the name of a bundled scenario (pair366,
pair8p5, axes, g2). Exit status: 0 ok, 1 invalid input, 2 runtime failure,
3 non-convergence.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import estimate as est
from .formats import (
    FormatError,
    dump_manifest,
    load_config,
    read_grid,
    write_grid,
    write_report,
)
from .model import Detector, ModelError
from .reconstruct import FLAG_NAMES, estimate_background, reconstruct
from .simulate import (
    ScanData,
    simulate_g2,
    simulate_polarization_sweep,
    simulate_scan,
)

log = logging.getLogger("qsi")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CONVERGENCE = 0, 1, 2, 3
MANIFEST = "manifest.txt"
REPORT = "report.txt"
# sub-stream tags so sweeps and histograms never share draws with the scan
SWEEP_TAG, G2_TAG = 1, 2


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def bundled_scenarios() -> list[str]:
    root = resources.files("qsi") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def resolve_config(name: str):
    """Config text and a display source for a path or a bundled scenario name."""
    p = Path(name)
    if p.is_file():
        return p.read_text(), p
    ref = resources.files("qsi") / "scenarios" / f"{name}.cfg"
    if ref.is_file():
        return ref.read_text(), f"<scenario {name}>"
    raise FormatError(f"no config file or bundled scenario named {name!r} "
                      f"(bundled: {', '.join(bundled_scenarios())})")


def _config(args):
    with stage("config"):
        return _load_config(args)


def _load_config(args):
    if not args.config:
        raise FormatError("--config is required")
    text, src = resolve_config(args.config)
    cfg = load_config(text, src)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "emitters", None) is not None:
        kw["n_emitters"] = args.emitters
    if getattr(args, "resamples", None) is not None:
        kw["resamples"] = args.resamples
    if args.out is not None:
        kw["output_dir"] = args.out
    return cfg.replace(**kw) if kw else cfg


def sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1, np.uint64)[0])


# -- scan directories -------------------------------------------------------

def scan_files(orders):
    return ["singles_d1.txt", "singles_d2.txt", *(f"coincidences_m{m}.txt" for m in orders)]


def write_scan(out: Path, sd: ScanData) -> list[Path]:
    extra = [("pump_angle_deg", float(sd.pump_angle_deg)), ("seed", sd.seed)]
    grids = [sd.singles_d1, sd.singles_d2, *(sd.coincidences[m] for m in sd.orders)]
    paths = []
    for name, arr in zip(scan_files(sd.orders), grids):
        paths.append(out / name)
        write_grid(paths[-1], arr, sd.grid, "counts", extra)
    return paths


def read_scan(scan_dir: Path, n_emitters: int | None = None):
    """ScanData plus the manifest config found next to the grids (or None)."""
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise FormatError("scan directory not found", scan_dir)
    cfg = load_config(scan_dir / MANIFEST) if (scan_dir / MANIFEST).is_file() else None
    n = n_emitters if n_emitters is not None else (cfg.n_emitters if cfg else 2)
    if n < 1:
        raise ModelError("--emitters must be >= 1")
    d1, g, head = read_grid(scan_dir / "singles_d1.txt")
    d2, g2, _ = read_grid(scan_dir / "singles_d2.txt")
    grids = {}
    for m in range(2, n + 1):
        path = scan_dir / f"coincidences_m{m}.txt"
        if not path.is_file():
            raise FormatError(f"missing coincidence order file {path.name} for {n} emitters", scan_dir)
        grids[m], gm, _ = read_grid(path)
        if gm != g:
            raise FormatError(f"dimension mismatch: {path.name} geometry differs from singles_d1.txt",
                              scan_dir)
    if g2 != g:
        raise FormatError("dimension mismatch: singles_d2.txt geometry differs from singles_d1.txt",
                          scan_dir)
    detector = cfg.scene.detector if cfg else Detector()
    seed = int(head["seed"]) if head.get("seed", "None") != "None" else None
    sd = ScanData(g, d1, d2, grids, detector, float(head.get("pump_angle_deg", 0.0)), seed)
    return sd, cfg, n


def _bg(cfg, sd):
    if cfg is None or cfg.bg_cps == "detector":
        return None
    if cfg.bg_cps == "estimate":
        return estimate_background(sd)
    return float(cfg.bg_cps)


def _eta(cfg):
    return dict(cfg.scene.eta) if cfg else None


# -- report -----------------------------------------------------------------

FIT_KEYS = ("x0_nm", "y0_nm", "sigma_x_nm", "sigma_y_nm", "amplitude_cps", "offset_cps")


def report_items(fits=None, d=None, err=None, err_cov=None, boot=None, axes=None, g2=None):
    items = []
    if d is not None:
        items += [("distance_nm", d), ("distance_nm.err", err), ("distance_nm.err_cov", err_cov)]
        if boot is not None:
            items += [("distance_nm.err_boot", boot.std), ("bootstrap.resamples", boot.distances.size),
                      ("bootstrap.failures", len(boot.failures)),
                      ("bootstrap.mean_nm", float(np.mean(boot.ok)))]
    for i, f in enumerate(fits or ()):
        for key, v, e in zip(FIT_KEYS, f.params, f.errors):
            items += [(f"emitter.{i}.{key}", float(v)), (f"emitter.{i}.{key}.err", float(e))]
        items.append((f"emitter.{i}.fit_iterations", f.iterations))
    if axes is not None:
        for name, (a, b, sa, sb) in zip("AB", axes.params):
            items += [(f"axes.{name}.alpha_cps", a), (f"axes.{name}.alpha_cps.err", sa),
                      (f"axes.{name}.beta_cps", b), (f"axes.{name}.beta_cps.err", sb)]
    if g2 is not None:
        items += [("g2.g2_zero", g2.g2_zero), ("g2.g2_zero.err", g2.g2_zero_err),
                  ("g2.tau_a_ns", g2.tau_a_ns), ("g2.tau_a_ns.err", g2.tau_a_err_ns),
                  ("g2.plateau_counts", g2.plateau_counts)]
    return items


# -- stages -----------------------------------------------------------------

def run_simulate(cfg, out: Path):
    with stage("simulate"):
        out.mkdir(parents=True, exist_ok=True)
        sd = simulate_scan(cfg.scene, cfg.grid, cfg.orders, cfg.seed)
        write_manifest(cfg, out)
        write_scan(out, sd)
    return sd


def write_manifest(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(dump_manifest(cfg))


def run_reconstruct(sd, cfg, n, out: Path):
    with stage("reconstruct"):
        calib = cfg.scene.detector if cfg else sd.detector
        im = reconstruct(sd, calib, n, _eta(cfg), _bg(cfg, sd))
        out.mkdir(parents=True, exist_ok=True)
        legend = [(f"flag.{k}", v) for k, v in FLAG_NAMES.items()]
        for k in range(im.n):
            write_grid(out / f"image_{k}.txt", im.images[k], im.grid, "cps")
            write_grid(out / f"variance_{k}.txt", im.variances[k], im.grid, "cps2")
        write_grid(out / "flags.txt", im.flags, im.grid, "flag", legend)
        write_grid(out / "singles_cps.txt", im.singles, im.grid, "cps")
    return im


def run_fit(sd, cfg, n, im, seed, resamples):
    weighting = cfg.weighting if cfg else "propagated"
    workers = cfg.workers if cfg else 1
    if n < 2:
        raise StageError("fit", ModelError("a distance needs at least two emitters"))
    with stage("fit"):
        fits = est.fit_images(im, weighting)
        d, err_cov = est.estimate_distance(fits[0], fits[1])
    boot = None
    if resamples:
        if seed is None:
            raise StageError("bootstrap", ModelError("bootstrap needs a seed (--seed)"))
        with stage("bootstrap"):
            calib = cfg.scene.detector if cfg else sd.detector
            boot = est.bootstrap_uncertainty(sd, calib, n, resamples, seed, _eta(cfg), _bg(cfg, sd),
                                             weighting, workers)
    rep = est.make_report(fits, d, err_cov, boot)
    return rep, boot


def run_axes(cfg, out: Path):
    w = cfg.sweep
    if w is None:
        raise StageError("axes", FormatError("config has no sweep.* section"))
    with stage("axes"):
        sw = simulate_polarization_sweep(cfg.scene, w.x_nm, w.y_nm, w.angles_deg, w.dwell_s,
                                         sub_seed(cfg.seed, SWEEP_TAG))
        # a sweep has too few points for a lowest-decile estimate
        bg = None if isinstance(cfg.bg_cps, str) else float(cfg.bg_cps)
        fit = est.fit_axes(sw, cfg.scene.detector, bg)
        out.mkdir(parents=True, exist_ok=True)
        rows = ["# angle_deg singles_d1 singles_d2 coincidences rate_A_cps rate_A_err_cps "
                "rate_B_cps rate_B_err_cps"]
        for i, phi in enumerate(sw.angles_deg):
            vals = [fit.rates[0, i], fit.rate_errs[0, i], fit.rates[1, i], fit.rate_errs[1, i]]
            rows.append(" ".join([format(float(phi), ".17g"), str(sw.singles_d1[i]), str(sw.singles_d2[i]),
                                  str(sw.coincidences[i]), *(format(float(v), ".17g") for v in vals)]))
        (out / "sweep.txt").write_text("\n".join(rows) + "\n")
    return fit


def run_g2(cfg, out: Path):
    h = cfg.g2
    if h is None:
        raise StageError("g2", FormatError("config has no g2.* section"))
    with stage("g2"):
        hist = simulate_g2(cfg.scene, h.x_nm, h.y_nm, h.duration_s, h.bin_width_ns,
                           sub_seed(cfg.seed, G2_TAG), h.range_ns)
        out.mkdir(parents=True, exist_ok=True)
        rows = [f"# bin_width_ns = {hist.bin_width_ns!r}", f"# total_starts = {hist.total_starts}",
                "# tau_ns count"]
        rows += [f"{format(float(t), '.17g')} {int(c)}" for t, c in hist.bins]
        (out / "g2_histogram.txt").write_text("\n".join(rows) + "\n")
        fit = est.fit_g2(hist)
    return fit


# -- commands ---------------------------------------------------------------

def cmd_simulate(args):
    cfg = _config(args)
    out = Path(cfg.output_dir)
    run_simulate(cfg, out)
    log.info("wrote %d grids and %s to %s", 2 + len(cfg.orders), MANIFEST, out)


def cmd_reconstruct(args):
    scan = Path(args.scan_dir)
    with stage("load"):
        sd, cfg, n = read_scan(scan, args.emitters)
    out = Path(args.out) if args.out else scan
    run_reconstruct(sd, cfg, n, out)
    log.info("wrote %d images to %s", n, out)


def cmd_fit(args):
    scan = Path(args.scan_dir)
    with stage("load"):
        sd, cfg, n = read_scan(scan, args.emitters)
    out = Path(args.out) if args.out else scan
    im = run_reconstruct(sd, cfg, n, out)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else sd.seed)
    resamples = args.resamples if args.resamples is not None else (cfg.resamples if cfg else 0)
    rep, boot = run_fit(sd, cfg, n, im, seed, resamples)
    write_report(out / REPORT, report_items(rep.fits, rep.distance_nm, rep.distance_err_nm,
                                            rep.distance_err_cov_nm, boot))
    print(f"distance_nm = {rep.distance_nm:.6g} +- {rep.distance_err_nm:.3g}")


def cmd_axes(args):
    cfg = _config(args)
    out = Path(cfg.output_dir)
    with stage("write"):
        write_manifest(cfg, out)
    fit = run_axes(cfg, out)
    write_report(out / REPORT, report_items(axes=fit))
    _print_axes(fit)


def _print_axes(fit):
    for name, (a, b, sa, sb) in zip("AB", fit.params):
        print(f"{name}: alpha_cps = {a:.6g} +- {sa:.3g}, beta_cps = {b:.6g} +- {sb:.3g}")


def _print_g2(fit):
    print(f"g2_zero = {fit.g2_zero:.4g} +- {fit.g2_zero_err:.2g}, tau_a_ns = {fit.tau_a_ns:.4g}")


def cmd_g2(args):
    cfg = _config(args)
    out = Path(cfg.output_dir)
    with stage("write"):
        write_manifest(cfg, out)
    fit = run_g2(cfg, out)
    write_report(out / REPORT, report_items(g2=fit))
    _print_g2(fit)


def cmd_pipeline(args):
    cfg = _config(args)
    out = Path(cfg.output_dir)
    with stage("write"):
        write_manifest(cfg, out)
    n = cfg.n_emitters
    fits = d = err = err_cov = boot = None
    if cfg.scan:
        sd = run_simulate(cfg, out / "scan")
    if cfg.scan and n >= 2:
        im = run_reconstruct(sd, cfg, n, out / "images")
        rep, boot = run_fit(sd, cfg, n, im, cfg.seed, cfg.resamples)
        fits, d, err, err_cov = rep.fits, rep.distance_nm, rep.distance_err_nm, rep.distance_err_cov_nm
    axes = run_axes(cfg, out / "axes") if cfg.sweep is not None else None
    g2 = run_g2(cfg, out / "g2") if cfg.g2 is not None else None
    write_report(out / REPORT, report_items(fits, d, err, err_cov, boot, axes, g2))
    if d is not None:
        print(f"distance_nm = {d:.6g} +- {err:.3g}")
    if axes is not None:
        _print_axes(axes)
    if g2 is not None:
        _print_g2(g2)
    log.info("report written to %s", out / REPORT)


# -- entry ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsi", description="Quantum statistical imaging toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="config path or bundled scenario name")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")

    sp = sub.add_parser("simulate", help="simulate a scan")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("reconstruct", help="per-emitter images from a scan directory")
    sp.add_argument("scan_dir")
    common(sp, config=False)
    sp.add_argument("--emitters", type=int)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("fit", help="localize emitters and measure their distance")
    sp.add_argument("scan_dir")
    common(sp, config=False)
    sp.add_argument("--emitters", type=int)
    sp.add_argument("--resamples", type=int)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("axes", help="polarization sweep and cos^2 fit")
    common(sp)
    sp.set_defaults(func=cmd_axes)

    sp = sub.add_parser("g2", help="g2 histogram and antibunching fit")
    common(sp)
    sp.set_defaults(func=cmd_g2)

    sp = sub.add_parser("pipeline", help="simulate, reconstruct, fit and report")
    common(sp)
    sp.add_argument("--emitters", type=int)
    sp.add_argument("--resamples", type=int)
    sp.set_defaults(func=cmd_pipeline)
    return p


def exit_code(exc) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, est.ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, (ModelError, FormatError)):
        return EXIT_INVALID
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="qsi: %(message)s")
    try:
        args.func(args)
    except (StageError, ModelError, est.FitError, est.ConvergenceError, OSError) as exc:
        msg = str(exc) if isinstance(exc, StageError) else f"{type(exc).__name__}: {exc}"
        print(f"qsi {args.command}: error {msg}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
