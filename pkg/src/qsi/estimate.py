"""Fits on reconstructed images, polarization sweeps and g2 histograms.

All fits are weighted least squares. Nonlinear ones go through a small
Levenberg-Marquardt loop whose covariance is scaled by the residual variance.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import Detector, ModelError, ScanGrid
from .reconstruct import (
    FLAG_BELOW_NOISE,
    EmitterImages,
    _pair_roots,
    _pair_variance,
    calibrated_moments,
    reconstruct,
)
from .simulate import G2Histogram, PolarizationSweep, ScanData

MAX_ITER = 200
RTOL = 1e-10
LAMBDA0 = 1e-3
# beyond this damping the step is negligible and the fit sits at a minimum
LAMBDA_MAX = 1e12
MIN_SUCCESS = 0.8
PLATEAU_MIN = 10.0
# outer fraction of the histogram range used as the uncorrelated plateau
PLATEAU_FRAC = 0.2
BOOT_TAG = 0xB0075


class FitError(RuntimeError):
    """The data cannot support the requested fit."""


class ConvergenceError(RuntimeError):
    """The iterative fit ran out of iterations."""


@dataclass
class LMResult:
    params: np.ndarray
    covariance: np.ndarray
    cost: float
    iterations: int
    costs: list = field(default_factory=list)   # cost after every accepted step


def levenberg_marquardt(residual: Callable, jacobian: Callable, p0, weights,
                        valid: Callable | None = None, max_iter: int = MAX_ITER,
                        rtol: float = RTOL) -> LMResult:
    """Minimise sum(w * residual(p)**2).

    The normal-equation diagonal is multiplied by (1 + lambda); lambda starts
    at 1e-3, grows x10 on a rejected step and shrinks /10 on an accepted one.
    ``valid(p)`` can veto a step (counted as a rejection).
    """
    p = np.array(p0, dtype=float)
    w = np.asarray(weights, dtype=float)
    r = residual(p)
    cost = float(np.sum(w * r * r))
    costs = [cost]
    lam = LAMBDA0
    it = 0
    converged = cost == 0.0
    while not converged and it < max_iter:
        it += 1
        J = jacobian(p)
        JW = J * w[:, None]
        A = JW.T @ J
        g = JW.T @ r
        D = np.diag(A)
        while True:
            M = A + lam * np.diag(D)
            try:
                step = -np.linalg.solve(M, g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(M, g, rcond=None)[0]
            trial = p + step
            ok = np.all(np.isfinite(trial)) and (valid is None or valid(trial))
            if ok:
                r_new = residual(trial)
                new = float(np.sum(w * r_new * r_new))
            if ok and new <= cost:
                lam /= 10.0
                rel = (cost - new) / cost if cost > 0 else 0.0
                p, r, cost = trial, r_new, new
                costs.append(cost)
                converged = rel < rtol or cost == 0.0
                break
            lam *= 10.0
            if lam > LAMBDA_MAX:
                converged = True
                break
    if not converged:
        raise ConvergenceError(f"no convergence after {max_iter} iterations (cost {cost:.6g})")
    J = jacobian(p)
    A = (J * w[:, None]).T @ J
    dof = max(int(np.count_nonzero(w)) - p.size, 1)
    cov = np.linalg.pinv(A) * (cost / dof)
    return LMResult(p, 0.5 * (cov + cov.T), cost, it, costs)


# -- 2D Gaussian -------------------------------------------------------------

def gaussian2d(p, x, y):
    x0, y0, sx, sy, amp, off = p
    return off + amp * np.exp(-0.5 * (((x - x0) / sx) ** 2 + ((y - y0) / sy) ** 2))


def gaussian2d_jacobian(p, x, y):
    """Derivatives in the order (x0, y0, sx, sy, amp, offset), one row per point."""
    x0, y0, sx, sy, amp, off = p
    ux = (x - x0) / sx
    uy = (y - y0) / sy
    e = np.exp(-0.5 * (ux * ux + uy * uy))
    ae = amp * e
    return np.stack([ae * ux / sx, ae * uy / sy, ae * ux * ux / sx, ae * uy * uy / sy,
                     e, np.ones_like(e)], axis=-1)


@dataclass(frozen=True)
class Gaussian2DFit:
    x0_nm: float
    y0_nm: float
    sigma_x_nm: float
    sigma_y_nm: float
    amplitude_cps: float
    offset_cps: float
    covariance: np.ndarray
    iterations: int = 0
    cost: float = 0.0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.x0_nm, self.y0_nm, self.sigma_x_nm, self.sigma_y_nm,
                         self.amplitude_cps, self.offset_cps])

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))


def _initial_guess(x, y, v, pitch):
    lo = v.min()
    top = v >= np.quantile(v, 0.75)
    wt = v[top] - lo
    if not wt.sum() > 0:
        wt = np.ones(top.sum())
    cx = float(np.sum(wt * x[top]) / wt.sum())
    cy = float(np.sum(wt * y[top]) / wt.sum())
    wa = v - lo
    sx = math.sqrt(np.sum(wa * (x - cx) ** 2) / wa.sum())
    sy = math.sqrt(np.sum(wa * (y - cy) ** 2) / wa.sum())
    span = max(np.ptp(x), np.ptp(y), pitch)
    sx = min(max(sx, pitch / 2), span)
    sy = min(max(sy, pitch / 2), span)
    return np.array([cx, cy, sx, sy, v.max() - lo, lo])


def poisson_variance(image, dwell_s: float) -> np.ndarray:
    """Rate variance for counts max(rate * dwell, 1)."""
    return np.maximum(np.asarray(image, float) * dwell_s, 1.0) / dwell_s ** 2


def fit_gaussian2d(image, grid: ScanGrid, variance=None, mask=None,
                   p0=None) -> Gaussian2DFit:
    """Fit offset + amp * exp(...) to a rate image on ``grid``.

    ``variance`` defaults to Poisson on counts. Pixels outside ``mask`` or
    with infinite variance are left out.
    """
    img = np.asarray(image, dtype=float)
    if img.shape != grid.shape:
        raise ModelError(f"image shape {img.shape} does not match grid {grid.shape}")
    var = poisson_variance(img, grid.dwell_s) if variance is None else np.asarray(variance, float)
    use = np.isfinite(img) & np.isfinite(var) & (var > 0)
    if mask is not None:
        use &= np.asarray(mask, dtype=bool)
    X, Y = grid.coords()
    x, y, v = X[use], Y[use], img[use]
    if v.size < 7 or np.count_nonzero(v > v.min()) < 7:
        raise FitError(f"degenerate image: {np.count_nonzero(v > v.min()) if v.size else 0} "
                       "pixels above the floor, need 7")
    w = 1.0 / var[use]
    start = _initial_guess(x, y, v, grid.pitch_nm) if p0 is None else np.asarray(p0, float)

    res = levenberg_marquardt(
        lambda p: gaussian2d(p, x, y) - v,
        lambda p: gaussian2d_jacobian(p, x, y),
        start, w, valid=lambda p: p[2] > 0 and p[3] > 0)
    p = res.params
    return Gaussian2DFit(*map(float, p), covariance=res.covariance,
                         iterations=res.iterations, cost=res.cost)


def estimate_distance(fa: Gaussian2DFit, fb: Gaussian2DFit) -> tuple[float, float]:
    """Centre distance and its first-order error, fits taken as independent."""
    dx = fa.x0_nm - fb.x0_nm
    dy = fa.y0_nm - fb.y0_nm
    d = math.hypot(dx, dy)
    C = np.asarray(fa.covariance)[:2, :2] + np.asarray(fb.covariance)[:2, :2]
    if d == 0.0:
        # direction undefined; take the worst one
        return 0.0, float(math.sqrt(max(np.linalg.eigvalsh(C).max(), 0.0)))
    u = np.array([dx, dy]) / d
    return d, float(math.sqrt(max(u @ C @ u, 0.0)))


# -- polarization -------------------------------------------------------------

def fit_cos2(angles_deg, rates, rate_errs) -> tuple[float, float, float, float]:
    """Weighted linear fit of rate = alpha + beta cos^2(phi)."""
    phi = np.asarray(angles_deg, dtype=float)
    y = np.asarray(rates, dtype=float)
    s = np.asarray(rate_errs, dtype=float)
    if not (phi.shape == y.shape == s.shape):
        raise ModelError("angles, rates and errors must have the same length")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise ModelError("rate errors must be finite and > 0")
    if np.unique(np.round(np.mod(phi, 180.0), 9)).size < 3:
        raise ModelError("need at least 3 distinct angles (mod 180 deg)")
    c2 = np.cos(np.radians(phi)) ** 2
    X = np.stack([np.ones_like(c2), c2], axis=1)
    w = 1.0 / s ** 2
    A = (X * w[:, None]).T @ X
    if np.linalg.matrix_rank(A) < 2:
        raise ModelError("cos^2 regressor is constant over the angles")
    cov = np.linalg.inv(A)
    a, b = cov @ ((X * w[:, None]).T @ y)
    return float(a), float(b), float(math.sqrt(cov[0, 0])), float(math.sqrt(cov[1, 1]))


@dataclass(frozen=True)
class AxesFit:
    angles_deg: np.ndarray
    rates: np.ndarray       # (2, n_angles) brighter emitter first
    rate_errs: np.ndarray
    params: tuple           # per emitter (alpha, beta, sigma_alpha, sigma_beta)


def fit_axes(sw: PolarizationSweep, calib: Detector | None = None,
             bg_cps: float | None = None) -> AxesFit:
    """Separate the two emitter rates at every pump angle and fit cos^2 to each.

    The angles are treated as the pixels of a 1 x n scan, so the same
    calibration as for images applies. The brighter root is emitter A.
    """
    calib = sw.detector if calib is None else calib
    n = sw.angles_deg.size
    g = ScanGrid(0.0, 0.0, 1.0, n, 1, sw.dwell_s)
    sd = ScanData(g, np.array(sw.singles_d1).reshape(1, n), np.array(sw.singles_d2).reshape(1, n),
                  {2: np.array(sw.coincidences).reshape(1, n)}, calib)
    bg = calib.bg_cps if bg_cps is None else bg_cps
    E, V, _ = calibrated_moments(sd, calib, 2, None, bg)
    s1, p2 = E[0, :, 0], E[0, :, 1]
    ia, ib, _ = _pair_roots(s1, p2)
    va, vb = _pair_variance(s1, p2, V[0, :, 0], V[0, :, 1])
    rates = np.stack([ia, ib])
    errs = np.sqrt(np.stack([va, vb]))
    params = tuple(fit_cos2(sw.angles_deg, rates[k], errs[k]) for k in range(2))
    return AxesFit(np.asarray(sw.angles_deg, float), rates, errs, params)


# -- g2 ---------------------------------------------------------------------

@dataclass(frozen=True)
class G2Fit:
    g2_zero: float
    g2_zero_err: float
    tau_a_ns: float
    tau_a_err_ns: float
    plateau_counts: float


def _g2_model(p, tau):
    c, ta = p
    return 1.0 - c * np.exp(-np.abs(tau) / ta)


def _g2_jac(p, tau):
    c, ta = p
    e = np.exp(-np.abs(tau) / ta)
    return np.stack([-e, -c * e * np.abs(tau) / ta ** 2], axis=-1)


def fit_g2(h: G2Histogram) -> G2Fit:
    """Normalise by the outer plateau and fit 1 - C exp(-|tau|/tau_a)."""
    tau = np.asarray(h.tau_ns, dtype=float)
    counts = np.asarray(h.counts, dtype=float)
    if counts.size == 0 or counts.sum() <= 0:
        raise FitError("empty g2 histogram")
    reach = np.abs(tau).max()
    outer = np.abs(tau) >= (1.0 - PLATEAU_FRAC) * reach
    plateau = counts[outer].mean()
    if plateau < PLATEAU_MIN:
        raise FitError(f"g2 plateau averages {plateau:.3g} counts/bin, need {PLATEAU_MIN:g}")
    y = counts / plateau
    w = plateau ** 2 / np.maximum(counts, 1.0)
    c0 = float(np.clip(1.0 - y[np.argmin(np.abs(tau))], 0.0, 1.0))
    area = float(np.sum(1.0 - y) * h.bin_width_ns)
    ta0 = area / (2.0 * c0) if c0 > 0 and area > 0 else reach / 10.0
    ta0 = min(max(ta0, h.bin_width_ns), reach)
    res = levenberg_marquardt(lambda p: _g2_model(p, tau) - y, lambda p: _g2_jac(p, tau),
                              [c0, ta0], w, valid=lambda p: p[1] > 0)
    c, ta = res.params
    if reach < 5.0 * ta and c > 0:
        raise FitError(f"histogram reaches {reach:g} ns, under 5 antibunching times ({ta:.3g} ns)")
    err = np.sqrt(np.maximum(np.diag(res.covariance), 0.0))
    return G2Fit(float(1.0 - c), float(err[0]), float(ta), float(err[1]), float(plateau))


# -- end to end ---------------------------------------------------------------

def fit_images(im: EmitterImages, weighting: str = "propagated") -> list[Gaussian2DFit]:
    """Gaussian fit per label, skipping pixels below the noise floor.

    ``weighting`` is 'poisson' (count statistics of the image itself) or
    'propagated' (variances carried through the reconstruction).
    """
    mask = im.flags != FLAG_BELOW_NOISE
    fits = []
    for k in range(im.n):
        if weighting == "poisson":
            var = None
        elif weighting == "propagated":
            var = im.variances[k]
        else:
            raise ModelError(f"unknown weighting {weighting!r}")
        fits.append(fit_gaussian2d(im.images[k], im.grid, var, mask))
    return fits


def localize(sd: ScanData, calib: Detector, n_emitters: int,
             eta: Mapping[int, float] | None = None, bg_cps: float | None = None,
             weighting: str = "propagated"):
    """Reconstruct, fit every label and measure the distance of labels 0 and 1."""
    if n_emitters < 2:
        raise ModelError("a distance needs at least two emitters")
    im = reconstruct(sd, calib, n_emitters, eta, bg_cps)
    fits = fit_images(im, weighting)
    d, err = estimate_distance(fits[0], fits[1])
    return im, fits, d, err


@dataclass(frozen=True)
class BootstrapResult:
    distances: np.ndarray            # nan where the resample failed
    failures: tuple = ()             # (index, message)

    @property
    def ok(self) -> np.ndarray:
        return self.distances[np.isfinite(self.distances)]

    @property
    def std(self) -> float:
        return float(np.std(self.ok, ddof=1))


def resample(sd: ScanData, seed: int, index: int) -> ScanData:
    """Poisson re-draw of every count, one stream per (seed, index)."""
    key = np.random.SeedSequence([int(seed), BOOT_TAG]).generate_state(2, np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, index]))
    d1 = rng.poisson(np.asarray(sd.singles_d1, float))
    d2 = rng.poisson(np.asarray(sd.singles_d2, float))
    co = {m: rng.poisson(np.asarray(sd.coincidences[m], float)) for m in sd.orders}
    return ScanData(sd.grid, d1, d2, co, sd.detector, sd.pump_angle_deg, sd.seed)


def bootstrap_uncertainty(sd: ScanData, calib: Detector, n_emitters: int, n_resamples: int,
                          seed: int, eta=None, bg_cps=None, weighting: str = "propagated",
                          workers: int = 1) -> BootstrapResult:
    if n_resamples < 2:
        raise ModelError("n_resamples must be >= 2")

    def one(i):
        try:
            return localize(resample(sd, seed, i), calib, n_emitters, eta, bg_cps, weighting)[2], None
        except (ModelError, FitError, ConvergenceError, np.linalg.LinAlgError) as exc:
            return math.nan, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, range(n_resamples)))
    else:
        out = [one(i) for i in range(n_resamples)]
    dist = np.array([d for d, _ in out])
    failures = tuple((i, msg) for i, (_, msg) in enumerate(out) if msg is not None)
    if len(failures) > (1.0 - MIN_SUCCESS) * n_resamples:
        raise FitError(f"{len(failures)} of {n_resamples} bootstrap resamples failed; "
                       f"first: {failures[0][1]}")
    return BootstrapResult(dist, failures)


@dataclass(frozen=True)
class FitReport:
    fits: Sequence[Gaussian2DFit]
    distance_nm: float
    distance_err_nm: float
    distance_err_cov_nm: float
    distance_err_boot_nm: float | None = None
    pol_params: tuple | None = None
    g2: G2Fit | None = None

    def __post_init__(self):
        if not self.distance_nm >= 0 or not self.distance_err_nm >= 0:
            raise ModelError("distance and its error must be >= 0")


def make_report(fits, d, err_cov, boot: BootstrapResult | None = None,
                axes: AxesFit | None = None, g2: G2Fit | None = None) -> FitReport:
    """Combine results; the quoted distance error is the larger of the two estimates."""
    err_boot = boot.std if boot is not None else None
    err = err_cov if err_boot is None else max(err_cov, err_boot)
    return FitReport(tuple(fits), d, err, err_cov, err_boot,
                     axes.params if axes is not None else None, g2)
