"""Per-pixel unmixing of singles and coincidence images into emitter images.

At each pixel the background-subtracted singles rate is e1 of the emitter
rates and the calibrated m-photon rate is e_m. The emitter rates are the roots
of the polynomial with those elementary symmetric coefficients. Roots carry no
identity, so a best-first pass over the grid assigns them to labels.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import kernels
from .model import Detector, ModelError, elementary_symmetric, eta_2, nominal_eta
from .simulate import ScanData

FLAG_OK = 0
FLAG_CLAMPED = 1
FLAG_BELOW_NOISE = 2
FLAG_NAMES = {FLAG_OK: "ok", FLAG_CLAMPED: "clamped_discriminant", FLAG_BELOW_NOISE: "below_noise_floor"}

# coincidence counts below this multiple of the accidental floor are not trusted;
# orders above 2 have no accidental model and use one count as the floor
NOISE_FLOOR_FACTOR = 3.0
REFINE_ITER = 50
VEE_ANGLES = 180
VEE_OFFSETS = 121


@dataclass(frozen=True)
class EmitterImages:
    grid: object
    images: np.ndarray      # (n_emitters, ny, nx), counts/s
    flags: np.ndarray       # (ny, nx)
    variances: np.ndarray   # (n_emitters, ny, nx), inf where flagged
    singles: np.ndarray     # background-subtracted singles rate the images sum to

    @property
    def n(self) -> int:
        return self.images.shape[0]


def estimate_background(sd: ScanData) -> float:
    """Mean total singles rate of the dimmest 10% of pixels."""
    rate = (np.asarray(sd.singles_d1, float) + sd.singles_d2).ravel() / sd.grid.dwell_s
    k = max(1, rate.size // 10)
    return float(np.partition(rate, k - 1)[:k].mean())


def subtract_background(sd: ScanData, bg_cps: float | None = None) -> np.ndarray:
    if bg_cps is None:
        bg_cps = estimate_background(sd)
    if bg_cps < 0:
        raise ModelError("bg_cps must be >= 0")
    rate = (np.asarray(sd.singles_d1, float) + sd.singles_d2) / sd.grid.dwell_s
    return np.maximum(rate - bg_cps, 0.0)


def _pair_roots(s1, p2):
    s1 = np.asarray(s1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    disc = s1 * s1 - 4.0 * p2
    clamped = disc < 0
    q = np.sqrt(np.where(clamped, 0.0, disc))
    big = 0.5 * (s1 + q)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        small = np.where(big > 0, p2 / big, 0.0)
    # rounding at a double root can push the small root past s1/2
    small = np.minimum(small, 0.5 * s1)
    small = np.where(clamped, 0.5 * s1, small)
    return s1 - small, small, clamped


def solve_pair(s1: float, p2: float) -> tuple[float, float, str]:
    """Rates (larger, smaller) with sum ``s1`` and product ``p2``.

    A negative discriminant means the coincidence estimate is noisier than the
    singles; the pair collapses to ``s1/2`` each and is flagged.
    """
    if not (s1 >= 0 and p2 >= 0):
        raise ModelError(f"solve_pair needs nonnegative inputs, got s1={s1}, p2={p2}")
    ia, ib, clamped = _pair_roots(s1, p2)
    return float(ia), float(ib), FLAG_NAMES[FLAG_CLAMPED if clamped else FLAG_OK]


def _newton_polish(r, c, iters=4):
    """Refine roots of the scaled symmetric system e_k(r) = c_k."""
    n = r.size
    best = r.copy()
    best_res = _sym_residual(best, c)
    for _ in range(iters):
        if best_res == 0.0:
            break
        F = elementary_symmetric(best)[1:] - c
        J = np.empty((n, n))
        for j in range(n):
            J[:, j] = elementary_symmetric(np.delete(best, j))[:n]
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        trial = best - step
        res = _sym_residual(trial, c)
        if not res < best_res:
            break
        best, best_res = trial, res
    return best, best_res


def _sym_residual(r, c):
    F = elementary_symmetric(r)[1:] - c
    return float(np.max(np.abs(F) / np.maximum(np.abs(c), 1e-300)))


def _solve_scaled(c):
    """Roots of u^N - c1 u^(N-1) + ... with c1 == 1. Returns (roots, clamped)."""
    n = c.size
    if n == 1:
        return np.array([c[0]]), False
    coeffs = np.concatenate(([1.0], c * (-1.0) ** np.arange(1, n + 1)))
    z = np.roots(coeffs)
    if z.size < n:  # trailing zero coefficients drop roots
        z = np.concatenate((z, np.zeros(n - z.size)))
    r = np.sort(z.real)[::-1]
    clamped = False
    if np.any(np.abs(z.imag) > 1e-12):
        r, res = _newton_polish(r, c)
        if res > 1e-10 or np.any(r < 0):
            r = np.sort(z.real)[::-1]
            clamped = True
    if np.any(r < 0):
        total = r.sum()
        r = np.maximum(r, 0.0)
        k = np.argmax(r)
        r[k] += total - r.sum()
        if r[k] < 0:
            # the largest root cannot absorb the deficit; rescale the rest instead
            r[k] = 0.0
            r *= total / r.sum()
        clamped = True
    if not clamped:
        r, _ = _newton_polish(r, c)
    return np.sort(r)[::-1], clamped


def solve_symmetric(e) -> tuple[np.ndarray, str]:
    """Nonnegative rates whose elementary symmetric values are ``e1..eN``.

    Complex-conjugate pairs are replaced by their real part and negative roots
    are clamped to zero with the largest root absorbing the difference, so the
    sum e1 is always preserved. Either repair sets the flag.
    """
    e = np.asarray(e, dtype=float)
    if e.ndim != 1 or e.size < 1:
        raise ModelError("solve_symmetric needs a 1-D sequence e1..eN")
    if not np.all(np.isfinite(e)):
        raise ModelError("solve_symmetric got non-finite input")
    roots, clamped = _solve_symmetric_one(e)
    return roots, FLAG_NAMES[FLAG_CLAMPED if clamped else FLAG_OK]


def _solve_symmetric_one(e):
    n = e.size
    e1 = e[0]
    if e1 <= 0:
        return np.zeros(n), bool(np.any(e[1:] != 0))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        c = e / e1 ** np.arange(1, n + 1)
    if not np.all(np.isfinite(c)):
        # higher orders out of all proportion to e1: no real solution near it
        return np.full(n, e1 / n), True
    r, clamped = _solve_scaled(c)
    return r * e1, clamped


def _pair_variance(s1, p2, var_s1, var_p2):
    sd_p2 = np.sqrt(var_p2)
    disc = np.maximum(s1 * s1 - 4.0 * p2, 4.0 * sd_p2)
    q = np.sqrt(np.maximum(disc, 1e-300))
    da_ds, da_dp = 0.5 * (1.0 + s1 / q), -1.0 / q
    db_ds, db_dp = 0.5 * (1.0 - s1 / q), 1.0 / q
    va = da_ds ** 2 * var_s1 + da_dp ** 2 * var_p2
    vb = db_ds ** 2 * var_s1 + db_dp ** 2 * var_p2
    return va, vb


def _roots_variance(roots, var_e):
    """First-order variance of roots given independent variances of e1..eN."""
    npix, n = roots.shape
    out = np.empty_like(roots)
    for p in range(npix):
        r = roots[p]
        J = np.empty((n, n))
        for j in range(n):
            J[:, j] = elementary_symmetric(np.delete(r, j))[:n]
        Jinv = np.linalg.pinv(J, rcond=1e-12)
        out[p] = (Jinv ** 2) @ var_e[p]
    return out


def calibrated_moments(sd: ScanData, calib: Detector, n_emitters: int,
                       eta: Mapping[int, float] | None = None, bg_cps: float | None = None):
    """Per-pixel estimates of e1..eN, their variances and the noise-floor mask."""
    g = sd.grid
    dwell = g.dwell_s
    bg = calib.bg_cps if bg_cps is None else bg_cps
    d1 = np.asarray(sd.singles_d1, dtype=float)
    d2 = np.asarray(sd.singles_d2, dtype=float)
    r1, r2 = d1 / dwell, d2 / dwell
    s1 = subtract_background(sd, bg)
    moments = [s1]
    variances = [(d1 + d2) / dwell ** 2]
    below = np.zeros(g.shape, dtype=bool)
    for m in range(2, n_emitters + 1):
        if m not in sd.coincidences:
            raise ModelError(f"scan data lacks coincidence order {m}")
        counts = np.asarray(sd.coincidences[m], dtype=float)
        rate = counts / dwell
        if m == 2:
            tot1, tot2 = r1.sum(), r2.sum()
            eta_m = eta_2(calib, tot1, tot2) if tot1 > 0 and tot2 > 0 else nominal_eta(calib, 2)
            scale = eta_m * (1.0 + calib.k_bunch) * calib.r * calib.t * calib.capture_frac
            # r1 r2 - (r1 - t bg)(r2 - r bg): pairs involving a background photon
            acc = 2.0 * calib.tw_s * (calib.r * bg * r1 + calib.t * bg * r2 - calib.r * calib.t * bg * bg)
            acc = np.maximum(acc, 0.0)
            below |= counts < NOISE_FLOOR_FACTOR * acc * dwell
            rate = rate - acc
        else:
            eta_m = eta[m] if eta and m in eta else nominal_eta(calib, m)
            scale = eta_m * calib.capture_frac
            # the top orders fix the faintest roots; too few counts leave them undetermined
            below |= counts < NOISE_FLOOR_FACTOR
        if not eta_m > 0:
            raise ModelError(f"detection constant for order {m} must be > 0, got {eta_m}")
        moments.append(np.maximum(rate, 0.0) / scale)
        variances.append(np.maximum(counts, 1.0) / (dwell * scale) ** 2)
    return np.stack(moments, -1), np.stack(variances, -1), below


def _log_ratios(roots, sigma):
    """Centred log roots and plane-fit weights.

    Weights are the inverse log-ratio variance. Pixels with a root below its
    own noise (or below LR_FLOOR of the total) get weight 0, since there the
    ratio is a bound rather than a measurement.
    """
    tot = roots.sum(axis=1, keepdims=True)
    fl = np.maximum(roots, kernels.LR_FLOOR * tot)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(fl)
        share = lr - lr.mean(axis=1, keepdims=True)
        v = np.sum((sigma / fl) ** 2, axis=1)
    bad = np.any((roots < sigma) | (fl > roots), axis=1) | ~np.isfinite(share).all(axis=1)
    share[~np.isfinite(share)] = 0.0
    w = np.where(bad, 0.0, 1.0 / (v + kernels.V0))
    return share, w


def _plane_design(ny, nx):
    iy, ix = np.divmod(np.arange(ny * nx), nx)
    return np.stack([np.ones(ny * nx), ix - 0.5 * (nx - 1), iy - 0.5 * (ny - 1)], axis=1)


def _refine_labels(share, w, live, D, perms, choice, max_iter=REFINE_ITER):
    """Alternate global plane fits of each label's log ratios and per-pixel
    reassignment until the labels stop changing. Returns (choice, cost).

    For identical Gaussian spots the centred log rates are exactly affine in
    position, so one plane per label describes the whole grid. This repairs
    the local fill where noise makes crossings ambiguous.
    """
    fit = live[w[live] > 0]
    if fit.size < 3 or np.linalg.matrix_rank(D[fit]) < 3:
        return choice, np.inf
    sw = np.sqrt(w[fit])[:, None]
    cand = share[:, perms]                                   # (npix, nperm, n)
    choice = choice.copy()
    for _ in range(max_iter):
        lab = np.take_along_axis(share, perms[choice], axis=1)
        coef = np.linalg.lstsq(D[fit] * sw, lab[fit] * sw, rcond=None)[0]
        cost = np.sum((cand - (D @ coef)[:, None, :]) ** 2, axis=2)
        new = np.argmin(cost, axis=1)
        if np.array_equal(new[live], choice[live]):
            break
        choice[live] = new[live]
    lab = np.take_along_axis(share, perms[choice], axis=1)
    total = float(np.sum(w[fit] * np.sum((lab[fit] - D[fit] @ coef) ** 2, axis=1)))
    return choice, total


def _vee_choice(share, w, live, D, n_angles=VEE_ANGLES, n_offsets=VEE_OFFSETS):
    """Label-free start for two emitters.

    The log ratio of the two rates is affine, so its magnitude (which needs
    no labels) is a V: G |t - t0| along some direction t. A grid search over
    the direction and the crossing t0, with G in closed form, gives the sign
    of the ratio at every pixel.
    """
    fit = live[w[live] > 0]
    if fit.size < 3:
        return None
    u = np.abs(share[fit, 0] - share[fit, 1])
    wf = w[fit]
    best = (np.inf, None)
    for th in np.linspace(0.0, np.pi, n_angles, endpoint=False):
        t = D[fit, 1] * np.cos(th) + D[fit, 2] * np.sin(th)
        span = np.ptp(t) + 1.0
        t0 = np.linspace(t.min() - span, t.max() + span, n_offsets)
        a = np.abs(t[None, :] - t0[:, None])
        saa = a * a @ wf
        sau = a @ (wf * u)
        g = np.where(saa > 0, sau / np.where(saa > 0, saa, 1.0), 0.0)
        cost = -g * sau
        i = int(np.argmin(cost))
        if cost[i] < best[0]:
            best = (cost[i], (th, t0[i]))
    th, t0 = best[1]
    t = D[:, 1] * np.cos(th) + D[:, 2] * np.sin(th)
    # choice 0 keeps the larger root first, which is right on the t > t0 side
    return np.where(t >= t0, 0, 1).astype(np.int64)


def _assign_labels(roots, sigma, active, ny, nx, perms):
    """Local fill, then global refinement from the fill and (two emitters)
    from a label-free start; the lower-cost labelling wins."""
    out, choice = kernels.propagate_labels(roots, sigma, active.astype(np.uint8), ny, nx, perms)
    share, w = _log_ratios(roots, sigma)
    D = _plane_design(ny, nx)
    live = np.flatnonzero(active & (choice >= 0))
    best, cost = _refine_labels(share, w, live, D, perms, choice)
    if roots.shape[1] == 2:
        start = _vee_choice(share, w, live, D)
        if start is not None:
            alt = choice.copy()
            alt[live] = start[live]
            alt, alt_cost = _refine_labels(share, w, live, D, perms, alt)
            if alt_cost < cost:
                best, cost = alt, alt_cost
    # labels are only defined up to a global permutation; keep the fill's
    # convention that the seed pixel lists its roots in the given order
    if live.size == 0:
        return best
    srt = np.sort(roots[live], axis=1)
    gap = np.diff(srt, axis=1).min(axis=1) if roots.shape[1] > 1 else np.zeros(live.size)
    seed = live[np.argmax(gap)]
    if best[seed] != 0:
        inv = np.argsort(perms[best[seed]])
        remap = {tuple(pm): i for i, pm in enumerate(perms.tolist())}
        best = best.copy()
        best[live] = [remap[tuple(perms[c][inv])] for c in best[live]]
    return best


def _fill_below_noise(out, done, flat_s1, n, ny, nx):
    """Give unlabelled pixels the label split of their nearest labelled pixel."""
    ratio = np.zeros_like(out)
    sums = out.sum(axis=1)
    even = np.full(n, 1.0 / n)
    reached = done.copy()
    queue = deque()
    for p in np.flatnonzero(reached):
        ratio[p] = out[p] / sums[p] if sums[p] > 0 else even
        queue.append(p)
    if not queue:
        ratio[:] = 0.0
        ratio[:, 0] = 1.0
    while queue:
        p = queue.popleft()
        py, px = divmod(p, nx)
        for qy, qx in ((py, px + 1), (py, px - 1), (py + 1, px), (py - 1, px)):
            if 0 <= qy < ny and 0 <= qx < nx:
                q = qy * nx + qx
                if not reached[q]:
                    reached[q] = True
                    ratio[q] = ratio[p]
                    queue.append(q)
    fill = ~done
    out[fill] = flat_s1[fill, None] * ratio[fill]
    return out


def reconstruct(sd: ScanData, calib: Detector, n_emitters: int,
                eta: Mapping[int, float] | None = None, bg_cps: float | None = None) -> EmitterImages:
    if n_emitters < 1:
        raise ModelError("n_emitters must be >= 1")
    g = sd.grid
    ny, nx = g.shape
    E, var_e, below = calibrated_moments(sd, calib, n_emitters, eta, bg_cps)
    s1 = E[..., 0]
    npix = ny * nx
    flags = np.full(npix, FLAG_OK, dtype=np.int8)
    Ef = E.reshape(npix, n_emitters)
    Vf = var_e.reshape(npix, n_emitters)

    if n_emitters == 1:
        images = s1[None].copy()
        variances = var_e[..., 0][None].copy()
        return EmitterImages(g, images, flags.reshape(g.shape), variances, s1)

    if n_emitters == 2:
        ia, ib, clamped = _pair_roots(Ef[:, 0], Ef[:, 1])
        roots = np.stack([ia, ib], axis=1)
        va, vb = _pair_variance(Ef[:, 0], Ef[:, 1], Vf[:, 0], Vf[:, 1])
        rvar = np.stack([va, vb], axis=1)
    else:
        roots = np.empty((npix, n_emitters))
        clamped = np.zeros(npix, dtype=bool)
        for p in range(npix):
            roots[p], clamped[p] = _solve_symmetric_one(Ef[p])
        rvar = _roots_variance(roots, Vf)
    flags[clamped] = FLAG_CLAMPED
    flags[below.ravel()] = FLAG_BELOW_NOISE

    perms = np.array(list(itertools.permutations(range(n_emitters))), dtype=np.int64)
    active = (flags != FLAG_BELOW_NOISE).astype(np.uint8)
    sigma = np.sqrt(rvar)
    bad = ~np.isfinite(sigma)
    sigma[bad] = np.broadcast_to(Ef[:, :1], sigma.shape)[bad]
    choice = _assign_labels(roots, sigma, active.astype(bool), ny, nx, perms)
    out = np.take_along_axis(roots, perms[np.maximum(choice, 0)], axis=1)
    done = choice >= 0
    var_out = np.take_along_axis(rvar, perms[np.maximum(choice, 0)], axis=1)
    out = _fill_below_noise(out, done, s1.ravel(), n_emitters, ny, nx)
    var_out[~done] = np.inf

    images = out.T.reshape(n_emitters, ny, nx)
    variances = var_out.T.reshape(n_emitters, ny, nx)
    return EmitterImages(g, images, flags.reshape(g.shape), variances, s1)

