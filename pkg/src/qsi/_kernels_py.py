"""Pure-Python reference versions of the compiled kernels.

Semantics must match ``_kernels.pyx`` exactly; the test-suite compares both.
"""
import heapq
import math

import numpy as np

LR_FLOOR = 1e-6
# log-ratio variance below which pixels count as exact
V0 = 1e-6
DIRS = ((0, 1), (0, -1), (1, 0), (-1, 0))


def antibunched_accept(times, uniforms, tau_a):
    """Thin a Poisson candidate train by exponential recovery.

    A candidate at ``t`` survives with probability ``1 - exp(-(t - t_last)/tau_a)``
    where ``t_last`` is the previous surviving photon.
    """
    times = np.asarray(times, dtype=np.float64)
    uniforms = np.asarray(uniforms, dtype=np.float64)
    keep = np.zeros(times.shape[0], dtype=np.uint8)
    last = -math.inf
    for i in range(times.shape[0]):
        t = times[i]
        if uniforms[i] < 1.0 - math.exp(-(t - last) / tau_a):
            keep[i] = 1
            last = t
    return keep


def start_stop_histogram(starts, stops, delay, bin_width, nbins):
    """Single-start TAC emulation.

    The stop channel is shifted by ``delay``. After an accepted start the
    converter waits for the first delayed stop; if it arrives within the range
    ``nbins * bin_width`` its delay is binned. Starts arriving while the
    converter is busy are dropped.
    """
    starts = np.asarray(starts, dtype=np.float64)
    stops = np.asarray(stops, dtype=np.float64)
    counts = np.zeros(nbins, dtype=np.int64)
    span = nbins * bin_width
    n_stop = stops.shape[0]
    j = 0
    busy_until = -math.inf
    accepted = 0
    for i in range(starts.shape[0]):
        t0 = starts[i]
        if t0 < busy_until:
            continue
        accepted += 1
        while j < n_stop and stops[j] + delay < t0:
            j += 1
        if j < n_stop:
            dt = stops[j] + delay - t0
            if dt < span:
                k = int(dt / bin_width)
                if k < nbins:
                    counts[k] += 1
                busy_until = t0 + dt
                continue
        busy_until = t0 + span
    return counts, accepted


WIN = 2


def _plane_predict(py, px, ny, nx, n, done, out_share, wpix, pred):
    """Weighted least-squares plane through labelled shares in a
    (2 WIN + 1)^2 window.

    Returns 1 and fills ``pred`` with the value at the centre, or 0 when the
    labelled pixels are collinear.
    """
    a = [[0.0] * 3 for _ in range(3)]
    u = [[0.0] * 3 for _ in range(3)]
    rhs = [[0.0] * n for _ in range(3)]
    for dy in range(-WIN, WIN + 1):
        qy = py + dy
        if qy < 0 or qy >= ny:
            continue
        for dx in range(-WIN, WIN + 1):
            qx = px + dx
            if qx < 0 or qx >= nx:
                continue
            q = qy * nx + qx
            if not done[q]:
                continue
            v = (1.0, float(dx), float(dy))
            wq = wpix[q]
            for i in range(3):
                for j in range(3):
                    u[i][j] += v[i] * v[j]
                    a[i][j] += wq * v[i] * v[j]
                for k in range(n):
                    rhs[i][k] += wq * v[i] * out_share[q, k]
    # unweighted determinant is an integer for integer offsets: 0 iff collinear
    if _det3(u) < 0.5:
        return 0
    # first row of the inverse via cofactors
    c0 = a[1][1] * a[2][2] - a[1][2] * a[2][1]
    c1 = a[1][2] * a[2][0] - a[1][0] * a[2][2]
    c2 = a[1][0] * a[2][1] - a[1][1] * a[2][0]
    det = a[0][0] * c0 + a[0][1] * c1 + a[0][2] * c2
    for k in range(n):
        pred[k] = (c0 * rhs[0][k] + c1 * rhs[1][k] + c2 * rhs[2][k]) / det
    return 1


def _det3(a):
    return (a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            + a[0][1] * (a[1][2] * a[2][0] - a[1][0] * a[2][2])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]))


def _line_predict(py, px, ny, nx, n, done, out_share, pred):
    """Mean of in-line linear extrapolations (returns 1), else of labelled
    neighbours (returns 0)."""
    cnt = 0
    cnt0 = 0
    pred0 = [0.0] * n
    for k in range(n):
        pred[k] = 0.0
    for dy, dx in DIRS:
        qy, qx = py + dy, px + dx
        if not (0 <= qy < ny and 0 <= qx < nx):
            continue
        q = qy * nx + qx
        if not done[q]:
            continue
        ry, rx = qy + dy, qx + dx
        if 0 <= ry < ny and 0 <= rx < nx and done[ry * nx + rx]:
            rr = ry * nx + rx
            for k in range(n):
                pred[k] += 2.0 * out_share[q, k] - out_share[rr, k]
            cnt += 1
        else:
            for k in range(n):
                pred0[k] += out_share[q, k]
            cnt0 += 1
    if cnt:
        for k in range(n):
            pred[k] /= cnt
        return 1
    for k in range(n):
        pred[k] = pred0[k] / cnt0 if cnt0 else 0.0
    return 0


def _score(p, py, px, ny, nx, perms, done, share, out_share, wpix, pred):
    """Prediction level, decision margin and best permutation for pixel p.

    Levels: 2 plane fit, 1 in-line extrapolation, 0 neighbour copy.
    """
    n = share.shape[1]
    level = 2
    if not _plane_predict(py, px, ny, nx, n, done, out_share, wpix, pred):
        level = _line_predict(py, px, ny, nx, n, done, out_share, pred)
    best_cost = math.inf
    second = math.inf
    best_i = 0
    for i in range(perms.shape[0]):
        cost = 0.0
        for k in range(n):
            d = share[p, perms[i, k]] - pred[k]
            cost += d * d
        if cost < best_cost:
            second = best_cost
            best_cost = cost
            best_i = i
        elif cost < second:
            second = cost
    return level, (second - best_cost) * wpix[p], best_i


def _closest(p, ref, perms, share, out_share):
    """Permutation of p's roots closest to the labelled shares of ``ref``."""
    n = share.shape[1]
    best_cost = math.inf
    best_i = 0
    for i in range(perms.shape[0]):
        cost = 0.0
        for k in range(n):
            d = share[p, perms[i, k]] - out_share[ref, k]
            cost += d * d
        if cost < best_cost:
            best_cost = cost
            best_i = i
    return best_i


def propagate_labels(roots, sigma, active, ny, nx, perms):
    """Best-first flood fill assigning per-pixel roots to emitter labels.

    Labels are followed through centred log-ratios of the roots, which are
    affine in position for identical Gaussian spots. Each frontier pixel gets
    a prediction from its labelled surroundings: a least-squares plane over
    the (2 WIN + 1)^2 window, else a linear extrapolation from two in-line
    neighbours, else the neighbour value. The candidate permutation closest
    to the prediction wins. The frontier pixel with the best prediction level,
    then the largest margin to the runner-up permutation (then the lowest
    index) is decided next, so root crossings are decided last.

    A component is seeded at its active pixel with the widest minimum root
    gap, keeping the given order, so ``perms[0]`` must be the identity.

    Returns the labelled roots and the chosen permutation index per pixel
    (-1 where the pixel was not reached).
    """
    roots = np.asarray(roots, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    active = np.asarray(active, dtype=np.uint8)
    perms = np.asarray(perms, dtype=np.int64)
    npix, n = roots.shape
    out = np.zeros_like(roots)
    out_share = np.zeros_like(roots)
    share = np.zeros((npix, n))
    done = np.zeros(npix, dtype=np.uint8)
    choice = np.full(npix, -1, dtype=np.int64)
    key_level = np.zeros(npix, dtype=np.int64)
    key_margin = np.zeros(npix)
    best_perm = np.zeros(npix, dtype=np.int64)
    wpix = np.zeros(npix)
    pred = np.zeros(n)
    if n > 1:
        gap = np.diff(np.sort(roots, axis=1), axis=1).min(axis=1)
    else:
        gap = np.zeros(npix)
    for p in range(npix):
        tot = 0.0
        for k in range(n):
            tot += roots[p, k]
        v = 0.0
        if tot > 0:
            mean = 0.0
            for k in range(n):
                fl = max(roots[p, k], LR_FLOOR * tot)
                share[p, k] = math.log(fl)
                mean += share[p, k]
                t = sigma[p, k] / fl
                v += t * t
            mean /= n
            for k in range(n):
                share[p, k] -= mean
        wpix[p] = 1.0 / (v + V0)

    heap = []

    def assign(p, i):
        py, px = divmod(p, nx)
        for k in range(n):
            out[p, k] = roots[p, perms[i, k]]
            out_share[p, k] = share[p, perms[i, k]]
        choice[p] = i
        done[p] = 1
        for qy in range(max(py - WIN, 0), min(py + WIN + 1, ny)):
            for qx in range(max(px - WIN, 0), min(px + WIN + 1, nx)):
                q = qy * nx + qx
                if not active[q] or done[q]:
                    continue
                touching = False
                for dy, dx in DIRS:
                    ry, rx = qy + dy, qx + dx
                    if 0 <= ry < ny and 0 <= rx < nx and done[ry * nx + rx]:
                        touching = True
                        break
                if not touching:
                    continue
                lv, mg, bi = _score(q, qy, qx, ny, nx, perms, done, share, out_share, wpix, pred)
                key_level[q] = lv
                key_margin[q] = mg
                best_perm[q] = bi
                heapq.heappush(heap, (-lv, -mg, q))

    while True:
        seed = -1
        best = -1.0
        for p in range(npix):
            if active[p] and not done[p] and gap[p] > best:
                best = gap[p]
                seed = p
        if seed < 0:
            break
        assign(seed, 0)
        # grow the seed to its 3x3 block so every later step has plane support
        sy, sx = divmod(seed, nx)
        for qy in range(max(sy - 1, 0), min(sy + 2, ny)):
            for qx in range(max(sx - 1, 0), min(sx + 2, nx)):
                q = qy * nx + qx
                if active[q] and not done[q]:
                    assign(q, _closest(q, seed, perms, share, out_share))
        while heap:
            lv, mg, p = heapq.heappop(heap)
            # stale entries carry an outdated key
            if done[p] or -lv != key_level[p] or -mg != key_margin[p]:
                continue
            assign(p, best_perm[p])
    return out, choice
