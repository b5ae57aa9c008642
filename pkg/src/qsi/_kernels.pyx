# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the sequential inner loops.

Same signatures and results as ``qsi._kernels_py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

DEF LR_FLOOR = 1e-6
DEF V0 = 1e-6

cnp.import_array()


def antibunched_accept(times, uniforms, double tau_a):
    cdef const double[::1] t = np.ascontiguousarray(times, dtype=np.float64)
    cdef const double[::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], i
    keep_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] keep = keep_arr
    cdef double last = -INFINITY
    with nogil:
        for i in range(n):
            if u[i] < 1.0 - exp(-(t[i] - last) / tau_a):
                keep[i] = 1
                last = t[i]
    return keep_arr


def start_stop_histogram(starts, stops, double delay, double bin_width, Py_ssize_t nbins):
    cdef const double[::1] st = np.ascontiguousarray(starts, dtype=np.float64)
    cdef const double[::1] sp = np.ascontiguousarray(stops, dtype=np.float64)
    counts_arr = np.zeros(nbins, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef double span = nbins * bin_width
    cdef Py_ssize_t n_start = st.shape[0], n_stop = sp.shape[0]
    cdef Py_ssize_t i, j = 0, k
    cdef double t0, dt, busy_until = -INFINITY
    cdef long long accepted = 0
    with nogil:
        for i in range(n_start):
            t0 = st[i]
            if t0 < busy_until:
                continue
            accepted += 1
            while j < n_stop and sp[j] + delay < t0:
                j += 1
            if j < n_stop:
                dt = sp[j] + delay - t0
                if dt < span:
                    k = <Py_ssize_t>(dt / bin_width)
                    if k < nbins:
                        counts[k] += 1
                    busy_until = t0 + dt
                    continue
            busy_until = t0 + span
    return counts_arr, accepted


DEF WIN = 2


cdef inline bint _before(Py_ssize_t a, Py_ssize_t b, const long long[::1] level,
                         const double[::1] margin) nogil:
    # best prediction level, then largest margin, then lowest index
    if level[a] != level[b]:
        return level[a] > level[b]
    if margin[a] != margin[b]:
        return margin[a] > margin[b]
    return a < b


cdef void _sift_up(long long[::1] heap, long long[::1] pos, Py_ssize_t i,
                   const long long[::1] level, const double[::1] margin) nogil:
    cdef long long v = heap[i]
    cdef Py_ssize_t parent
    while i > 0:
        parent = (i - 1) // 2
        if _before(v, heap[parent], level, margin):
            heap[i] = heap[parent]
            pos[heap[i]] = i
            i = parent
        else:
            break
    heap[i] = v
    pos[v] = i


cdef void _sift_down(long long[::1] heap, long long[::1] pos, Py_ssize_t i, Py_ssize_t size,
                     const long long[::1] level, const double[::1] margin) nogil:
    cdef long long v = heap[i]
    cdef Py_ssize_t c
    while True:
        c = 2 * i + 1
        if c >= size:
            break
        if c + 1 < size and _before(heap[c + 1], heap[c], level, margin):
            c += 1
        if _before(heap[c], v, level, margin):
            heap[i] = heap[c]
            pos[heap[i]] = i
            i = c
        else:
            break
    heap[i] = v
    pos[v] = i


cdef inline double _det3(double m[3][3]) nogil:
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            + m[0][1] * (m[1][2] * m[2][0] - m[1][0] * m[2][2])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


cdef int _plane_predict(Py_ssize_t py, Py_ssize_t px, Py_ssize_t ny, Py_ssize_t nx,
                        Py_ssize_t n, const unsigned char[::1] done,
                        const double[:, ::1] out_share, const double[::1] wpix,
                        double[:, ::1] rhs, double[::1] pred) nogil:
    cdef double a[3][3]
    cdef double u[3][3]
    cdef double v[3]
    cdef Py_ssize_t i, j, k, dy, dx, qy, qx, q
    cdef double c0, c1, c2, det, wq
    for i in range(3):
        for j in range(3):
            a[i][j] = 0.0
            u[i][j] = 0.0
        for k in range(n):
            rhs[i, k] = 0.0
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
            v[0] = 1.0
            v[1] = <double>dx
            v[2] = <double>dy
            wq = wpix[q]
            for i in range(3):
                for j in range(3):
                    u[i][j] += v[i] * v[j]
                    a[i][j] += wq * v[i] * v[j]
                for k in range(n):
                    rhs[i, k] += wq * v[i] * out_share[q, k]
    # unweighted determinant is an integer for integer offsets: 0 iff collinear
    if _det3(u) < 0.5:
        return 0
    c0 = a[1][1] * a[2][2] - a[1][2] * a[2][1]
    c1 = a[1][2] * a[2][0] - a[1][0] * a[2][2]
    c2 = a[1][0] * a[2][1] - a[1][1] * a[2][0]
    det = a[0][0] * c0 + a[0][1] * c1 + a[0][2] * c2
    for k in range(n):
        pred[k] = (c0 * rhs[0, k] + c1 * rhs[1, k] + c2 * rhs[2, k]) / det
    return 1


cdef int _line_predict(Py_ssize_t py, Py_ssize_t px, Py_ssize_t ny, Py_ssize_t nx,
                       Py_ssize_t n, const unsigned char[::1] done,
                       const double[:, ::1] out_share, double[::1] pred0,
                       double[::1] pred) nogil:
    cdef int ddy[4]
    cdef int ddx[4]
    ddy[0] = 0; ddx[0] = 1
    ddy[1] = 0; ddx[1] = -1
    ddy[2] = 1; ddx[2] = 0
    ddy[3] = -1; ddx[3] = 0
    cdef int cnt = 0, cnt0 = 0, d
    cdef Py_ssize_t k, qy, qx, q, ry, rx, rr
    for k in range(n):
        pred[k] = 0.0
        pred0[k] = 0.0
    for d in range(4):
        qy = py + ddy[d]
        qx = px + ddx[d]
        if qy < 0 or qy >= ny or qx < 0 or qx >= nx:
            continue
        q = qy * nx + qx
        if not done[q]:
            continue
        ry = qy + ddy[d]
        rx = qx + ddx[d]
        if ry >= 0 and ry < ny and rx >= 0 and rx < nx and done[ry * nx + rx]:
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


cdef Py_ssize_t _closest(Py_ssize_t p, Py_ssize_t ref, const long long[:, ::1] pm,
                         const double[:, ::1] share, const double[:, ::1] out_share) nogil:
    cdef Py_ssize_t i, k, n = share.shape[1], best_i = 0
    cdef double cost, diff, best_cost = INFINITY
    for i in range(pm.shape[0]):
        cost = 0.0
        for k in range(n):
            diff = share[p, pm[i, k]] - out_share[ref, k]
            cost += diff * diff
        if cost < best_cost:
            best_cost = cost
            best_i = i
    return best_i


cdef void _assign(Py_ssize_t p, Py_ssize_t bi, Py_ssize_t ny, Py_ssize_t nx,
                  const double[:, ::1] r, const double[:, ::1] share,
                  const unsigned char[::1] act, const long long[:, ::1] pm,
                  double[:, ::1] out, double[:, ::1] out_share, long long[::1] choice,
                  unsigned char[::1] done, const double[::1] wpix,
                  long long[::1] level, double[::1] margin, long long[::1] best_perm,
                  long long[::1] heap, long long[::1] pos, Py_ssize_t* size,
                  double[:, ::1] rhs, double[::1] pred0, double[::1] pred) nogil:
    """Label p with permutation bi, then rescore the frontier around it."""
    cdef int ddy[4]
    cdef int ddx[4]
    ddy[0] = 0; ddx[0] = 1
    ddy[1] = 0; ddx[1] = -1
    ddy[2] = 1; ddx[2] = 0
    ddy[3] = -1; ddx[3] = 0
    cdef Py_ssize_t n = r.shape[1], nperm = pm.shape[0]
    cdef Py_ssize_t py = p // nx, px = p % nx, qy, qx, q, ry, rx, k, i, d
    cdef Py_ssize_t y0 = py - WIN if py >= WIN else 0
    cdef Py_ssize_t y1 = py + WIN + 1 if py + WIN + 1 < ny else ny
    cdef Py_ssize_t x0 = px - WIN if px >= WIN else 0
    cdef Py_ssize_t x1 = px + WIN + 1 if px + WIN + 1 < nx else nx
    cdef int lv
    cdef bint touching
    cdef double cost, diff, best_cost, second
    for k in range(n):
        out[p, k] = r[p, pm[bi, k]]
        out_share[p, k] = share[p, pm[bi, k]]
    choice[p] = bi
    done[p] = 1
    for qy in range(y0, y1):
        for qx in range(x0, x1):
            q = qy * nx + qx
            if not act[q] or done[q]:
                continue
            touching = False
            for d in range(4):
                ry = qy + ddy[d]
                rx = qx + ddx[d]
                if ry >= 0 and ry < ny and rx >= 0 and rx < nx and done[ry * nx + rx]:
                    touching = True
                    break
            if not touching:
                continue
            lv = 2
            if not _plane_predict(qy, qx, ny, nx, n, done, out_share, wpix, rhs, pred):
                lv = _line_predict(qy, qx, ny, nx, n, done, out_share, pred0, pred)
            best_cost = INFINITY
            second = INFINITY
            best_perm[q] = 0
            for i in range(nperm):
                cost = 0.0
                for k in range(n):
                    diff = share[q, pm[i, k]] - pred[k]
                    cost += diff * diff
                if cost < best_cost:
                    second = best_cost
                    best_cost = cost
                    best_perm[q] = i
                elif cost < second:
                    second = cost
            level[q] = lv
            margin[q] = (second - best_cost) * wpix[q]
            if pos[q] < 0:
                heap[size[0]] = q
                pos[q] = size[0]
                size[0] += 1
            # a key can move either way
            _sift_up(heap, pos, pos[q], level, margin)
            _sift_down(heap, pos, pos[q], size[0], level, margin)


def propagate_labels(roots, sigma, active, Py_ssize_t ny, Py_ssize_t nx, perms):
    cdef const double[:, ::1] r = np.ascontiguousarray(roots, dtype=np.float64)
    cdef const double[:, ::1] sg = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef const unsigned char[::1] act = np.ascontiguousarray(active, dtype=np.uint8)
    cdef const long long[:, ::1] pm = np.ascontiguousarray(perms, dtype=np.int64)
    cdef Py_ssize_t npix = r.shape[0], n = r.shape[1]
    out_arr = np.zeros((npix, n), dtype=np.float64)
    choice_arr = np.full(npix, -1, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long long[::1] choice = choice_arr
    cdef double[:, ::1] share = np.zeros((npix, n), dtype=np.float64)
    cdef double[:, ::1] out_share = np.zeros((npix, n), dtype=np.float64)
    cdef unsigned char[::1] done = np.zeros(npix, dtype=np.uint8)
    cdef long long[::1] level = np.zeros(max(npix, 1), dtype=np.int64)
    cdef double[::1] margin = np.zeros(max(npix, 1), dtype=np.float64)
    cdef long long[::1] best_perm = np.zeros(max(npix, 1), dtype=np.int64)
    cdef long long[::1] heap = np.zeros(max(npix, 1), dtype=np.int64)
    cdef long long[::1] pos = np.full(max(npix, 1), -1, dtype=np.int64)
    cdef double[::1] gap = np.zeros(max(npix, 1), dtype=np.float64)
    cdef double[::1] wpix = np.zeros(max(npix, 1), dtype=np.float64)
    cdef double[::1] pred = np.zeros(max(n, 1), dtype=np.float64)
    cdef double[::1] pred0 = np.zeros(max(n, 1), dtype=np.float64)
    cdef double[:, ::1] rhs = np.zeros((3, max(n, 1)), dtype=np.float64)
    cdef Py_ssize_t p, q, seed, sy, sx, qy, qx, k, i, size = 0
    cdef double best, g, diff, tot, mean, fl, v, t

    with nogil:
        for p in range(npix):
            # smallest pairwise root gap; O(n^2) is fine for the few emitters we solve
            g = INFINITY if n > 1 else 0.0
            for k in range(n):
                for i in range(k + 1, n):
                    diff = r[p, k] - r[p, i]
                    if diff < 0:
                        diff = -diff
                    if diff < g:
                        g = diff
            gap[p] = g
            tot = 0.0
            for k in range(n):
                tot += r[p, k]
            v = 0.0
            if tot > 0:
                mean = 0.0
                for k in range(n):
                    fl = r[p, k]
                    if LR_FLOOR * tot > fl:
                        fl = LR_FLOOR * tot
                    share[p, k] = log(fl)
                    mean += share[p, k]
                    t = sg[p, k] / fl
                    v += t * t
                mean /= n
                for k in range(n):
                    share[p, k] -= mean
            wpix[p] = 1.0 / (v + V0)

        while True:
            seed = -1
            best = -1.0
            for p in range(npix):
                if act[p] and not done[p] and gap[p] > best:
                    best = gap[p]
                    seed = p
            if seed < 0:
                break
            _assign(seed, 0, ny, nx, r, share, act, pm, out, out_share, choice, done, wpix,
                    level, margin, best_perm, heap, pos, &size, rhs, pred0, pred)
            # grow the seed to its 3x3 block so every later step has plane support
            sy = seed // nx
            sx = seed % nx
            for qy in range(sy - 1 if sy > 0 else 0, sy + 2 if sy + 2 < ny else ny):
                for qx in range(sx - 1 if sx > 0 else 0, sx + 2 if sx + 2 < nx else nx):
                    q = qy * nx + qx
                    if act[q] and not done[q]:
                        _assign(q, _closest(q, seed, pm, share, out_share), ny, nx, r, share,
                                act, pm, out, out_share, choice, done, wpix, level, margin,
                                best_perm, heap, pos, &size, rhs, pred0, pred)
            while size > 0:
                p = heap[0]
                pos[p] = -1
                size -= 1
                if size > 0:
                    heap[0] = heap[size]
                    pos[heap[0]] = 0
                    _sift_down(heap, pos, 0, size, level, margin)
                if done[p]:
                    continue
                _assign(p, best_perm[p], ny, nx, r, share, act, pm, out, out_share, choice,
                        done, wpix, level, margin, best_perm, heap, pos, &size, rhs, pred0, pred)
    return out_arr, choice_arr
