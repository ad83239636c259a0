# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: KD-tree queries, greedy density selection, tile blending.

Mirrors ``npr._pykernels`` exactly (same arguments, same floating-point
expression order). Per-query and per-tile loops run under OpenMP ``prange``;
results do not depend on the thread count because every output element is
produced by exactly one iteration with a fixed internal order.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport sqrt, exp, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline double _box_gap(const double[:, ::1] lo, const double[:, ::1] hi, i64 node,
                            double qx, double qy, double qz) noexcept nogil:
    cdef double gx = 0.0, gy = 0.0, gz = 0.0
    if qx < lo[node, 0]:
        gx = lo[node, 0] - qx
    elif qx > hi[node, 0]:
        gx = qx - hi[node, 0]
    if qy < lo[node, 1]:
        gy = lo[node, 1] - qy
    elif qy > hi[node, 1]:
        gy = qy - hi[node, 1]
    if qz < lo[node, 2]:
        gz = lo[node, 2] - qz
    elif qz > hi[node, 2]:
        gz = qz - hi[node, 2]
    return sqrt(gx * gx + gy * gy + gz * gz)


cdef inline bint _less(double d1, i64 i1, double d2, i64 i2) noexcept nogil:
    return d1 < d2 or (d1 == d2 and i1 < i2)


cdef void _knn_one(const double[:, ::1] pts, const i64[::1] perm, const i64[::1] nstart,
                   const i64[::1] nend, const i64[::1] nleft, const i64[::1] nright,
                   const double[:, ::1] lo, const double[:, ::1] hi,
                   double qx, double qy, double qz, int k, double radius,
                   i64* out_i, double* out_d, i64* out_n, i64* stack) noexcept nogil:
    cdef i64 sp = 0, node, left, right, j, idx
    cdef int n = 0, m
    cdef double gap, gl, gr, dx, dy, dz, d
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        gap = _box_gap(lo, hi, node, qx, qy, qz)
        if gap > radius or (n == k and gap > out_d[k - 1]):
            continue
        left = nleft[node]
        if left < 0:
            for j in range(nstart[node], nend[node]):
                dx = pts[j, 0] - qx
                dy = pts[j, 1] - qy
                dz = pts[j, 2] - qz
                d = sqrt(dx * dx + dy * dy + dz * dz)
                if d > radius:
                    continue
                idx = perm[j]
                if n == k and not _less(d, idx, out_d[k - 1], out_i[k - 1]):
                    continue
                # insertion into the sorted hit list
                m = n if n < k else k - 1
                while m > 0 and _less(d, idx, out_d[m - 1], out_i[m - 1]):
                    out_d[m] = out_d[m - 1]
                    out_i[m] = out_i[m - 1]
                    m -= 1
                out_d[m] = d
                out_i[m] = idx
                if n < k:
                    n += 1
            continue
        right = nright[node]
        gl = _box_gap(lo, hi, left, qx, qy, qz)
        gr = _box_gap(lo, hi, right, qx, qy, qz)
        if gl <= gr:
            stack[sp] = right
            stack[sp + 1] = left
        else:
            stack[sp] = left
            stack[sp + 1] = right
        sp += 2
    out_n[0] = n


def knn(const double[:, ::1] pts, const i64[::1] perm, const i64[::1] nstart, const i64[::1] nend,
        const i64[::1] nleft, const i64[::1] nright, const double[:, ::1] nlo, const double[:, ::1] nhi,
        const double[:, ::1] queries, int k, double radius, int threads=1):
    cdef Py_ssize_t nq = queries.shape[0], qi
    out_i_arr = np.full((nq, k), -1, np.int64)
    out_d_arr = np.full((nq, k), np.inf)
    out_n_arr = np.zeros(nq, np.int64)
    cdef i64[:, ::1] out_i = out_i_arr
    cdef double[:, ::1] out_d = out_d_arr
    cdef i64[::1] out_n = out_n_arr
    cdef Py_ssize_t depth = 2 * (nleft.shape[0] + 2)
    cdef i64* stack
    if nq == 0:
        return out_i_arr, out_d_arr, out_n_arr
    with nogil:
        for qi in prange(nq, num_threads=threads, schedule="dynamic", chunksize=64):
            stack = <i64*> malloc(depth * sizeof(i64))
            _knn_one(pts, perm, nstart, nend, nleft, nright, nlo, nhi,
                     queries[qi, 0], queries[qi, 1], queries[qi, 2], k, radius,
                     &out_i[qi, 0], &out_d[qi, 0], &out_n[qi], stack)
            free(stack)
    return out_i_arr, out_d_arr, out_n_arr


cdef i64 _ball_count(const double[:, ::1] pts, const i64[::1] nstart, const i64[::1] nend,
                     const i64[::1] nleft, const i64[::1] nright,
                     const double[:, ::1] lo, const double[:, ::1] hi,
                     double qx, double qy, double qz, double radius,
                     i64* stack, i64* out_j) noexcept nogil:
    """Counts points within radius; when out_j is not NULL also writes their slots."""
    cdef i64 sp = 1, node, left, j, n = 0
    cdef double dx, dy, dz
    stack[0] = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_gap(lo, hi, node, qx, qy, qz) > radius:
            continue
        left = nleft[node]
        if left < 0:
            for j in range(nstart[node], nend[node]):
                dx = pts[j, 0] - qx
                dy = pts[j, 1] - qy
                dz = pts[j, 2] - qz
                if sqrt(dx * dx + dy * dy + dz * dz) <= radius:
                    if out_j != NULL:
                        out_j[n] = j
                    n += 1
            continue
        stack[sp] = nright[node]
        stack[sp + 1] = left
        sp += 2
    return n


def radius_neighbors(const double[:, ::1] pts, const i64[::1] perm, const i64[::1] nstart,
                     const i64[::1] nend, const i64[::1] nleft, const i64[::1] nright,
                     const double[:, ::1] nlo, const double[:, ::1] nhi,
                     const double[:, ::1] queries, double radius, int threads=1):
    cdef Py_ssize_t nq = queries.shape[0], qi
    cdef Py_ssize_t depth = 2 * (nleft.shape[0] + 2)
    counts_arr = np.zeros(nq, np.int64)
    cdef i64[::1] counts = counts_arr
    cdef i64* stack
    with nogil:
        for qi in prange(nq, num_threads=threads, schedule="dynamic", chunksize=64):
            stack = <i64*> malloc(depth * sizeof(i64))
            counts[qi] = _ball_count(pts, nstart, nend, nleft, nright, nlo, nhi,
                                     queries[qi, 0], queries[qi, 1], queries[qi, 2], radius, stack, NULL)
            free(stack)
    ptr_arr = np.zeros(nq + 1, np.int64)
    np.cumsum(counts_arr, out=ptr_arr[1:])
    total = int(ptr_arr[-1])
    slots_arr = np.empty(total, np.int64)
    cdef i64[::1] ptr = ptr_arr
    cdef i64[::1] slots = slots_arr
    with nogil:
        for qi in prange(nq, num_threads=threads, schedule="dynamic", chunksize=64):
            stack = <i64*> malloc(depth * sizeof(i64))
            if counts[qi] > 0:
                _ball_count(pts, nstart, nend, nleft, nright, nlo, nhi,
                            queries[qi, 0], queries[qi, 1], queries[qi, 2], radius, stack, &slots[ptr[qi]])
            free(stack)
    q = np.asarray(queries)
    p = np.asarray(pts)
    idx_arr = np.asarray(perm)[slots_arr]
    owner = np.repeat(np.arange(nq), counts_arr)
    diff = p[slots_arr] - q[owner]
    dist_arr = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])
    order = np.lexsort((idx_arr, dist_arr, owner))
    return ptr_arr, idx_arr[order], dist_arr[order]


def greedy_select(const i64[::1] order, const cnp.uint8_t[::1] eligible, const cnp.uint8_t[::1] above,
                  const i64[::1] nbr_ptr, const i64[::1] nbr_idx):
    cdef Py_ssize_t n = order.shape[0], t, j
    cdef i64 i, nb
    cdef bint blocked, peak
    rank_arr = np.empty(n, np.int64)
    keep_arr = np.zeros(n, np.uint8)
    cdef i64[::1] rank = rank_arr
    cdef cnp.uint8_t[::1] keep = keep_arr
    for t in range(n):
        rank[order[t]] = t
    with nogil:
        for t in range(n):
            i = order[t]
            if not eligible[i]:
                continue
            blocked = False
            peak = True
            for j in range(nbr_ptr[i], nbr_ptr[i + 1]):
                nb = nbr_idx[j]
                if keep[nb]:
                    blocked = True
                    break
                if nb != i and rank[nb] < rank[i]:
                    peak = False
            if blocked:
                continue
            if peak or above[i]:
                keep[i] = 1
    return keep_arr.astype(bool)


cdef void _blend_tile(Py_ssize_t t, int height, int width, int tile, int ntx,
                      const double[:, ::1] means, const double[:, ::1] conics,
                      const double[::1] opacity, const double[::1] depth,
                      const double[:, ::1] payload, const i64[::1] tile_ptr, const i64[::1] tile_ids,
                      const double[::1] background, double alpha_min, double t_min,
                      double[:, :, ::1] img, double[:, ::1] alpha, double[:, ::1] dhint) noexcept nogil:
    cdef int ty = t // ntx, tx = t % ntx
    cdef int y0 = ty * tile, x0 = tx * tile
    cdef int y1 = y0 + tile if y0 + tile < height else height
    cdef int x1 = x0 + tile if x0 + tile < width else width
    cdef int x, y, c, dp = payload.shape[1]
    cdef i64 s, g
    cdef double px, py, dx, dy, power, al, T, w, accd
    for y in range(y0, y1):
        py = y + 0.5
        for x in range(x0, x1):
            px = x + 0.5
            T = 1.0
            accd = 0.0
            for c in range(dp):
                img[y, x, c] = 0.0
            for s in range(tile_ptr[t], tile_ptr[t + 1]):
                g = tile_ids[s]
                dx = px - means[g, 0]
                dy = py - means[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy)
                al = opacity[g] * exp(power)
                if al < alpha_min:
                    continue
                w = al * T
                for c in range(dp):
                    img[y, x, c] += w * payload[g, c]
                accd += w * depth[g]
                T = T * (1.0 - al)
                if t_min > 0.0 and T < t_min:
                    break
            for c in range(dp):
                img[y, x, c] += T * background[c]
            alpha[y, x] = 1.0 - T
            dhint[y, x] = accd


def rasterize_tiles(int height, int width, int tile, const double[:, ::1] means, const double[:, ::1] conics,
                    const double[::1] opacity, const double[::1] depth, const double[:, ::1] payload,
                    const i64[::1] tile_ptr, const i64[::1] tile_ids, const double[::1] background,
                    double alpha_min, double t_min, int threads=1):
    cdef int dp = payload.shape[1]
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef Py_ssize_t t
    img_arr = np.zeros((height, width, dp))
    alpha_arr = np.zeros((height, width))
    dhint_arr = np.zeros((height, width))
    cdef double[:, :, ::1] img = img_arr
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] dhint = dhint_arr
    with nogil:
        for t in prange(ntx * nty, num_threads=threads, schedule="dynamic"):
            _blend_tile(t, height, width, tile, ntx, means, conics, opacity, depth, payload,
                        tile_ptr, tile_ids, background, alpha_min, t_min, img, alpha, dhint)
    return img_arr, alpha_arr, dhint_arr
