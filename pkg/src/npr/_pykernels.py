"""Pure-Python/numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` module; used when
the extension is not built or ``NPR_BACKEND=python`` is set. Floating-point
expressions are written in the same order as the compiled versions so both
backends agree bit-for-bit on KNN distances.
"""
import heapq
import math

import numpy as np


def _box_gap(lo, hi, q):
    gx = lo[0] - q[0] if q[0] < lo[0] else (q[0] - hi[0] if q[0] > hi[0] else 0.0)
    gy = lo[1] - q[1] if q[1] < lo[1] else (q[1] - hi[1] if q[1] > hi[1] else 0.0)
    gz = lo[2] - q[2] if q[2] < lo[2] else (q[2] - hi[2] if q[2] > hi[2] else 0.0)
    return math.sqrt(gx * gx + gy * gy + gz * gz)


def _leaf_dists(pts, start, end, q):
    p = pts[start:end]
    dx = p[:, 0] - q[0]
    dy = p[:, 1] - q[1]
    dz = p[:, 2] - q[2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def knn(pts, perm, nstart, nend, nleft, nright, nlo, nhi, queries, k, radius, threads=1):
    """K nearest within ``radius`` ordered by (distance, index).

    Returns (idx (Q, k) int64 padded with -1, dist (Q, k) padded with inf,
    count (Q,) int64).
    """
    nq = len(queries)
    out_i = np.full((nq, k), -1, np.int64)
    out_d = np.full((nq, k), np.inf)
    out_n = np.zeros(nq, np.int64)
    pts_l, lo_l, hi_l = pts, nlo.tolist(), nhi.tolist()
    for qi in range(nq):
        q = queries[qi].tolist()
        heap = []  # entries (-dist, -index): heap[0] is the current worst hit
        stack = [0]
        while stack:
            node = stack.pop()
            gap = _box_gap(lo_l[node], hi_l[node], q)
            if gap > radius or (len(heap) == k and gap > -heap[0][0]):
                continue
            left = nleft[node]
            if left < 0:
                s, e = nstart[node], nend[node]
                d = _leaf_dists(pts_l, s, e, q)
                for j in np.nonzero(d <= radius)[0].tolist():
                    key = (-float(d[j]), -int(perm[s + j]))
                    if len(heap) < k:
                        heapq.heappush(heap, key)
                    elif key > heap[0]:
                        heapq.heapreplace(heap, key)
                continue
            right = nright[node]
            gl = _box_gap(lo_l[left], hi_l[left], q)
            gr = _box_gap(lo_l[right], hi_l[right], q)
            if gl <= gr:
                stack.append(right)
                stack.append(left)
            else:
                stack.append(left)
                stack.append(right)
        hits = sorted((-nd, -ni) for nd, ni in heap)
        out_n[qi] = len(hits)
        for j, (d, i) in enumerate(hits):
            out_d[qi, j] = d
            out_i[qi, j] = i
    return out_i, out_d, out_n


def radius_neighbors(pts, perm, nstart, nend, nleft, nright, nlo, nhi, queries, radius, threads=1):
    """All points within ``radius`` of each query, as CSR (ptr, idx, dist) sorted by (dist, idx)."""
    lo_l, hi_l = nlo.tolist(), nhi.tolist()
    rows_i, rows_d = [], []
    for qi in range(len(queries)):
        q = queries[qi].tolist()
        got_i, got_d = [], []
        stack = [0]
        while stack:
            node = stack.pop()
            if _box_gap(lo_l[node], hi_l[node], q) > radius:
                continue
            left = nleft[node]
            if left < 0:
                s, e = nstart[node], nend[node]
                d = _leaf_dists(pts, s, e, q)
                sel = np.nonzero(d <= radius)[0]
                got_i.append(perm[s + sel])
                got_d.append(d[sel])
            else:
                stack.append(nright[node])
                stack.append(left)
        if got_i:
            ii, dd = np.concatenate(got_i), np.concatenate(got_d)
            o = np.lexsort((ii, dd))
            rows_i.append(ii[o])
            rows_d.append(dd[o])
        else:
            rows_i.append(np.zeros(0, np.int64))
            rows_d.append(np.zeros(0))
    ptr = np.zeros(len(queries) + 1, np.int64)
    ptr[1:] = np.cumsum([len(r) for r in rows_i])
    idx = np.concatenate(rows_i).astype(np.int64) if rows_i else np.zeros(0, np.int64)
    dist = np.concatenate(rows_d) if rows_d else np.zeros(0)
    return ptr, idx, dist


def greedy_select(order, eligible, above, nbr_ptr, nbr_idx):
    """Density-ordered suppression.

    ``order`` lists candidate points from densest to sparsest. A point is kept
    when no already-kept point is among its neighbors and it either outranks
    every neighbor (a density peak) or is flagged ``above`` the density
    quantile. Returns a boolean keep mask.
    """
    n = len(order)
    rank = np.empty(n, np.int64)
    rank[order] = np.arange(n)
    keep = np.zeros(n, bool)
    ptr, nb = nbr_ptr.tolist(), nbr_idx.tolist()
    rank_l = rank.tolist()
    for i in order.tolist():
        if not eligible[i]:
            continue
        neigh = nb[ptr[i]:ptr[i + 1]]
        if any(keep[j] for j in neigh):
            continue
        peak = all(rank_l[i] < rank_l[j] for j in neigh if j != i)
        if peak or above[i]:
            keep[i] = True
    return keep


def rasterize_tiles(height, width, tile, means, conics, opacity, depth, payload,
                    tile_ptr, tile_ids, background, alpha_min, t_min, threads=1):
    """Front-to-back alpha blending of pre-binned, depth-sorted splats.

    ``tile_ids[tile_ptr[t]:tile_ptr[t+1]]`` are the splats touching tile ``t``
    in blend order. ``conics`` holds (a, b, c) of the inverse 2x2 covariance.
    """
    dp = payload.shape[1]
    img = np.zeros((height, width, dp))
    alpha = np.zeros((height, width))
    dhint = np.zeros((height, width))
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            y0, x0 = ty * tile, tx * tile
            y1, x1 = min(y0 + tile, height), min(x0 + tile, width)
            ids = tile_ids[tile_ptr[t]:tile_ptr[t + 1]]
            ph, pw = y1 - y0, x1 - x0
            if len(ids) == 0:
                img[y0:y1, x0:x1] = background
                continue
            py = (np.arange(y0, y1) + 0.5)[:, None, None]
            px = (np.arange(x0, x1) + 0.5)[None, :, None]
            dx = px - means[ids, 0]
            dy = py - means[ids, 1]
            a, b, c = conics[ids, 0], conics[ids, 1], conics[ids, 2]
            power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
            al = opacity[ids] * np.exp(power)
            al = np.where(al < alpha_min, 0.0, al)
            al = al.reshape(ph * pw, len(ids))
            trans = np.ones(ph * pw)
            acc = np.zeros((ph * pw, dp))
            acc_d = np.zeros(ph * pw)
            live = np.ones(ph * pw, bool)
            for j in range(len(ids)):
                aj = np.where(live, al[:, j], 0.0)
                w = aj * trans
                acc += w[:, None] * payload[ids[j]]
                acc_d += w * depth[ids[j]]
                trans = trans * (1.0 - aj)
                if t_min > 0.0:
                    live &= trans >= t_min
                    if not live.any():
                        break
            img[y0:y1, x0:x1] = (acc + trans[:, None] * background).reshape(ph, pw, dp)
            alpha[y0:y1, x0:x1] = (1.0 - trans).reshape(ph, pw)
            dhint[y0:y1, x0:x1] = acc_d.reshape(ph, pw)
    return img, alpha, dhint
