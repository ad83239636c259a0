"""Slow, independently written reference implementations.

Each function recomputes a library result the long way (explicit loops,
homogeneous matrices, exhaustive scans) so tests and ``npr verify`` can
compare against something that shares no code with the fast path.
"""
from __future__ import annotations

import math

import numpy as np


def matrix_project(intr, pose, p):
    """Pixel (h, w) and depth through explicit 4x4 / 3x4 homogeneous matrices."""
    world_from_cam = np.eye(4)
    world_from_cam[:3, :3] = pose.R
    world_from_cam[:3, 3] = pose.t
    cam_from_world = np.linalg.inv(world_from_cam)
    K = np.array([[intr.fx, 0, intr.cx, 0], [0, intr.fy, intr.cy, 0], [0, 0, 1, 0]], float)
    ph = K @ cam_from_world @ np.append(np.asarray(p, float), 1.0)
    return np.array([ph[1] / ph[2], ph[0] / ph[2]]), (cam_from_world @ np.append(p, 1.0))[2]


def exhaustive_knn(points, q, k, radius):
    """Scan every point; order by (distance, index)."""
    hits = []
    for i, p in enumerate(points):
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p, q)))
        if d <= radius:
            hits.append((d, i))
    hits.sort()
    return [(i, d) for d, i in hits[:k]]


def select_reference(positions, k, radius, epsilon, grid_cell, tau, select_radius):
    """Rule-level O(N^2) reimplementation of the representative-point selection."""
    P = np.asarray(positions, float)
    n = len(P)
    D = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(-1))
    rho = np.zeros(n)
    for i in range(n):
        cand = sorted((D[i, j], j) for j in range(n) if j != i and D[i, j] <= radius)[:k]
        if cand:
            s = sum(d for d, _ in cand)
            rho[i] = math.inf if s == 0 else 1.0 / s
    off = P - np.round(P / grid_cell) * grid_cell
    eligible = (off * off).sum(1) < epsilon ** 2
    thr = np.sort(rho)[int(math.floor(tau * (n - 1)))]
    order = sorted(range(n), key=lambda i: (-rho[i], i))
    rank = {i: r for r, i in enumerate(order)}
    kept = []
    for i in order:
        if not eligible[i]:
            continue
        near = [j for j in range(n) if j != i and D[i, j] <= select_radius]
        if any(D[i, j] <= select_radius for j in kept):
            continue
        peak = all(rank[i] < rank[j] for j in near)
        if peak or rho[i] > thr:
            kept.append(i)
    return sorted(kept)


def loop_mlp(w, x):
    """Affine layers as explicit double loops."""
    acts = {"none": lambda v: v, "relu": lambda v: max(v, 0.0), "tanh": math.tanh,
            "sigmoid": lambda v: 1.0 / (1.0 + math.exp(-v)),
            "softplus": lambda v: math.log1p(math.exp(-abs(v))) + max(v, 0.0)}
    v = [float(a) for a in x]
    for layer in w.layers:
        out = []
        for r in range(layer.weight.shape[0]):
            s = float(layer.bias[r])
            for c in range(layer.weight.shape[1]):
                s += float(layer.weight[r, c]) * v[c]
            out.append(acts[layer.activation](s))
        v = out
    return np.array(v)


def loop_attention(w, queries, keys, values):
    """Multi-head attention one head and one query at a time."""
    d = w.dim
    dh = d // w.heads
    Q, K, V = queries @ w.wq.T, keys @ w.wk.T, values @ w.wv.T
    out = np.zeros((len(queries), d))
    for h in range(w.heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(len(queries)):
            logits = [float(Q[i, sl] @ K[j, sl]) / math.sqrt(dh) for j in range(len(keys))]
            m = max(logits)
            e = [math.exp(l - m) for l in logits]
            z = sum(e)
            for j in range(len(keys)):
                out[i, sl] += (e[j] / z) * V[j, sl]
    return out @ w.wo.T


def loop_aggregate(q, positions, features, scales, hits, phi1, directions):
    """Neighbourhood aggregation with explicit sums; ``hits`` are (index, distance) pairs.

    Offsets are expressed in each entry's heading frame via an explicit yaw matrix.
    """
    if not hits:
        return None
    inv = [1.0 / max(d, 1e-8) for _, d in hits]
    tot = sum(inv)
    w = [v / tot for v in inv]
    base = sum(wk * np.asarray(features[i], float) for wk, (i, _) in zip(w, hits))
    per = []
    for i, _ in hits:
        t = float(directions[i])
        R = np.array([[math.cos(t), 0.0, math.sin(t)], [0.0, 1.0, 0.0], [-math.sin(t), 0.0, math.cos(t)]])
        off = R.T @ (np.asarray(q, float) - np.asarray(positions[i], float))
        per.append(loop_mlp(phi1, np.concatenate([base, off])))
    agg = sum(float(scales[i]) * wk * f for wk, (i, _), f in zip(w, hits, per))
    return agg, per, w


def loop_composite(sigma, radiance, delta):
    """Front-to-back quadrature one sample at a time."""
    T = 1.0
    out = np.zeros(np.asarray(radiance).shape[-1])
    wsum = 0.0
    for s, r, d in zip(sigma, radiance, delta):
        a = 1.0 - math.exp(-s * d)
        out += T * a * np.asarray(r, float)
        wsum += T * a
        T *= math.exp(-s * d)
    return out, wsum, T


def loop_ssim(a, b, window=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """SSIM on a single-channel image with explicit window sums."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    x = np.arange(window) - (window - 1) / 2
    g1 = np.exp(-x * x / (2 * sigma * sigma))
    g = np.outer(g1, g1)
    g /= g.sum()
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa, pb = a[i:i + window, j:j + window], b[i:i + window, j:j + window]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def loop_cross_entropy(scores, target):
    m = max(scores)
    lse = m + math.log(sum(math.exp(s - m) for s in scores))
    return -sum(t * (s - lse) for s, t in zip(scores, target))


def loop_psnr(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    mse = sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)
    return 10 * math.log10(1.0 / mse)


def numeric_jacobian(f, x, h=1e-6):
    x = np.asarray(x, float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)
