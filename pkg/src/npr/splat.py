"""Gaussian splatting branch: primitives, EWA projection and tile rasterization."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from npr import _backend
from npr.errors import BadMagic, BehindCamera, CorruptLength, CountMismatch
from npr.geometry import NEAR_PLANE, CameraIntrinsics, Pose, quat_to_matrix, quats_to_matrices
from npr.nets import GaussianHeads, gaussian_heads
from npr.stq import SelectedPoints


@dataclass
class GaussianSet:
    positions: np.ndarray  # (M, 3)
    rotations: np.ndarray  # (M, 4) unit quaternions (w, x, y, z)
    scales: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (M,)
    payload: np.ndarray  # (M, Dp)

    def __post_init__(self):
        m = len(self.positions)
        payload = np.asarray(self.payload, np.float64)
        self.payload = payload.reshape(m, payload.shape[-1] if payload.ndim == 2 else -1)
        if not (len(self.rotations) == len(self.scales) == len(self.opacities) == m):
            raise CountMismatch("Gaussian fields differ in length")

    def __len__(self):
        return len(self.positions)

    @property
    def channels(self) -> int:
        return self.payload.shape[1]

    @classmethod
    def empty(cls, channels: int = 3) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, channels)))


@dataclass
class RenderedView:
    pixels: np.ndarray  # (H, W, Dp)
    alpha: np.ndarray  # (H, W) accumulated opacity
    depth_hint: np.ndarray  # (H, W) opacity-weighted mean depth, 0 where alpha == 0
    stats: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SplatConfig:
    tile: int = 16
    dilation: float = 0.3  # px^2 added to the projected covariance diagonal
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4  # early-stop transmittance
    cull_sigma: Optional[float] = 3.0  # None: every splat goes to every tile
    near: float = NEAR_PLANE
    max_condition: float = 1e12
    guard: Optional[float] = 1.3  # frustum guard band, in multiples of the half-FOV tangent

    @classmethod
    def exact(cls, tile: int = 16) -> "SplatConfig":
        """No dilation, no culling, no early stop: matches :func:`naive_rasterize` to rounding."""
        return cls(tile=tile, dilation=0.0, alpha_min=0.0, t_min=0.0, cull_sigma=None)


def _in_guard(cam, intr: CameraIntrinsics, guard: Optional[float]):
    """Splats far outside the view are dropped: the affine projection blows them up across the image."""
    if guard is None:
        return np.ones(cam.shape[:-1], bool)
    z = np.where(cam[..., 2] > 0, cam[..., 2], np.inf)
    lim_x = guard * max(intr.cx, intr.width - intr.cx) / intr.fx
    lim_y = guard * max(intr.cy, intr.height - intr.cy) / intr.fy
    return (np.abs(cam[..., 0] / z) <= lim_x) & (np.abs(cam[..., 1] / z) <= lim_y)


def make_gaussians(sel: SelectedPoints, desc, heads: GaussianHeads):
    """Image and feature Gaussian sets sharing one regressed geometry."""
    desc = np.asarray(desc, np.float64)
    if desc.ndim != 2 or len(desc) != len(sel):
        raise CountMismatch("%d descriptors for %d selected points" % (len(desc), len(sel)))
    if len(sel) == 0:
        return GaussianSet.empty(3), GaussianSet.empty(desc.shape[1] if desc.ndim == 2 else 0)
    quat, scales, opacity, _ = gaussian_heads(desc, heads)
    pos = np.asarray(sel.positions, np.float64)
    g_img = GaussianSet(pos, quat, scales, opacity, np.asarray(sel.colors, np.float64))
    g_feat = GaussianSet(pos, quat, scales, opacity, desc)
    return g_img, g_feat


def covariance3d(q, s) -> np.ndarray:
    """R S S^T R^T for quaternion ``q`` and per-axis scales ``s``."""
    R = quat_to_matrix(q)
    M = R * np.asarray(s, np.float64)
    return M @ M.T


def projection_jacobian(intr: CameraIntrinsics, cam_point) -> np.ndarray:
    x, y, z = (float(v) for v in cam_point)
    return np.array([[intr.fx / z, 0.0, -intr.fx * x / (z * z)],
                     [0.0, intr.fy / z, -intr.fy * y / (z * z)]])


def project_covariance(cov, pose: Pose, intr: CameraIntrinsics, mean, dilation: float = 0.3,
                       near: float = NEAR_PLANE) -> np.ndarray:
    """Screen-space covariance J W cov W^T J^T (+ dilation * I), in (x=col, y=row) order."""
    W = pose.R.T
    cam = W @ (np.asarray(mean, np.float64) - pose.t)
    if cam[2] <= near:
        raise BehindCamera("Gaussian mean at camera depth %g" % cam[2])
    T = projection_jacobian(intr, cam) @ W
    out = T @ np.asarray(cov, np.float64) @ T.T
    out = 0.5 * (out + out.T)
    return out + dilation * np.eye(2)


def _project_all(gs: GaussianSet, pose: Pose, intr: CameraIntrinsics, cfg: SplatConfig):
    """Vectorized projection of every splat.

    Returns means (M, 2) as (x, y), conics (M, 3), screen covariances (M, 3),
    depths (M,), a mask of splats that survive the near-plane, guard-band and
    conditioning checks, and the guard-band mask alone.
    """
    W = pose.R.T
    cam = (np.asarray(gs.positions, np.float64) - pose.t) @ pose.R
    z = cam[:, 2]
    front = z > cfg.near
    zs = np.where(front, z, 1.0)
    J = np.zeros((len(gs), 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * cam[:, 0] / (zs * zs)
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * cam[:, 1] / (zs * zs)
    R = quats_to_matrices(gs.rotations)
    M = R * np.asarray(gs.scales, np.float64)[:, None, :]
    T = J @ W @ M  # (M, 2, 3)
    cov = T @ T.transpose(0, 2, 1)
    a = cov[:, 0, 0] + cfg.dilation
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1] + cfg.dilation
    det = a * c - b * b
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
    lmax, lmin = half_tr + disc, half_tr - disc
    inside = _in_guard(cam, intr, cfg.guard)
    ok = front & inside & (det > 0) & (lmin > 0) & (lmax <= cfg.max_condition * np.where(lmin > 0, lmin, np.inf))
    det_s = np.where(ok, det, 1.0)
    conics = np.stack([c / det_s, -b / det_s, a / det_s], axis=1)
    means = np.stack([intr.fx * cam[:, 0] / zs + intr.cx, intr.fy * cam[:, 1] / zs + intr.cy], axis=1)
    return means, conics, np.stack([a, b, c], axis=1), z, ok, inside


def _bin_tiles(means, cov2, order, width, height, cfg: SplatConfig):
    """CSR lists of splat ids per tile, each list in global depth order."""
    tile = cfg.tile
    ntx, nty = (width + tile - 1) // tile, (height + tile - 1) // tile
    n = len(order)
    if n == 0:
        return np.zeros(ntx * nty + 1, np.int64), np.zeros(0, np.int64)
    if cfg.cull_sigma is None:
        tx0 = np.zeros(n, np.int64)
        ty0 = np.zeros(n, np.int64)
        tx1 = np.full(n, ntx - 1, np.int64)
        ty1 = np.full(n, nty - 1, np.int64)
        hit = np.ones(n, bool)
    else:
        m = means[order]
        rx = cfg.cull_sigma * np.sqrt(cov2[order, 0])
        ry = cfg.cull_sigma * np.sqrt(cov2[order, 2])
        x0, x1 = m[:, 0] - rx, m[:, 0] + rx
        y0, y1 = m[:, 1] - ry, m[:, 1] + ry
        hit = (x1 >= 0) & (x0 < width) & (y1 >= 0) & (y0 < height)
        tx0 = np.clip(np.floor(x0 / tile), 0, ntx - 1).astype(np.int64)
        tx1 = np.clip(np.floor(x1 / tile), 0, ntx - 1).astype(np.int64)
        ty0 = np.clip(np.floor(y0 / tile), 0, nty - 1).astype(np.int64)
        ty1 = np.clip(np.floor(y1 / tile), 0, nty - 1).astype(np.int64)
    wspan = np.where(hit, tx1 - tx0 + 1, 0)
    counts = wspan * np.where(hit, ty1 - ty0 + 1, 0)
    total = int(counts.sum())
    g = np.repeat(np.arange(n), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    tid = (ty0[g] + local // wspan[g]) * ntx + tx0[g] + local % wspan[g]
    by_tile = np.argsort(tid, kind="stable")
    ids = order[g[by_tile]]
    ptr = np.zeros(ntx * nty + 1, np.int64)
    np.cumsum(np.bincount(tid, minlength=ntx * nty), out=ptr[1:])
    return ptr, ids.astype(np.int64)


def rasterize(gs: GaussianSet, pose: Pose, intr: CameraIntrinsics, background=None,
              tile: Optional[int] = None, cfg: Optional[SplatConfig] = None, threads: int = 1,
              kernels=None) -> RenderedView:
    """Depth-sorted front-to-back alpha blending of a Gaussian set.

    Splats are ordered globally by camera depth (ties by index) and blended
    per pixel with transmittance ``T``; the final pixel adds ``T *
    background``. Culling and early termination follow ``cfg``.
    """
    cfg = cfg or SplatConfig()
    if tile is not None:
        cfg = replace(cfg, tile=tile)
    dp = gs.channels
    bg = np.zeros(dp) if background is None else np.asarray(background, np.float64).reshape(dp)
    kern = kernels or _backend.kernels
    H, W = intr.height, intr.width
    if len(gs) == 0:
        return RenderedView(np.broadcast_to(bg, (H, W, dp)).copy(), np.zeros((H, W)), np.zeros((H, W)),
                            {"rendered": 0, "skipped": 0})
    means, conics, cov2, depth, ok, inside = _project_all(gs, pose, intr, cfg)
    cand = np.nonzero(ok)[0]
    order = cand[np.lexsort((cand, depth[cand]))].astype(np.int64)
    ptr, ids = _bin_tiles(means, cov2, order, W, H, cfg)
    img, alpha, dsum = kern.rasterize_tiles(
        H, W, cfg.tile, np.ascontiguousarray(means), np.ascontiguousarray(conics),
        np.ascontiguousarray(gs.opacities, np.float64), np.ascontiguousarray(depth),
        np.ascontiguousarray(gs.payload), ptr, ids, np.ascontiguousarray(bg),
        float(cfg.alpha_min), float(cfg.t_min), threads)
    dhint = np.divide(dsum, alpha, out=np.zeros_like(dsum), where=alpha > 0)
    front = depth > cfg.near
    stats = {"rendered": int(len(order)), "skipped": int(np.sum(front & inside & ~ok)),
             "outside": int(np.sum(front & ~inside)),
             "behind": int(np.sum(~front)), "tile_entries": int(len(ids))}
    return RenderedView(img, alpha, dhint, stats)


@dataclass
class PixelTrace:
    ids: np.ndarray  # splats blended at the pixel, in blend order
    alphas: np.ndarray  # effective opacity of each step
    transmittance: np.ndarray  # T before the first step and after every step (len(ids) + 1)


def pixel_trace(gs: GaussianSet, pose: Pose, intr: CameraIntrinsics, h: int, w: int,
                cfg: Optional[SplatConfig] = None) -> PixelTrace:
    """Step-by-step blend of one pixel with the same projection, binning and culls as :func:`rasterize`."""
    cfg = cfg or SplatConfig()
    if len(gs) == 0:
        return PixelTrace(np.zeros(0, np.int64), np.zeros(0), np.ones(1))
    means, conics, cov2, depth, ok, _ = _project_all(gs, pose, intr, cfg)
    cand = np.nonzero(ok)[0]
    order = cand[np.lexsort((cand, depth[cand]))].astype(np.int64)
    ptr, ids = _bin_tiles(means, cov2, order, intr.width, intr.height, cfg)
    ntx = (intr.width + cfg.tile - 1) // cfg.tile
    t = (h // cfg.tile) * ntx + w // cfg.tile
    ids = ids[ptr[t]:ptr[t + 1]]
    dx, dy = w + 0.5 - means[ids, 0], h + 0.5 - means[ids, 1]
    a, b, c = conics[ids].T
    al = np.asarray(gs.opacities, np.float64)[ids] * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
    al = np.where(al < cfg.alpha_min, 0.0, al)
    trans = [1.0]
    for j, aj in enumerate(al):
        trans.append(trans[-1] * (1.0 - aj))
        if cfg.t_min > 0 and trans[-1] < cfg.t_min:
            return PixelTrace(ids[: j + 1], al[: j + 1], np.array(trans))
    return PixelTrace(ids, al, np.array(trans))


def naive_rasterize(gs: GaussianSet, pose: Pose, intr: CameraIntrinsics, background=None,
                    dilation: float = 0.0, near: float = NEAR_PLANE, max_condition: float = 1e12,
                    guard: Optional[float] = 1.3) -> RenderedView:
    """Reference renderer: every splat contributes to every pixel, no tiles, no early stop."""
    dp = gs.channels
    bg = np.zeros(dp) if background is None else np.asarray(background, np.float64).reshape(dp)
    H, W = intr.height, intr.width
    keep, mean2, inv2, zs = [], [], [], []
    for i in range(len(gs)):
        mc = pose.R.T @ (np.asarray(gs.positions[i], np.float64) - pose.t)
        if mc[2] <= near or not _in_guard(mc, intr, guard):
            continue
        cov = project_covariance(covariance3d(gs.rotations[i], gs.scales[i]), pose, intr,
                                 gs.positions[i], dilation, near)
        ev = np.linalg.eigvalsh(cov)
        if ev[0] <= 0 or ev[1] > max_condition * ev[0]:
            continue
        keep.append(i)
        mean2.append([intr.fx * mc[0] / mc[2] + intr.cx, intr.fy * mc[1] / mc[2] + intr.cy])
        inv2.append(np.linalg.inv(cov))
        zs.append(mc[2])
    if not keep:
        return RenderedView(np.broadcast_to(bg, (H, W, dp)).copy(), np.zeros((H, W)), np.zeros((H, W)))
    keep = np.array(keep)
    zs = np.array(zs)
    order = np.lexsort((keep, zs))
    keep, zs = keep[order], zs[order]
    mean2 = np.array(mean2)[order]
    inv2 = np.array(inv2)[order]
    ys, xs = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    d = pix[:, None, :] - mean2[None, :, :]  # (P, G, 2)
    quad = np.einsum("pgi,gij,pgj->pg", d, inv2, d)
    a = np.asarray(gs.opacities, np.float64)[keep] * np.exp(-0.5 * quad)
    trans_before = np.cumprod(np.concatenate([np.ones((len(pix), 1)), 1.0 - a], axis=1), axis=1)
    w = a * trans_before[:, :-1]
    t_final = trans_before[:, -1]
    img = w @ gs.payload[keep] + t_final[:, None] * bg
    alpha = 1.0 - t_final
    dsum = w @ zs
    dhint = np.divide(dsum, alpha, out=np.zeros_like(dsum), where=alpha > 0)
    return RenderedView(img.reshape(H, W, dp), alpha.reshape(H, W), dhint.reshape(H, W))


# -- image / feature map files --------------------------------------------------------

FMAP_MAGIC = b"FMAP"
_FMAP_HEADER = struct.Struct("<4sIII")


def write_ppm(path, image) -> None:
    img = np.asarray(image, np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM output needs an H x W x 3 image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise BadMagic("not a binary PPM: %s" % path)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    body = parts[4]
    if len(body) != w * h * 3:
        raise CorruptLength("PPM body has %d bytes, expected %d" % (len(body), w * h * 3))
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).astype(np.float64) / maxval


def write_fmap(path, fmap) -> None:
    m = np.asarray(fmap)
    if m.ndim == 2:
        m = m[..., None]
    with open(path, "wb") as f:
        f.write(_FMAP_HEADER.pack(FMAP_MAGIC, m.shape[0], m.shape[1], m.shape[2]))
        f.write(np.ascontiguousarray(m, "<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FMAP_MAGIC:
        raise BadMagic("not an FMAP file: %s" % path)
    if len(blob) < _FMAP_HEADER.size:
        raise CorruptLength("truncated FMAP header")
    _, h, w, d = _FMAP_HEADER.unpack_from(blob)
    if len(blob) != _FMAP_HEADER.size + 4 * h * w * d:
        raise CorruptLength("FMAP body length does not match %dx%dx%d" % (h, w, d))
    return np.frombuffer(blob, "<f4", offset=_FMAP_HEADER.size).reshape(h, w, d).astype(np.float32)
