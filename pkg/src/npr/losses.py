"""Pretraining and navigation objectives, plus image metrics (forward only)."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from npr.errors import BadDistribution, ShapeMismatch, TooSmall, ZeroVector

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch("shapes differ: %s vs %s" % (a.shape, b.shape))
    return a, b


def l1_loss(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l2_loss(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation of every channel with the 1-D kernel ``g``."""
    k = len(g)
    h, w = img.shape[:2]
    rows = sum(g[i] * img[i: h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j: w - k + 1 + j] for j in range(k))


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, c1: float = SSIM_C1, c2: float = SSIM_C2):
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise TooSmall("images of %s are smaller than the %d px window" % (a.shape[:2], window))
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, window: int = 11, sigma: float = 1.5, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean local SSIM (Gaussian window, valid positions only, averaged over channels)."""
    return float(np.mean(ssim_map(a, b, window, sigma, c1, c2)))


def ssim_loss(a, b, **kw) -> float:
    return 1.0 - ssim(a, b, **kw)


def cosine_feature_loss(pred, target) -> float:
    """1 - cos(pred, target) over the flattened vectors."""
    p, t = _pair(pred, target)
    p, t = p.ravel(), t.ravel()
    np_, nt = np.linalg.norm(p), np.linalg.norm(t)
    if np_ == 0 or nt == 0:
        raise ZeroVector("cosine loss of a zero vector")
    c = float(p @ t) / (np_ * nt)
    return 1.0 - min(1.0, max(-1.0, c))


@dataclass
class PretrainParts:
    l1_r: float
    l2_r: float
    ssim_r: float  # reported as 1 - SSIM
    l2_f: float


def pretrain_total(parts: PretrainParts, weights: Optional[Dict[str, float]] = None) -> float:
    """Sum of the four pretraining terms (unit weights unless overridden)."""
    w = {"l1_r": 1.0, "l2_r": 1.0, "ssim_r": 1.0, "l2_f": 1.0}
    if weights:
        w.update(weights)
    return w["l1_r"] * parts.l1_r + w["l2_r"] * parts.l2_r + w["ssim_r"] * parts.ssim_r + w["l2_f"] * parts.l2_f


def log_softmax(scores, mask=None) -> np.ndarray:
    """Stable log-softmax; masked entries are excluded and come back as -inf."""
    s = np.asarray(scores, np.float64)
    keep = np.ones(s.shape, bool) if mask is None else ~np.asarray(mask, bool)
    if not keep.any():
        raise BadDistribution("every score is masked")
    m = s[keep].max()
    lse = m + math.log(np.exp(s[keep] - m).sum())
    return np.where(keep, s - lse, -np.inf)


def _check_target(target, keep):
    t = np.asarray(target, np.float64)
    if np.any(t < 0) or abs(t.sum() - 1.0) > 1e-6:
        raise BadDistribution("target must be a probability vector")
    if np.any(t[~keep] != 0):
        raise BadDistribution("masked nodes must carry zero target mass")
    return t


def nav_ce_loss(scores, target, mask=None) -> float:
    """Cross-entropy between softmax(scores) over unmasked nodes and a soft target."""
    s = np.asarray(scores, np.float64)
    keep = np.ones(s.shape, bool) if mask is None else ~np.asarray(mask, bool)
    t = _check_target(target, keep)
    if t.shape != s.shape:
        raise ShapeMismatch("scores and target differ in length")
    lp = log_softmax(s, ~keep)
    return float(-(t[keep] * lp[keep]).sum())


def nav_ce_grad(scores, target, mask=None) -> np.ndarray:
    """d CE / d scores = softmax - target on unmasked nodes, 0 elsewhere."""
    s = np.asarray(scores, np.float64)
    keep = np.ones(s.shape, bool) if mask is None else ~np.asarray(mask, bool)
    t = _check_target(target, keep)
    p = np.exp(log_softmax(s, ~keep))
    return np.where(keep, p - t, 0.0)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / mse); identical inputs give +inf."""
    mse = l2_loss(a, b)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class LossReport:
    l1_r: float = 0.0
    l2_r: float = 0.0
    ssim_r: float = 0.0
    l2_f: float = 0.0
    pretrain_total: float = 0.0
    nav_ce: Optional[float] = None
    extra: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def evaluate(cls, image, image_gt, feat, feat_gt, scores=None, target=None, mask=None) -> "LossReport":
        parts = PretrainParts(l1_loss(image, image_gt), l2_loss(image, image_gt),
                              ssim_loss(image, image_gt), cosine_feature_loss(feat, feat_gt))
        nav = nav_ce_loss(scores, target, mask) if scores is not None else None
        return cls(parts.l1_r, parts.l2_r, parts.ssim_r, parts.l2_f, pretrain_total(parts), nav,
                   {"psnr": psnr(image, image_gt)})

    def to_dict(self) -> dict:
        return {k: _finite_or_tag(v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _finite_or_tag(v):
    """JSON has no infinities; they are written as the strings "inf" / "-inf"."""
    if isinstance(v, dict):
        return {k: _finite_or_tag(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v
