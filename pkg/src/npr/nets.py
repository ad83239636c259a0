"""Small inference-only networks and their weight file format.

These stand in for the learned pieces of the pipeline: the per-sample MLPs of
the feature field, the Gaussian property heads, a multi-scale point
descriptor, patch encoders, multi-head cross-attention and the scoring FFN.
All weights load from "TNW1" files; :func:`default_bundle` generates a
deterministic seeded set.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from npr.errors import (
    BadMagic,
    CorruptLength,
    DimMismatch,
    VersionUnsupported,
    WeightsNotLoaded,
)

ACTIVATIONS = ("none", "relu", "sigmoid", "softplus", "tanh")
SCALE_MIN, SCALE_MAX = 1e-6, 10.0
OPACITY_MIN, OPACITY_MAX = np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0)


class DegenerateQuaternion(UserWarning):
    """A rotation head produced a (near) zero quaternion; identity was used."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    return np.logaddexp(0.0, x)


def _activate(name: str, x):
    if name == "none":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "softplus":
        return softplus(x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError("unknown activation %r" % name)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "none"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != len(self.bias):
            raise DimMismatch("layer weight %s vs bias %s" % (self.weight.shape, self.bias.shape))
        if self.activation not in ACTIVATIONS:
            raise ValueError("unknown activation %r" % self.activation)
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("non-finite weights")


@dataclass
class MlpWeights:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise DimMismatch("layer dims do not chain: %s -> %s" % (a.weight.shape, b.weight.shape))

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def __call__(self, x):
        return mlp_forward(self, x)


def mlp_forward(w: Optional[MlpWeights], x):
    """Affine + activation chain over the last axis of ``x``."""
    if w is None:
        raise WeightsNotLoaded("MLP weights not loaded")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.in_dim:
        raise DimMismatch("input dim %d, network expects %d" % (x.shape[-1], w.in_dim))
    for layer in w.layers:
        x = _activate(layer.activation, x @ layer.weight.T + layer.bias)
    return x


def random_mlp(rng: np.random.Generator, dims, activations, gain: float = 1.0) -> MlpWeights:
    """He-style scaled random MLP; ``activations`` has one entry per layer."""
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        std = gain * math.sqrt(2.0 / a)
        layers.append(Layer(rng.normal(0.0, std, (b, a)), rng.normal(0.0, 0.1, b), activations[i]))
    return MlpWeights(layers)


# -- Gaussian property heads ---------------------------------------------------

@dataclass
class GaussianHeads:
    rotation: MlpWeights  # -> 4
    scale: MlpWeights  # -> 3 (log-scale)
    opacity: MlpWeights  # -> 1 (logit)

    def __post_init__(self):
        if (self.rotation.out_dim, self.scale.out_dim, self.opacity.out_dim) != (4, 3, 1):
            raise DimMismatch("head output dims must be 4, 3, 1")


def gaussian_heads(desc, heads: Optional[GaussianHeads]):
    """Rotation / scale / opacity from point descriptors.

    Accepts a single descriptor (D,) or a batch (M, D). Returns
    ``(quat, scales, opacity, degenerate)`` where ``quat`` is normalized,
    ``scales`` is exp of the scale head clamped to [1e-6, 10] and ``opacity``
    is the sigmoid of the opacity head. Near-zero rotation outputs fall back
    to the identity quaternion and are flagged in ``degenerate``.
    """
    if heads is None:
        raise WeightsNotLoaded("Gaussian heads not loaded")
    desc = np.asarray(desc, dtype=np.float64)
    single = desc.ndim == 1
    d = desc[None] if single else desc
    raw_q = mlp_forward(heads.rotation, d)
    norm = np.linalg.norm(raw_q, axis=1)
    degenerate = norm < 1e-12
    quat = np.where(degenerate[:, None], np.array([1.0, 0.0, 0.0, 0.0]),
                    raw_q / np.where(degenerate, 1.0, norm)[:, None])
    if degenerate.any():
        warnings.warn("%d degenerate rotation outputs replaced by identity" % degenerate.sum(),
                      DegenerateQuaternion, stacklevel=2)
    scales = np.clip(np.exp(mlp_forward(heads.scale, d)), SCALE_MIN, SCALE_MAX)
    # keep alpha strictly inside (0, 1); the sigmoid rounds to 0 or 1 for large logits
    opacity = np.clip(sigmoid(mlp_forward(heads.opacity, d)[:, 0]), OPACITY_MIN, OPACITY_MAX)
    if single:
        return quat[0], scales[0], float(opacity[0]), bool(degenerate[0])
    return quat, scales, opacity, degenerate


# -- multi-scale point descriptor ---------------------------------------------

@dataclass
class DescriptorNetWeights:
    full: MlpWeights  # (xyz, rgb) -> h
    coarse1: MlpWeights  # applied to the r1 downsample, mean pooled
    coarse2: MlpWeights  # applied to the r2 downsample, mean pooled
    fusion: MlpWeights  # 3h -> descriptor dim
    r1: float = 0.5
    r2: float = 0.25

    def __post_init__(self):
        if not self.r1 > self.r2 > 0:
            raise ValueError("sampling rates must satisfy r1 > r2 > 0")
        h = self.full.out_dim
        if self.coarse1.out_dim != h or self.coarse2.out_dim != h or self.fusion.in_dim != 3 * h:
            raise DimMismatch("descriptor stage dims do not chain")

    @property
    def out_dim(self) -> int:
        return self.fusion.out_dim


def downsample_step(rate: float) -> int:
    return max(1, int(math.floor(1.0 / rate)))


def descriptor_stages(points, colors, w: DescriptorNetWeights):
    """(full-scale per-point features, pooled r1 features, pooled r2 features)."""
    x = np.concatenate([np.asarray(points, np.float64).reshape(-1, 3),
                        np.asarray(colors, np.float64).reshape(-1, 3)], axis=1)
    full = mlp_forward(w.full, x)
    p1 = mlp_forward(w.coarse1, x[:: downsample_step(w.r1)]).mean(axis=0)
    p2 = mlp_forward(w.coarse2, x[:: downsample_step(w.r2)]).mean(axis=0)
    return full, p1, p2


def point_descriptor(points, colors, w: Optional[DescriptorNetWeights]) -> np.ndarray:
    """Per-point descriptors combining full-scale and pooled coarse-scale context."""
    if w is None:
        raise WeightsNotLoaded("descriptor network not loaded")
    if len(points) < 1:
        raise ValueError("need at least one point")
    full, p1, p2 = descriptor_stages(points, colors, w)
    m = len(full)
    return mlp_forward(w.fusion, np.concatenate([full, np.broadcast_to(p1, (m, len(p1))),
                                                 np.broadcast_to(p2, (m, len(p2)))], axis=1))


# -- attention ------------------------------------------------------------------

@dataclass
class AttentionWeights:
    wq: np.ndarray  # (d, d), applied as x @ wq.T
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.wq.shape[0]
        if any(m.shape != (d, d) for m in (self.wq, self.wk, self.wv, self.wo)):
            raise DimMismatch("attention projections must all be d x d")
        if self.heads < 1 or d % self.heads:
            raise DimMismatch("model dim %d not divisible by %d heads" % (d, self.heads))

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def cross_attention(w: Optional[AttentionWeights], queries, keys, values=None, return_weights=False):
    """Multi-head scaled dot-product attention of ``queries`` (n, d) over ``keys``/``values`` (m, d)."""
    if w is None:
        raise WeightsNotLoaded("attention weights not loaded")
    values = keys if values is None else values
    q_in = np.asarray(queries, np.float64)
    k_in = np.asarray(keys, np.float64)
    v_in = np.asarray(values, np.float64)
    d = w.dim
    if q_in.ndim != 2 or k_in.ndim != 2 or q_in.shape[1] != d or k_in.shape[1] != d or v_in.shape != k_in.shape:
        raise DimMismatch("attention expects (n, %d) queries and matching (m, %d) keys/values" % (d, d))
    h, dh = w.heads, d // w.heads
    q = (q_in @ w.wq.T).reshape(len(q_in), h, dh).transpose(1, 0, 2)
    k = (k_in @ w.wk.T).reshape(len(k_in), h, dh).transpose(1, 0, 2)
    v = (v_in @ w.wv.T).reshape(len(v_in), h, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    logits -= logits.max(axis=-1, keepdims=True)
    att = np.exp(logits)
    att /= att.sum(axis=-1, keepdims=True)
    out = (att @ v).transpose(1, 0, 2).reshape(len(q_in), d) @ w.wo.T
    return (out, att) if return_weights else out


# -- patch encoders ---------------------------------------------------------------

@dataclass
class PatchEncoder:
    """Splits an H x W x C map into p x p patches and embeds each with an MLP."""

    patch: int
    mlp: MlpWeights

    def tokens(self, image) -> np.ndarray:
        img = np.asarray(image, np.float64)
        if img.ndim != 3:
            raise DimMismatch("encoder input must be H x W x C")
        p = self.patch
        gh, gw = img.shape[0] // p, img.shape[1] // p
        if gh == 0 or gw == 0:
            raise DimMismatch("map %s smaller than one %dx%d patch" % (img.shape, p, p))
        if p * p * img.shape[2] != self.mlp.in_dim:
            raise DimMismatch("patch of %d values, encoder expects %d" % (p * p * img.shape[2], self.mlp.in_dim))
        x = img[: gh * p, : gw * p].reshape(gh, p, gw, p, img.shape[2]).transpose(0, 2, 1, 3, 4)
        return mlp_forward(self.mlp, x.reshape(gh * gw, -1))


# -- finite differences -------------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    numeric: np.ndarray
    analytic: Optional[np.ndarray]


def central_difference(f: Callable, x, h: float = 1e-4) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_check(f: Callable, x, grad=None, h: float = 1e-4) -> GradCheck:
    """Compare an analytic gradient with central differences.

    ``grad`` may be an array or a callable of ``x``. The error is
    ``max|g_a - g_n| / max(max|g_a|, max|g_n|)`` (inf-norm relative). Without
    an analytic gradient the numeric one is returned with a NaN error.
    """
    num = central_difference(f, x, h)
    if grad is None:
        return GradCheck(float("nan"), num, None)
    ana = np.asarray(grad(np.asarray(x, np.float64)) if callable(grad) else grad, dtype=np.float64)
    scale = max(float(np.max(np.abs(ana), initial=0.0)), float(np.max(np.abs(num), initial=0.0)))
    diff = float(np.max(np.abs(ana - num), initial=0.0))
    err = 0.0 if diff == 0.0 else (diff / scale if scale > 0 else float("inf"))
    return GradCheck(err, num, ana)


# -- TNW1 weight files ------------------------------------------------------------

TNW_MAGIC = b"TNW1"
TNW_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(TNW_MAGIC)
        f.write(struct.pack("<II", TNW_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 255:
                raise ValueError("tensor name too long: %s" % name)
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<B", len(raw)) + raw)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack("<%dI" % a.ndim, *a.shape))
            f.write(a.tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TNW_MAGIC:
        raise BadMagic("not a TNW1 weight file: %s" % path)
    if len(blob) < 12:
        raise CorruptLength("truncated TNW1 header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != TNW_VERSION:
        raise VersionUnsupported("TNW1 version %d" % version)
    off, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<B", blob, off)
            name = blob[off + 1: off + 1 + nlen].decode("utf-8")
            off += 1 + nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            dims = struct.unpack_from("<%dI" % rank, blob, off + 4)
            off += 4 + 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(blob):
                raise CorruptLength("tensor %s runs past end of file" % name)
            out[name] = np.frombuffer(blob, "<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise CorruptLength("truncated TNW1 file: %s" % exc) from None
    if off != len(blob):
        raise CorruptLength("%d trailing bytes after last tensor" % (len(blob) - off))
    return out


def _mlp_to_tensors(prefix, mlp: MlpWeights, out: dict):
    out[prefix + ".acts"] = np.array([ACTIVATIONS.index(l.activation) for l in mlp.layers], np.float32)
    for i, layer in enumerate(mlp.layers):
        out["%s.%d.weight" % (prefix, i)] = layer.weight
        out["%s.%d.bias" % (prefix, i)] = layer.bias


def _mlp_from_tensors(prefix, t: dict) -> Optional[MlpWeights]:
    if prefix + ".acts" not in t:
        return None
    acts = [ACTIVATIONS[int(a)] for a in t[prefix + ".acts"]]
    return MlpWeights([Layer(t["%s.%d.weight" % (prefix, i)], t["%s.%d.bias" % (prefix, i)], a)
                       for i, a in enumerate(acts)])


@dataclass
class NetBundle:
    """Every learned component the pipeline uses; missing parts stay ``None``."""

    phi1: Optional[MlpWeights] = None  # (f_q, p_q - h_k in the heading frame of view k) -> f_{q,h}
    phi2: Optional[MlpWeights] = None  # (f'_q, cos, sin) -> radiance
    phi3: Optional[MlpWeights] = None  # f_{q,h} -> density (softplus output)
    heads: Optional[GaussianHeads] = None
    descriptor: Optional[DescriptorNetWeights] = None
    enc_image: Optional[PatchEncoder] = None
    enc_feature: Optional[PatchEncoder] = None
    enc_nerf: Optional[PatchEncoder] = None
    attention: Optional[AttentionWeights] = None
    ffn: Optional[MlpWeights] = None

    @property
    def feature_dim(self) -> int:
        if self.phi3 is None:
            raise WeightsNotLoaded("feature-field networks not loaded")
        return self.phi3.in_dim

    def to_tensors(self) -> dict:
        t = {}
        for name in ("phi1", "phi2", "phi3", "ffn"):
            if getattr(self, name) is not None:
                _mlp_to_tensors(name, getattr(self, name), t)
        if self.heads is not None:
            _mlp_to_tensors("head_r", self.heads.rotation, t)
            _mlp_to_tensors("head_s", self.heads.scale, t)
            _mlp_to_tensors("head_o", self.heads.opacity, t)
        if self.descriptor is not None:
            d = self.descriptor
            for name in ("full", "coarse1", "coarse2", "fusion"):
                _mlp_to_tensors("desc_" + name, getattr(d, name), t)
            t["desc.rates"] = np.array([d.r1, d.r2], np.float32)
        for name in ("enc_image", "enc_feature", "enc_nerf"):
            enc = getattr(self, name)
            if enc is not None:
                _mlp_to_tensors(name, enc.mlp, t)
                t[name + ".patch"] = np.array([enc.patch], np.float32)
        if self.attention is not None:
            a = self.attention
            for name in ("wq", "wk", "wv", "wo"):
                t["attn." + name] = getattr(a, name)
            t["attn.heads"] = np.array([a.heads], np.float32)
        return t

    @classmethod
    def from_tensors(cls, t: dict) -> "NetBundle":
        b = cls(phi1=_mlp_from_tensors("phi1", t), phi2=_mlp_from_tensors("phi2", t),
                phi3=_mlp_from_tensors("phi3", t), ffn=_mlp_from_tensors("ffn", t))
        if "head_r.acts" in t:
            b.heads = GaussianHeads(_mlp_from_tensors("head_r", t), _mlp_from_tensors("head_s", t),
                                    _mlp_from_tensors("head_o", t))
        if "desc.rates" in t:
            r1, r2 = (float(v) for v in t["desc.rates"])
            b.descriptor = DescriptorNetWeights(*(_mlp_from_tensors("desc_" + n, t)
                                                  for n in ("full", "coarse1", "coarse2", "fusion")), r1=r1, r2=r2)
        for name in ("enc_image", "enc_feature", "enc_nerf"):
            if name + ".patch" in t:
                setattr(b, name, PatchEncoder(int(t[name + ".patch"][0]), _mlp_from_tensors(name, t)))
        if "attn.heads" in t:
            b.attention = AttentionWeights(t["attn.wq"], t["attn.wk"], t["attn.wv"], t["attn.wo"],
                                           int(t["attn.heads"][0]))
        return b

    def save(self, path) -> None:
        save_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path) -> "NetBundle":
        return cls.from_tensors(load_tensors(path))


def _f32(bundle: NetBundle) -> NetBundle:
    """Round-trip through float32 so in-memory weights equal what a file would hold."""
    return NetBundle.from_tensors({k: np.asarray(v, np.float32) for k, v in bundle.to_tensors().items()})


def default_bundle(seed: int = 0, feature_dim: int = 16, desc_dim: int = 16, d_model: int = 768,
                   heads: int = 8, hidden: int = 32, splat_scale: float = 0.04,
                   splat_opacity: float = 0.97, patch: int = 16) -> NetBundle:
    """Deterministic seeded weights for every component.

    The Gaussian scale and opacity heads are biased so that untrained splats
    come out near ``splat_scale`` meters and ``splat_opacity``; everything
    else is plain scaled-normal initialization.
    """
    rng = np.random.default_rng(seed)
    D = feature_dim
    phi1 = random_mlp(rng, [D + 3, hidden, D], ["relu", "none"])
    phi2 = random_mlp(rng, [D + 2, hidden, D], ["relu", "none"])
    phi3 = random_mlp(rng, [D, hidden, 1], ["relu", "softplus"])
    dh = 32
    desc = DescriptorNetWeights(
        random_mlp(rng, [6, dh], ["relu"]), random_mlp(rng, [6, dh], ["relu"]),
        random_mlp(rng, [6, dh], ["relu"]), random_mlp(rng, [3 * dh, desc_dim], ["tanh"]))
    h_r = random_mlp(rng, [desc_dim, 4], ["none"])
    h_r.layers[0].bias[:] = [1.0, 0.0, 0.0, 0.0]
    h_s = random_mlp(rng, [desc_dim, 3], ["none"], gain=0.02)
    h_s.layers[0].bias[:] = math.log(splat_scale)
    h_o = random_mlp(rng, [desc_dim, 1], ["none"], gain=0.02)
    h_o.layers[0].bias[:] = math.log(splat_opacity / (1.0 - splat_opacity))
    enc_i = PatchEncoder(patch, random_mlp(rng, [patch * patch * 3, d_model], ["tanh"], gain=0.5))
    enc_f = PatchEncoder(patch, random_mlp(rng, [patch * patch * desc_dim, d_model], ["tanh"], gain=0.5))
    enc_n = PatchEncoder(1, random_mlp(rng, [D, d_model], ["tanh"], gain=0.5))
    s = 1.0 / math.sqrt(d_model)
    attn = AttentionWeights(*(rng.normal(0.0, s, (d_model, d_model)) for _ in range(4)), heads=heads)
    ffn = random_mlp(rng, [d_model, 64, 1], ["relu", "none"])
    return _f32(NetBundle(phi1, phi2, phi3, GaussianHeads(h_r, h_s, h_o), desc, enc_i, enc_f, enc_n, attn, ffn))
