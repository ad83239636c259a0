"""Separate-then-united fusion of the two render branches, and path scoring."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from npr.clouds import N_VIEWS
from npr.errors import AllNodesMasked, DimMismatch, ShapeMismatch, WeightsNotLoaded, WrongViewCount
from npr.nets import AttentionWeights, MlpWeights, PatchEncoder, cross_attention, mlp_forward

# Stand-in for -inf that keeps every score finite.
MASKED_SCORE = -np.finfo(np.float64).max


def _encoder(enc: Optional[PatchEncoder], name: str) -> PatchEncoder:
    if enc is None:
        raise WeightsNotLoaded("%s encoder not loaded" % name)
    return enc


def fuse_stu(image, fmap, enc_image: Optional[PatchEncoder], enc_feature: Optional[PatchEncoder],
             attention: Optional[AttentionWeights]) -> np.ndarray:
    """Image tokens attend to feature-map tokens; the result is mean pooled to one d-vector."""
    enc_image = _encoder(enc_image, "image")
    enc_feature = _encoder(enc_feature, "feature")
    if attention is None:
        raise WeightsNotLoaded("attention weights not loaded")
    image, fmap = np.asarray(image, np.float64), np.asarray(fmap, np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch("image must be H x W x 3, got %s" % (image.shape,))
    if fmap.ndim != 3:
        raise ShapeMismatch("feature map must be H x W x D, got %s" % (fmap.shape,))
    q = enc_image.tokens(image)
    kv = enc_feature.tokens(fmap)
    if q.shape[1] != attention.dim or kv.shape[1] != attention.dim:
        raise ShapeMismatch("encoder width does not match attention dim %d" % attention.dim)
    return cross_attention(attention, q, kv, kv).mean(axis=0)


def encode_nerf_feature(fmap, enc: Optional[PatchEncoder]) -> np.ndarray:
    """Token-encode a volume-rendered feature map and mean pool it."""
    enc = _encoder(enc, "nerf feature")
    return enc.tokens(np.asarray(fmap, np.float64)).mean(axis=0)


@dataclass
class ViewEmbedding:
    f_g_rf: np.ndarray  # fused splat-branch embedding
    f_n_f: np.ndarray  # volume-branch embedding

    def __post_init__(self):
        self.f_g_rf = np.asarray(self.f_g_rf, np.float64).reshape(-1)
        self.f_n_f = np.asarray(self.f_n_f, np.float64).reshape(-1)
        if self.f_g_rf.shape != self.f_n_f.shape:
            raise ShapeMismatch("branch embeddings differ in width")
        if not (np.all(np.isfinite(self.f_g_rf)) and np.all(np.isfinite(self.f_n_f))):
            raise ValueError("embeddings must be finite")

    @property
    def combined(self) -> np.ndarray:
        return self.f_g_rf + self.f_n_f


def future_node_embedding(views: Sequence[ViewEmbedding]) -> np.ndarray:
    """Average of the twelve combined view embeddings of one future node."""
    if len(views) != N_VIEWS:
        raise WrongViewCount("expected %d view embeddings, got %d" % (N_VIEWS, len(views)))
    return np.mean([v.combined for v in views], axis=0)


def _rows(a) -> np.ndarray:
    a = np.asarray(a, np.float64)
    if a.size == 0:
        return a.reshape(0, a.shape[-1] if a.ndim == 2 else 0)
    return a.reshape(len(a), -1)


@dataclass
class NodeSet:
    candidates: np.ndarray  # (n_c, d)
    futures: np.ndarray  # (n_f, d)
    visited: np.ndarray  # (n_c + n_f,) bool, candidates first

    def __post_init__(self):
        self.candidates = _rows(self.candidates)
        self.futures = _rows(self.futures)
        self.visited = np.asarray(self.visited, bool).reshape(-1)
        if len(self.candidates) and len(self.futures) and self.candidates.shape[1] != self.futures.shape[1]:
            raise ShapeMismatch("candidate and future embeddings differ in width")
        if len(self.visited) != len(self):
            raise ShapeMismatch("mask has %d entries for %d nodes" % (len(self.visited), len(self)))

    def __len__(self):
        return len(self.candidates) + len(self.futures)

    @property
    def embeddings(self) -> np.ndarray:
        parts = [p for p in (self.candidates, self.futures) if len(p)]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, 0))

    @classmethod
    def from_records(cls, records) -> "NodeSet":
        cand, fut, vc, vf = [], [], [], []
        for r in records:
            kind = r.get("kind", "candidate")
            if kind not in ("candidate", "future"):
                raise ValueError("node kind must be 'candidate' or 'future', got %r" % kind)
            (cand if kind == "candidate" else fut).append(r["embedding"])
            (vc if kind == "candidate" else vf).append(bool(r.get("visited", False)))
        d = len((cand or fut or [[]])[0])
        return cls(np.array(cand, float).reshape(-1, d), np.array(fut, float).reshape(-1, d), vc + vf)

    @classmethod
    def load(cls, path) -> "NodeSet":
        with open(path) as f:
            return cls.from_records(json.load(f))


@dataclass
class PathScores:
    scores: np.ndarray  # (n,), visited nodes hold MASKED_SCORE
    index: int
    best: float


def masked_argmax(scores, visited) -> int:
    """Highest unvisited score, lowest index on ties."""
    s = np.where(np.asarray(visited, bool), MASKED_SCORE, np.asarray(scores, np.float64))
    if np.all(visited):
        raise AllNodesMasked("every node is visited")
    return int(np.argmax(s))


def score_paths(nodes: NodeSet, ffn: Optional[MlpWeights]) -> PathScores:
    """Score every node with the FFN in one pool; visited nodes are masked out."""
    if ffn is None:
        raise WeightsNotLoaded("path-scoring FFN not loaded")
    if ffn.out_dim != 1:
        raise DimMismatch("scoring FFN must output a scalar")
    if len(nodes) == 0 or nodes.visited.all():
        raise AllNodesMasked("no unvisited node to choose")
    raw = mlp_forward(ffn, nodes.embeddings)[:, 0]
    scores = np.where(nodes.visited, MASKED_SCORE, raw)
    i = int(np.argmax(scores))
    return PathScores(scores, i, float(scores[i]))
