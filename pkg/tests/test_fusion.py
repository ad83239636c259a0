import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npr import oracles
from npr.errors import AllNodesMasked, DimMismatch, ShapeMismatch, WeightsNotLoaded, WrongViewCount
from npr.fusion import (MASKED_SCORE, NodeSet, ViewEmbedding, encode_nerf_feature, fuse_stu,
                        future_node_embedding, masked_argmax, score_paths)
from npr.nets import AttentionWeights, PatchEncoder, random_mlp


def small_attention(rng, d=24, heads=4, patch=4, cin=3, cfeat=5):
    enc_i = PatchEncoder(patch, random_mlp(rng, [patch * patch * cin, d], ["tanh"]))
    enc_f = PatchEncoder(patch, random_mlp(rng, [patch * patch * cfeat, d], ["tanh"]))
    att = AttentionWeights(*(rng.normal(0, 0.3, (d, d)) for _ in range(4)), heads=heads)
    return enc_i, enc_f, att


# -- fusion ----------------------------------------------------------------------------

def test_singleton_tokens_reduce_to_value_projection(rng):
    enc_i, enc_f, att = small_attention(rng)
    img, fmap = rng.uniform(0, 1, (4, 4, 3)), rng.normal(size=(4, 4, 5))
    v = enc_f.tokens(fmap)[0]
    assert np.allclose(fuse_stu(img, fmap, enc_i, enc_f, att), att.wo @ (att.wv @ v), atol=1e-9)


def test_fusion_matches_loop_attention(rng):
    enc_i, enc_f, att = small_attention(rng)
    img, fmap = rng.uniform(0, 1, (8, 12, 3)), rng.normal(size=(8, 12, 5))
    q, kv = enc_i.tokens(img), enc_f.tokens(fmap)
    ref = oracles.loop_attention(att, q, kv, kv).mean(axis=0)
    assert np.allclose(fuse_stu(img, fmap, enc_i, enc_f, att), ref, atol=1e-9)


def test_key_permutation_invariance(rng):
    enc_i, enc_f, att = small_attention(rng)
    img, fmap = rng.uniform(0, 1, (8, 8, 3)), rng.normal(size=(8, 8, 5))
    swapped = fmap.copy()
    swapped[:4, :4], swapped[4:, 4:] = fmap[4:, 4:], fmap[:4, :4]
    a = fuse_stu(img, fmap, enc_i, enc_f, att)
    assert np.allclose(fuse_stu(img, swapped, enc_i, enc_f, att), a, atol=1e-9)


def test_query_permutation_invariance_of_pooled_output(rng):
    enc_i, enc_f, att = small_attention(rng)
    img, fmap = rng.uniform(0, 1, (8, 8, 3)), rng.normal(size=(8, 8, 5))
    swapped = img.copy()
    swapped[:4, 4:], swapped[4:, :4] = img[4:, :4], img[:4, 4:]
    a = fuse_stu(img, fmap, enc_i, enc_f, att)
    assert np.allclose(fuse_stu(swapped, fmap, enc_i, enc_f, att), a, atol=1e-9)


def test_default_bundle_dimensions(nets, rng):
    img, fmap = rng.uniform(0, 1, (224, 224, 3)), rng.normal(size=(14, 14, nets.feature_dim))
    f = fuse_stu(img[:32, :32], rng.normal(size=(32, 32, nets.feature_dim)), nets.enc_image, nets.enc_feature,
                 nets.attention)
    g = encode_nerf_feature(fmap, nets.enc_nerf)
    assert f.shape == g.shape == (nets.attention.dim,)
    assert np.all(np.isfinite(f)) and np.all(np.isfinite(g))


def test_fusion_shape_errors(rng):
    enc_i, enc_f, att = small_attention(rng)
    with pytest.raises(ShapeMismatch):
        fuse_stu(rng.uniform(size=(8, 8)), rng.normal(size=(8, 8, 5)), enc_i, enc_f, att)
    with pytest.raises(ShapeMismatch):
        fuse_stu(rng.uniform(size=(8, 8, 3)), rng.normal(size=(8, 8)), enc_i, enc_f, att)
    with pytest.raises(WeightsNotLoaded):
        fuse_stu(rng.uniform(size=(8, 8, 3)), rng.normal(size=(8, 8, 5)), None, enc_f, att)
    with pytest.raises(WeightsNotLoaded):
        fuse_stu(rng.uniform(size=(8, 8, 3)), rng.normal(size=(8, 8, 5)), enc_i, enc_f, None)


def test_view_embedding_combined_and_future_average(rng):
    views = [ViewEmbedding(rng.normal(size=6), rng.normal(size=6)) for _ in range(12)]
    want = np.mean([v.f_g_rf + v.f_n_f for v in views], axis=0)
    assert np.allclose(future_node_embedding(views), want, atol=1e-15)
    with pytest.raises(WrongViewCount):
        future_node_embedding(views[:11])


def test_view_embedding_validation():
    with pytest.raises(ShapeMismatch):
        ViewEmbedding(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        ViewEmbedding(np.array([np.nan]), np.zeros(1))


# -- node sets and scoring -------------------------------------------------------------

def test_nodeset_validation():
    with pytest.raises(ShapeMismatch):
        NodeSet(np.zeros((2, 3)), np.zeros((1, 4)), [False] * 3)
    with pytest.raises(ShapeMismatch):
        NodeSet(np.zeros((2, 3)), np.zeros((1, 3)), [False] * 2)


def test_nodeset_empty_parts():
    n = NodeSet(np.zeros((2, 3)), np.zeros((0, 3)), [False, True])
    assert len(n) == 2 and n.embeddings.shape == (2, 3)
    n = NodeSet(np.zeros((0, 3)), np.ones((1, 3)), [False])
    assert n.embeddings.shape == (1, 3)


def test_nodeset_from_records_and_load(tmp_path):
    recs = [{"embedding": [1, 2], "kind": "future", "visited": True},
            {"embedding": [3, 4]}, {"embedding": [5, 6], "kind": "candidate", "visited": False}]
    n = NodeSet.from_records(recs)
    assert n.candidates.tolist() == [[3, 4], [5, 6]] and n.futures.tolist() == [[1, 2]]
    assert n.visited.tolist() == [False, False, True]
    p = tmp_path / "nodes.json"
    p.write_text(json.dumps(recs))
    assert np.array_equal(NodeSet.load(p).embeddings, n.embeddings)
    with pytest.raises(ValueError):
        NodeSet.from_records([{"embedding": [1], "kind": "other"}])


def test_scoring_matches_hand_argmax(rng):
    ffn = random_mlp(rng, [8, 6, 1], ["relu", "none"])
    for _ in range(100):
        nc, nf = rng.integers(1, 5), rng.integers(0, 5)
        emb = rng.normal(size=(nc + nf, 8))
        visited = rng.uniform(size=nc + nf) < 0.3
        if visited.all():
            visited[-1] = False
        res = score_paths(NodeSet(emb[:nc], emb[nc:], visited), ffn)
        raw = [oracles.loop_mlp(ffn, e)[0] for e in emb]
        best = max((s, -i) for i, s in enumerate(raw) if not visited[i])
        assert res.index == -best[1] and not visited[res.index]
        assert np.all(res.scores[visited] == MASKED_SCORE)


def test_visited_top_node_is_never_chosen(rng):
    for _ in range(200):
        n = rng.integers(2, 12)
        s = rng.normal(size=n)
        visited = rng.uniform(size=n) < 0.4
        visited[np.argmax(s)] = True
        if visited.all():
            visited[rng.integers(n)] = False
            visited[np.argmax(s)] = True
        if visited.all():
            continue
        i = masked_argmax(s, visited)
        assert not visited[i]
        assert i == masked_argmax(s + rng.uniform(-1e3, 1e3), visited)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.data())
def test_masked_argmax_property(scores, data):
    n = len(scores)
    visited = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    if all(visited):
        with pytest.raises(AllNodesMasked):
            masked_argmax(scores, visited)
        return
    i = masked_argmax(scores, visited)
    free = [j for j in range(n) if not visited[j]]
    best = max(scores[j] for j in free)
    assert not visited[i] and scores[i] == best and i == min(j for j in free if scores[j] == best)


def test_ties_take_lowest_index():
    assert masked_argmax([1.0, 2.0, 2.0, 2.0], [False, True, False, False]) == 2


def test_scoring_errors(rng):
    ffn = random_mlp(rng, [4, 1], ["none"])
    with pytest.raises(AllNodesMasked):
        score_paths(NodeSet(np.zeros((2, 4)), np.zeros((0, 4)), [True, True]), ffn)
    with pytest.raises(WeightsNotLoaded):
        score_paths(NodeSet(np.zeros((1, 4)), np.zeros((0, 4)), [False]), None)
    with pytest.raises(DimMismatch):
        score_paths(NodeSet(np.zeros((1, 4)), np.zeros((0, 4)), [False]), random_mlp(rng, [4, 2], ["none"]))
