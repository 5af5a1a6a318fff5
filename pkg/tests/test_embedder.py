import math

import numpy as np
import pytest

from spkr import embedder, featpipe, tensorio
from spkr.embedder import TdnnLayerSpec, TdnnSpec


SMALL_SPEC = TdnnSpec(
    input_dim=80,
    layers=(
        TdnnLayerSpec(64, (-2, -1, 0, 1, 2)),
        TdnnLayerSpec(64, (-2, 0, 2)),
        TdnnLayerSpec(96, (0,)),
    ),
    pooling="statistics",
    embed_dim=32,
)


def _reference_forward(feats, spec, weights):
    """Naive per-frame double-precision forward pass (oracle)."""
    h = np.asarray(feats, dtype=np.float64)
    for i, layer in enumerate(spec.layers):
        offsets = [o * layer.dilation for o in layer.context]
        lo, hi = min(offsets), max(offsets)
        t_out = h.shape[0] - (hi - lo)
        w = weights[f"frame{i}.weight"].astype(np.float64)
        b = weights[f"frame{i}.bias"].astype(np.float64)
        gamma = weights[f"frame{i}.norm_gamma"].astype(np.float64)
        beta = weights[f"frame{i}.norm_beta"].astype(np.float64)
        mean = weights[f"frame{i}.norm_mean"].astype(np.float64)
        var = weights[f"frame{i}.norm_var"].astype(np.float64)
        rows = []
        for t in range(t_out):
            ctx = np.concatenate([h[t - lo + off] for off in offsets])
            z = w @ ctx + b
            z = np.where(z > 0.0, z, 0.0)
            rows.append(gamma * (z - mean) / np.sqrt(np.maximum(var, 1e-10)) + beta)
        h = np.stack(rows)
    mean = h.mean(axis=0)
    std = np.sqrt(np.maximum(((h - mean) ** 2).mean(axis=0), 1e-10))
    pooled = np.concatenate([mean, std])
    return (weights["segment.weight"].astype(np.float64) @ pooled
            + weights["segment.bias"].astype(np.float64))


# ---------------------------------------------------------------------------
# pooling


def test_stats_pool_constant_input_hits_floor():
    hidden = np.full((17, 5), 2.5)
    out = embedder.stats_pool(hidden)
    assert np.allclose(out[:5], 2.5)
    assert np.allclose(out[5:], math.sqrt(1e-10))


def test_stats_pool_hand_case():
    hidden = np.array([[0.0, 0.0], [2.0, 2.0]])
    out = embedder.stats_pool(hidden)
    assert np.allclose(out, [1.0, 1.0, 1.0, 1.0])


def test_stats_pool_two_pass_oracle(rng):
    hidden = rng.standard_normal((100, 32))
    out = embedder.stats_pool(hidden)
    mean = hidden.mean(axis=0)
    std = np.sqrt(((hidden - mean) ** 2).mean(axis=0))
    assert np.allclose(out, np.concatenate([mean, std]), atol=1e-6)


def test_stats_pool_permutation_invariant_exactly(rng):
    hidden = rng.standard_normal((37, 12)).astype(np.float32)
    perm = rng.permutation(37)
    assert np.array_equal(embedder.stats_pool(hidden),
                          embedder.stats_pool(hidden[perm]))


def test_stats_pool_output_dim(rng):
    for t in (1, 2, 50):
        assert embedder.stats_pool(rng.standard_normal((t, 7))).shape == (14,)


def test_attentive_uniform_equals_stats(rng):
    hidden = rng.standard_normal((30, 16))
    w = rng.standard_normal((8, 16))
    b = rng.standard_normal(8)
    v = np.zeros(8)  # scores all equal -> uniform attention
    out = embedder.attentive_stats_pool(hidden, w, b, v)
    assert np.allclose(out, embedder.stats_pool(hidden), atol=1e-9)


def test_attentive_one_hot_limit(rng):
    hidden = rng.standard_normal((4, 6))
    # rig scores: one frame dominates by ~200 in the score
    w = np.zeros((1, 6))
    b = np.zeros(1)
    v = np.array([100.0])
    w[0] = 0.0
    hidden_rigged = hidden.copy()
    # tanh saturates: make frame 2's score +100, others -100
    scores_in = np.full(4, -5.0)
    scores_in[2] = 5.0
    hidden_rigged[:, 0] = scores_in
    w[0, 0] = 1.0
    out = embedder.attentive_stats_pool(hidden_rigged, w, b, v)
    assert np.allclose(out[:6], hidden_rigged[2], atol=1e-8)
    assert np.allclose(out[6:], math.sqrt(1e-10), atol=1e-8)


def test_attentive_weights_sum_to_one(rng):
    for _ in range(20):
        hidden = rng.standard_normal((25, 10))
        w = rng.standard_normal((4, 10))
        b = rng.standard_normal(4)
        v = rng.standard_normal(4)
        scores = np.tanh(hidden @ w.T + b) @ v
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        assert abs(alpha.sum() - 1.0) < 1e-7
        mu = alpha @ hidden
        out = embedder.attentive_stats_pool(hidden, w, b, v)
        assert np.allclose(out[:10], mu, atol=1e-9)


# ---------------------------------------------------------------------------
# forward


def test_forward_single_frame_single_layer(rng):
    spec = TdnnSpec(input_dim=6, layers=(TdnnLayerSpec(4, (0,)),),
                    pooling="statistics", embed_dim=3)
    weights = embedder.random_weights(spec, rng)
    feats = rng.standard_normal((1, 6)).astype(np.float32)
    out = embedder.forward(feats, spec, weights)

    z = weights["frame0.weight"].astype(np.float64) @ feats[0] \
        + weights["frame0.bias"]
    z = np.maximum(z, 0.0)
    normed = (weights["frame0.norm_gamma"] * (z - weights["frame0.norm_mean"])
              / np.sqrt(np.maximum(weights["frame0.norm_var"], 1e-10))
              + weights["frame0.norm_beta"])
    pooled = np.concatenate([normed, np.full(4, math.sqrt(1e-10))])
    expected = weights["segment.weight"].astype(np.float64) @ pooled \
        + weights["segment.bias"]
    assert np.allclose(out, expected, rtol=1e-5, atol=1e-6)


def test_forward_scaling_equivalence_bitwise(rng):
    """Doubling the first layer output (with compensated norm stats and
    biases downstream) and halving the segment weights is an exact no-op:
    every rescaling is a power of two.

    Biases are shifted positive so no ReLU unit is dead; a zero-variance
    dimension would pin the pooled std to the (non-scaling) floor.
    """
    weights = embedder.random_weights(SMALL_SPEC, rng)
    feats = rng.standard_normal((50, 80)).astype(np.float32)

    # lift each unit's bias above its minimum pre-activation so no ReLU
    # output is constant over time (a dead unit would pin the pooled std
    # to the floor, which does not scale)
    hidden = feats
    for i, layer in enumerate(SMALL_SPEC.layers):
        offsets = [o * layer.dilation for o in layer.context]
        lo, hi = min(offsets), max(offsets)
        t_out = hidden.shape[0] - (hi - lo)
        cols = [hidden[-lo + off:-lo + off + t_out] for off in offsets]
        pre = (np.concatenate(cols, axis=1) @ weights[f"frame{i}.weight"].T
               + weights[f"frame{i}.bias"])
        lift = np.maximum(0.5 - pre.min(axis=0), 0.0).astype(np.float32)
        weights[f"frame{i}.bias"] = weights[f"frame{i}.bias"] + lift
        hidden = embedder._frame_layer(hidden, layer, weights, i)
    assert ((hidden - hidden.mean(0)) ** 2).mean(0).min() > 1e-8

    base = embedder.forward(feats, SMALL_SPEC, weights)

    scaled = {k: v.copy() for k, v in weights.items()}
    scaled["frame0.weight"] = weights["frame0.weight"] * 2
    for i in range(len(SMALL_SPEC.layers)):
        scaled[f"frame{i}.bias"] = weights[f"frame{i}.bias"] * 2
        scaled[f"frame{i}.norm_mean"] = weights[f"frame{i}.norm_mean"] * 2
        scaled[f"frame{i}.norm_var"] = weights[f"frame{i}.norm_var"] * 4
        scaled[f"frame{i}.norm_gamma"] = weights[f"frame{i}.norm_gamma"] * 2
        scaled[f"frame{i}.norm_beta"] = weights[f"frame{i}.norm_beta"] * 2
    scaled["segment.weight"] = weights["segment.weight"] / 2
    doubled = embedder.forward(feats, SMALL_SPEC, scaled)
    assert np.array_equal(base, doubled)


def test_forward_matches_reference_oracle(rng):
    weights = embedder.random_weights(SMALL_SPEC, rng)
    feats = rng.standard_normal((50, 80)).astype(np.float32)
    got = embedder.forward(feats, SMALL_SPEC, weights)
    expected = _reference_forward(feats, SMALL_SPEC, weights)
    np.testing.assert_allclose(got, expected, rtol=1e-4, atol=1e-5)


def test_forward_golden_values():
    """Frozen output head for a fixed seed, regenerated by the naive
    reference implementation."""
    rng = np.random.default_rng(123)
    weights = embedder.random_weights(SMALL_SPEC, rng)
    feats = rng.standard_normal((50, 80)).astype(np.float32)
    got = embedder.forward(feats, SMALL_SPEC, weights)
    golden_head = GOLDEN_HEAD
    np.testing.assert_allclose(got[:5], golden_head, rtol=1e-4, atol=1e-5)


def test_forward_deterministic(rng):
    weights = embedder.random_weights(SMALL_SPEC, rng)
    feats = rng.standard_normal((30, 80)).astype(np.float32)
    a = embedder.forward(feats, SMALL_SPEC, weights)
    b = embedder.forward(feats, SMALL_SPEC, weights)
    assert np.array_equal(a, b)


def test_forward_attentive_spec(rng):
    spec = TdnnSpec(input_dim=10, layers=(TdnnLayerSpec(8, (-1, 0, 1)),),
                    pooling="attentive", embed_dim=5, attention_hidden=4)
    weights = embedder.random_weights(spec, rng)
    out = embedder.forward(rng.standard_normal((20, 10)), spec, weights)
    assert out.shape == (5,)
    assert np.all(np.isfinite(out))


def test_forward_shape_errors(rng):
    weights = embedder.random_weights(SMALL_SPEC, rng)
    with pytest.raises(embedder.WeightError, match="feature dims"):
        embedder.forward(rng.standard_normal((20, 40)), SMALL_SPEC, weights)
    with pytest.raises(embedder.WeightError, match="frame1"):
        # 3 frames survive layer 0 (span 4) but layer 1 spans 4 more
        embedder.forward(rng.standard_normal((7, 80)), SMALL_SPEC, weights)


def test_validate_weights(rng):
    weights = embedder.random_weights(SMALL_SPEC, rng)
    embedder.validate_weights(SMALL_SPEC, weights)
    missing = dict(weights)
    del missing["frame1.bias"]
    with pytest.raises(embedder.WeightError, match="frame1.bias"):
        embedder.validate_weights(SMALL_SPEC, missing)
    bad = dict(weights)
    bad["segment.weight"] = bad["segment.weight"][:, :-1]
    with pytest.raises(embedder.WeightError, match="segment.weight"):
        embedder.validate_weights(SMALL_SPEC, bad)


def test_extract_preserves_key_order(rng):
    spec = TdnnSpec(input_dim=8, layers=(TdnnLayerSpec(6, (0,)),),
                    pooling="statistics", embed_dim=4)
    weights = embedder.random_weights(spec, rng)
    batches = [
        featpipe.Batch(rng.standard_normal((3, 10, 8)),
                       np.array([0, 1, 2]), ["a", "b", "c"]),
        featpipe.Batch(rng.standard_normal((2, 10, 8)),
                       np.array([0, 1]), ["d", "e"]),
    ]
    pairs = list(embedder.extract(iter(batches), spec, weights))
    assert [k for k, _ in pairs] == ["a", "b", "c", "d", "e"]
    direct = embedder.forward(batches[0].feats[1], spec, weights)
    assert np.array_equal(pairs[1][1], direct)


def test_weight_container_roundtrip(tmp_path, rng):
    weights = embedder.random_weights(SMALL_SPEC, rng)
    path = tmp_path / "w.wstn"
    tensorio.write_tensors(path, weights)
    back = tensorio.read_tensors(path)
    assert set(back) == set(weights)
    for name in weights:
        assert np.array_equal(back[name], weights[name])
    emb1 = embedder.forward(np.ones((30, 80), np.float32), SMALL_SPEC, weights)
    emb2 = embedder.forward(np.ones((30, 80), np.float32), SMALL_SPEC, back)
    assert np.array_equal(emb1, emb2)


def test_embeddings_text_roundtrip(tmp_path, rng):
    pairs = [(f"k{i}", rng.standard_normal(6).astype(np.float32))
             for i in range(4)]
    path = tmp_path / "emb.txt"
    with open(path, "w") as f:
        embedder.write_embeddings_text(pairs, f)
    back = embedder.read_embeddings_text(path)
    for key, vec in pairs:
        np.testing.assert_allclose(back[key], vec, rtol=1e-7)


def test_spec_from_flat():
    consumed = set()
    spec = TdnnSpec.from_flat(
        {"tdnn_layers": "32:-1,0,1:1 48:0:2", "pooling": "attentive",
         "embed_dim": "16", "attention_hidden": "8"},
        consumed, input_dim=40)
    assert spec.layers == (TdnnLayerSpec(32, (-1, 0, 1), 1),
                           TdnnLayerSpec(48, (0,), 2))
    assert spec.pooling == "attentive"
    assert spec.embed_dim == 16
    assert consumed == {"tdnn_layers", "pooling", "embed_dim", "attention_hidden"}


# first five embedding entries for seed 123, from _reference_forward
GOLDEN_HEAD = np.array(
    [0.68753739, -0.40229005, -0.69926757, -0.04170381, -0.26087747])
