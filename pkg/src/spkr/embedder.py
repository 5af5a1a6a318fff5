"""Forward-only deep speaker embedding extraction.

A stack of time-delay (TDNN) frame layers feeds a statistics or attentive
pooling layer, then one affine segment layer whose pre-activation output
is the embedding. Inference only: normalization layers consume stored
running statistics, nothing here is trainable.
"""

import math
from dataclasses import dataclass

import numpy as np

NORM_VAR_FLOOR = 1e-10
POOL_VAR_FLOOR = 1e-10


class WeightError(Exception):
    """A required parameter is missing or has the wrong shape."""


@dataclass(frozen=True)
class TdnnLayerSpec:
    out_dim: int
    context: tuple  # frame offsets, e.g. (-2, 0, 2)
    dilation: int = 1


@dataclass(frozen=True)
class TdnnSpec:
    input_dim: int = 80
    layers: tuple = (
        TdnnLayerSpec(512, (-2, -1, 0, 1, 2)),
        TdnnLayerSpec(512, (-2, 0, 2)),
        TdnnLayerSpec(512, (-3, 0, 3)),
        TdnnLayerSpec(512, (0,)),
        TdnnLayerSpec(1500, (0,)),
    )
    pooling: str = "statistics"  # or "attentive"
    embed_dim: int = 512
    attention_hidden: int = 64

    @classmethod
    def from_flat(cls, flat: dict, consumed: set, input_dim: int = 80) -> "TdnnSpec":
        """Build a spec from flat config keys.

        ``tdnn_layers`` is whitespace-separated ``out:off,off,...:dilation``
        triples; ``pooling``, ``embed_dim`` and ``attention_hidden`` are
        plain values.
        """
        kwargs = {"input_dim": input_dim}
        if "tdnn_layers" in flat:
            layers = []
            for tok in flat["tdnn_layers"].split():
                out_dim, offsets, dilation = tok.split(":")
                layers.append(TdnnLayerSpec(
                    int(out_dim),
                    tuple(int(o) for o in offsets.split(",")),
                    int(dilation),
                ))
            kwargs["layers"] = tuple(layers)
            consumed.add("tdnn_layers")
        for key in ("pooling",):
            if key in flat:
                kwargs[key] = flat[key]
                consumed.add(key)
        for key in ("embed_dim", "attention_hidden"):
            if key in flat:
                kwargs[key] = int(flat[key])
                consumed.add(key)
        return cls(**kwargs)


def _layer_param_shapes(spec: TdnnSpec):
    shapes = {}
    in_dim = spec.input_dim
    for i, layer in enumerate(spec.layers):
        ctx = len(layer.context)
        shapes[f"frame{i}.weight"] = (layer.out_dim, in_dim * ctx)
        shapes[f"frame{i}.bias"] = (layer.out_dim,)
        for suffix in ("norm_gamma", "norm_beta", "norm_mean", "norm_var"):
            shapes[f"frame{i}.{suffix}"] = (layer.out_dim,)
        in_dim = layer.out_dim
    if spec.pooling == "attentive":
        shapes["attn.w"] = (spec.attention_hidden, in_dim)
        shapes["attn.b"] = (spec.attention_hidden,)
        shapes["attn.v"] = (spec.attention_hidden,)
    shapes["segment.weight"] = (spec.embed_dim, 2 * in_dim)
    shapes["segment.bias"] = (spec.embed_dim,)
    return shapes


def validate_weights(spec: TdnnSpec, weights: dict) -> None:
    """Check every spec-required parameter is present with the right shape."""
    for name, shape in _layer_param_shapes(spec).items():
        if name not in weights:
            raise WeightError(f"missing parameter {name!r}")
        got = tuple(weights[name].shape)
        if got != shape:
            raise WeightError(f"{name}: expected shape {shape}, got {got}")


def random_weights(spec: TdnnSpec, rng) -> dict:
    """Random but well-conditioned parameters (for tests and demos)."""
    weights = {}
    for name, shape in _layer_param_shapes(spec).items():
        if name.endswith("norm_gamma"):
            arr = rng.uniform(0.5, 1.5, size=shape)
        elif name.endswith("norm_var"):
            arr = rng.uniform(0.5, 2.0, size=shape)
        elif name.endswith(("norm_beta", "norm_mean", ".bias", "attn.b")):
            arr = 0.1 * rng.standard_normal(shape)
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        weights[name] = arr.astype(np.float32)
    return weights


def stats_pool(hidden: np.ndarray) -> np.ndarray:
    """Concatenated per-dimension mean and standard deviation over time;
    the variance is floored before the square root.

    Sums use exactly-rounded accumulation (math.fsum) so the output is
    bit-identical under any permutation of the frames.
    """
    cols = np.asarray(hidden, dtype=np.float64).T
    t = cols.shape[1]
    mean = np.array([math.fsum(col) for col in cols]) / t
    var = np.array([math.fsum(d) for d in (cols - mean[:, None]) ** 2]) / t
    return np.concatenate([mean, np.sqrt(np.maximum(var, POOL_VAR_FLOOR))])


def attentive_stats_pool(hidden: np.ndarray, w: np.ndarray, b: np.ndarray,
                         v: np.ndarray) -> np.ndarray:
    """Attention-weighted mean and standard deviation over time.

    Frame scores are v^T tanh(W h_t + b), softmax-normalized over time.
    Zero attention parameters reduce this to plain statistics pooling.
    """
    scores = np.tanh(hidden @ w.T + b) @ v
    scores = scores - scores.max()
    alpha = np.exp(scores)
    alpha = alpha / alpha.sum()
    mean = alpha @ hidden
    var = np.maximum(alpha @ (hidden - mean) ** 2, POOL_VAR_FLOOR)
    return np.concatenate([mean, np.sqrt(var)])


def _frame_layer(hidden, layer: TdnnLayerSpec, weights, index: int):
    offsets = [o * layer.dilation for o in layer.context]
    lo, hi = min(offsets), max(offsets)
    t_out = hidden.shape[0] - (hi - lo)
    if t_out < 1:
        raise WeightError(
            f"frame{index}: input of {hidden.shape[0]} frames too short for "
            f"context span {hi - lo}"
        )
    start = -lo
    cols = [hidden[start + off:start + off + t_out] for off in offsets]
    stacked = np.concatenate(cols, axis=1)
    w = weights[f"frame{index}.weight"]
    if stacked.shape[1] != w.shape[1]:
        raise WeightError(
            f"frame{index}: weight expects {w.shape[1]} inputs, "
            f"got {stacked.shape[1]}"
        )
    pre = stacked @ w.T + weights[f"frame{index}.bias"]
    act = np.maximum(pre, 0.0)
    gamma = weights[f"frame{index}.norm_gamma"]
    beta = weights[f"frame{index}.norm_beta"]
    mean = weights[f"frame{index}.norm_mean"]
    var = weights[f"frame{index}.norm_var"]
    return gamma * (act - mean) / np.sqrt(np.maximum(var, NORM_VAR_FLOOR)) + beta


def forward(feats: np.ndarray, spec: TdnnSpec, weights: dict) -> np.ndarray:
    """Run one utterance through the network; returns the embedding
    (pre-activation output of the segment layer), float32."""
    hidden = np.asarray(feats, dtype=np.float32)
    if hidden.ndim != 2:
        raise WeightError(f"expected T x F features, got shape {hidden.shape}")
    if hidden.shape[1] != spec.input_dim:
        raise WeightError(
            f"input: expected {spec.input_dim} feature dims, got {hidden.shape[1]}"
        )
    for i, layer in enumerate(spec.layers):
        hidden = _frame_layer(hidden, layer, weights, i)
    if spec.pooling == "statistics":
        pooled = stats_pool(hidden)
    elif spec.pooling == "attentive":
        pooled = attentive_stats_pool(hidden, weights["attn.w"],
                                      weights["attn.b"], weights["attn.v"])
    else:
        raise WeightError(f"unknown pooling {spec.pooling!r}")
    emb = pooled @ weights["segment.weight"].T + weights["segment.bias"]
    return emb.astype(np.float32)


def extract(batches, spec: TdnnSpec, weights: dict):
    """Embed every sample of a batch stream, preserving key order."""
    validate_weights(spec, weights)
    for batch in batches:
        for i, key in enumerate(batch.keys):
            yield key, forward(batch.feats[i], spec, weights)


# --- embedding serialization -----------------------------------------------


def write_embeddings_text(pairs, fileobj) -> None:
    """One ``key v1 v2 ... vD`` line per utterance."""
    for key, vec in pairs:
        fileobj.write(key + " " + " ".join("%.8e" % v for v in vec) + "\n")


def read_embeddings_text(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: no values on line")
            out[parts[0]] = np.array([float(p) for p in parts[1:]])
    return out
