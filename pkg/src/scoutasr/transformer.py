"""Attention, masks, transformer blocks and the convolutional frontend.

Parameters live in flat ``{name: Node}`` mappings; every function takes the
mapping plus a name prefix, so the scout and recognizer can own separate
copies of the same architecture.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Node

SUBSAMPLING = 4
CNN_CONTEXT_MS = 30
FRAME_MS = 10 * SUBSAMPLING


@dataclass(frozen=True)
class ModelDims:
    n_features: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.n_features, self.d_model, self.n_heads, self.d_ff, self.n_layers) < 1:
            raise ValueError(f"invalid dims {self}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------- masks


def causal_mask(n_frames: int) -> np.ndarray:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    return np.tril(np.ones((n_frames, n_frames), dtype=bool))


def validate_segmentation(boundaries, n_frames: int) -> np.ndarray:
    """Check that ``boundaries`` are 1-based, strictly increasing and end at ``n_frames``."""
    g = np.asarray(boundaries, dtype=np.int64).reshape(-1)
    if g.size == 0:
        raise ValueError("segmentation is empty")
    if g[0] < 1 or np.any(np.diff(g) <= 0):
        raise ValueError(f"segmentation must be strictly increasing positive positions, got {g.tolist()}")
    if g[-1] > n_frames:
        raise ValueError(f"boundary {int(g[-1])} exceeds sequence length {n_frames}")
    if g[-1] != n_frames:
        raise ValueError(f"last boundary {int(g[-1])} must equal sequence length {n_frames}")
    return g


def segment_ends(boundaries, n_frames: int) -> np.ndarray:
    """For each 1-based frame i, the boundary g_j with g_{j-1} < i <= g_j."""
    g = validate_segmentation(boundaries, n_frames)
    return g[np.searchsorted(g, np.arange(1, n_frames + 1))]


def boundary_mask(boundaries, n_frames: int) -> np.ndarray:
    """Row i may attend to columns 1..g_j where g_j is the end of i's segment."""
    ends = segment_ends(boundaries, n_frames)
    return np.arange(1, n_frames + 1)[None, :] <= ends[:, None]


def prefix_mask(n_queries: int, allowed: np.ndarray, n_keys: int) -> np.ndarray:
    """Mask where query q sees the first ``allowed[q]`` keys."""
    allowed = np.broadcast_to(np.asarray(allowed), (n_queries,))
    return np.arange(n_keys)[None, :] < allowed[:, None]


# -------------------------------------------------------------------- helpers


def sinusoidal_encoding(positions, d_model: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    enc = np.zeros((positions.shape[0], d_model))
    enc[:, 0::2] = np.sin(positions * rates)
    enc[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return enc


def subsampled_length(n_input: int) -> int:
    return -(-n_input // SUBSAMPLING)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_attention(rng, d_model: int, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{w}": _glorot(rng, d_model, d_model) for w in ("wq", "wk", "wv", "wo")}


def init_feed_forward(rng, d_model: int, d_ff: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": _glorot(rng, d_model, d_ff),
        f"{prefix}.b1": np.zeros(d_ff),
        f"{prefix}.w2": _glorot(rng, d_ff, d_model),
        f"{prefix}.b2": np.zeros(d_model),
    }


def init_norm(d_model: int, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.gain": np.ones(d_model), f"{prefix}.bias": np.zeros(d_model)}


def init_encoder_layer(rng, dims: ModelDims, prefix: str) -> dict[str, np.ndarray]:
    params = {}
    params.update(init_norm(dims.d_model, f"{prefix}.norm1"))
    params.update(init_attention(rng, dims.d_model, f"{prefix}.attn"))
    params.update(init_norm(dims.d_model, f"{prefix}.norm2"))
    params.update(init_feed_forward(rng, dims.d_model, dims.d_ff, f"{prefix}.ff"))
    return params


def init_decoder_layer(rng, dims: ModelDims, prefix: str) -> dict[str, np.ndarray]:
    params = {}
    params.update(init_norm(dims.d_model, f"{prefix}.norm1"))
    params.update(init_attention(rng, dims.d_model, f"{prefix}.self"))
    params.update(init_norm(dims.d_model, f"{prefix}.norm2"))
    params.update(init_attention(rng, dims.d_model, f"{prefix}.cross"))
    params.update(init_norm(dims.d_model, f"{prefix}.norm3"))
    params.update(init_feed_forward(rng, dims.d_model, dims.d_ff, f"{prefix}.ff"))
    return params


def init_frontend(rng, n_features: int, d_model: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.conv1.w": _glorot(rng, 3 * n_features, d_model),
        f"{prefix}.conv1.b": np.zeros(d_model),
        f"{prefix}.conv2.w": _glorot(rng, 3 * d_model, d_model),
        f"{prefix}.conv2.b": np.zeros(d_model),
        f"{prefix}.out.w": _glorot(rng, d_model, d_model),
        f"{prefix}.out.b": np.zeros(d_model),
    }


def init_encoder(rng, dims: ModelDims, prefix: str) -> dict[str, np.ndarray]:
    params = init_frontend(rng, dims.n_features, dims.d_model, f"{prefix}.frontend")
    for layer in range(dims.n_layers):
        params.update(init_encoder_layer(rng, dims, f"{prefix}.layers.{layer}"))
    params.update(init_norm(dims.d_model, f"{prefix}.final_norm"))
    return params


# ------------------------------------------------------------------ attention


def multihead_attention(q, k, v, mask, params, prefix: str, n_heads: int) -> Node:
    """Scaled dot-product attention with ``n_heads`` heads and an output projection.

    ``q`` is (n_q, d); ``k`` and ``v`` are (n_k, d); ``mask`` is a boolean
    (n_q, n_k) matrix of allowed query/key pairs.
    """
    q, k, v = nx.as_node(q), nx.as_node(k), nx.as_node(v)
    d = q.value.shape[-1]
    if k.value.shape[-1] != d or v.value.shape[-1] != d:
        raise ValueError("query, key and value widths differ")
    if k.value.shape[0] != v.value.shape[0]:
        raise ValueError("key and value lengths differ")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (q.value.shape[0], k.value.shape[0]):
        raise ValueError(f"mask shape {mask.shape} does not match ({q.value.shape[0]}, {k.value.shape[0]})")
    wq = params[f"{prefix}.wq"]
    if wq.value.shape[0] != d:
        raise ValueError(f"input width {d} does not match projection {wq.value.shape}")
    d_head = d // n_heads

    def split(x, w):
        projected = nx.reshape(x @ w, (x.value.shape[0], n_heads, d_head))
        return nx.transpose(projected, (1, 0, 2))

    qh = split(q, wq)
    kh = split(k, params[f"{prefix}.wk"])
    vh = split(v, params[f"{prefix}.wv"])
    scores = (qh @ nx.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(d_head))
    weights = nx.masked_softmax(scores, mask[None, :, :])
    heads = nx.transpose(weights @ vh, (1, 0, 2))
    return nx.reshape(heads, (q.value.shape[0], d)) @ params[f"{prefix}.wo"]


def feed_forward(x, params, prefix: str) -> Node:
    hidden = nx.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def norm(x, params, prefix: str) -> Node:
    return nx.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def encoder_layer(h, mask, params, prefix: str, n_heads: int, keys=None) -> Node:
    """Pre-norm self-attention + feed-forward block.

    ``keys`` optionally supplies the (already computed) layer inputs of frames
    that precede ``h``; the queries are the rows of ``h`` and the key/value
    set is ``keys`` followed by ``h``.
    """
    h = nx.as_node(h)
    normed = norm(h, params, f"{prefix}.norm1")
    if keys is None:
        context = normed
    else:
        context = nx.concat([norm(keys, params, f"{prefix}.norm1"), normed], axis=0)
    h = h + multihead_attention(normed, context, context, mask, params, f"{prefix}.attn", n_heads)
    return h + feed_forward(norm(h, params, f"{prefix}.norm2"), params, f"{prefix}.ff")


def decoder_layer(y, h_enc, self_mask, cross_mask, params, prefix: str, n_heads: int) -> Node:
    y = nx.as_node(y)
    normed = norm(y, params, f"{prefix}.norm1")
    y = y + multihead_attention(normed, normed, normed, self_mask, params, f"{prefix}.self", n_heads)
    y = y + multihead_attention(norm(y, params, f"{prefix}.norm2"), h_enc, h_enc, cross_mask, params, f"{prefix}.cross", n_heads)
    return y + feed_forward(norm(y, params, f"{prefix}.norm3"), params, f"{prefix}.ff")


# ------------------------------------------------------------------- frontend


def _window_index(centres: np.ndarray, n_available: int) -> np.ndarray:
    idx = centres[:, None] + np.array([-1, 0, 1])[None, :]
    return np.where((idx >= 0) & (idx < n_available), idx, -1)


def subsample_rows(features, start: int, stop: int, params, prefix: str) -> Node:
    """Frontend output rows ``start..stop-1`` (0-based) from an input prefix.

    Two kernel-3 stride-2 convolutions with zero padding, then a linear
    projection.  Row i reads input frames up to ``4*i + 3``; the caller must
    supply that many frames unless ``features`` is the complete utterance.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (frames, dims) array")
    w1 = params[f"{prefix}.conv1.w"]
    if 3 * x.shape[1] != w1.value.shape[0]:
        raise ValueError(f"feature dim {x.shape[1]} does not match frontend input {w1.value.shape[0] // 3}")
    n_mid = -(-x.shape[0] // 2)
    mid_lo, mid_hi = max(2 * start - 1, 0), min(2 * stop, n_mid)
    mid_pos = np.arange(mid_lo, mid_hi)
    windows = _window_index(2 * mid_pos, x.shape[0])
    valid = windows >= 0
    patches = np.where(valid[..., None], x[np.where(valid, windows, 0)], 0.0).reshape(len(mid_pos), -1)
    mid = nx.relu(nx.Node(patches) @ w1 + params[f"{prefix}.conv1.b"])
    # conv2 windows index conv1 rows, shifted into the local block [mid_lo, mid_hi)
    outer = _window_index(2 * np.arange(start, stop), n_mid)
    local = np.where(outer >= 0, outer - mid_lo, -1)
    stacked = nx.gather_rows(mid, local.reshape(-1))
    stacked = nx.reshape(stacked, (stop - start, -1))
    out = nx.relu(stacked @ params[f"{prefix}.conv2.w"] + params[f"{prefix}.conv2.b"])
    return out @ params[f"{prefix}.out.w"] + params[f"{prefix}.out.b"]


def subsample(features, params, prefix: str) -> Node:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (frames, dims) array")
    return subsample_rows(x, 0, subsampled_length(x.shape[0]), params, prefix)


def required_input_frames(n_rows: int) -> int:
    """Input frames needed before frontend rows ``0..n_rows-1`` are final."""
    return SUBSAMPLING * n_rows


# -------------------------------------------------------------------- encoder


def embed_rows(features, start: int, stop: int, params, prefix: str, d_model: int) -> Node:
    rows = subsample_rows(features, start, stop, params, f"{prefix}.frontend")
    return rows + sinusoidal_encoding(np.arange(start, stop), d_model)


def encode(features, mask, params, prefix: str, dims: ModelDims) -> Node:
    """Frontend, positional encoding and the masked layer stack over a whole utterance."""
    x = np.asarray(features, dtype=np.float64)
    n = subsampled_length(x.shape[0]) if x.ndim == 2 else 0
    h = embed_rows(x, 0, n, params, prefix, dims.d_model)
    for layer in range(dims.n_layers):
        h = encoder_layer(h, mask, params, f"{prefix}.layers.{layer}", dims.n_heads)
    return norm(h, params, f"{prefix}.final_norm")


def encode_block(x_new: Node, cache: list, params, prefix: str, dims: ModelDims) -> tuple[Node, list]:
    """Run a block of new rows through the stack given cached layer inputs.

    All new rows see every cached row and every new row, which is exactly
    the visibility of one segment under a boundary mask.
    """
    new_cache = []
    h = x_new
    n_new = h.value.shape[0]
    for layer in range(dims.n_layers):
        past = cache[layer] if cache else np.zeros((0, dims.d_model))
        mask = np.ones((n_new, past.shape[0] + n_new), dtype=bool)
        new_cache.append(np.concatenate([past, h.value], axis=0))
        keys = past if past.shape[0] else None
        h = encoder_layer(h, mask, params, f"{prefix}.layers.{layer}", dims.n_heads, keys=keys)
    return norm(h, params, f"{prefix}.final_norm"), new_cache
