"""Recognition-network parameters and the boundary-masked encoder.

Frames inside a segment attend to everything up to that segment's end
boundary.  :func:`encode_with_boundaries` applies this as a mask over the
whole utterance; :func:`encode_incremental` computes the same rows one
segment at a time from cached per-layer states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .transformer import ModelDims

ENC = "rn.enc"
DEC = "rn.dec"


@dataclass
class RecognizerModel:
    """Encoder, CTC head and attention decoder of the recognition network.

    Word tokens are ``0..vocab_size-1``.  The CTC blank and the decoder's
    start token share index ``vocab_size``; the end token is ``vocab_size+1``.
    """

    dims: ModelDims
    vocab_size: int
    n_decoder_layers: int = 2
    params: dict = field(default_factory=dict, repr=False)

    @property
    def blank(self) -> int:
        return self.vocab_size

    @property
    def sos(self) -> int:
        return self.vocab_size

    @property
    def eos(self) -> int:
        return self.vocab_size + 1

    @classmethod
    def initialize(cls, dims: ModelDims, vocab_size: int, n_decoder_layers: int = 2, seed: int = 0):
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        rng = np.random.default_rng(seed)
        d = dims.d_model
        params = tf.init_encoder(rng, dims, ENC)
        params["rn.ctc.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, vocab_size + 1))
        params["rn.ctc.b"] = np.zeros(vocab_size + 1)
        params[f"{DEC}.embed"] = rng.normal(0.0, 1.0, size=(vocab_size + 2, d))
        for layer in range(n_decoder_layers):
            params.update(tf.init_decoder_layer(rng, dims, f"{DEC}.layers.{layer}"))
        params.update(tf.init_norm(d, f"{DEC}.final_norm"))
        params[f"{DEC}.out.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, vocab_size + 2))
        params[f"{DEC}.out.b"] = np.zeros(vocab_size + 2)
        return cls(dims, vocab_size, n_decoder_layers, params)

    def nodes(self) -> dict:
        return {k: nx.Node(v) for k, v in self.params.items()}

    def config(self) -> dict:
        return {"dims": self.dims.to_dict(), "vocab_size": self.vocab_size, "n_decoder_layers": self.n_decoder_layers}


def _check_features(features, dims: ModelDims) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (frames, dims) array")
    if x.shape[1] != dims.n_features:
        raise ValueError(f"expected {dims.n_features} features per frame, got {x.shape[1]}")
    return x


def encode_with_boundaries(features, boundaries, model: RecognizerModel, params=None) -> nx.Node:
    x = _check_features(features, model.dims)
    n = tf.subsampled_length(x.shape[0])
    mask = tf.boundary_mask(boundaries, n)
    return tf.encode(x, mask, model.nodes() if params is None else params, ENC, model.dims)


def encode_offline(features, model: RecognizerModel, params=None) -> nx.Node:
    x = _check_features(features, model.dims)
    return encode_with_boundaries(x, [tf.subsampled_length(x.shape[0])], model, params)


def ctc_log_posteriors(h, params) -> nx.Node:
    return nx.log_softmax(h @ params["rn.ctc.w"] + params["rn.ctc.b"], axis=-1)


@dataclass
class EncoderCache:
    layers: list = field(default_factory=list)
    frontier: int = 0


def encode_incremental(cache: EncoderCache, features, boundary: int, model: RecognizerModel, final: bool = False, params=None):
    """Encode rows ``cache.frontier+1 .. boundary`` (1-based) as one segment.

    ``features`` is the input received so far.  Unless ``final`` is set it
    must hold the ``4 * boundary`` frames the new rows read.
    Returns ``(rows, new_cache)``.
    """
    x = _check_features(features, model.dims)
    if boundary <= cache.frontier:
        raise ValueError(f"boundary {boundary} does not advance past frontier {cache.frontier}")
    limit = tf.subsampled_length(x.shape[0])
    if boundary > limit:
        raise ValueError(f"boundary {boundary} exceeds the {limit} available frames")
    if not final and x.shape[0] < tf.required_input_frames(boundary):
        raise ValueError(f"boundary {boundary} needs {tf.required_input_frames(boundary)} input frames, got {x.shape[0]}")
    params = model.nodes() if params is None else params
    rows = tf.embed_rows(x, cache.frontier, boundary, params, ENC, model.dims.d_model)
    out, layers = tf.encode_block(rows, cache.layers, params, ENC, model.dims)
    return out.value, EncoderCache(layers, boundary)
