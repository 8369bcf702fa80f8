"""Causal word-boundary detector.

The scout shares the recognizer's frontend architecture, followed by causal
self-attention layers and a sigmoid boundary classifier.  Probabilities for
downsampled frame ``t`` (0-based) depend only on input frames ``<= 4*t + 3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .transformer import ModelDims

PREFIX = "scout.enc"
PROB_FLOOR = 1e-12


@dataclass
class ScoutModel:
    dims: ModelDims
    params: dict = field(repr=False)

    @classmethod
    def initialize(cls, dims: ModelDims, seed: int = 0) -> "ScoutModel":
        rng = np.random.default_rng(seed)
        params = tf.init_encoder(rng, dims, PREFIX)
        params["scout.head.w"] = rng.normal(0.0, 1.0 / math.sqrt(dims.d_model), size=(dims.d_model, 1))
        params["scout.head.b"] = np.zeros(1)
        return cls(dims, params)

    def nodes(self) -> dict:
        return {k: nx.Node(v) for k, v in self.params.items()}


def scout_logits(features, params, dims: ModelDims) -> nx.Node:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (frames, dims) array")
    if x.shape[1] != dims.n_features:
        raise ValueError(f"expected {dims.n_features} features per frame, got {x.shape[1]}")
    n = tf.subsampled_length(x.shape[0])
    h = tf.encode(x, tf.causal_mask(n), params, PREFIX, dims)
    return nx.reshape(h @ params["scout.head.w"] + params["scout.head.b"], (n,))


def scout_forward(features, model: ScoutModel) -> np.ndarray:
    """Boundary probability for every downsampled frame."""
    return nx.sigmoid(scout_logits(features, model.nodes(), model.dims)).value


class ScoutStream:
    """Frame-at-a-time scout evaluation with per-layer key/value caches.

    :meth:`push` accepts one 10 ms input frame and returns the probabilities
    that became final; :meth:`finish` flushes the tail of the utterance.
    """

    def __init__(self, model: ScoutModel):
        self.model = model
        self._nodes = model.nodes()
        self._frames = np.zeros((0, model.dims.n_features))
        self._cache: list = []
        self.n_emitted = 0
        self.finished = False

    @property
    def n_input(self) -> int:
        return self._frames.shape[0]

    def push(self, frame) -> np.ndarray:
        if self.finished:
            raise RuntimeError("stream already finished")
        frame = np.asarray(frame, dtype=np.float64).reshape(1, -1)
        if frame.shape[1] != self.model.dims.n_features:
            raise ValueError(f"expected {self.model.dims.n_features} features per frame, got {frame.shape[1]}")
        self._frames = np.concatenate([self._frames, frame])
        return self._advance(self.n_input // tf.SUBSAMPLING)

    def finish(self) -> np.ndarray:
        if self.n_input == 0:
            raise ValueError("no input frames were pushed")
        self.finished = True
        return self._advance(tf.subsampled_length(self.n_input))

    def _advance(self, n_ready: int) -> np.ndarray:
        dims, out = self.model.dims, []
        while self.n_emitted < n_ready:
            t = self.n_emitted
            row = tf.embed_rows(self._frames, t, t + 1, self._nodes, PREFIX, dims.d_model)
            h, self._cache = tf.encode_block(row, self._cache, self._nodes, PREFIX, dims)
            logit = h @ self._nodes["scout.head.w"] + self._nodes["scout.head.b"]
            out.append(float(nx.sigmoid(logit).value.reshape(())))
            self.n_emitted += 1
        return np.array(out)


def scout_loss(p, labels, pos_weight: float = 1.0) -> nx.Node:
    """Binary cross-entropy summed over frames, probabilities clamped at 1e-12."""
    p = nx.as_node(p)
    b = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.value.reshape(-1).shape != b.shape:
        raise ValueError(f"probabilities ({p.value.size}) and labels ({b.size}) differ in length")
    if not np.all((b == 0) | (b == 1)):
        raise ValueError("labels must be 0 or 1")
    p = nx.reshape(p, b.shape)
    hit = nx.log(nx.clip(p, PROB_FLOOR, 1.0))
    miss = nx.log(nx.clip(1.0 - p, PROB_FLOOR, 1.0))
    return -nx.sum_(hit * (pos_weight * b) + miss * (1.0 - b))


def raw_boundaries(p, sigma: float) -> np.ndarray:
    """1-based frames whose probability reaches ``sigma``."""
    return np.flatnonzero(np.asarray(p, dtype=np.float64) >= sigma) + 1


def threshold_decide(p, sigma: float, force_final: bool = True, max_segment: int | None = None) -> np.ndarray:
    """Segmentation from boundary probabilities.

    A frame is a boundary when its probability is at least ``sigma``.  With
    ``max_segment`` a boundary is also forced whenever a segment would grow
    past that many frames, and ``force_final`` closes the utterance.
    """
    if not 0.0 < sigma <= 1.0:
        raise ValueError("sigma must lie in (0, 1]")
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    out, last = [], 0
    for i, prob in enumerate(p, start=1):
        if prob >= sigma or (max_segment is not None and i - last >= max_segment):
            out.append(i)
            last = i
    if force_final and p.size and (not out or out[-1] != p.size):
        out.append(p.size)
    return np.array(out, dtype=np.int64)


def boundary_frame(end_ms: float, subsampling: int = tf.SUBSAMPLING) -> int:
    """1-based downsampled frame whose span ((i-1)*40, i*40] ms contains ``end_ms``."""
    return int(math.ceil(end_ms / (10.0 * subsampling)))


def alignment_boundaries(words, subsampling: int = tf.SUBSAMPLING) -> np.ndarray:
    """Distinct word-end frames (1-based) of an alignment."""
    prev_end = -math.inf
    for w in words:
        if w["end_ms"] <= w["start_ms"] or w["start_ms"] < 0:
            raise ValueError(f"invalid word span {w}")
        if w["start_ms"] < prev_end:
            raise ValueError("word spans must be sorted and non-overlapping")
        prev_end = w["end_ms"]
    frames = [boundary_frame(w["end_ms"], subsampling) for w in words]
    return np.array(sorted(set(frames)), dtype=np.int64)


def labels_from_alignment(words, n_frames: int | None = None, subsampling: int = tf.SUBSAMPLING) -> np.ndarray:
    """0/1 label per downsampled frame, 1 where a word ends."""
    ends = alignment_boundaries(words, subsampling)
    if n_frames is None:
        n_frames = int(ends[-1]) if ends.size else 0
    if ends.size and ends[-1] > n_frames:
        raise ValueError(f"word end at frame {int(ends[-1])} is past the {n_frames} frames")
    labels = np.zeros(n_frames, dtype=np.int64)
    labels[ends - 1] = 1
    return labels
