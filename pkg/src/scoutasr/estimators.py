"""scikit-learn style wrappers around the scout and the recognition network.

Both estimators take ``X`` as a list of (frames, dims) feature arrays of
varying length, expose their hyperparameters through ``get_params`` and keep
fitted state in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import scout as sc
from .decoding import BigramLM, DecodeConfig, decode_offline, decode_with_segmentation, scout_then_decode
from .metrics import boundary_edit_distance, corpus_error_rate, merge_boundary_evals
from .training import TrainConfig, train_rn, train_scout
from .transformer import ModelDims, subsampled_length
from .validation import check_consistent_length, check_sequences, check_tokens


class _Sample:
    """Adapter giving raw arrays the attributes the training loops read."""

    def __init__(self, features, labels=None, tokens=(), boundaries=None):
        self.features = features
        self.tokens = list(tokens)
        self.n_frames = subsampled_length(features.shape[0])
        self._labels = labels
        self._boundaries = boundaries

    def boundary_labels(self):
        if self._labels is None:
            labels = np.zeros(self.n_frames, dtype=np.int64)
            if self._boundaries is not None:
                labels[np.asarray(self._boundaries, dtype=np.int64) - 1] = 1
            return labels
        return self._labels

    def reference_boundaries(self):
        return np.flatnonzero(self.boundary_labels()) + 1


def _labels_for(x, target) -> np.ndarray:
    n = subsampled_length(x.shape[0])
    if len(target) and isinstance(target[0], dict):
        return sc.labels_from_alignment(target, n)
    labels = np.asarray(target, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} boundary labels, got {labels.size}")
    return labels


class ScoutNetwork(BaseEstimator):
    """Causal boundary detector.

    ``fit(X, y)`` takes per-utterance word alignments (lists of
    ``{"word", "start_ms", "end_ms"}``) or 0/1 label arrays at the
    downsampled rate.
    """

    def __init__(self, d_model=64, n_heads=4, d_ff=128, n_layers=2, lr=1e-3, epochs=10, batch_size=8,
                 pos_weight=1.0, threshold=0.5, n_average=5, seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.pos_weight = pos_weight
        self.threshold = threshold
        self.n_average = n_average
        self.seed = seed

    def fit(self, X, y):
        seqs = check_sequences(X)
        check_consistent_length(seqs, y)
        samples = [_Sample(x, _labels_for(x, t)) for x, t in zip(seqs, y)]
        dims = ModelDims(seqs[0].shape[1], self.d_model, self.n_heads, self.d_ff, self.n_layers)
        config = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                             sigma=self.threshold, n_average=self.n_average, pos_weight=self.pos_weight)
        self.model_, self.history_ = train_scout(samples, dims, config)
        self.n_features_in_ = dims.n_features
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [sc.scout_forward(x, self.model_) for x in check_sequences(X, self.n_features_in_)]

    def predict(self, X) -> list[np.ndarray]:
        """Segmentations (1-based end frames, utterance end included)."""
        return [sc.threshold_decide(p, self.threshold) for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Boundary F1 at ``threshold`` against the reference word ends."""
        seqs = check_sequences(X, getattr(self, "n_features_in_", None))
        evals = []
        for p, x, t in zip(self.predict_proba(seqs), seqs, y):
            ref = np.flatnonzero(_labels_for(x, t)) + 1
            evals.append(boundary_edit_distance(sc.raw_boundaries(p, self.threshold), ref))
        return merge_boundary_evals(evals)["f1"]

    def stream(self) -> sc.ScoutStream:
        check_is_fitted(self, "model_")
        return sc.ScoutStream(self.model_)


class StreamingRecognizer(BaseEstimator):
    """CTC / attention recognizer with boundary-limited look-ahead.

    ``fit(X, y, boundaries=...)`` trains on token sequences ``y``; golden
    boundaries (1-based word-end frames per utterance) are required for
    ``boundary_mode="golden"`` and a fitted scout for the other modes.
    ``predict`` decodes offline, under given segmentations, or streaming
    with a scout.
    """

    def __init__(self, vocab_size=None, d_model=64, n_heads=4, d_ff=128, n_layers=4, n_decoder_layers=2,
                 lr=1e-3, offline_epochs=30, epochs=20, batch_size=8, gamma=0.7, boundary_mode="golden",
                 n_average=5, seed=0, beam=10, sigma=0.9, sigma0=0.0005, ctc_weight=0.5, lm_weight=0.5,
                 length_bonus=2.0, max_segment=50):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.n_decoder_layers = n_decoder_layers
        self.lr = lr
        self.offline_epochs = offline_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.gamma = gamma
        self.boundary_mode = boundary_mode
        self.n_average = n_average
        self.seed = seed
        self.beam = beam
        self.sigma = sigma
        self.sigma0 = sigma0
        self.ctc_weight = ctc_weight
        self.lm_weight = lm_weight
        self.length_bonus = length_bonus
        self.max_segment = max_segment

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.beam, self.sigma, self.sigma0, self.ctc_weight, self.lm_weight, self.length_bonus, self.max_segment)

    def fit(self, X, y, boundaries=None, scout=None):
        seqs = check_sequences(X)
        tokens = check_tokens(y, self.vocab_size)
        check_consistent_length(seqs, tokens, boundaries)
        vocab = self.vocab_size or (max((max(t) for t in tokens if t), default=0) + 1)
        if self.boundary_mode == "golden" and boundaries is None:
            raise ValueError("boundary_mode='golden' needs boundaries")
        scout_model = scout.model_ if isinstance(scout, ScoutNetwork) else scout
        samples = [_Sample(x, tokens=t, boundaries=None if boundaries is None else boundaries[i]) for i, (x, t) in enumerate(zip(seqs, tokens))]
        dims = ModelDims(seqs[0].shape[1], self.d_model, self.n_heads, self.d_ff, self.n_layers)
        config = TrainConfig(lr=self.lr, epochs=self.epochs, offline_epochs=self.offline_epochs, batch_size=self.batch_size,
                             seed=self.seed, gamma=self.gamma, boundary_mode=self.boundary_mode, n_average=self.n_average)
        self.model_, self.history_ = train_rn(samples, dims, vocab, config, scout=scout_model, n_decoder_layers=self.n_decoder_layers)
        self.lm_ = BigramLM(vocab).fit(tokens)
        self.n_features_in_ = dims.n_features
        return self

    def decode(self, x, segmentation=None, scout=None):
        """Decode one utterance; returns a :class:`~scoutasr.decoding.DecodeResult`.

        A ``segmentation`` that stops short of the last frame is closed with it.
        """
        check_is_fitted(self, "model_")
        x = check_sequences([x], self.n_features_in_)[0]
        config = self.decode_config()
        if scout is not None:
            scout_model = scout.model_ if isinstance(scout, ScoutNetwork) else scout
            return scout_then_decode(x, scout_model, self.model_, config, self.lm_)
        if segmentation is not None:
            g = [int(b) for b in segmentation]
            n = subsampled_length(x.shape[0])
            if not g or g[-1] != n:
                g.append(n)  # a silent tail still ends the last segment
            return decode_with_segmentation(x, g, self.model_, config, self.lm_)
        return decode_offline(x, self.model_, config, self.lm_)

    def predict(self, X, segmentations=None, scout=None) -> list[list[int]]:
        seqs = check_sequences(X, getattr(self, "n_features_in_", None))
        check_consistent_length(seqs, segmentations)
        return [self.decode(x, None if segmentations is None else segmentations[i], scout).tokens for i, x in enumerate(seqs)]

    def score(self, X, y, segmentations=None, scout=None) -> float:
        """Token accuracy, ``1 - WER`` over the whole set."""
        return corpus_error_rate(self.predict(X, segmentations, scout), check_tokens(y)).accuracy
