"""Segment-synchronous joint CTC / triggered-attention beam search.

Decoding alternates between the scout, which decides where a segment ends,
and the recognizer, which encodes the new segment and runs one CTC prefix
step per frame.  Every surviving prefix is scored by the attention decoder
over the encoder rows available so far (once per distinct prefix), and the
beam keeps the union of the top ``beam`` prefixes under the local, attention
and joint scores.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .ctc import NEG_INF, ctc_prefix_step
from .encoder import DEC, EncoderCache, RecognizerModel, ctc_log_posteriors, encode_incremental
from .scout import ScoutModel, ScoutStream


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 10
    sigma: float = 0.9
    sigma0: float = 0.0005
    ctc_weight: float = 0.5
    lm_weight: float = 0.5
    length_bonus: float = 2.0
    max_segment: int | None = 50

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not 0.0 < self.sigma <= 1.0:
            raise ValueError("sigma must lie in (0, 1]")
        if not 0.0 < self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in (0, 1]")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")
        if self.max_segment is not None and self.max_segment < 1:
            raise ValueError("max_segment must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ language models


class UniformLM:
    """Adds nothing to hypothesis scores."""

    def logprob(self, prefix: Sequence[int]) -> float:
        return 0.0


class BigramLM:
    """Add-one smoothed word bigram model with a sentence-start history."""

    START = -1

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.pair_counts: Counter = Counter()
        self.history_counts: Counter = Counter()

    def fit(self, sentences) -> "BigramLM":
        for sentence in sentences:
            history = self.START
            for word in sentence:
                word = int(word)
                if not 0 <= word < self.vocab_size:
                    raise ValueError(f"word {word} is outside the vocabulary")
                self.pair_counts[(history, word)] += 1
                self.history_counts[history] += 1
                history = word
        return self

    def conditional(self, history: int, word: int) -> float:
        num = self.pair_counts[(history, word)] + 1
        return math.log(num / (self.history_counts[history] + self.vocab_size))

    def logprob(self, prefix: Sequence[int]) -> float:
        total, history = 0.0, self.START
        for word in prefix:
            total += self.conditional(history, int(word))
            history = int(word)
        return total

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "pairs": [[h, w, c] for (h, w), c in sorted(self.pair_counts.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BigramLM":
        lm = cls(int(data["vocab_size"]))
        for h, w, c in data["pairs"]:
            lm.pair_counts[(h, w)] = c
            lm.history_counts[h] += c
        return lm


def lm_logprob(prefix: Sequence[int], lm) -> float:
    return 0.0 if lm is None else lm.logprob(prefix)


# ------------------------------------------------------------------- decoder


def decoder_log_probs(model: RecognizerModel, params, tokens_in: Sequence[int], h_enc, allowed) -> nx.Node:
    """Next-token log-probabilities for each decoder input position.

    ``allowed[k]`` is how many encoder rows position k may attend to.
    """
    h_enc = nx.as_node(h_enc)
    n_keys = h_enc.value.shape[0]
    if n_keys == 0:
        raise ValueError("decoder needs at least one encoder row")
    tokens_in = np.asarray(tokens_in, dtype=np.int64)
    n = len(tokens_in)
    d = model.dims.d_model
    y = nx.take(params[f"{DEC}.embed"], tokens_in) + tf.sinusoidal_encoding(np.arange(n), d)
    self_mask = tf.causal_mask(n)
    cross_mask = tf.prefix_mask(n, allowed, n_keys)
    for layer in range(model.n_decoder_layers):
        y = tf.decoder_layer(y, h_enc, self_mask, cross_mask, params, f"{DEC}.layers.{layer}", model.dims.n_heads)
    y = tf.norm(y, params, f"{DEC}.final_norm")
    return nx.log_softmax(y @ params[f"{DEC}.out.w"] + params[f"{DEC}.out.b"], axis=-1)


def s2s_score(prefix: Sequence[int], h_prefix, model: RecognizerModel, params=None, contexts=None) -> float:
    """Teacher-forced log P(prefix | encoder rows) from the attention decoder.

    ``prefix`` excludes the start token, which is prepended here.  Token k
    attends to the first ``contexts[k]`` rows of ``h_prefix`` (all of them by
    default).  The empty prefix scores 0.
    """
    prefix = [int(t) for t in prefix]
    h = np.asarray(h_prefix, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("attention scoring needs a non-empty encoder prefix")
    if not prefix:
        return 0.0
    allowed = np.full(len(prefix), h.shape[0]) if contexts is None else np.asarray(contexts)
    if allowed.shape != (len(prefix),) or allowed.min() < 1 or allowed.max() > h.shape[0]:
        raise ValueError(f"contexts {allowed.tolist()} do not fit {len(prefix)} tokens over {h.shape[0]} rows")
    params = model.nodes() if params is None else params
    inputs = [model.sos] + prefix[:-1]
    logp = decoder_log_probs(model, params, inputs, h, allowed).value
    return float(logp[np.arange(len(prefix)), prefix].sum())


class AttentionScorer:
    """Memoised attention scores: each distinct prefix is scored exactly once.

    A prefix inherits its parent's per-token contexts and its newest token
    sees every encoder row available when the prefix first appears, so each
    token keeps the look-ahead of the segment in which it was emitted.
    """

    def __init__(self, model: RecognizerModel):
        self.model = model
        self.params = model.nodes()
        self.context = np.zeros((0, model.dims.d_model))
        self.cache: dict[tuple, tuple[float, tuple]] = {(): (0.0, ())}
        self.calls = 0

    def set_context(self, rows: np.ndarray) -> None:
        self.context = rows

    def __call__(self, prefix: tuple) -> float:
        hit = self.cache.get(prefix)
        if hit is None:
            parent = self.cache.get(prefix[:-1])
            n_rows = self.context.shape[0]
            if parent is None:
                contexts = (n_rows,) * len(prefix)
            else:
                contexts = parent[1] + (n_rows,)
            self.calls += 1
            hit = (s2s_score(prefix, self.context, self.model, self.params, contexts), contexts)
            self.cache[prefix] = hit
        return hit[0]


# -------------------------------------------------------------------- search


@dataclass
class Hypothesis:
    prefix: tuple
    log_blank: float
    log_nonblank: float
    log_ta: float = 0.0
    log_lm: float = 0.0

    @property
    def log_ctc(self) -> float:
        return float(np.logaddexp(self.log_blank, self.log_nonblank))


def score_hypothesis(hyp: Hypothesis, config: DecodeConfig) -> tuple[float, float]:
    """Return ``(p_local, p_joint)`` in the log domain."""
    bonus = config.lm_weight * hyp.log_lm + config.length_bonus * len(hyp.prefix)
    local = hyp.log_ctc + bonus
    joint = config.ctc_weight * hyp.log_ctc + (1.0 - config.ctc_weight) * hyp.log_ta + bonus
    return local, joint


def initial_hypotheses() -> dict[tuple, Hypothesis]:
    return {(): Hypothesis((), 0.0, NEG_INF)}


def decode_segment(beam: dict, log_posteriors, start: int, end: int, config: DecodeConfig, scorer, lm=None):
    """Run frames ``start..end`` (1-based, inclusive) of the beam search.

    ``log_posteriors[j - 1]`` must hold the CTC row of frame j, and ``scorer``
    must already see the encoder rows up to ``end``.  Returns the new beam and
    a flag that is true when some frame proposed no new prefix.
    """
    if start > end:
        raise ValueError(f"empty frame range {start}..{end}")
    flagged = False
    for j in range(start, end + 1):
        states = ctc_prefix_step({h.prefix: (h.log_blank, h.log_nonblank) for h in beam.values()}, log_posteriors[j - 1], config.sigma0)
        if all(prefix in beam for prefix in states):
            flagged = True  # sigma0 left no new candidates; the carried-over beam stands
        candidates = []
        for prefix, (lb, lnb) in states.items():
            hyp = Hypothesis(prefix, lb, lnb, scorer(prefix), lm_logprob(prefix, lm))
            candidates.append((hyp, *score_hypothesis(hyp, config)))
        keep: dict[tuple, Hypothesis] = {}
        for score in (lambda c: c[1], lambda c: c[0].log_ta, lambda c: c[2]):  # local, attention, joint
            ranked = sorted(candidates, key=lambda c: (-score(c), len(c[0].prefix), c[0].prefix))
            for cand in ranked[: config.beam]:
                keep.setdefault(cand[0].prefix, cand[0])
        beam = keep
    return beam, flagged


@dataclass
class DecodeResult:
    tokens: list
    beam: list
    segmentation: list
    commits: list = field(default_factory=list)
    flagged: bool = False
    attention_calls: int = 0
    final_scores: dict = field(default_factory=dict, repr=False)
    scout_probs: np.ndarray | None = field(default=None, repr=False)


class DecodeSession:
    """Mutable state of one utterance: encoder cache, CTC rows, beam and memo."""

    def __init__(self, model: RecognizerModel, config: DecodeConfig, lm=None):
        self.model = model
        self.config = config
        self.lm = lm
        self.params = model.nodes()
        self.cache = EncoderCache()
        self.rows = np.zeros((0, model.dims.d_model))
        self.log_post = np.zeros((0, model.vocab_size + 1))
        self.scorer = AttentionScorer(model)
        self.beam = initial_hypotheses()
        self.boundaries: list[int] = []
        self.commits: list[tuple[int, int]] = []
        self.flagged = False

    @property
    def frontier(self) -> int:
        return self.cache.frontier

    def advance(self, features, boundary: int, final: bool = False) -> None:
        """Encode and decode the segment ending at ``boundary`` (1-based)."""
        start = self.cache.frontier + 1
        rows, self.cache = encode_incremental(self.cache, features, boundary, self.model, final=final, params=self.params)
        self.rows = np.concatenate([self.rows, rows])
        post = ctc_log_posteriors(nx.Node(rows), self.params).value
        self.log_post = np.concatenate([self.log_post, post])
        self.scorer.set_context(self.rows)
        self.beam, flagged = decode_segment(self.beam, self.log_post, start, boundary, self.config, self.scorer, self.lm)
        self.flagged |= flagged
        self.boundaries.append(boundary)
        self.commits.append((boundary, int(np.asarray(features).shape[0])))

    def finalize(self) -> DecodeResult:
        """Score every prefix with the end token appended and pick the best joint score."""
        scored = []
        for hyp in self.beam.values():
            done = Hypothesis(hyp.prefix, hyp.log_blank, hyp.log_nonblank, self.scorer(hyp.prefix + (self.model.eos,)), hyp.log_lm)
            scored.append((done, score_hypothesis(done, self.config)[1]))
        ranked = sorted(scored, key=lambda s: (-s[1], len(s[0].prefix), s[0].prefix))
        best = ranked[0][0]
        return DecodeResult(
            tokens=list(best.prefix),
            beam=[h for h, _ in ranked],
            segmentation=list(self.boundaries),
            commits=list(self.commits),
            flagged=self.flagged,
            attention_calls=self.scorer.calls,
            final_scores={h.prefix: s for h, s in ranked},
        )


def _check_input(features, model: RecognizerModel) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot decode an empty utterance")
    if x.shape[1] != model.dims.n_features:
        raise ValueError(f"expected {model.dims.n_features} features per frame, got {x.shape[1]}")
    return x


def decode_with_segmentation(features, boundaries, model: RecognizerModel, config: DecodeConfig = DecodeConfig(), lm=None) -> DecodeResult:
    """Decode segment by segment under a fixed segmentation, feeding input as it would arrive."""
    x = _check_input(features, model)
    n = tf.subsampled_length(x.shape[0])
    g = tf.validate_segmentation(boundaries, n)
    session = DecodeSession(model, config, lm)
    for boundary in g:
        needed = tf.required_input_frames(int(boundary))
        session.advance(x[: min(needed, x.shape[0])], int(boundary), final=needed >= x.shape[0])
    return session.finalize()


def decode_offline(features, model: RecognizerModel, config: DecodeConfig = DecodeConfig(), lm=None) -> DecodeResult:
    x = _check_input(features, model)
    return decode_with_segmentation(x, [tf.subsampled_length(x.shape[0])], model, config, lm)


def scout_then_decode(features, scout: ScoutModel, model: RecognizerModel, config: DecodeConfig = DecodeConfig(), lm=None) -> DecodeResult:
    """Stream input frames through the scout and decode whenever it fires.

    A boundary is committed when the scout probability reaches ``sigma`` or
    the open segment reaches ``max_segment`` frames; the utterance end always
    closes the last segment.
    """
    x = _check_input(features, model)
    stream = ScoutStream(scout)
    session = DecodeSession(model, config, lm)
    probs: list[float] = []

    def consider(new_probs, consumed: int, final: bool):
        for p in new_probs:
            probs.append(float(p))
            t = len(probs)
            over_cap = config.max_segment is not None and t - session.frontier >= config.max_segment
            if p >= config.sigma or over_cap:
                session.advance(x[:consumed], t, final=final)

    for i in range(x.shape[0]):
        consider(stream.push(x[i]), i + 1, final=False)
    consider(stream.finish(), x.shape[0], final=True)
    if session.frontier < len(probs):
        session.advance(x, len(probs), final=True)
    result = session.finalize()
    result.scout_probs = np.array(probs)
    return result
