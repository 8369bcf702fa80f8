import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoutasr import decoding as dec
from scoutasr import numerics as nx
from scoutasr import transformer as tf
from scoutasr.ctc import ctc_prefix_step, initial_beam, prefix_total
from scoutasr.decoding import (
    AttentionScorer,
    BigramLM,
    DecodeConfig,
    Hypothesis,
    UniformLM,
    decode_offline,
    decode_segment,
    decode_with_segmentation,
    decoder_log_probs,
    initial_hypotheses,
    lm_logprob,
    s2s_score,
    score_hypothesis,
    scout_then_decode,
)
from scoutasr.encoder import RecognizerModel, ctc_log_posteriors, encode_with_boundaries
from scoutasr.scout import ScoutModel
from scoutasr.transformer import ModelDims


@pytest.fixture
def model(tiny_dims):
    return RecognizerModel.initialize(tiny_dims, vocab_size=3, n_decoder_layers=1, seed=8)


class ConstantScorer:
    def __init__(self, value=0.0):
        self.value, self.calls = value, 0

    def __call__(self, prefix):
        self.calls += 1
        return self.value


# ----------------------------------------------------------- constructed models
#
# Features carry a one-hot symbol per downsampled frame (vocabulary + blank)
# and a boundary flag channel.  Identity convolutions, zeroed layers and
# large output gains turn them into near one-hot CTC posteriors and a scout
# that fires exactly on flagged frames.

VOCAB = 2
WIDTH = VOCAB + 2  # symbols, blank, boundary flag


def _identity_stack(prefix, dims, gain=100.0):
    rng = np.random.default_rng(0)
    params = {k: np.zeros_like(v) for k, v in tf.init_encoder(rng, dims, prefix).items()}
    for name in list(params):
        if name.endswith(".gain"):
            params[name] = np.ones_like(params[name])
    d = dims.d_model
    params[f"{prefix}.frontend.conv1.w"][d : 2 * d] = np.eye(d)
    params[f"{prefix}.frontend.conv2.w"][d : 2 * d] = np.eye(d)
    params[f"{prefix}.frontend.out.w"] = gain * np.eye(d)
    return params


def constructed_models():
    dims = ModelDims(WIDTH, WIDTH, 1, 4, 1)
    scout = ScoutModel(dims, _identity_stack("scout.enc", dims))
    scout.params["scout.head.w"] = np.zeros((WIDTH, 1))
    scout.params["scout.head.w"][-1] = 20.0
    scout.params["scout.head.b"] = np.array([-4.0])
    rn = RecognizerModel.initialize(dims, VOCAB, n_decoder_layers=1, seed=0)
    rn.params.update(_identity_stack("rn.enc", dims))
    ctc_w = np.zeros((WIDTH, VOCAB + 1))
    ctc_w[: VOCAB + 1] = 50.0 * np.eye(VOCAB + 1)
    rn.params["rn.ctc.w"] = ctc_w
    rn.params["rn.dec.out.w"] = np.zeros_like(rn.params["rn.dec.out.w"])
    return scout, rn


def constructed_input(symbols, flags):
    x = np.zeros((4 * len(symbols), WIDTH))
    for i, (s, f) in enumerate(zip(symbols, flags)):
        x[4 * i : 4 * i + 4, s] = 1.0
        x[4 * i : 4 * i + 4, -1] = f
    return x


B = VOCAB  # blank index
SYMBOLS = [B, 0, 0, B, 1, B, B, 1, 1, 0, B, B]
FLAGS = [0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0]


def test_constructed_models_produce_reference():
    scout, rn = constructed_models()
    x = constructed_input(SYMBOLS, FLAGS)
    result = scout_then_decode(x, scout, rn, DecodeConfig(lm_weight=0.0), None)
    np.testing.assert_allclose(result.scout_probs.round(6), FLAGS)
    assert result.segmentation == [4, 6, 10, 12]
    assert result.tokens == [0, 1, 1, 0]


def test_scout_that_never_fires_equals_offline(model):
    rng = np.random.default_rng(1)
    scout = ScoutModel.initialize(model.dims, seed=2)
    scout.params["scout.head.b"] = np.array([-100.0])
    x = rng.normal(size=(30, 3))
    config = DecodeConfig(max_segment=None)
    lm = BigramLM(3).fit([[0, 1], [2, 2, 1]])
    streamed = scout_then_decode(x, scout, model, config, lm)
    offline = decode_offline(x, model, config, lm)
    assert streamed.segmentation == [8]
    assert streamed.tokens == offline.tokens
    assert streamed.final_scores == offline.final_scores


def test_streaming_equals_fixed_segmentation(model):
    rng = np.random.default_rng(2)
    scout = ScoutModel.initialize(model.dims, seed=4)
    x = rng.normal(size=(45, 3))
    p = dec.ScoutStream(scout)
    probs = np.concatenate([p.push(f) for f in x] + [p.finish()])
    config = DecodeConfig(sigma=float(np.median(probs)))
    streamed = scout_then_decode(x, scout, model, config)
    assert len(streamed.segmentation) > 2
    fixed = decode_with_segmentation(x, streamed.segmentation, model, config)
    assert streamed.tokens == fixed.tokens
    assert streamed.final_scores == fixed.final_scores


def test_golden_segmentation_equals_segment_offline_decode(model):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 3))
    g = [2, 5, 6, 10]
    config = DecodeConfig(beam=4)
    result = decode_with_segmentation(x, g, model, config)

    params = model.nodes()
    h = encode_with_boundaries(x, g, model, params).value
    post = ctc_log_posteriors(nx.Node(h), params).value
    scorer = AttentionScorer(model)
    beam, prev = initial_hypotheses(), 0
    for b in g:
        scorer.set_context(h[:b])
        beam, _ = decode_segment(beam, post, prev + 1, b, config, scorer)
        prev = b
    best = max(beam.values(), key=lambda hyp: (score_hypothesis(
        Hypothesis(hyp.prefix, hyp.log_blank, hyp.log_nonblank, scorer(hyp.prefix + (model.eos,))), config)[1], -len(hyp.prefix)))
    assert result.tokens == list(best.prefix)
    assert set(result.final_scores) == set(beam)


def test_zero_length_input(model):
    with pytest.raises(ValueError):
        decode_offline(np.zeros((0, 3)), model)
    with pytest.raises(ValueError):
        scout_then_decode(np.zeros((0, 3)), ScoutModel.initialize(model.dims), model)


# ------------------------------------------------------------------- scoring


def test_score_hypothesis_reductions():
    hyp = Hypothesis((1, 2), math.log(0.1), math.log(0.2), -3.0, -1.5)
    local, joint = score_hypothesis(hyp, DecodeConfig(ctc_weight=1.0, lm_weight=0.0, length_bonus=0.0))
    assert joint == pytest.approx(math.log(0.3)) and local == pytest.approx(math.log(0.3))


def test_length_bonus_difference():
    config = DecodeConfig()
    short = Hypothesis((1, 2), -1.0, -2.0, -3.0, -4.0)
    long = Hypothesis((1, 2, 0), -1.0, -2.0, -3.0, -4.0)
    assert score_hypothesis(long, config)[1] - score_hypothesis(short, config)[1] == pytest.approx(2.0)
    assert score_hypothesis(long, config)[0] - score_hypothesis(short, config)[0] == pytest.approx(2.0)


@given(st.floats(-20, 0), st.floats(-20, 0), st.floats(-20, 0), st.floats(-20, 0), st.floats(0.01, 1), st.floats(0, 2), st.floats(-3, 3), st.integers(0, 6))
def test_score_hypothesis_arithmetic(lb, lnb, ta, lm, lam, alpha, beta, n):
    hyp = Hypothesis(tuple(range(n)), lb, lnb, ta, lm)
    local, joint = score_hypothesis(hyp, DecodeConfig(ctc_weight=lam, lm_weight=alpha, length_bonus=beta))
    ctc = math.log(math.exp(lb) + math.exp(lnb))
    assert local == pytest.approx(ctc + alpha * lm + beta * n, abs=1e-9)
    assert joint == pytest.approx(lam * ctc + (1 - lam) * ta + alpha * lm + beta * n, abs=1e-9)


def test_s2s_uniform_output_layer(model, rng):
    model.params["rn.dec.out.w"] = np.zeros_like(model.params["rn.dec.out.w"])
    h = rng.normal(size=(4, 8))
    assert s2s_score([1], h, model) == pytest.approx(math.log(1 / 5))
    assert s2s_score([], h, model) == 0.0


def test_s2s_ignores_rows_beyond_prefix(model, rng):
    h = rng.normal(size=(6, 8))
    score = s2s_score([0, 2, 1], h[:3], model)
    h2 = h.copy()
    h2[3:] = rng.normal(size=(3, 8))
    assert s2s_score([0, 2, 1], h2, model, contexts=[3, 3, 3]) == pytest.approx(score, abs=1e-12)
    assert s2s_score([0, 2, 1], h, model, contexts=[3, 3, 3]) == pytest.approx(score, abs=1e-12)


def test_s2s_chain_decomposition(model, rng):
    h = rng.normal(size=(5, 8))
    tokens = [2, 0, 0, 1]
    logp = decoder_log_probs(model, model.nodes(), [model.sos] + tokens[:-1], h, 5).value
    assert s2s_score(tokens, h, model) == pytest.approx(sum(logp[k, t] for k, t in enumerate(tokens)), abs=1e-12)
    steps = [s2s_score(tokens[: k + 1], h, model) - s2s_score(tokens[:k], h, model) for k in range(len(tokens))]
    assert sum(steps) == pytest.approx(s2s_score(tokens, h, model), abs=1e-12)


def test_s2s_empty_encoder_prefix(model):
    with pytest.raises(ValueError):
        s2s_score([1], np.zeros((0, 8)), model)


def test_scorer_keeps_each_tokens_context(model, rng):
    h = rng.normal(size=(6, 8))
    scorer = AttentionScorer(model)
    scorer.set_context(h[:2])
    scorer((1,))
    scorer.set_context(h[:6])
    score = scorer((1, 0))
    assert score == pytest.approx(s2s_score([1, 0], h, model, contexts=[2, 6]), abs=1e-12)
    assert scorer.calls == 2


# -------------------------------------------------------------------- search


def test_memoisation_scores_each_prefix_once(model, monkeypatch):
    seen = Counter()
    original = dec.s2s_score

    def counting(prefix, *args, **kwargs):
        seen[tuple(prefix)] += 1
        return original(prefix, *args, **kwargs)

    monkeypatch.setattr(dec, "s2s_score", counting)
    x = np.random.default_rng(5).normal(size=(36, 3))
    result = decode_with_segmentation(x, [3, 5, 9], model, DecodeConfig(beam=3))
    assert max(seen.values()) == 1
    assert result.attention_calls == sum(seen.values())


def test_pure_ctc_ranking(model):
    rng = np.random.default_rng(6)
    post = nx.log_softmax(rng.normal(0, 2, size=(4, 4))).value
    config = DecodeConfig(beam=10_000, sigma0=0.0, ctc_weight=1.0, lm_weight=0.0, length_bonus=0.0)
    beam, _ = decode_segment(initial_hypotheses(), post, 1, 4, config, ConstantScorer())
    states = initial_beam()
    for row in post:
        states = ctc_prefix_step(states, row)
    ours = sorted(beam, key=lambda p: (-score_hypothesis(beam[p], config)[1], len(p), p))
    oracle = sorted(states, key=lambda p: (-prefix_total(states[p]), len(p), p))
    assert ours == oracle


def test_top_k_tie_break_prefers_shorter_then_lexicographic():
    post = np.log(np.full((1, 3), 1 / 3))
    config = DecodeConfig(beam=1, lm_weight=0.0, length_bonus=0.0)
    beam, _ = decode_segment(initial_hypotheses(), post, 1, 1, config, ConstantScorer())
    assert list(beam) == [()]
    beam, _ = decode_segment(initial_hypotheses(), post, 1, 1, DecodeConfig(beam=2, lm_weight=0.0, length_bonus=0.0), ConstantScorer())
    assert sorted(beam) == [(), (0,)]


def test_beam_is_union_of_three_rankings():
    post = np.log(np.array([[0.5, 0.3, 0.2]]))

    class Favour:
        calls = 0

        def __call__(self, prefix):
            return 0.0 if prefix == (1,) else -50.0

    config = DecodeConfig(beam=1, ctc_weight=0.5, lm_weight=0.0, length_bonus=0.0)
    beam, _ = decode_segment(initial_hypotheses(), post, 1, 1, config, Favour())
    # local favours (0,), the attention score favours (1,), joint favours (1,)
    assert set(beam) == {(0,), (1,)}


def test_flag_when_sigma0_prunes_every_extension():
    post = np.log(np.array([[1e-6, 1e-6, 1 - 2e-6]]))
    beam, flagged = decode_segment(initial_hypotheses(), post, 1, 1, DecodeConfig(), ConstantScorer())
    assert flagged and list(beam) == [()]
    beam, flagged = decode_segment(initial_hypotheses(), post, 1, 1, DecodeConfig(sigma0=0.0), ConstantScorer())
    assert not flagged and len(beam) == 3


def test_hypotheses_only_extend(model):
    x = np.random.default_rng(7).normal(size=(40, 3))
    session = dec.DecodeSession(model, DecodeConfig(beam=3), None)
    previous = {()}
    for b in (2, 4, 7, 10):
        session.advance(x[: 4 * b], b, final=4 * b >= len(x))
        for prefix in session.beam:
            assert any(prefix[: len(p)] == p for p in previous)
        previous = set(session.beam)


def test_decoding_is_deterministic(model):
    x = np.random.default_rng(8).normal(size=(33, 3))
    a = decode_with_segmentation(x, [3, 9], model)
    b = decode_with_segmentation(x, [3, 9], model)
    assert a.tokens == b.tokens and a.final_scores == b.final_scores


def test_empty_frame_range(model):
    with pytest.raises(ValueError):
        decode_segment(initial_hypotheses(), np.zeros((2, 4)), 3, 2, DecodeConfig(), ConstantScorer())


@pytest.mark.parametrize("kwargs", [{"beam": 0}, {"sigma": 0.0}, {"sigma": 1.5}, {"ctc_weight": 0.0}, {"sigma0": -1.0}, {"max_segment": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DecodeConfig(**kwargs)


def test_config_defaults():
    c = DecodeConfig()
    assert (c.beam, c.sigma0, c.ctc_weight, c.lm_weight, c.length_bonus) == (10, 0.0005, 0.5, 0.5, 2.0)


# ------------------------------------------------------------------------ LM


def test_uniform_lm():
    assert UniformLM().logprob([3, 1, 4]) == 0.0
    assert lm_logprob([1], None) == 0.0


def test_bigram_add_one():
    lm = BigramLM(2).fit([[0, 1, 0, 1]])  # "a b a b"
    assert lm.conditional(0, 1) == pytest.approx(math.log((2 + 1) / (2 + 2)))


@settings(max_examples=30)
@given(st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=6), min_size=1, max_size=6), st.lists(st.integers(0, 3), max_size=5))
def test_bigram_counting_oracle(sentences, query):
    lm = BigramLM(4).fit(sentences)
    pairs = Counter()
    for s in sentences:
        for h, w in zip([None] + s[:-1], s):
            pairs[(h, w)] += 1
    expected, history = 0.0, None
    for w in query:
        n_hist = sum(c for (h, _), c in pairs.items() if h == history)
        expected += math.log((pairs[(history, w)] + 1) / (n_hist + 4))
        history = w
    assert lm.logprob(query) == pytest.approx(expected)


def test_bigram_round_trip_and_validation():
    lm = BigramLM(3).fit([[0, 2, 1], [1, 1]])
    again = BigramLM.from_dict(lm.to_dict())
    assert again.logprob([0, 2, 1, 1]) == lm.logprob([0, 2, 1, 1])
    with pytest.raises(ValueError):
        BigramLM(2).fit([[0, 5]])
