import numpy as np
import pytest

from scoutasr import numerics as nx
from scoutasr import training as tr
from scoutasr.corpus import SyntheticCorpusSpec, generate_corpus
from scoutasr.ctc import ctc_log_likelihood
from scoutasr.encoder import RecognizerModel, ctc_log_posteriors, encode_offline
from scoutasr.transformer import ModelDims

SPEC = SyntheticCorpusSpec(vocab_size=3, n_features=4, template_frames=(4, 6), words_per_utterance=(1, 2), n_train=4, n_test=0, seed=2)
DIMS = ModelDims(4, 8, 2, 12, 1)


@pytest.fixture(scope="module")
def utts():
    return generate_corpus(SPEC).utterances


@pytest.fixture
def rn():
    return RecognizerModel.initialize(DIMS, 3, 1, seed=4)


def test_joint_loss_decomposes(utts, rn):
    u = utts[0]
    g, trig = [u.n_frames], [u.n_frames] * len(u.tokens)
    s2s, ctc = tr.joint_loss_terms(u.features, u.tokens, g, trig, rn, rn.nodes())
    assert tr.joint_loss(u.features, u.tokens, g, trig, rn, 1.0).value == pytest.approx(-s2s.value)
    assert tr.joint_loss(u.features, u.tokens, g, trig, rn, 0.0).value == pytest.approx(-ctc.value)
    mixed = tr.joint_loss(u.features, u.tokens, g, trig, rn, 0.7).value
    assert mixed == pytest.approx(-0.7 * s2s.value - 0.3 * ctc.value)


def test_single_segment_ctc_term_is_offline(utts, rn):
    u = utts[1]
    _, ctc = tr.joint_loss_terms(u.features, u.tokens, [u.n_frames], [u.n_frames] * len(u.tokens), rn, rn.nodes())
    params = rn.nodes()
    offline = ctc_log_likelihood(ctc_log_posteriors(encode_offline(u.features, rn, params), params), u.tokens, rn.blank)
    assert ctc.value == pytest.approx(offline.value, abs=1e-12)


def test_trigger_count_mismatch(utts, rn):
    u = utts[0]
    with pytest.raises(ValueError):
        tr.joint_loss(u.features, u.tokens, [u.n_frames], [1] * (len(u.tokens) + 1), rn)


def test_attention_context():
    np.testing.assert_array_equal(tr.attention_context([3, 7, 10], [2, 5, 9], 10), [3, 7, 10, 10])


def test_sample_boundaries_examples():
    labels = np.zeros(10)
    labels[[2, 6]] = 1
    np.testing.assert_array_equal(tr.sample_boundaries(np.zeros(10), "golden", labels=labels), [3, 7, 10])
    np.testing.assert_array_equal(tr.sample_boundaries(np.zeros(10), "sampled", rng=0), [10])
    np.testing.assert_array_equal(tr.sample_boundaries(np.ones(4), "sampled", rng=0), [1, 2, 3, 4])
    np.testing.assert_array_equal(tr.sample_boundaries([0.2, 0.95, 0.1], "thresholded", sigma=0.9), [2, 3])
    with pytest.raises(ValueError):
        tr.sample_boundaries(np.zeros(3), "golden")
    with pytest.raises(ValueError):
        tr.sample_boundaries(np.zeros(3), "learned")


def test_sampled_frequencies_follow_probabilities():
    p = np.array([0.1, 0.5, 0.8, 0.3, 0.0])
    rng = np.random.default_rng(0)
    hits = np.zeros(p.size)
    for _ in range(10_000):
        hits[tr.sample_boundaries(p, "sampled", rng) - 1] += 1
    np.testing.assert_allclose(hits[:-1] / 10_000, p[:-1], atol=0.02)
    assert hits[-1] == 10_000


def test_average_checkpoints():
    ck = {"w": np.arange(4.0)}
    assert np.array_equal(tr.average_checkpoints([ck, ck, ck])["w"], ck["w"])
    assert tr.average_checkpoints([{"w": np.zeros(2)}, {"w": np.full(2, 2.0)}])["w"].tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        tr.average_checkpoints([])


def test_adam_rejects_non_finite():
    opt = tr.Adam({"w": np.zeros(2)})
    with pytest.raises(FloatingPointError):
        opt.step({"w": np.array([np.nan, 0.0])})


def test_adam_first_step_size():
    opt = tr.Adam({"w": np.zeros(3)}, lr=0.01)
    opt.step({"w": np.array([2.0, -1.0, 0.0])})
    np.testing.assert_allclose(opt.params["w"], [-0.01, 0.01, 0.0], atol=1e-9)


def test_train_config_validation():
    for kwargs in ({"gamma": 1.5}, {"boundary_mode": "learned"}, {"lr": 0.0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            tr.TrainConfig(**kwargs)


def test_empty_corpus():
    with pytest.raises(ValueError):
        tr.train_scout([], DIMS)
    with pytest.raises(ValueError):
        tr.train_rn([], DIMS, 3)


def test_sampled_mode_needs_scout(utts):
    with pytest.raises(ValueError):
        tr.train_rn(utts, DIMS, 3, tr.TrainConfig(boundary_mode="sampled"))


def test_scout_loss_decreases(utts):
    _, history = tr.train_scout(utts, DIMS, tr.TrainConfig(lr=1e-2, epochs=6, batch_size=2))
    losses = [h["loss"] for h in history]
    assert losses[-1] < losses[0]


def test_training_is_reproducible(utts):
    config = tr.TrainConfig(lr=5e-3, epochs=2, offline_epochs=2, batch_size=2, seed=3)
    a, ha = tr.train_rn(utts, DIMS, 3, config, n_decoder_layers=1)
    b, hb = tr.train_rn(utts, DIMS, 3, config, n_decoder_layers=1)
    assert ha == hb
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_overfits_one_utterance(utts):
    one = utts[:1]
    config = tr.TrainConfig(lr=1e-2, epochs=0, offline_epochs=80, batch_size=1, gamma=0.7)
    model, history = tr.train_rn(one, DIMS, 3, config, n_decoder_layers=1)
    assert history[-1]["loss"] < history[0]["loss"]
    assert tr.teacher_forced_accuracy(model, one) == 1.0


def test_scout_report_keys(utts):
    model, _ = tr.train_scout(utts, DIMS, tr.TrainConfig(epochs=1, n_average=1))
    report = tr.scout_boundary_report(model, utts, 0.5)
    assert {"precision", "recall", "f1", "sub", "del", "ins"} <= set(report)
