import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scoutasr import numerics as nx
from scoutasr import scout as sc
from scoutasr.corpus import SyntheticCorpusSpec, generate_corpus
from scoutasr.transformer import subsampled_length

probs = arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1))


def test_zero_weights_give_one_half(tiny_dims, rng):
    model = sc.ScoutModel.initialize(tiny_dims)
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    np.testing.assert_array_equal(sc.scout_forward(rng.normal(size=(10, 3)), model), np.full(3, 0.5))


def test_feature_dim_mismatch(tiny_dims, rng):
    model = sc.ScoutModel.initialize(tiny_dims)
    with pytest.raises(ValueError):
        sc.scout_forward(rng.normal(size=(10, 4)), model)
    with pytest.raises(ValueError):
        sc.scout_forward(np.zeros((0, 3)), model)


def test_probability_depends_only_on_past_input(tiny_dims, rng):
    model = sc.ScoutModel.initialize(tiny_dims, seed=3)
    x = rng.normal(size=(23, 3))
    p = sc.scout_forward(x, model)
    for t in range(len(p)):
        y = x.copy()
        y[4 * t + 4 :] = rng.normal(size=y[4 * t + 4 :].shape)
        assert np.abs(sc.scout_forward(y, model)[: t + 1] - p[: t + 1]).max() <= 1e-12


@pytest.mark.parametrize("n", [1, 4, 5, 18, 40])
def test_stream_matches_batch(tiny_dims, rng, n):
    model = sc.ScoutModel.initialize(tiny_dims, seed=n)
    x = rng.normal(size=(n, 3))
    stream = sc.ScoutStream(model)
    pieces = []
    for i, frame in enumerate(x):
        new = stream.push(frame)
        assert stream.n_emitted == (i + 1) // 4
        pieces.append(new)
    pieces.append(stream.finish())
    assert np.abs(np.concatenate(pieces) - sc.scout_forward(x, model)).max() <= 1e-12


def test_stream_misuse(tiny_dims):
    stream = sc.ScoutStream(sc.ScoutModel.initialize(tiny_dims))
    with pytest.raises(ValueError):
        stream.finish()
    with pytest.raises(ValueError):
        stream.push(np.zeros(5))
    stream.push(np.zeros(3))
    stream.finish()
    with pytest.raises(RuntimeError):
        stream.push(np.zeros(3))


def test_loss_perfect_prediction():
    labels = np.array([0, 1, 0, 0, 1])
    assert float(sc.scout_loss(labels.astype(float), labels).value) <= len(labels) * 1e-11


def test_loss_at_one_half():
    assert float(sc.scout_loss(np.full(6, 0.5), np.array([0, 1, 1, 0, 0, 1])).value) == pytest.approx(6 * math.log(2))


def test_loss_errors():
    with pytest.raises(ValueError):
        sc.scout_loss(np.full(3, 0.5), np.array([0, 1]))
    with pytest.raises(ValueError):
        sc.scout_loss(np.full(2, 0.5), np.array([0, 2]))


@settings(max_examples=50)
@given(arrays(np.float64, 8, elements=st.floats(0, 1)), arrays(np.int64, 8, elements=st.integers(0, 1)))
def test_loss_is_non_negative(p, labels):
    assert float(sc.scout_loss(p, labels).value) >= 0.0


def test_loss_gradient_on_three_frames(tiny_dims, rng):
    model = sc.ScoutModel.initialize(tiny_dims, seed=9)
    x = rng.normal(size=(12, 3))
    labels = np.array([0, 1, 1])
    err = nx.finite_difference_check(lambda p: sc.scout_loss(nx.sigmoid(sc.scout_logits(x, p, tiny_dims)), labels), model.params)
    assert err <= 1e-5


def test_positive_weight_scales_positive_terms():
    p, b = np.array([0.2, 0.7]), np.array([1, 0])
    plain = float(sc.scout_loss(p, b).value)
    weighted = float(sc.scout_loss(p, b, pos_weight=3.0).value)
    assert weighted - plain == pytest.approx(-2 * math.log(0.2))


def test_threshold_decide_examples():
    np.testing.assert_array_equal(sc.threshold_decide([0.1, 0.95, 0.3], 0.9), [2, 3])
    np.testing.assert_array_equal(sc.threshold_decide([0.9, 0.2], 0.9), [1, 2])
    np.testing.assert_array_equal(sc.threshold_decide([0.1, 0.2], 0.9), [2])
    np.testing.assert_array_equal(sc.threshold_decide([0.1, 0.95, 0.3], 0.9, force_final=False), [2])
    np.testing.assert_array_equal(sc.threshold_decide(np.zeros(7), 0.5, max_segment=3), [3, 6, 7])
    with pytest.raises(ValueError):
        sc.threshold_decide([0.5], 0.0)


@given(probs, st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_raw_boundaries_nested(p, s1, s2):
    lo, hi = sorted((s1, s2))
    assert set(sc.raw_boundaries(p, hi)) <= set(sc.raw_boundaries(p, lo))


def test_labels_from_alignment_examples():
    words = [{"word": "a", "start_ms": 0, "end_ms": 280}]
    np.testing.assert_array_equal(sc.labels_from_alignment(words), [0, 0, 0, 0, 0, 0, 1])
    two = [{"word": "a", "start_ms": 0, "end_ms": 250}, {"word": "b", "start_ms": 250, "end_ms": 270}]
    assert sc.labels_from_alignment(two, 8).sum() == 1
    with pytest.raises(ValueError):
        sc.labels_from_alignment(list(reversed(two)))
    with pytest.raises(ValueError):
        sc.labels_from_alignment(words, n_frames=5)


def test_labels_reproduce_generator_boundaries():
    corpus = generate_corpus(SyntheticCorpusSpec(n_train=15, n_test=0, seed=4))
    for u in corpus.utterances:
        labels = u.boundary_labels()
        assert labels.size == subsampled_length(len(u.features))
        expected = sorted({-(-w["end_ms"] // 40) for w in u.alignment})
        np.testing.assert_array_equal(np.flatnonzero(labels) + 1, expected)
        # the energy track falls to zero on the last frame of every word
        for w in u.alignment:
            assert abs(u.features[w["end_ms"] // 10 - 1, 0]) < 1.0
