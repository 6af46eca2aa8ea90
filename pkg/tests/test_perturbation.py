import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poolinglab.data import UNK, synthetic_distractor_pool, synthetic_generator
from poolinglab.diagnostics import lin_interp
from poolinglab.perturbation import (
    NwiConfig,
    PerturbSpec,
    append_distractor,
    build_perturbed_dataset,
    distractor_count,
    normalize_importance,
    nwi_evaluate,
    occlusion_deltas,
)

from oracles import NWI_EXAMPLES, NWI_WEIGHTS, BagOfWords, hand_nwi_curve, vocab_corpus

POOL = [np.arange(100, 100 + k) for k in (3, 5, 7, 11)]


def test_mid_two_thirds_splits_evenly():
    tokens = np.arange(100)
    out = append_distractor(tokens, PerturbSpec("mid", 2 / 3, POOL), np.random.default_rng(0))
    assert len(out) == 300
    np.testing.assert_array_equal(out[100:200], tokens)
    assert np.all(out[:100] >= 100) and np.all(out[200:] >= 100)


def test_left_half():
    tokens = np.arange(10)
    out = append_distractor(tokens, PerturbSpec("left", 0.5, POOL), np.random.default_rng(0))
    np.testing.assert_array_equal(out[:10], tokens)
    assert len(out) == 20 and np.all(out[10:] >= 100)


def test_right_places_original_last():
    tokens = np.arange(6)
    out = append_distractor(tokens, PerturbSpec("right", 0.25, POOL), np.random.default_rng(0))
    assert len(out) == 8
    np.testing.assert_array_equal(out[-6:], tokens)


def test_mid_odd_split_puts_extra_token_left():
    tokens = np.arange(4)
    spec = PerturbSpec("mid", 3 / 7, POOL)
    assert distractor_count(4, 3 / 7) == 3
    out = append_distractor(tokens, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(out[2:6], tokens)


def test_zero_fraction_is_identity():
    tokens = np.arange(9)
    np.testing.assert_array_equal(append_distractor(tokens, PerturbSpec("mid", 0.0, POOL), np.random.default_rng(0)),
                                  tokens)


def test_spec_validation_and_errors():
    with pytest.raises(ValueError):
        PerturbSpec("mid", 1.0, POOL)
    with pytest.raises(ValueError):
        PerturbSpec("top", 0.5, POOL)
    with pytest.raises(ValueError):
        append_distractor(np.zeros(0, dtype=int), PerturbSpec("mid", 0.5, POOL), np.random.default_rng(0))
    with pytest.raises(ValueError):
        append_distractor(np.arange(3), PerturbSpec("mid", 0.5, []), np.random.default_rng(0))


def test_distractors_are_whole_sentence_chunks():
    pool = [np.array([500, 501, 502]), np.array([600, 601])]
    out = append_distractor(np.arange(20), PerturbSpec("left", 0.5, pool), np.random.default_rng(3))
    tail = list(out[20:])
    i = 0
    while i < len(tail):
        sent = [500, 501, 502] if tail[i] == 500 else [600, 601]
        assert tail[i:i + len(sent)] == sent[:len(tail) - i]
        i += len(sent)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 80), st.sampled_from(["left", "mid", "right"]), st.floats(0, 0.9), st.integers(0, 10**6))
def test_original_preserved_contiguously(n, position, fraction, seed):
    tokens = np.arange(n)
    out = append_distractor(tokens, PerturbSpec(position, fraction, POOL), np.random.default_rng(seed))
    w = distractor_count(n, fraction)
    assert len(out) == n + w
    starts = {"left": 0, "right": w, "mid": (w + 1) // 2}
    np.testing.assert_array_equal(out[starts[position]:starts[position] + n], tokens)


def test_perturbed_dataset_determinism_and_provenance():
    c = synthetic_generator(40, 30, 0.5, rng_seed=1)
    pool = synthetic_distractor_pool(c.vocab, 100)
    spec = PerturbSpec("mid", 2 / 3, pool)
    a, b = build_perturbed_dataset(c, spec, 5), build_perturbed_dataset(c, spec, 5)
    assert all(x.ids.tobytes() == y.ids.tobytes() for x, y in zip(a, b))
    np.testing.assert_array_equal(a.labels, c.labels)
    assert a.meta["perturbation"]["seed"] == 5 and a.meta["perturbation"]["position"] == "mid"
    assert "keyword_positions" not in a.meta
    assert np.mean([len(e) for e in a]) == pytest.approx(30 / (1 / 3), abs=1)
    same = build_perturbed_dataset(c, PerturbSpec("mid", 0.0, pool), 5)
    assert all(x.ids.tobytes() == y.ids.tobytes() for x, y in zip(same, c))


def test_normalize_importance():
    np.testing.assert_array_equal(normalize_importance(np.zeros(4)), np.zeros(4))
    out = normalize_importance(np.array([2.0, 4.0, 3.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 0.25])
    assert out.min() == 0.0 and out.max() == pytest.approx(1 - 0.5)


class Constant:
    def log_probs(self, ids, mask):
        return np.log(np.full((len(ids), 2), 0.5))


def test_input_blind_model_gives_zero_curve():
    corpus = vocab_corpus([([2, 3, 4, 5, 6, 7], 0)])
    prof = nwi_evaluate(Constant(), corpus, NwiConfig(k=2, length_bucket=(1, 10)))
    np.testing.assert_array_equal(prof.curve, np.zeros(100))


def test_already_unk_window_has_exactly_zero_delta():
    model = BagOfWords(np.random.default_rng(0).normal(size=(10, 2)))
    d = occlusion_deltas(model, np.array([UNK, UNK, 4, 5, 6, 7, 8]), 1, k=2)
    assert len(d) == 3 and d[0] == 0.0 and np.all(d[1:] > 0)


def test_residual_tail_never_occluded():
    model = BagOfWords(np.random.default_rng(1).normal(size=(10, 2)))
    assert len(occlusion_deltas(model, np.arange(2, 9), 0, k=3)) == 2


def test_single_example_equals_its_curve():
    model = BagOfWords(np.array(NWI_WEIGHTS))
    ids, label = NWI_EXAMPLES[0]
    prof = nwi_evaluate(model, vocab_corpus([(ids, label)]), NwiConfig(k=2, length_bucket=(10, 10)))
    expected = lin_interp(normalize_importance(occlusion_deltas(model, np.array(ids), label, 2)))
    np.testing.assert_array_equal(prof.curve, expected)
    assert prof.examples_used == 1


def test_nwi_fixture_matches_scalar_oracle():
    model = BagOfWords(np.array(NWI_WEIGHTS))
    prof = nwi_evaluate(model, vocab_corpus(NWI_EXAMPLES), NwiConfig(k=2, length_bucket=(10, 10)))
    np.testing.assert_allclose(prof.curve, hand_nwi_curve(NWI_WEIGHTS, NWI_EXAMPLES, 2), rtol=0, atol=1e-9)
    assert prof.curve.min() >= 0 and prof.curve.max() <= 1


def test_length_bucket_filters_and_errors():
    corpus = vocab_corpus([([2] * 4, 0), ([3] * 12, 1)])
    model = BagOfWords(np.random.default_rng(2).normal(size=(10, 2)))
    assert nwi_evaluate(model, corpus, NwiConfig(k=2, length_bucket=(10, 20))).examples_used == 1
    with pytest.raises(ValueError):
        nwi_evaluate(model, corpus, NwiConfig(k=2, length_bucket=(50, 60)))
    with pytest.raises(ValueError):
        NwiConfig(k=0)
    with pytest.raises(ValueError):
        NwiConfig(length_bucket=(5, 4))
