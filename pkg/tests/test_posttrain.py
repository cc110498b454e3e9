import math

import numpy as np
import pytest

from tinyrec import tensor as tn
from tinyrec.data import NewsArticle
from tinyrec.encoders import EncoderConfig, NewsEncoder
from tinyrec.posttrain import MatchSample, TokenizedCorpus, matching_accuracy, matching_batches, \
    matching_forward, matching_loss, sample_matching_batch

from conftest import gradcheck


def corpus_of(n, vocab=97):
    arts = [NewsArticle(f"A{i}", [f"title{i}", "common"], [f"body{i}", f"title{i}", "x"]) for i in range(n)]
    return TokenizedCorpus(arts, vocab, title_len=8, body_len=8)


SMALL = EncoderConfig(vocab_size=97, d_model=8, n_heads=2, d_ff=16, n_layers=1, max_len=8, repr_dim=6,
                      query_dim=5)


class TestSampling:
    def test_excludes_positive_and_distinct(self):
        corpus = corpus_of(30)
        rng = np.random.default_rng(0)
        for _ in range(50):
            for s in sample_matching_batch(corpus, range(30), 9, rng):
                assert s.article not in s.negatives
                assert len(set(s.negatives)) == 9
                assert s.titles[0] == corpus.titles[s.article]
                assert s.titles[1:] == [corpus.titles[j] for j in s.negatives]

    def test_exact_corpus(self):
        corpus = corpus_of(10)
        (s,) = sample_matching_batch(corpus, [3], 9, np.random.default_rng(0))
        assert sorted(s.negatives) == [0, 1, 2, 4, 5, 6, 7, 8, 9]

    def test_too_small(self):
        with pytest.raises(ValueError):
            sample_matching_batch(corpus_of(9), [0], 9, np.random.default_rng(0))

    def test_deterministic(self):
        a = list(matching_batches(corpus_of(40), 8, 9, np.random.default_rng(5)))
        b = list(matching_batches(corpus_of(40), 8, 9, np.random.default_rng(5)))
        assert a == b

    def test_uniform_negatives(self):
        # 10,000 draws with N=9 from 100 articles, each article the positive 100 times.
        corpus = corpus_of(100)
        rng = np.random.default_rng(2024)
        counts = np.zeros(100)
        for start in range(0, 10_000, 100):
            for s in sample_matching_batch(corpus, range(100), 9, rng):
                counts[s.negatives] += 1
        trials, p = 9_900, 9 / 99
        sigma = math.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(counts - trials * p) <= 3 * sigma), counts


class TestLoss:
    def test_uniform(self):
        assert matching_loss(np.zeros((1, 10))).item() == pytest.approx(math.log(10), abs=1e-12)

    def test_confident(self):
        logits = np.zeros((1, 10))
        logits[0, 0] = 20.0
        assert matching_loss(logits).item() == pytest.approx(9 * math.exp(-20), rel=1e-6)
        assert matching_loss(logits).item() == pytest.approx(1.85e-8, rel=0.01)

    def test_mean_reduction(self):
        row = np.random.default_rng(0).normal(size=(1, 10))
        assert matching_loss(np.vstack([row, row])).item() == pytest.approx(matching_loss(row).item(), abs=1e-15)

    def test_monotone(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(1, 10))
        base = matching_loss(logits).item()
        assert base >= 0
        up = logits.copy()
        up[0, 0] += 0.1
        assert matching_loss(up).item() < base
        for j in range(1, 10):
            neg = logits.copy()
            neg[0, j] += 0.1
            assert matching_loss(neg).item() > base

    def test_softmax_example(self):
        logits = np.zeros(10)
        logits[0] = 1.0
        p = math.exp(-matching_loss(logits).item())
        assert p == pytest.approx(math.e / (math.e + 9), abs=1e-12)
        assert p == pytest.approx(0.2320, abs=1e-4)


class TestForward:
    def test_identical_titles_tie(self):
        corpus = corpus_of(12)
        enc = NewsEncoder(SMALL, 0)
        s = MatchSample(0, list(range(1, 10)), corpus.bodies[0], [corpus.titles[0]] * 10)
        out = matching_forward(enc, [s])
        assert np.allclose(out.logits.data, out.logits.data[0, 0], atol=1e-12)
        probs = np.exp(tn.log_softmax(out.logits, axis=-1).data)
        assert np.allclose(probs, 0.1, atol=1e-12)
        assert matching_accuracy(out.logits) == 0.0

    def test_logits_are_dot_products(self):
        corpus = corpus_of(12)
        enc = NewsEncoder(SMALL, 0)
        batch = sample_matching_batch(corpus, [0, 1], 9, np.random.default_rng(0))
        out = matching_forward(enc, batch)
        for b, s in enumerate(batch):
            body = enc(np.array([s.body])).data[0]
            for j, title in enumerate(s.titles):
                assert out.logits.data[b, j] == pytest.approx(enc(np.array([title])).data[0] @ body, abs=1e-10)

    def test_swap_negatives_permutes(self):
        corpus = corpus_of(12)
        enc = NewsEncoder(SMALL, 0)
        (s,) = sample_matching_batch(corpus, [0], 9, np.random.default_rng(0))
        swapped = MatchSample(s.article, s.negatives, s.body, [s.titles[0], s.titles[2], s.titles[1]] + s.titles[3:])
        a = matching_forward(enc, [s]).logits.data[0]
        b = matching_forward(enc, [swapped]).logits.data[0]
        assert np.allclose(b, a[[0, 2, 1, 3, 4, 5, 6, 7, 8, 9]], atol=1e-12)

    def test_gradcheck(self, rng):
        corpus = corpus_of(12)
        enc = NewsEncoder(SMALL, 0)
        batch = sample_matching_batch(corpus, [0, 1], 3, np.random.default_rng(0))
        errors = gradcheck(lambda: matching_loss(matching_forward(enc, batch).logits), enc.params, max_entries=4,
                           rng=rng)
        assert max(errors.values()) <= 1e-4, errors


def test_accuracy_strict():
    assert matching_accuracy(np.array([[2.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])) == pytest.approx(1 / 3)
