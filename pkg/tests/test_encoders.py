import numpy as np
import pytest

from tinyrec import tensor as tn
from tinyrec.encoders import (EncoderConfig, NewsEncoder, RecModel, UserEncoder, count_encoder_params,
                              count_params, hash_token, load_model, pad_batch, save_model, score_click, tokenize)
from tinyrec.tensor import Tensor

from conftest import FD_TOL, gradcheck

TINY = EncoderConfig(vocab_size=50, d_model=8, n_heads=2, d_ff=12, n_layers=2, max_len=10, repr_dim=6,
                     query_dim=5)


def _scaled(model_params, rng, scale=0.5):
    # Larger weights than the 0.02 init so finite differences see non-trivial curvature.
    for p in model_params.values():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


class TestTokenizer:
    def test_lowercase_and_punctuation(self):
        assert tokenize("Team wins FINAL, again!") == ["team", "wins", "final", "again"]

    def test_hash_is_stable_and_skips_padding(self):
        ids = [hash_token(t, 100) for t in ("a", "b", "a")]
        assert ids[0] == ids[2]
        assert all(1 <= i < 100 for i in ids)
        assert hash_token("team", 30_000) == hash_token("team", 30_000)


class TestNewsEncoder:
    def test_deterministic(self):
        enc = NewsEncoder(TINY, seed=3)
        ids, _ = pad_batch([[3, 4, 5], [3, 4, 5]])
        out = enc(ids).data
        assert out[0].tobytes() == out[1].tobytes()
        assert out.shape == (2, TINY.repr_dim)

    def test_extra_padding_does_not_change_output(self):
        enc = NewsEncoder(TINY, seed=4)
        short, _ = pad_batch([[7, 8, 9]])
        long, _ = pad_batch([[7, 8, 9]], length=8)
        np.testing.assert_allclose(enc(short).data, enc(long).data, atol=1e-9, rtol=0)

    def test_out_of_vocab_id_raises(self):
        enc = NewsEncoder(TINY)
        with pytest.raises(IndexError):
            enc(np.array([[1, TINY.vocab_size]]))

    def test_too_long_sequence_raises(self):
        with pytest.raises(ValueError):
            NewsEncoder(TINY)(np.ones((1, TINY.max_len + 1), dtype=int))

    def test_gradient_of_squared_norm(self, rng):
        enc = NewsEncoder(TINY, seed=5)
        _scaled(enc.params, rng)
        ids, _ = pad_batch([[3, 4, 5, 6], [9, 2]])

        def loss():
            out = enc(ids)
            return (out * out).sum()

        errors = gradcheck(loss, enc.params, max_entries=6)
        assert max(errors.values()) <= FD_TOL, {k: v for k, v in errors.items() if v > FD_TOL}

    def test_freeze_below_hides_lower_layers(self):
        enc = NewsEncoder(TINY)
        names = set(enc.trainable(freeze_below=1))
        assert not any(n.startswith(("embed.", "layer0.")) for n in names)
        assert any(n.startswith("layer1.") for n in names)


class TestUserEncoder:
    def _history(self, rng, n=3, d=6):
        return Tensor(rng.normal(size=(1, n, d)))

    def test_single_item_is_returned(self, rng):
        enc = UserEncoder(6, 5, seed=0)
        h = self._history(rng, 1)
        np.testing.assert_allclose(enc(h, np.ones((1, 1), bool)).data, h.data[:, 0], rtol=1e-15)

    def test_duplicate_items_equal_single(self, rng):
        enc = UserEncoder(6, 5, seed=0)
        item = rng.normal(size=6)
        two = Tensor(np.stack([item, item])[None])
        np.testing.assert_allclose(enc(two, np.ones((1, 2), bool)).data[0], item, rtol=1e-12)

    def test_weights_on_simplex_and_masked(self, rng):
        enc = UserEncoder(6, 5, seed=1)
        h = self._history(rng, 4)
        mask = np.array([[True, True, False, True]])
        w = enc.weights(h, mask).data
        assert w[0, 2] == 0.0
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_all_masked_gives_zero_vector(self, rng):
        enc = UserEncoder(6, 5, seed=1)
        out = enc(self._history(rng, 3), np.zeros((1, 3), bool)).data
        np.testing.assert_array_equal(out, np.zeros((1, 6)))

    def test_permutation_invariance(self, rng):
        enc = UserEncoder(6, 5, seed=2)
        _scaled(enc.params, rng, 1.0)
        h = rng.normal(size=(1, 4, 6))
        perm = [2, 0, 3, 1]
        mask = np.ones((1, 4), bool)
        a = enc(Tensor(h), mask).data
        b = enc(Tensor(h[:, perm]), mask).data
        np.testing.assert_allclose(a, b, atol=1e-9)
        np.testing.assert_allclose(enc.weights(Tensor(h), mask).data[0, perm],
                                   enc.weights(Tensor(h[:, perm]), mask).data[0], atol=1e-12)


class TestScoreClick:
    def test_unit_vectors(self):
        e = np.eye(3)[1]
        assert score_click(Tensor(e), Tensor(e)).item() == 1.0

    def test_orthogonal(self):
        assert score_click(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_hand_computed(self):
        assert score_click(Tensor([1.0, 2.0]), Tensor([3.0, -1.0])).item() == 1.0


def test_full_model_gradient_on_two_samples(rng):
    model = RecModel(TINY, seed=7)
    _scaled(model.params, rng, 0.4)
    news, _ = pad_batch([[3, 4, 5], [6, 7], [8, 9, 10, 11], [12], [13, 14]])
    hist = np.array([[0, 1], [2, 0]])
    hmask = np.array([[True, True], [True, False]])
    cand = np.array([[2, 3, 4], [0, 1, 3]])
    labels = np.array([0, 2])

    def loss():
        out = model.forward(news, hist, hmask, cand)
        return tn.cross_entropy(tn.one_hot(labels, 3), out.logits)

    errors = gradcheck(loss, model.params, max_entries=5)
    assert max(errors.values()) <= FD_TOL, {k: v for k, v in errors.items() if v > FD_TOL}


class TestParamCount:
    def test_closed_form_matches_instantiated_model(self):
        enc = NewsEncoder(TINY)
        assert count_encoder_params(TINY)["total"] == sum(p.size for p in enc.params.values())
        model = RecModel(TINY)
        assert count_params(TINY) == sum(p.size for p in model.params.values())

    def test_embedding_only(self):
        cfg = TINY.replace(n_layers=0)
        counts = count_encoder_params(cfg)
        assert counts["embeddings"] == cfg.vocab_size * cfg.d_model + cfg.max_len * cfg.d_model + 2 * cfg.d_model
        assert counts["layers"] == 0

    def test_student_smaller_than_teacher(self):
        student, teacher = EncoderConfig(n_layers=4), EncoderConfig(n_layers=12)
        assert count_params(student) < count_params(teacher)
        ratio = count_encoder_params(student)["layers"] / count_encoder_params(teacher)["layers"]
        assert ratio <= 0.5


def test_model_checkpoint_round_trip(tmp_path):
    model = RecModel(TINY, seed=9)
    save_model(tmp_path / "m", model, "finetuned", note="x")
    loaded, manifest = load_model(tmp_path / "m")
    assert manifest["stage"] == "finetuned" and manifest["n_layers"] == TINY.n_layers
    for k, p in model.params.items():
        assert loaded.params[k].data.tobytes() == p.data.tobytes()


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_model(tmp_path, NewsEncoder(TINY), "bogus")
