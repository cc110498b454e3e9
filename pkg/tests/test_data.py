from pathlib import Path

import numpy as np
import pytest

from tinyrec.data import FormatError, Impression, NewsArticle, SyntheticSpec, build_rec_samples, \
    format_mind_behavior, generate_synthetic_corpus, parse_mind_behaviors, parse_mind_news, read_corpus, \
    split_impressions, write_corpus, write_mind_behaviors, write_mind_news

FIXTURES = Path(__file__).parent / "fixtures"


class TestMindNews:
    def test_parse_fixture(self):
        arts = parse_mind_news(FIXTURES / "news.tsv")
        assert [a.id for a in arts] == ["N1", "N2", "N3", "N4"]
        assert arts[0].title == ["storm", "hits", "the", "coast"]
        assert arts[0].category == "news" and arts[0].subcategory == "newsworld"
        assert arts[1].title_entities == '[{"Label": "Final"}]'
        assert arts[2].body == []
        assert arts[3].url == ""

    def test_round_trip(self, tmp_path):
        arts = parse_mind_news(FIXTURES / "news.tsv")
        write_mind_news(arts, tmp_path / "news.tsv")
        assert parse_mind_news(tmp_path / "news.tsv") == arts

    def test_title_truncated(self, tmp_path):
        path = tmp_path / "news.tsv"
        path.write_text("N1\tc\ts\t" + " ".join(f"w{i}" for i in range(40)) + "\tbody\t\t\t\n")
        assert len(parse_mind_news(path)[0].title) == 30

    def test_wrong_column_count_names_line(self, tmp_path):
        path = tmp_path / "news.tsv"
        path.write_text("N1\tc\ts\ttitle\tbody\turl\t\t\nN2\tc\ts\ttitle\n")
        with pytest.raises(FormatError, match=r"news.tsv:2"):
            parse_mind_news(path)

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "news.tsv"
        row = "N1\tc\ts\ttitle\tbody\turl\t\t\n"
        path.write_text(row + row)
        with pytest.raises(FormatError, match="duplicate"):
            parse_mind_news(path)


class TestMindBehaviors:
    def test_parse_fixture(self):
        imps = parse_mind_behaviors(FIXTURES / "behaviors.tsv")
        assert len(imps) == 3
        assert imps[0].history == ["N1", "N2"]
        assert imps[0].candidates == [("N3", 1), ("N4", 0)]
        assert imps[1].history == []
        assert imps[1].labels == [0, 1, 0]
        assert imps[2].time == "11/13/2019 10:00:00 AM"

    def test_round_trip_bytes(self, tmp_path):
        imps = parse_mind_behaviors(FIXTURES / "behaviors.tsv")
        write_mind_behaviors(imps, tmp_path / "b.tsv")
        assert (tmp_path / "b.tsv").read_bytes() == (FIXTURES / "behaviors.tsv").read_bytes()

    @pytest.mark.parametrize("items", ["N1-2", "N1", "N1-", "-1"])
    def test_bad_label(self, tmp_path, items):
        path = tmp_path / "b.tsv"
        path.write_text(f"1\tU1\tt\tN2\t{items}\n")
        with pytest.raises(FormatError, match=r"b.tsv:1"):
            parse_mind_behaviors(path)

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "b.tsv"
        path.write_text("1\tU1\tN2\tN1-1\n")
        with pytest.raises(FormatError):
            parse_mind_behaviors(path)

    def test_hyphenated_news_id(self):
        imp = Impression("9", "U", [], [("N-12", 1)])
        assert format_mind_behavior(imp).endswith("N-12-1")


def test_corpus_round_trip(tmp_path):
    arts = [NewsArticle("x", ["a", "b"], ["c", "d", "e"]), NewsArticle("y", ["f"], ["g"])]
    write_corpus(arts, tmp_path / "c.tsv")
    back = read_corpus(tmp_path / "c.tsv")
    assert [(a.title, a.body) for a in back] == [(a.title, a.body) for a in arts]


def test_corpus_missing_tab(tmp_path):
    (tmp_path / "c.tsv").write_text("title only\n")
    with pytest.raises(FormatError):
        read_corpus(tmp_path / "c.tsv")


class TestRecSamples:
    def imp(self, n_pos=1, n_neg=6, history=8):
        cands = [(f"P{i}", 1) for i in range(n_pos)] + [(f"X{i}", 0) for i in range(n_neg)]
        return Impression("1", "U", [f"H{i}" for i in range(history)], cands)

    def test_shape_and_label(self):
        samples = build_rec_samples([self.imp(n_pos=2)], K=4, L=5, rng=np.random.default_rng(0))
        assert len(samples) == 2
        for s in samples:
            assert len(s.candidates) == 5
            assert s.candidates[s.label].startswith("P")
            assert sum(c.startswith("P") for c in s.candidates) == 1
            assert len(set(s.candidates)) == 5
            assert s.history == [f"H{i}" for i in range(3, 8)]

    def test_few_negatives_sampled_with_replacement(self):
        samples = build_rec_samples([self.imp(n_neg=2)], K=4, L=5, rng=np.random.default_rng(0))
        assert len(samples[0].candidates) == 5
        assert {c for c in samples[0].candidates if c.startswith("X")} <= {"X0", "X1"}

    def test_skips_single_class(self):
        assert build_rec_samples([self.imp(n_pos=0), self.imp(n_neg=0)], 4, 5, np.random.default_rng(0)) == []

    def test_label_position_uniform(self):
        samples = build_rec_samples([self.imp()] * 2000, K=4, L=5, rng=np.random.default_rng(1))
        counts = np.bincount([s.label for s in samples], minlength=5)
        assert np.all(np.abs(counts - 400) < 3 * np.sqrt(2000 * 0.2 * 0.8))

    def test_deterministic(self):
        a = build_rec_samples([self.imp()] * 10, 4, 5, np.random.default_rng(3))
        b = build_rec_samples([self.imp()] * 10, 4, 5, np.random.default_rng(3))
        assert a == b


class TestSynthetic:
    spec = SyntheticSpec(n_articles=300, n_users=40, n_topics=4, n_entities=200)

    def test_deterministic(self):
        assert generate_synthetic_corpus(self.spec) == generate_synthetic_corpus(self.spec)

    def test_seed_changes_output(self):
        a, _ = generate_synthetic_corpus(self.spec)
        b, _ = generate_synthetic_corpus(SyntheticSpec(**{**self.spec.to_dict(), "seed": 1}))
        assert a != b

    def test_structure(self):
        arts, imps = generate_synthetic_corpus(self.spec)
        assert len(arts) == 300 and len({a.id for a in arts}) == 300
        assert {a.topic for a in arts} == set(range(4))
        ids = {a.id for a in arts}
        for imp in imps:
            assert set(imp.history) <= ids and set(imp.news_ids) <= ids
            assert any(imp.labels)
            assert len(set(imp.news_ids)) == self.spec.candidates_per_impression
        for a in arts[:50]:
            ents = {w for w in a.title if w.startswith("e")}
            assert ents and ents <= set(a.body)

    def test_from_file(self, tmp_path):
        (tmp_path / "s.yaml").write_text("n_articles: 50\nseed: 3\n")
        spec = SyntheticSpec.from_file(tmp_path / "s.yaml")
        assert spec.n_articles == 50 and spec.seed == 3
        (tmp_path / "bad.yaml").write_text("n_articels: 50\n")
        with pytest.raises(KeyError):
            SyntheticSpec.from_file(tmp_path / "bad.yaml")


def test_split_impressions():
    imps = [Impression(str(i), "U", [], [("N", 1)]) for i in range(50)]
    keep, out = split_impressions(imps, 0.2, np.random.default_rng(0))
    assert len(out) == 10 and len(keep) == 40
    assert {i.impression_id for i in keep} | {i.impression_id for i in out} == {str(i) for i in range(50)}
