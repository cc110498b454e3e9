"""MIND-format ingestion, the synthetic desk-scale generator, and sample assembly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .encoders import tokenize

TITLE_MAX_TOKENS = 30
BODY_MAX_TOKENS = 512


class FormatError(ValueError):
    """Raised for malformed input files; message carries ``path:line``."""


@dataclass
class NewsArticle:
    id: str
    title: list[str]
    body: list[str] = field(default_factory=list)
    category: str = ""
    subcategory: str = ""
    url: str = ""
    title_entities: str = ""
    abstract_entities: str = ""
    topic: int | None = None


@dataclass
class Impression:
    impression_id: str
    user_id: str
    history: list[str]
    candidates: list[tuple[str, int]]
    time: str = ""

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.candidates]

    @property
    def news_ids(self) -> list[str]:
        return [nid for nid, _ in self.candidates]


@dataclass
class RecSample:
    impression_id: str
    history: list[str]
    candidates: list[str]
    label: int


# -- MIND news.tsv ------------------------------------------------------------------


def parse_mind_news(path: str | Path, max_title_tokens: int = TITLE_MAX_TOKENS) -> list[NewsArticle]:
    """Read a MIND ``news.tsv``; the abstract stands in for the body."""
    articles: list[NewsArticle] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 tab-separated columns, got {len(cols)}")
            nid, category, subcategory, title, abstract, url, t_ent, a_ent = cols
            if not nid:
                raise FormatError(f"{path}:{lineno}: empty news id")
            if nid in seen:
                raise FormatError(f"{path}:{lineno}: duplicate news id {nid}")
            seen.add(nid)
            articles.append(NewsArticle(nid, tokenize(title)[:max_title_tokens], tokenize(abstract)[:BODY_MAX_TOKENS],
                                        category, subcategory, url, t_ent, a_ent))
    return articles


def format_mind_news(article: NewsArticle) -> str:
    return "\t".join([article.id, article.category, article.subcategory, " ".join(article.title),
                      " ".join(article.body), article.url, article.title_entities, article.abstract_entities])


def write_mind_news(articles: Iterable[NewsArticle], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in articles:
            fh.write(format_mind_news(a) + "\n")


# -- MIND behaviors.tsv ---------------------------------------------------------------


def parse_mind_behaviors(path: str | Path) -> list[Impression]:
    impressions: list[Impression] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 tab-separated columns, got {len(cols)}")
            imp_id, user, time, history, items = cols
            candidates = []
            for item in items.split():
                nid, sep, suffix = item.rpartition("-")
                if not sep or suffix not in ("0", "1") or not nid:
                    raise FormatError(f"{path}:{lineno}: bad candidate {item!r} (expected <id>-0 or <id>-1)")
                candidates.append((nid, int(suffix)))
            if not candidates:
                raise FormatError(f"{path}:{lineno}: impression has no candidates")
            impressions.append(Impression(imp_id, user, history.split(), candidates, time))
    return impressions


def format_mind_behavior(imp: Impression) -> str:
    items = " ".join(f"{nid}-{label}" for nid, label in imp.candidates)
    return "\t".join([imp.impression_id, imp.user_id, imp.time, " ".join(imp.history), items])


def write_mind_behaviors(impressions: Iterable[Impression], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for imp in impressions:
            fh.write(format_mind_behavior(imp) + "\n")


# -- title<TAB>body corpus --------------------------------------------------------------


def read_corpus(path: str | Path, max_title_tokens: int = TITLE_MAX_TOKENS) -> list[NewsArticle]:
    articles = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            title, sep, body = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}:{lineno}: expected 'title<TAB>body'")
            articles.append(NewsArticle(f"C{lineno}", tokenize(title)[:max_title_tokens],
                                        tokenize(body)[:BODY_MAX_TOKENS]))
    return articles


def write_corpus(articles: Iterable[NewsArticle], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in articles:
            fh.write(" ".join(a.title) + "\t" + " ".join(a.body) + "\n")


# -- training samples ------------------------------------------------------------------


def build_rec_samples(impressions: Sequence[Impression], K: int, L: int,
                      rng: np.random.Generator) -> list[RecSample]:
    """One sample per clicked candidate: the click plus K non-clicked candidates, shuffled.

    Negatives are drawn with replacement only when the impression has fewer than K.
    Impressions lacking a click or a non-click yield no samples.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    samples = []
    for imp in impressions:
        positives = [nid for nid, label in imp.candidates if label == 1]
        negatives = [nid for nid, label in imp.candidates if label == 0]
        if not positives or not negatives:
            continue
        history = imp.history[-L:] if L > 0 else []
        for pos in positives:
            picks = rng.choice(len(negatives), size=K, replace=len(negatives) < K)
            items = [pos] + [negatives[i] for i in picks]
            order = rng.permutation(K + 1)
            candidates = [items[i] for i in order]
            samples.append(RecSample(imp.impression_id, list(history), candidates, int(np.argmin(order))))
    return samples


# -- synthetic data ------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Counts and structure of a generated corpus with topic-driven clicks.

    Every article has one topic and a handful of private entity words. Titles
    reuse some of the body's entity words plus topic words, so a title can be
    matched to its own body. Users prefer a few topics; a share of each
    impression's candidates comes from those topics, and preferred-topic
    candidates are clicked with higher probability.
    """

    n_articles: int = 2000
    n_users: int = 300
    n_topics: int = 20
    words_per_topic: int = 30
    n_entities: int = 800
    n_filler: int = 40
    entities_per_article: int = 3
    title_entities: int = 3
    title_topic_words: int = 3
    title_filler: int = 1
    body_len: int = 40
    topics_per_user: int = 1
    history_min: int = 5
    history_max: int = 20
    history_on_topic: float = 0.9
    impressions_per_user: int = 6
    candidates_per_impression: int = 10
    candidate_on_topic: float = 0.3
    click_on_topic: float = 0.5
    click_off_topic: float = 0.02
    seed: int = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticSpec":
        text = Path(path).read_text(encoding="utf-8")
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        return cls.from_dict(raw or {})

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise KeyError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def generate_synthetic_corpus(spec: SyntheticSpec, rng: np.random.Generator | int | None = None
                              ) -> tuple[list[NewsArticle], list[Impression]]:
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    s = spec
    if s.candidates_per_impression > s.n_articles:
        raise ValueError(f"{s.candidates_per_impression} candidates per impression need at least as many articles")
    if s.title_entities > s.entities_per_article or s.entities_per_article > s.n_entities:
        raise ValueError("need title_entities <= entities_per_article <= n_entities")
    topic_words = [[f"t{z}w{j}" for j in range(s.words_per_topic)] for z in range(s.n_topics)]
    filler = [f"f{j}" for j in range(s.n_filler)]

    articles: list[NewsArticle] = []
    by_topic: list[list[int]] = [[] for _ in range(s.n_topics)]
    for i in range(s.n_articles):
        z = int(rng.integers(s.n_topics))
        ents = [f"e{j}" for j in rng.choice(s.n_entities, size=s.entities_per_article, replace=False)]
        title = (list(rng.choice(ents, size=s.title_entities, replace=False))
                 + list(rng.choice(topic_words[z], size=s.title_topic_words))
                 + list(rng.choice(filler, size=s.title_filler)))
        rng.shuffle(title)
        source = rng.choice(3, size=s.body_len, p=[0.3, 0.55, 0.15])
        body = [str(rng.choice(ents)) if k == 0 else str(rng.choice(topic_words[z])) if k == 1
                else str(rng.choice(filler)) for k in source]
        # Every entity shows up in the body at least once.
        slots = rng.choice(s.body_len, size=min(len(ents), s.body_len), replace=False)
        for slot, e in zip(slots, ents):
            body[slot] = e
        articles.append(NewsArticle(f"N{i}", [str(t) for t in title], body, category=f"topic{z}", topic=z))
        by_topic[z].append(i)

    impressions: list[Impression] = []
    for u in range(s.n_users):
        prefs = set(rng.choice(s.n_topics, size=min(s.topics_per_user, s.n_topics), replace=False).tolist())
        pref_pool = [i for z in prefs for i in by_topic[z]]
        n_hist = int(rng.integers(s.history_min, s.history_max + 1))
        history = []
        for _ in range(n_hist):
            on = rng.random() < s.history_on_topic and pref_pool
            history.append(articles[int(rng.choice(pref_pool)) if on else int(rng.integers(s.n_articles))].id)
        for k in range(s.impressions_per_user):
            n_on = min(int(rng.binomial(s.candidates_per_impression, s.candidate_on_topic)), len(pref_pool))
            on = rng.choice(pref_pool, size=n_on, replace=False).tolist() if n_on else []
            taken = set(on)
            rest = [int(c) for c in rng.choice(s.n_articles, size=s.candidates_per_impression + n_on, replace=False)
                    if int(c) not in taken]
            cand = rng.permutation(on + rest[: s.candidates_per_impression - n_on])
            labels = [int(rng.random() < (s.click_on_topic if articles[c].topic in prefs else s.click_off_topic))
                      for c in cand]
            if not any(labels):
                on_topic = [j for j, c in enumerate(cand) if articles[c].topic in prefs]
                labels[on_topic[0] if on_topic else 0] = 1
            impressions.append(Impression(f"{u * s.impressions_per_user + k + 1}", f"U{u}", list(history),
                                          [(articles[c].id, lab) for c, lab in zip(cand, labels)]))
    return articles, impressions


def split_impressions(impressions: Sequence[Impression], holdout: float,
                      rng: np.random.Generator) -> tuple[list[Impression], list[Impression]]:
    """Random split; the second list holds ``round(holdout * n)`` impressions."""
    order = rng.permutation(len(impressions))
    n_out = int(round(holdout * len(impressions)))
    held = {int(i) for i in order[:n_out]}
    keep = [imp for i, imp in enumerate(impressions) if i not in held]
    out = [imp for i, imp in enumerate(impressions) if i in held]
    return keep, out
