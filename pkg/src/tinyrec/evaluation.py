"""Impression-grouped ranking metrics, multi-seed aggregation and the encoding benchmark."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .data import Impression, NewsArticle
from .encoders import EncoderConfig, NewsEncoder, RecModel, count_encoder_params, count_params, \
    encode_tokens, pad_batch

METRICS = ("auc", "mrr", "ndcg@5", "ndcg@10")


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties count one half.

    Computed from average ranks (Mann-Whitney U), so tied scores share their rank.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # Stable on the negated scores: ties keep input order.
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")


def mrr(scores, labels) -> float:
    """Mean over clicked candidates of 1/rank in the descending score order."""
    labels = np.asarray(labels)
    ranked = labels[_descending_order(scores)]
    hits = np.flatnonzero(ranked == 1)
    if len(hits) == 0:
        raise ValueError("MRR needs at least one positive")
    return float(np.mean(1.0 / (hits + 1)))


def ndcg_at_k(scores, labels, k: int) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.sum() == 0:
        raise ValueError("nDCG needs at least one positive")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    ranked = labels[_descending_order(scores)][:k]
    ideal = np.sort(labels)[::-1][:k]
    return float((ranked * discounts[:len(ranked)]).sum() / (ideal * discounts[:len(ideal)]).sum())


def impression_metrics(scores, labels) -> dict[str, float] | None:
    """All four metrics for one impression, or ``None`` when it lacks a positive or a negative."""
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return None
    return {"auc": auc(scores, labels), "mrr": mrr(scores, labels),
            "ndcg@5": ndcg_at_k(scores, labels, 5), "ndcg@10": ndcg_at_k(scores, labels, 10)}


def grouped_metrics(score_lists: Sequence[Sequence[float]], label_lists: Sequence[Sequence[int]]) -> dict:
    """Uniform mean of per-impression metrics plus counts of used and skipped impressions."""
    per = [impression_metrics(s, l) for s, l in zip(score_lists, label_lists)]
    used = [m for m in per if m is not None]
    out = {name: float(np.mean([m[name] for m in used])) if used else float("nan") for name in METRICS}
    out["impressions"] = len(used)
    out["skipped"] = len(per) - len(used)
    return out


# -- model evaluation -------------------------------------------------------------


class NewsTokenizer:
    def __init__(self, articles: Sequence[NewsArticle], vocab_size: int, title_len: int):
        self.index = {a.id: i for i, a in enumerate(articles)}
        self.titles = [encode_tokens(a.title, vocab_size, title_len) or [1] for a in articles]

    def ids(self, news_ids: Sequence[str]) -> np.ndarray:
        try:
            rows = [self.titles[self.index[n]] for n in news_ids]
        except KeyError as exc:
            raise KeyError(f"unknown news id {exc.args[0]!r}") from None
        return pad_batch(rows)[0]


def encode_all_news(encoder: NewsEncoder, tokenizer: NewsTokenizer, news_ids: Sequence[str],
                    batch_size: int = 256) -> dict[str, np.ndarray]:
    """Representation of each distinct news id, computed once without recording gradients."""
    unique = sorted(set(news_ids))
    cache: dict[str, np.ndarray] = {}
    with tn.no_grad():
        for start in range(0, len(unique), batch_size):
            chunk = unique[start:start + batch_size]
            reprs = encoder(tokenizer.ids(chunk)).data
            cache.update(zip(chunk, reprs))
    return cache


def score_impressions(model: RecModel, impressions: Sequence[Impression], tokenizer: NewsTokenizer,
                      history_len: int) -> list[np.ndarray]:
    needed = [n for imp in impressions for n in imp.history[-history_len:] + imp.news_ids] if history_len else \
        [n for imp in impressions for n in imp.news_ids]
    cache = encode_all_news(model.news_encoder, tokenizer, needed)
    dim = model.config.repr_dim
    scores = []
    with tn.no_grad():
        for imp in impressions:
            hist = imp.history[-history_len:] if history_len else []
            h = np.stack([cache[n] for n in hist]) if hist else np.zeros((1, dim))
            mask = np.ones((1, len(hist)), dtype=bool) if hist else np.zeros((1, 1), dtype=bool)
            user = model.user_encoder(tn.Tensor(h[None]), mask).data[0]
            cand = np.stack([cache[n] for n in imp.news_ids])
            scores.append(cand @ user)
    return scores


def evaluate(model: RecModel, impressions: Sequence[Impression], articles: Sequence[NewsArticle],
             history_len: int = 50, title_len: int = 30) -> dict:
    tokenizer = NewsTokenizer(articles, model.config.vocab_size, title_len)
    impressions = sorted(impressions, key=lambda imp: imp.impression_id)
    scores = score_impressions(model, impressions, tokenizer, history_len)
    return grouped_metrics(scores, [imp.labels for imp in impressions])


@dataclass
class EvalReport:
    per_seed: list[dict]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    impressions: int = 0
    skipped: int = 0

    @classmethod
    def from_runs(cls, runs: Sequence[Mapping]) -> "EvalReport":
        runs = [dict(r) for r in runs]
        mean = {m: float(np.mean([r[m] for r in runs])) for m in METRICS}
        std = {m: float(statistics.pstdev([r[m] for r in runs])) if len(runs) > 1 else 0.0 for m in METRICS}
        return cls(runs, mean, std, int(runs[0].get("impressions", 0)), int(runs[0].get("skipped", 0)))

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"seed_index": i, **r}, sort_keys=True) for i, r in enumerate(self.per_seed)]
        lines.append(json.dumps({"summary": True, "mean": self.mean, "std": self.std,
                                 "impressions": self.impressions, "skipped": self.skipped}, sort_keys=True))
        return lines

    def format(self) -> str:
        return "  ".join(f"{m.upper()} {100 * self.mean[m]:.2f}±{100 * self.std[m]:.2f}" for m in METRICS)


# -- efficiency ------------------------------------------------------------------------


@dataclass
class BenchReport:
    n_layers: int
    news_per_second: float
    params_total: int
    params_layers: int
    window_rates: list[float]
    speedup: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def bench_throughput(config: EncoderConfig, token_ids: np.ndarray, duration: float = 0.5,
                     windows: int = 5, warmup: int = 2, seed: int = 0) -> BenchReport:
    """Median news-per-second over ``windows`` timed windows of about ``duration`` seconds each.

    Runs single-threaded forward passes with gradient recording off.
    """
    if duration <= 0:
        raise ValueError("benchmark window duration must be positive")
    if windows < 1:
        raise ValueError("need at least one timed window")
    encoder = NewsEncoder(config, seed)
    token_ids = np.asarray(token_ids)
    with tn.no_grad():
        for _ in range(warmup):
            encoder(token_ids)
        rates = []
        for _ in range(windows):
            done = 0
            start = time.perf_counter()
            while True:
                encoder(token_ids)
                done += len(token_ids)
                elapsed = time.perf_counter() - start
                if elapsed >= duration:
                    break
            rates.append(done / elapsed)
    counts = count_encoder_params(config)
    return BenchReport(config.n_layers, float(np.median(rates)), count_params(config), counts["layers"], rates)


def bench_layers(config: EncoderConfig, token_ids: np.ndarray, layers: Sequence[int] = (1, 2, 4, 12),
                 reference: int = 12, **kwargs) -> list[BenchReport]:
    reports = [bench_throughput(config.replace(n_layers=n), token_ids, **kwargs) for n in layers]
    ref = next((r for r in reports if r.n_layers == reference), reports[-1])
    for r in reports:
        r.speedup = r.news_per_second / ref.news_per_second
    return reports


def format_bench_table(reports: Sequence[BenchReport]) -> str:
    rows = [f"{'layers':>6}  {'params':>10}  {'layer params':>12}  {'news/sec':>10}  {'speedup':>7}"]
    for r in reports:
        rows.append(f"{r.n_layers:>6}  {r.params_total:>10}  {r.params_layers:>12}  "
                    f"{r.news_per_second:>10.1f}  {r.speedup:>6.2f}x")
    return "\n".join(rows)
