"""Title-body matching: the self-supervised task used to post-train a news encoder.

A body is scored against its own title (always at position 0) and N titles of
other articles by dot product of their representations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tn
from .data import NewsArticle
from .encoders import NewsEncoder, encode_tokens, pad_batch
from .tensor import Tensor


@dataclass
class MatchSample:
    article: int
    negatives: list[int]
    body: list[int]
    titles: list[list[int]]      # positive first, then N negatives


@dataclass
class MatchOutput:
    logits: Tensor     # (batch, N+1)
    titles: Tensor     # (batch, N+1, dim)
    bodies: Tensor     # (batch, dim)


class TokenizedCorpus:
    """Hashed title/body ids for a list of articles, computed once."""

    def __init__(self, articles: Sequence[NewsArticle], vocab_size: int, title_len: int, body_len: int):
        self.articles = list(articles)
        self.titles = [encode_tokens(a.title, vocab_size, title_len) or [1] for a in self.articles]
        self.bodies = [encode_tokens(a.body or a.title, vocab_size, body_len) or [1] for a in self.articles]

    def __len__(self) -> int:
        return len(self.articles)


def sample_matching_batch(corpus: TokenizedCorpus, articles: Sequence[int], N: int,
                          rng: np.random.Generator) -> list[MatchSample]:
    """Pair each body with its title and N distinct other articles' titles, uniformly drawn."""
    n = len(corpus)
    if n < N + 1:
        raise ValueError(f"corpus of {n} articles cannot supply {N} negatives per body")
    batch = []
    for a in articles:
        picks = rng.choice(n - 1, size=N, replace=False)
        negatives = [int(j) + (j >= a) for j in picks]
        batch.append(MatchSample(int(a), negatives, corpus.bodies[a],
                                 [corpus.titles[a]] + [corpus.titles[j] for j in negatives]))
    return batch


def matching_batches(corpus: TokenizedCorpus, batch_size: int, N: int,
                     rng: np.random.Generator) -> Iterator[list[MatchSample]]:
    """One epoch: bodies in shuffled order, negatives drawn fresh."""
    order = rng.permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        yield sample_matching_batch(corpus, order[start:start + batch_size], N, rng)


def matching_forward(encoder: NewsEncoder, samples: Sequence[MatchSample]) -> MatchOutput:
    batch = len(samples)
    width = len(samples[0].titles)
    body_ids, _ = pad_batch([s.body for s in samples])
    title_ids, _ = pad_batch([t for s in samples for t in s.titles])
    bodies = encoder(body_ids)
    titles = encoder(title_ids).reshape(batch, width, -1)
    logits = (titles @ bodies.reshape(batch, -1, 1)).reshape(batch, width)
    return MatchOutput(logits, titles, bodies)


def matching_loss(logits: Tensor) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[0]``."""
    logits = tn.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    return -tn.log_softmax(logits, axis=-1)[:, 0].mean()


def matching_accuracy(logits: Tensor | np.ndarray) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    best = data.argmax(axis=-1)
    # A tie with the positive counts as a miss.
    strict = data[:, 0] > np.delete(data, 0, axis=1).max(axis=1)
    return float(np.mean((best == 0) & strict))
