"""News encoder, user encoder and click scoring.

The news encoder is a post-LN transformer over hashed token ids followed by an
additive attention pool and a linear output layer. The user encoder is an
additive attention pool over the clicked-news representations. A click score is
the dot product of candidate and user representations.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

PAD_ID = 0
MASK_BIAS = -1e9
STAGES = ("random", "posttrained", "stage1", "finetuned", "stage2", "baseline")

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)?")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def hash_token(token: str, vocab_size: int) -> int:
    # crc32 is stable across processes, unlike the builtin hash().
    return 1 + zlib.crc32(token.encode("utf-8")) % (vocab_size - 1)


def encode_tokens(tokens: Sequence[str], vocab_size: int, max_len: int) -> list[int]:
    return [hash_token(t, vocab_size) for t in tokens[:max_len]]


def pad_batch(sequences: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists with PAD_ID; returns ``(ids, mask)``."""
    width = length if length is not None else max((len(s) for s in sequences), default=1)
    width = max(width, 1)
    ids = np.zeros((len(sequences), width), dtype=np.int64)
    for row, seq in enumerate(sequences):
        if len(seq) > width:
            raise ValueError(f"sequence of length {len(seq)} exceeds pad width {width}")
        ids[row, : len(seq)] = seq
    return ids, ids != PAD_ID


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 30_000
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 4
    max_len: int = 512
    repr_dim: int = 256
    query_dim: int = 200

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for the padding id")

    def replace(self, **changes) -> "EncoderConfig":
        return EncoderConfig(**{**asdict(self), **changes})


def _normal(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class NewsEncoder:
    """Transformer token encoder + attention pooling + dense output."""

    HEAD_PREFIXES = ("pool.", "out.")

    def __init__(self, config: EncoderConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, Tensor] = {
            "embed.tokens": _normal(rng, c.vocab_size, c.d_model),
            "embed.positions": _normal(rng, c.max_len, c.d_model),
            "embed.ln.gain": _ones(c.d_model),
            "embed.ln.bias": _zeros(c.d_model),
        }
        for i in range(c.n_layers):
            pre = f"layer{i}."
            for name in ("q", "k", "v", "o"):
                p[pre + f"attn.{name}.weight"] = _normal(rng, c.d_model, c.d_model)
                p[pre + f"attn.{name}.bias"] = _zeros(c.d_model)
            p[pre + "ln1.gain"] = _ones(c.d_model)
            p[pre + "ln1.bias"] = _zeros(c.d_model)
            p[pre + "ff.in.weight"] = _normal(rng, c.d_model, c.d_ff)
            p[pre + "ff.in.bias"] = _zeros(c.d_ff)
            p[pre + "ff.out.weight"] = _normal(rng, c.d_ff, c.d_model)
            p[pre + "ff.out.bias"] = _zeros(c.d_model)
            p[pre + "ln2.gain"] = _ones(c.d_model)
            p[pre + "ln2.bias"] = _zeros(c.d_model)
        self.params = p
        self.reinit_head(rng)

    def reinit_head(self, seed: int | np.random.Generator) -> None:
        """Fresh attention-pool and output-layer weights (seed-dependent components)."""
        rng = np.random.default_rng(seed)
        c = self.config
        self.params["pool.proj.weight"] = _normal(rng, c.d_model, c.query_dim)
        self.params["pool.proj.bias"] = _zeros(c.query_dim)
        self.params["pool.query"] = _normal(rng, c.query_dim)
        self.params["out.weight"] = _normal(rng, c.d_model, c.repr_dim)
        self.params["out.bias"] = _zeros(c.repr_dim)

    def trainable(self, freeze_below: int = 0) -> dict[str, Tensor]:
        """Parameters left trainable when embeddings and layers ``< freeze_below`` are frozen."""
        if freeze_below <= 0:
            return dict(self.params)
        frozen = ("embed.",) + tuple(f"layer{i}." for i in range(freeze_below))
        return {k: v for k, v in self.params.items() if not k.startswith(frozen)}

    def __call__(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        return self.encode(ids, mask)

    def encode(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Encode a ``(batch, seq)`` id matrix into ``(batch, repr_dim)`` news representations."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if mask is None:
            mask = ids != PAD_ID
        mask = np.asarray(mask, dtype=bool)
        c, p = self.config, self.params
        batch, seq = ids.shape
        if seq > c.max_len:
            raise ValueError(f"sequence length {seq} exceeds max_len {c.max_len}")
        if ids.size and ids.max() >= c.vocab_size:
            raise IndexError(f"token id {ids.max()} >= vocab_size {c.vocab_size}")

        x = tn.embedding(p["embed.tokens"], ids) + p["embed.positions"][:seq]
        x = tn.layer_norm(x, p["embed.ln.gain"], p["embed.ln.bias"])
        key_bias = np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]
        for i in range(c.n_layers):
            x = self._block(x, i, key_bias)
        return self._pool(x, mask)

    def _block(self, x: Tensor, i: int, key_bias: np.ndarray) -> Tensor:
        c, p = self.config, self.params
        pre = f"layer{i}."
        batch, seq, d = x.shape
        heads, dh = c.n_heads, c.d_model // c.n_heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(batch, seq, heads, dh).transpose(0, 2, 1, 3)

        q = split(tn.linear(x, p[pre + "attn.q.weight"], p[pre + "attn.q.bias"]))
        k = split(tn.linear(x, p[pre + "attn.k.weight"], p[pre + "attn.k.bias"]))
        v = split(tn.linear(x, p[pre + "attn.v.weight"], p[pre + "attn.v.bias"]))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + key_bias
        ctx = tn.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(batch, seq, d)
        attn = tn.linear(ctx, p[pre + "attn.o.weight"], p[pre + "attn.o.bias"])
        x = tn.layer_norm(x + attn, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        hidden = tn.gelu(tn.linear(x, p[pre + "ff.in.weight"], p[pre + "ff.in.bias"]))
        ff = tn.linear(hidden, p[pre + "ff.out.weight"], p[pre + "ff.out.bias"])
        return tn.layer_norm(x + ff, p[pre + "ln2.gain"], p[pre + "ln2.bias"])

    def _pool(self, x: Tensor, mask: np.ndarray) -> Tensor:
        p = self.params
        batch, seq, d = x.shape
        weights = attention_weights(x, p["pool.proj.weight"], p["pool.proj.bias"], p["pool.query"], mask)
        pooled = (weights.reshape(batch, 1, seq) @ x).reshape(batch, d)
        return tn.linear(pooled, p["out.weight"], p["out.bias"])


def attention_weights(x: Tensor, proj_w: Tensor, proj_b: Tensor, query: Tensor, mask: np.ndarray) -> Tensor:
    """Masked additive-attention weights over axis 1 of ``x`` (batch, slots, dim).

    Rows with every slot masked get all-zero weights.
    """
    batch, slots, _ = x.shape
    keys = tn.tanh(tn.linear(x, proj_w, proj_b))
    scores = (keys @ query.reshape(-1, 1)).reshape(batch, slots)
    mask = np.asarray(mask, dtype=bool)
    weights = tn.softmax(scores + np.where(mask, 0.0, MASK_BIAS), axis=-1)
    return weights * mask.astype(np.float64)


class UserEncoder:
    """Attention pooling over the clicked-news representations of a user."""

    def __init__(self, repr_dim: int, query_dim: int, seed: int | np.random.Generator = 0):
        rng = np.random.default_rng(seed)
        self.repr_dim = repr_dim
        self.query_dim = query_dim
        self.params: dict[str, Tensor] = {
            "user.proj.weight": _normal(rng, repr_dim, query_dim),
            "user.proj.bias": _zeros(query_dim),
            "user.query": _normal(rng, query_dim),
        }

    def weights(self, history: Tensor, mask: np.ndarray) -> Tensor:
        p = self.params
        return attention_weights(history, p["user.proj.weight"], p["user.proj.bias"], p["user.query"], mask)

    def __call__(self, history: Tensor, mask: np.ndarray) -> Tensor:
        return self.encode(history, mask)

    def encode(self, history: Tensor, mask: np.ndarray) -> Tensor:
        """``history`` is (batch, L, dim); returns (batch, dim). All-masked rows give zeros."""
        batch, slots, dim = history.shape
        w = self.weights(history, mask)
        return (w.reshape(batch, 1, slots) @ history).reshape(batch, dim)


def score_click(candidate: Tensor, user: Tensor) -> Tensor:
    """Dot product over the last axis; broadcasts a user row over candidate rows."""
    candidate, user = tn.as_tensor(candidate), tn.as_tensor(user)
    if candidate.shape[-1] != user.shape[-1]:
        raise ValueError(f"dimension mismatch: {candidate.shape[-1]} vs {user.shape[-1]}")
    if candidate.ndim == user.ndim + 1:
        user = user.reshape(user.shape[:-1] + (1, user.shape[-1]))
    return (candidate * user).sum(axis=-1)


@dataclass
class RecOutput:
    logits: Tensor          # (batch, candidates)
    user: Tensor            # (batch, dim)
    history: Tensor         # (batch, L, dim)
    candidates: Tensor      # (batch, candidates, dim)


class RecModel:
    """News encoder + user encoder + dot-product click predictor."""

    def __init__(self, config: EncoderConfig, seed: int = 0, news_encoder: NewsEncoder | None = None):
        rng = np.random.default_rng(seed)
        self.config = config
        self.news_encoder = news_encoder if news_encoder is not None else NewsEncoder(config, rng)
        self.user_encoder = UserEncoder(config.repr_dim, config.query_dim, rng)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.news_encoder.params, **self.user_encoder.params}

    def trainable(self, freeze_below: int = 0) -> dict[str, Tensor]:
        return {**self.news_encoder.trainable(freeze_below), **self.user_encoder.params}

    def forward(self, news_ids: np.ndarray, history_index: np.ndarray, history_mask: np.ndarray,
                candidate_index: np.ndarray) -> RecOutput:
        """Score candidates for a batch.

        ``news_ids`` holds the token ids of every distinct news item in the batch;
        ``history_index`` (batch, L) and ``candidate_index`` (batch, C) index its rows.
        """
        news = self.news_encoder(news_ids)
        history = news[np.asarray(history_index)]
        candidates = news[np.asarray(candidate_index)]
        user = self.user_encoder(history, history_mask)
        return RecOutput(score_click(candidates, user), user, history, candidates)


# -- parameter counting ------------------------------------------------------------


def count_encoder_params(config: EncoderConfig) -> dict[str, int]:
    """Closed-form count of learnable scalars in a news encoder, split by part."""
    c = config
    embeddings = c.vocab_size * c.d_model + c.max_len * c.d_model + 2 * c.d_model
    per_layer = 4 * (c.d_model * c.d_model + c.d_model) + 2 * c.d_model * c.d_ff + c.d_ff + c.d_model \
        + 4 * c.d_model
    head = c.d_model * c.query_dim + 2 * c.query_dim + c.d_model * c.repr_dim + c.repr_dim
    layers = c.n_layers * per_layer
    return {"embeddings": embeddings, "layers": layers, "head": head,
            "total": embeddings + layers + head}


def count_params(config: EncoderConfig, include_user: bool = True) -> int:
    total = count_encoder_params(config)["total"]
    if include_user:
        total += config.repr_dim * config.query_dim + 2 * config.query_dim
    return total


# -- checkpoints ------------------------------------------------------------------

MODEL_MANIFEST = "model.json"


def save_model(directory: str | Path, model: "RecModel | NewsEncoder", stage: str, **meta) -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    directory = Path(directory)
    tn.save_tensors(directory, model.params)
    kind = "rec" if isinstance(model, RecModel) else "news_encoder"
    manifest = {"kind": kind, "stage": stage, "n_layers": model.config.n_layers,
                "encoder": asdict(model.config), **meta}
    (directory / MODEL_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / MODEL_MANIFEST).read_text())


def load_model(directory: str | Path) -> tuple["RecModel | NewsEncoder", dict]:
    manifest = read_manifest(directory)
    known = {f.name for f in fields(EncoderConfig)}
    config = EncoderConfig(**{k: v for k, v in manifest["encoder"].items() if k in known})
    model: RecModel | NewsEncoder
    model = RecModel(config) if manifest["kind"] == "rec" else NewsEncoder(config)
    assign_params(model.params, tn.load_tensors(directory))
    return model, manifest


def assign_params(target: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    missing = set(target) - set(values)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, t in target.items():
        if values[name].shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {values[name].shape} vs {t.shape}")
        t.data = np.array(values[name], dtype=np.float64)


def copy_encoder(encoder: NewsEncoder) -> NewsEncoder:
    clone = NewsEncoder.__new__(NewsEncoder)
    clone.config = encoder.config
    clone.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in encoder.params.items()}
    return clone


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def restore(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v.data = values[k].copy()
