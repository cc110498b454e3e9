"""The four training phases and the direct-finetune baselines.

1. post-train a teacher news encoder on title-body matching;
2. distill it into a shallow student on the same matching task;
3. finetune M copies of the post-trained teacher on recommendation, one seed each;
4. distill the teacher ensemble into the stage-1 student on recommendation.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import distill as kd
from . import tensor as tn
from .data import Impression, NewsArticle, RecSample, build_rec_samples, split_impressions
from .encoders import EncoderConfig, NewsEncoder, RecModel, copy_encoder, restore, save_model, \
    snapshot
from .evaluation import NewsTokenizer, encode_all_news, evaluate
from .posttrain import TokenizedCorpus, matching_accuracy, matching_batches, matching_forward, matching_loss, \
    sample_matching_batch
from .tensor import Adam

log = logging.getLogger(__name__)

# Stream ids keep each phase's random numbers independent of the others.
_POSTTRAIN, _STAGE1, _FINETUNE, _STAGE2, _BASELINE, _SPLIT, _MATCH_EVAL = range(1, 8)


class TrainingDiverged(FloatingPointError):
    pass


def _reports_divergence(func):
    """Re-raise non-finite values met anywhere in a phase as :class:`TrainingDiverged`."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except TrainingDiverged:
            raise
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{func.__name__}: {exc}") from exc
    return wrapper


@dataclass
class PipelineConfig:
    """Every knob of the pipeline. Defaults are the published settings; see :meth:`desk_scale`."""

    # encoder shape
    vocab_size: int = 30_000
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    repr_dim: int = 256
    query_dim: int = 200
    title_len: int = 30
    body_len: int = 512
    teacher_layers: int = 12
    student_layers: int = 4
    freeze_below: int = 0
    reinit_head: bool = True
    # domain-specific post-training
    N: int = 9
    posttrain_batch: int = 32
    posttrain_lr: float = 1e-6
    posttrain_epochs: int = 5
    match_holdout: float = 0.1
    # stage one
    stage1_lr: float = 1e-4
    stage1_epochs: int = 5
    stage1_distill_weight: float = 1.0
    stage1_emb_weight: float = 1.0
    # recommendation finetuning
    K: int = 4
    L: int = 50
    rec_batch: int = 128
    finetune_lr: float = 5e-5
    finetune_epochs: int = 3
    val_fraction: float = 0.2
    # stage two
    M: int = 4
    stage2_lr: float = 5e-5
    stage2_epochs: int = 3
    stage2_distill_weight: float = 1.0
    stage2_emb_weight: float = 1.0
    omega_init: float = 1.0
    combine: str = "logits"
    # distillation
    T1: float = 1.0
    T2: float = 1.0
    beta1: float = 1.0
    beta2: float = 0.1
    # optimizer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"      # or "linear": decay to zero over the phase
    # seeds
    seed: int = 0
    teacher_seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        seeds = self.seeds_for_teachers()
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"teacher seeds must be distinct, got {seeds}")

    @classmethod
    def desk_scale(cls, **overrides) -> "PipelineConfig":
        """Small dims and larger learning rates for randomly initialised CPU runs."""
        base = dict(vocab_size=8192, d_model=64, n_heads=4, d_ff=128, repr_dim=64, query_dim=32,
                    title_len=24, body_len=64, teacher_layers=8, student_layers=4,
                    posttrain_lr=3e-3, posttrain_epochs=5, stage1_lr=2e-3, stage1_epochs=5,
                    L=20, rec_batch=32, finetune_lr=1e-3, finetune_epochs=3,
                    stage2_lr=1e-3, stage2_epochs=3, lr_schedule="linear")
        base.update(overrides)
        return cls(**base)

    def seeds_for_teachers(self) -> list[int]:
        if self.teacher_seeds:
            if len(self.teacher_seeds) < self.M:
                raise ValueError(f"need {self.M} teacher seeds, got {len(self.teacher_seeds)}")
            return list(self.teacher_seeds[: self.M])
        return [1000 * (self.seed + 1) + i for i in range(self.M)]

    def encoder(self, n_layers: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                             d_ff=self.d_ff, n_layers=n_layers, max_len=max(self.title_len, self.body_len),
                             repr_dim=self.repr_dim, query_dim=self.query_dim)

    def kd(self, stage: int) -> kd.KDConfig:
        if stage == 1:
            return kd.KDConfig(T1=self.T1, T2=self.T2, beta1=self.beta1, beta2=self.beta2,
                               distill_weight=self.stage1_distill_weight, emb_weight=self.stage1_emb_weight)
        return kd.KDConfig(T1=self.T1, T2=self.T2, beta1=self.beta1, beta2=self.beta2,
                           distill_weight=self.stage2_distill_weight, emb_weight=self.stage2_emb_weight,
                           combine=self.combine)

    def adam(self, params, lr: float) -> Adam:
        return Adam(params, lr=lr, betas=(self.adam_beta1, self.adam_beta2), eps=self.adam_eps)

    def lr_at(self, base: float, step: int, total: int) -> float:
        """Learning rate for the ``step``-th update (0-based) of ``total``."""
        if self.lr_schedule == "linear" and total > 0:
            return base * (1.0 - step / total)
        return base

    def rng(self, stream: int, extra: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream, extra])

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def override(self, **changes) -> "PipelineConfig":
        return PipelineConfig(**{**self.to_dict(), **changes})

    @classmethod
    def from_dict(cls, raw: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        start = base.to_dict() if base is not None else {}
        return cls(**{**start, **raw})

    @classmethod
    def from_file(cls, path: str | Path, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        text = Path(path).read_text(encoding="utf-8")
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        return cls.from_dict(raw or {}, base)

    def with_assignments(self, assignments: Sequence[str]) -> "PipelineConfig":
        """Apply ``key=value`` strings; values are parsed as YAML scalars/lists."""
        changes = {}
        types = {f.name: f.type for f in fields(self)}
        for item in assignments:
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise KeyError(f"bad override {item!r}: unknown key {key!r}")
            parsed = yaml.safe_load(value)
            if types[key] in ("float", float) and isinstance(parsed, int):
                parsed = float(parsed)
            changes[key] = parsed
        return self.override(**changes)


class TrainingLog:
    """Append-only list of records, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, **record: Any) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def of(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") == kind]


def _step(loss: tn.Tensor, opt: Adam, where: str, params: dict, dump_dir: Path | None,
          lr: float | None = None) -> None:
    if lr is not None:
        opt.lr = lr
    opt.zero_grad()
    try:
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite loss")
        loss.backward()
        opt.step()
    except FloatingPointError as exc:
        if dump_dir is not None:
            tn.save_tensors(dump_dir / "diverged", params)
        raise TrainingDiverged(f"{where}: {exc}") from exc


def _n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# -- phase 1: post-training ------------------------------------------------------------


def match_eval_accuracy(encoder: NewsEncoder, corpus: TokenizedCorpus, N: int, seed: int = 0,
                        batch_size: int = 64) -> float:
    """Matching accuracy on a fixed draw of negatives."""
    rng = np.random.default_rng([seed, _MATCH_EVAL])
    hits = total = 0
    with tn.no_grad():
        for start in range(0, len(corpus), batch_size):
            idx = list(range(start, min(start + batch_size, len(corpus))))
            out = matching_forward(encoder, sample_matching_batch(corpus, idx, N, rng))
            hits += matching_accuracy(out.logits) * len(idx)
            total += len(idx)
    return hits / max(total, 1)


def _split_corpus(config: PipelineConfig, articles: Sequence[NewsArticle]) -> tuple[TokenizedCorpus, TokenizedCorpus]:
    with_body = [a for a in articles if a.body] or list(articles)
    order = config.rng(_SPLIT, 1).permutation(len(with_body))
    n_hold = int(round(config.match_holdout * len(with_body)))
    if n_hold and n_hold < config.N + 1:
        n_hold = 0
    held = [with_body[i] for i in order[:n_hold]]
    train = [with_body[i] for i in order[n_hold:]] if n_hold else with_body
    mk = lambda arts: TokenizedCorpus(arts, config.vocab_size, config.title_len, config.body_len)  # noqa: E731
    return mk(train), mk(held if held else train)


@_reports_divergence
def run_posttrain(config: PipelineConfig, articles: Sequence[NewsArticle], out_dir: str | Path | None = None,
                  encoder: NewsEncoder | None = None) -> tuple[NewsEncoder, TrainingLog]:
    """Train a teacher news encoder to pick each body's own title among N others."""
    if not articles:
        raise ValueError("post-training corpus is empty")
    out = Path(out_dir) if out_dir else None
    train, held = _split_corpus(config, articles)
    encoder = encoder or NewsEncoder(config.encoder(config.teacher_layers), config.rng(_POSTTRAIN, 0))
    params = encoder.trainable(config.freeze_below)
    opt = config.adam(params, config.posttrain_lr)
    rng = config.rng(_POSTTRAIN, 1)
    logbook = TrainingLog(out / "posttrain.log.jsonl" if out else None)
    logbook.append(kind="epoch", phase="posttrain", epoch=0,
                   eval_accuracy=match_eval_accuracy(encoder, held, config.N, config.seed))
    total = config.posttrain_epochs * _n_batches(len(train), config.posttrain_batch)
    step = 0
    for epoch in range(1, config.posttrain_epochs + 1):
        losses, accs = [], []
        for batch in matching_batches(train, config.posttrain_batch, config.N, rng):
            outp = matching_forward(encoder, batch)
            loss = matching_loss(outp.logits)
            losses.append(loss.item())
            accs.append(matching_accuracy(outp.logits))
            _step(loss, opt, f"posttrain epoch {epoch}", params, out,
                  config.lr_at(config.posttrain_lr, step, total))
            step += 1
        acc = match_eval_accuracy(encoder, held, config.N, config.seed)
        logbook.append(kind="epoch", phase="posttrain", epoch=epoch, loss=float(np.mean(losses)),
                       train_accuracy=float(np.mean(accs)), eval_accuracy=acc)
        log.info("posttrain epoch %d loss %.4f eval acc %.3f", epoch, np.mean(losses), acc)
    if out:
        save_model(out / "teacher_posttrained", encoder, "posttrained", config_hash=config.hash())
    return encoder, logbook


# -- phase 2: stage-one distillation --------------------------------------------------------


def _tempered_entropy(logits: np.ndarray, T: float) -> float:
    """Mean ``T**2``-scaled entropy of ``softmax(logits / T)``; the soft-label loss floor."""
    z = logits / T
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-(np.exp(logp) * logp).sum(axis=-1).mean() * T * T)


@_reports_divergence
def run_stage1(config: PipelineConfig, teacher: NewsEncoder, articles: Sequence[NewsArticle],
               out_dir: str | Path | None = None, student: NewsEncoder | None = None
               ) -> tuple[NewsEncoder, TrainingLog]:
    """Train a shallow student to imitate the post-trained teacher on title-body matching."""
    student = student or NewsEncoder(config.encoder(config.student_layers), config.rng(_STAGE1, 0))
    if student.config.repr_dim != teacher.config.repr_dim:
        raise ValueError(f"teacher repr dim {teacher.config.repr_dim} != student {student.config.repr_dim}")
    out = Path(out_dir) if out_dir else None
    train, held = _split_corpus(config, articles)
    params = student.trainable(0)
    opt = config.adam(params, config.stage1_lr)
    rng = config.rng(_STAGE1, 1)
    kdc = config.kd(1)
    logbook = TrainingLog(out / "stage1.log.jsonl" if out else None)
    logbook.append(kind="epoch", phase="stage1", epoch=0,
                   eval_accuracy=match_eval_accuracy(student, held, config.N, config.seed))
    total = config.stage1_epochs * _n_batches(len(train), config.posttrain_batch)
    step = 0
    for epoch in range(1, config.stage1_epochs + 1):
        for batch in matching_batches(train, config.posttrain_batch, config.N, rng):
            with tn.no_grad():
                t_out = matching_forward(teacher, batch)
            s_out = matching_forward(student, batch)
            parts = kd.stage1_total_loss(t_out.logits.data, t_out.titles.data, t_out.bodies.data, s_out.logits,
                                         s_out.titles, s_out.bodies, np.zeros(len(batch), dtype=int), kdc)
            step += 1
            logbook.append(kind="step", phase="stage1", step=step, **parts.values(),
                           teacher_entropy=_tempered_entropy(t_out.logits.data, config.T1), distill_weight=kdc.distill_weight, emb_weight=kdc.emb_weight, beta=kdc.beta1)
            _step(parts.total, opt, f"stage1 epoch {epoch}", params, out,
                  config.lr_at(config.stage1_lr, step - 1, total))
        acc = match_eval_accuracy(student, held, config.N, config.seed)
        logbook.append(kind="epoch", phase="stage1", epoch=epoch, eval_accuracy=acc)
        log.info("stage1 epoch %d eval acc %.3f", epoch, acc)
    if out:
        save_model(out / "student_stage1", student, "stage1", config_hash=config.hash())
    return student, logbook


# -- recommendation batches ---------------------------------------------------------------------


@dataclass
class RecBatch:
    news_ids: np.ndarray          # (U, S) token ids of distinct news
    news_keys: list[str]
    history_index: np.ndarray     # (B, Lmax)
    history_mask: np.ndarray      # (B, Lmax)
    candidate_index: np.ndarray   # (B, K+1)
    labels: np.ndarray            # (B,)


def make_rec_batch(samples: Sequence[RecSample], tokenizer: NewsTokenizer) -> RecBatch:
    keys: dict[str, int] = {}
    for s in samples:
        for n in s.history + s.candidates:
            keys.setdefault(n, len(keys))
    width = max(1, max(len(s.history) for s in samples))
    hist = np.zeros((len(samples), width), dtype=np.int64)
    mask = np.zeros((len(samples), width), dtype=bool)
    for row, s in enumerate(samples):
        hist[row, : len(s.history)] = [keys[n] for n in s.history]
        mask[row, : len(s.history)] = True
    cand = np.array([[keys[n] for n in s.candidates] for s in samples], dtype=np.int64)
    order = list(keys)
    return RecBatch(tokenizer.ids(order), order, hist, mask, cand, np.array([s.label for s in samples]))


def _rec_epochs(config: PipelineConfig, impressions: Sequence[Impression], rng: np.random.Generator,
                epochs: int):
    for epoch in range(1, epochs + 1):
        shuffled = [impressions[i] for i in rng.permutation(len(impressions))]
        samples = build_rec_samples(shuffled, config.K, config.L, rng)
        batches = [samples[i:i + config.rec_batch] for i in range(0, len(samples), config.rec_batch)]
        yield epoch, batches


def _rec_steps(config: PipelineConfig, impressions: Sequence[Impression], epochs: int) -> int:
    n = sum(sum(imp.labels) for imp in impressions if 0 < sum(imp.labels) < len(imp.labels))
    return epochs * _n_batches(n, config.rec_batch)


def _validation_split(config: PipelineConfig, impressions: Sequence[Impression]):
    if config.val_fraction <= 0:
        return list(impressions), []
    return split_impressions(impressions, config.val_fraction, config.rng(_SPLIT, 2))


@_reports_divergence
def _finetune(model: RecModel, config: PipelineConfig, impressions: Sequence[Impression],
              articles: Sequence[NewsArticle], rng: np.random.Generator, phase: str,
              out: Path | None, logbook: TrainingLog) -> RecModel:
    train, val = _validation_split(config, impressions)
    tokenizer = NewsTokenizer(articles, config.vocab_size, config.title_len)
    params = model.trainable(config.freeze_below)
    opt = config.adam(params, config.finetune_lr)
    best_auc, best = -1.0, snapshot(model.params)
    total, step = _rec_steps(config, train, config.finetune_epochs), 0
    for epoch, batches in _rec_epochs(config, train, rng, config.finetune_epochs):
        losses = []
        for samples in batches:
            b = make_rec_batch(samples, tokenizer)
            outp = model.forward(b.news_ids, b.history_index, b.history_mask, b.candidate_index)
            loss = kd.target_loss(outp.logits, b.labels)
            losses.append(loss.item())
            _step(loss, opt, f"{phase} epoch {epoch}", params, out, config.lr_at(config.finetune_lr, step, total))
            step += 1
        record = {"kind": "epoch", "phase": phase, "epoch": epoch, "loss": float(np.mean(losses))}
        if val:
            val_auc = evaluate(model, val, articles, config.L, config.title_len)["auc"]
            record["val_auc"] = val_auc
            if val_auc > best_auc:
                best_auc, best = val_auc, snapshot(model.params)
        logbook.append(**record)
    if val:
        restore(model.params, best)
    return model


# -- phase 3: teacher ensemble ------------------------------------------------------------------


def run_teacher_ensemble(config: PipelineConfig, posttrained: NewsEncoder | None,
                         impressions: Sequence[Impression], articles: Sequence[NewsArticle],
                         out_dir: str | Path | None = None) -> tuple[list[RecModel], TrainingLog]:
    """Finetune M teachers from one encoder init; seeds differ in heads, user encoder and shuffling.

    With ``posttrained=None`` the teachers start from a random encoder (no post-training).
    """
    out = Path(out_dir) if out_dir else None
    logbook = TrainingLog(out / "teachers.log.jsonl" if out else None)
    enc_config = config.encoder(config.teacher_layers)
    base = posttrained or NewsEncoder(enc_config, config.rng(_FINETUNE, 0))
    teachers = []
    for i, seed in enumerate(config.seeds_for_teachers()):
        encoder = copy_encoder(base)
        if config.reinit_head:
            encoder.reinit_head(np.random.default_rng([seed, 1]))
        model = RecModel(enc_config, seed=seed, news_encoder=encoder)
        _finetune(model, config, impressions, articles, np.random.default_rng([seed, 2]), f"teacher{i}", out,
                  logbook)
        teachers.append(model)
        if out:
            save_model(out / f"teacher_finetuned_{i}", model, "finetuned", teacher_seed=seed,
                       posttrained=posttrained is not None, config_hash=config.hash())
    return teachers, logbook


def run_finetune_baseline(config: PipelineConfig, impressions: Sequence[Impression],
                          articles: Sequence[NewsArticle], n_layers: int | None = None,
                          encoder: NewsEncoder | None = None, out_dir: str | Path | None = None
                          ) -> tuple[RecModel, TrainingLog]:
    """Plain recommendation finetuning with the click label only."""
    out = Path(out_dir) if out_dir else None
    logbook = TrainingLog(out / "baseline.log.jsonl" if out else None)
    n_layers = n_layers or config.student_layers
    enc_config = encoder.config if encoder is not None else config.encoder(n_layers)
    encoder = copy_encoder(encoder) if encoder is not None else NewsEncoder(enc_config, config.rng(_BASELINE, 0))
    model = RecModel(enc_config, seed=int(config.rng(_BASELINE, 1).integers(2**31)), news_encoder=encoder)
    _finetune(model, config, impressions, articles, config.rng(_BASELINE, 2), "baseline", out, logbook)
    if out:
        save_model(out / f"baseline_{enc_config.n_layers}l", model, "baseline", config_hash=config.hash())
    return model, logbook


# -- phase 4: stage-two distillation --------------------------------------------------------------


def _teacher_outputs(teacher: RecModel, cache: dict[str, np.ndarray], b: RecBatch):
    news = np.stack([cache[k] for k in b.news_keys])
    hist, cand = news[b.history_index], news[b.candidate_index]
    with tn.no_grad():
        user = teacher.user_encoder(tn.Tensor(hist), b.history_mask).data
    logits = np.einsum("bcd,bd->bc", cand, user)
    return logits, np.concatenate([hist, cand], axis=1), user


@_reports_divergence
def run_stage2(config: PipelineConfig, teachers: Sequence[RecModel], student: NewsEncoder | None,
               impressions: Sequence[Impression], articles: Sequence[NewsArticle],
               out_dir: str | Path | None = None) -> tuple[RecModel, TrainingLog]:
    """Distill the weighted teacher ensemble into the student recommender.

    ``student=None`` starts from a random encoder (the stage-two-only ablation).
    """
    if not teachers:
        raise ValueError("teacher ensemble is empty")
    out = Path(out_dir) if out_dir else None
    logbook = TrainingLog(out / "stage2.log.jsonl" if out else None)
    enc_config = student.config if student is not None else config.encoder(config.student_layers)
    encoder = copy_encoder(student) if student is not None else NewsEncoder(enc_config, config.rng(_STAGE2, 0))
    model = RecModel(enc_config, seed=int(config.rng(_STAGE2, 1).integers(2**31)), news_encoder=encoder)
    ensemble = kd.TeacherEnsemble(list(teachers), enc_config.repr_dim, seed=int(config.rng(_STAGE2, 2).integers(2**31)))
    if config.omega_init != kd.OMEGA_INIT:
        ensemble.rho.data = np.array(kd.inverse_softplus(config.omega_init))
    train, val = _validation_split(config, impressions)
    tokenizer = NewsTokenizer(articles, config.vocab_size, config.title_len)
    all_ids = [a.id for a in articles]
    caches = [encode_all_news(t.news_encoder, tokenizer, all_ids) for t in teachers]

    params = {**model.trainable(config.freeze_below), **ensemble.params}
    opt = config.adam(params, config.stage2_lr)
    kdc = config.kd(2)
    rng = config.rng(_STAGE2, 3)
    best_auc, best = -1.0, snapshot(model.params)
    total, step = _rec_steps(config, train, config.stage2_epochs), 0
    for epoch, batches in _rec_epochs(config, train, rng, config.stage2_epochs):
        for samples in batches:
            b = make_rec_batch(samples, tokenizer)
            t_logits, t_news, t_users = zip(*(_teacher_outputs(t, c, b) for t, c in zip(teachers, caches)))
            outp = model.forward(b.news_ids, b.history_index, b.history_mask, b.candidate_index)
            s_news = tn.concat([outp.history, outp.candidates], axis=1)
            news_mask = np.concatenate([b.history_mask, np.ones(b.candidate_index.shape, dtype=bool)], axis=1)
            parts, weights = kd.stage2_total_loss(np.stack(t_logits), t_news, t_users, ensemble, outp.logits,
                                                  s_news, outp.user, b.labels, kdc, news_mask)
            omega = ensemble.omega().item()
            weight_sum_err = float(np.abs(weights.data.sum(axis=-1) - 1.0).max())
            if not omega > 0:
                raise TrainingDiverged(f"omega left the positive half-line: {omega}")
            step += 1
            logbook.append(kind="step", phase="stage2", step=step, epoch=epoch, **parts.values(),
                           distill_weight=kdc.distill_weight, emb_weight=kdc.emb_weight, beta=kdc.beta2,
                           omega=omega, weight_sum_err=weight_sum_err,
                           teacher_weights=weights.data.mean(axis=0).tolist())
            _step(parts.total, opt, f"stage2 epoch {epoch}", params, out,
                  config.lr_at(config.stage2_lr, step - 1, total))
        record = {"kind": "epoch", "phase": "stage2", "epoch": epoch, "omega": ensemble.omega().item()}
        if val:
            val_auc = evaluate(model, val, articles, config.L, config.title_len)["auc"]
            record["val_auc"] = val_auc
            if val_auc > best_auc:
                best_auc, best = val_auc, snapshot(model.params)
        logbook.append(**record)
    if val:
        restore(model.params, best)
    if out:
        save_model(out / "student_stage2", model, "stage2", teachers=len(teachers), config_hash=config.hash())
    return model, logbook
