"""Named experiment recipes: multi-seed sweeps over pipeline variants.

Each recipe is a list of cells. A cell is a pipeline variant evaluated under a
config; every cell runs once per seed and reports mean and std of each metric.
Shared phases (post-training, stage one, the teacher ensemble) are memoised on
the config fields they depend on, so a sweep over a stage-two knob trains the
earlier phases once per seed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Impression, NewsArticle, SyntheticSpec, generate_synthetic_corpus, split_impressions
from .encoders import NewsEncoder, RecModel, encode_tokens, pad_batch
from .evaluation import METRICS, EvalReport, bench_layers, evaluate, format_bench_table
from .trainer import PipelineConfig, TrainingLog, run_finetune_baseline, run_posttrain, run_stage1, run_stage2, \
    run_teacher_ensemble

log = logging.getLogger(__name__)

_ENCODER_KEYS = ("vocab_size", "d_model", "n_heads", "d_ff", "repr_dim", "query_dim", "title_len", "body_len",
                 "freeze_below", "adam_beta1", "adam_beta2", "adam_eps", "lr_schedule", "seed")
POSTTRAIN_KEYS = _ENCODER_KEYS + ("teacher_layers", "N", "posttrain_batch", "posttrain_lr", "posttrain_epochs",
                                  "match_holdout")
STAGE1_KEYS = POSTTRAIN_KEYS + ("student_layers", "stage1_lr", "stage1_epochs", "stage1_distill_weight",
                                "stage1_emb_weight", "T1", "beta1")
_REC_KEYS = ("K", "L", "rec_batch", "val_fraction")
TEACHER_KEYS = POSTTRAIN_KEYS + _REC_KEYS + ("reinit_head", "finetune_lr", "finetune_epochs", "teacher_seeds")

VARIANTS = ("pipeline", "stage1_only", "stage2_only", "direct_finetune", "teacher", "teacher_no_posttrain")


def _key(config: PipelineConfig, keys: Sequence[str], *extra) -> str:
    raw = config.to_dict()
    return json.dumps([{k: raw[k] for k in keys}, *extra], sort_keys=True)


@dataclass
class Dataset:
    articles: list[NewsArticle]
    train: list[Impression]
    test: list[Impression]

    @classmethod
    def synthetic(cls, spec: SyntheticSpec, test_fraction: float = 0.25) -> "Dataset":
        articles, impressions = generate_synthetic_corpus(spec)
        train, test = split_impressions(impressions, test_fraction, np.random.default_rng([spec.seed, 99]))
        return cls(articles, train, test)


class Runner:
    """Runs pipeline variants on one dataset, reusing phases shared across cells."""

    def __init__(self, data: Dataset):
        self.data = data
        self.logs: list[tuple[str, PipelineConfig, TrainingLog]] = []
        self._memo: dict[str, object] = {}

    def _cached(self, key: str, build: Callable):
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    def posttrain(self, config: PipelineConfig) -> tuple[NewsEncoder, TrainingLog]:
        return self._cached("pt" + _key(config, POSTTRAIN_KEYS), lambda: run_posttrain(config, self.data.articles))

    def posttrained(self, config: PipelineConfig) -> NewsEncoder:
        return self.posttrain(config)[0]

    def stage1(self, config: PipelineConfig) -> NewsEncoder:
        return self._cached("s1" + _key(config, STAGE1_KEYS),
                            lambda: run_stage1(config, self.posttrained(config), self.data.articles)[0])

    def teacher(self, config: PipelineConfig, index: int, posttrained: bool = True) -> RecModel:
        """The ``index``-th finetuned teacher; it does not depend on how many are requested."""
        def build():
            seed = config.override(M=max(config.M, index + 1)).seeds_for_teachers()[index]
            single = config.override(M=1, teacher_seeds=[seed])
            base = self.posttrained(config) if posttrained else None
            return run_teacher_ensemble(single, base, self.data.train, self.data.articles)[0][0]
        return self._cached(f"t{index}{posttrained}" + _key(config, TEACHER_KEYS), build)

    def teachers(self, config: PipelineConfig) -> list[RecModel]:
        return [self.teacher(config, i) for i in range(config.M)]

    def model(self, config: PipelineConfig, variant: str) -> RecModel:
        if variant in ("pipeline", "stage2_only"):
            student = self.stage1(config) if variant == "pipeline" else None
            model, logbook = run_stage2(config, self.teachers(config), student, self.data.train, self.data.articles)
            self.logs.append((variant, config, logbook))
            return model
        if variant == "stage1_only":
            return run_finetune_baseline(config, self.data.train, self.data.articles,
                                         encoder=self.stage1(config))[0]
        if variant == "direct_finetune":
            return run_finetune_baseline(config, self.data.train, self.data.articles)[0]
        if variant == "teacher":
            return self.teacher(config, 0)
        if variant == "teacher_no_posttrain":
            return self.teacher(config, 0, posttrained=False)
        raise KeyError(f"unknown variant {variant!r}; expected one of {VARIANTS}")

    def evaluate(self, config: PipelineConfig, variant: str) -> dict:
        return evaluate(self.model(config, variant), self.data.test, self.data.articles, config.L, config.title_len)


@dataclass
class Cell:
    name: str
    variant: str
    overrides: dict = field(default_factory=dict)


@dataclass
class CellResult:
    recipe: str
    cell: str
    variant: str
    config_hash: str
    seeds: list[int]
    report: EvalReport

    def row(self) -> dict:
        out = {"recipe": self.recipe, "cell": self.cell, "variant": self.variant, "config_hash": self.config_hash,
               "seeds": self.seeds, "impressions": self.report.impressions}
        for m in METRICS:
            out[f"{m}_mean"] = self.report.mean[m]
            out[f"{m}_std"] = self.report.std[m]
        return out


def _cells_teacher_count() -> list[Cell]:
    return [Cell(f"M={m}", "pipeline", {"M": m}) for m in (1, 2, 3, 4)]


def _cells_stage_ablation() -> list[Cell]:
    return [Cell("both stages", "pipeline"), Cell("stage-1 only", "stage1_only"),
            Cell("stage-2 only", "stage2_only"), Cell("neither", "direct_finetune")]


def _cells_beta() -> list[Cell]:
    cells = [Cell(f"beta1=1.0 beta2={b}", "pipeline", {"beta1": 1.0, "beta2": b}) for b in (0.0, 0.05, 0.1, 0.15, 0.3)]
    cells += [Cell(f"beta1={b} beta2=0.1", "pipeline", {"beta1": b, "beta2": 0.1}) for b in (0.7, 1.0, 1.3)]
    return cells


def _cells_loss() -> list[Cell]:
    return [Cell("full", "pipeline"), Cell("no distill loss", "pipeline", {"stage2_distill_weight": 0.0}),
            Cell("no embedding loss", "pipeline", {"stage2_emb_weight": 0.0}),
            Cell("no target loss", "pipeline", {"beta2": 0.0})]


def _cells_layers() -> list[Cell]:
    cells = [Cell("teacher", "teacher")]
    for n in (1, 2, 4):
        cells += [Cell(f"pipeline-{n}", "pipeline", {"student_layers": n}),
                  Cell(f"finetune-{n}", "direct_finetune", {"student_layers": n})]
    return cells


RECIPES: dict[str, Callable[[], list[Cell]]] = {
    "teacher-count-sweep": _cells_teacher_count,
    "stage-ablation": _cells_stage_ablation,
    "beta-sweep": _cells_beta,
    "loss-ablation": _cells_loss,
    "layer-sweep": _cells_layers,
}
EFFICIENCY = "efficiency"


def recipe_names() -> list[str]:
    return sorted([*RECIPES, EFFICIENCY])


def run_cells(name: str, cells: Sequence[Cell], base: PipelineConfig, runner: Runner,
              n_seeds: int = 3) -> list[CellResult]:
    seeds = [base.seed + i for i in range(n_seeds)]
    results = []
    for cell in cells:
        config = base.override(**cell.overrides)
        runs = []
        for seed in seeds:
            start = time.perf_counter()
            runs.append(runner.evaluate(config.override(seed=seed), cell.variant))
            log.info("%s | %s | seed %d: auc %.4f (%.0fs)", name, cell.name, seed, runs[-1]["auc"],
                     time.perf_counter() - start)
        results.append(CellResult(name, cell.name, cell.variant, config.hash(), seeds, EvalReport.from_runs(runs)))
    return results


def format_table(results: Sequence[CellResult]) -> str:
    width = max([len(r.cell) for r in results] + [4])
    head = f"{'cell':<{width}}  " + "  ".join(f"{m:>15}" for m in METRICS) + "  config"
    lines = [head]
    for r in results:
        vals = "  ".join(f"{100 * r.report.mean[m]:>7.2f}±{100 * r.report.std[m]:<6.2f}" for m in METRICS)
        lines.append(f"{r.cell:<{width}}  {vals}  {r.config_hash}")
    return "\n".join(lines)


def run_recipe(name: str, base: PipelineConfig, data: Dataset | None = None, spec: SyntheticSpec | None = None,
               n_seeds: int = 3, out_dir: str | Path | None = None) -> tuple[str, list[dict]]:
    """Run a named recipe; returns the rendered table and its rows (also written under ``out_dir``)."""
    if name not in RECIPES and name != EFFICIENCY:
        raise KeyError(f"unknown recipe {name!r}; available: {', '.join(recipe_names())}")
    out = Path(out_dir) if out_dir else None
    if name == EFFICIENCY:
        table, rows = _efficiency(base, data, spec)
    else:
        data = data or Dataset.synthetic(spec or SyntheticSpec())
        results = run_cells(name, RECIPES[name](), base, Runner(data), n_seeds)
        table, rows = format_table(results), [r.row() for r in results]
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.txt").write_text(table + "\n")
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return table, rows


def _efficiency(base: PipelineConfig, data: Dataset | None, spec: SyntheticSpec | None,
                n_news: int = 64) -> tuple[str, list[dict]]:
    articles = data.articles if data else generate_synthetic_corpus(spec or SyntheticSpec(n_users=1))[0]
    rows = [encode_tokens(a.title, base.vocab_size, base.title_len) or [1] for a in articles[:n_news]]
    reports = bench_layers(base.encoder(base.teacher_layers), pad_batch(rows)[0], layers=(1, 2, 4, 12), reference=12)
    config_hash = base.hash()
    return format_bench_table(reports), [{"recipe": EFFICIENCY, "config_hash": config_hash, **r.to_dict()}
                                         for r in reports]
