"""Command-line entry point: ``tinyrec <subcommand> --config FILE [--set key=value ...]``.

Outputs go under ``--out``, defaulting to ``$TINYREC_OUT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, generate_synthetic_corpus, parse_mind_behaviors, parse_mind_news, read_corpus, \
    split_impressions, write_mind_behaviors, write_mind_news
from .encoders import NewsEncoder, RecModel, encode_tokens, load_model, pad_batch
from .evaluation import EvalReport, bench_layers, evaluate, format_bench_table
from .recipes import Dataset, recipe_names, run_recipe
from .trainer import PipelineConfig, run_finetune_baseline, run_posttrain, run_stage1, run_stage2, \
    run_teacher_ensemble

OUT_ENV = "TINYREC_OUT"
log = logging.getLogger("tinyrec")


def _config(args) -> PipelineConfig:
    base = PipelineConfig() if args.paper_scale else PipelineConfig.desk_scale()
    config = PipelineConfig.from_file(args.config, base) if args.config else base
    return config.with_assignments(args.set or [])


def _out(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: str, kind: type, stages: tuple[str, ...] | None = None):
    """Load a checkpoint, checking its kind and, when given, its pipeline stage tag."""
    model, manifest = load_model(path)
    if not isinstance(model, kind):
        raise ValueError(f"{path}: expected a {kind.__name__} checkpoint, found kind {manifest['kind']!r}")
    if stages and manifest.get("stage") not in stages:
        raise ValueError(f"{path}: expected a checkpoint tagged {' or '.join(stages)}, found {manifest.get('stage')!r}")
    return model


def _articles(args):
    if getattr(args, "corpus", None):
        return read_corpus(args.corpus)
    if not args.news:
        raise ValueError("--news (MIND news.tsv) is required")
    return parse_mind_news(args.news)


def _impressions(args):
    if not args.behaviors:
        raise ValueError("--behaviors (MIND behaviors.tsv) is required")
    return parse_mind_behaviors(args.behaviors)


def cmd_synth_data(args) -> None:
    spec = SyntheticSpec.from_file(args.spec) if args.spec else SyntheticSpec()
    articles, impressions = generate_synthetic_corpus(spec)
    train, test = split_impressions(impressions, args.test_fraction, np.random.default_rng([spec.seed, 99]))
    out = _out(args)
    write_mind_news(articles, out / "news.tsv")
    write_mind_behaviors(train, out / "behaviors.tsv")
    write_mind_behaviors(test, out / "behaviors_test.tsv")
    print(f"wrote {len(articles)} articles, {len(train)} train and {len(test)} test impressions to {out}")


def cmd_posttrain(args) -> None:
    config = _config(args)
    encoder, logbook = run_posttrain(config, _articles(args), _out(args))
    print(json.dumps(logbook.of("epoch")[-1]))


def cmd_distill_stage1(args) -> None:
    config = _config(args)
    teacher = _load(args.teacher, NewsEncoder, ("posttrained",))
    _, logbook = run_stage1(config, teacher, _articles(args), _out(args))
    print(json.dumps(logbook.of("epoch")[-1]))


def cmd_finetune_teachers(args) -> None:
    config = _config(args)
    base = _load(args.posttrained, NewsEncoder, ("posttrained",)) if args.posttrained else None
    teachers, _ = run_teacher_ensemble(config, base, _impressions(args), _articles(args), _out(args))
    print(f"finetuned {len(teachers)} teachers")


def cmd_distill_stage2(args) -> None:
    config = _config(args)
    teachers = [_load(p, RecModel, ("finetuned",)) for p in args.teachers]
    student = _load(args.student, NewsEncoder, ("stage1",)) if args.student else None
    _, logbook = run_stage2(config, teachers, student, _impressions(args), _articles(args), _out(args))
    print(json.dumps(logbook.of("epoch")[-1]))


def cmd_finetune_baseline(args) -> None:
    config = _config(args)
    encoder = _load(args.encoder, NewsEncoder) if args.encoder else None
    run_finetune_baseline(config, _impressions(args), _articles(args), n_layers=args.layers, encoder=encoder,
                          out_dir=_out(args))


def cmd_eval(args) -> None:
    config = _config(args)
    articles, impressions = _articles(args), _impressions(args)
    runs = [evaluate(_load(p, RecModel), impressions, articles, config.L, config.title_len) for p in args.models]
    report = EvalReport.from_runs(runs)
    lines = report.to_lines()
    (_out(args) / "eval.jsonl").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(report.format())


def cmd_bench(args) -> None:
    config = _config(args)
    articles = _articles(args) if (args.news or args.corpus) else \
        generate_synthetic_corpus(SyntheticSpec(n_articles=max(args.n_news, 100), n_users=1))[0]
    rows = [encode_tokens(a.title, config.vocab_size, config.title_len) or [1] for a in articles[:args.n_news]]
    reports = bench_layers(config.encoder(config.teacher_layers), pad_batch(rows)[0], layers=args.layers,
                           reference=max(args.layers), duration=args.duration)
    (_out(args) / "bench.jsonl").write_text("".join(json.dumps(r.to_dict()) + "\n" for r in reports))
    print(format_bench_table(reports))


def cmd_recipe(args) -> None:
    config = _config(args)
    data = None
    if args.news or args.behaviors:
        train = _impressions(args)
        test = parse_mind_behaviors(args.test_behaviors) if args.test_behaviors else train
        data = Dataset(_articles(args), train, test)
    spec = SyntheticSpec.from_file(args.spec) if args.spec else None
    table, _ = run_recipe(args.name, config, data=data, spec=spec, n_seeds=args.seeds, out_dir=_out(args))
    print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinyrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, data=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON file of pipeline settings")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--paper-scale", action="store_true", help="start from the full-size defaults")
        if data:
            p.add_argument("--news", help="MIND news.tsv")
            p.add_argument("--corpus", help="title<TAB>body corpus (post-training phases)")
            p.add_argument("--behaviors", help="MIND behaviors.tsv")
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "write a synthetic corpus in MIND format", data=False)
    p.add_argument("--spec", help="synthetic spec file (YAML or JSON)")
    p.add_argument("--test-fraction", type=float, default=0.25)

    add("posttrain", cmd_posttrain, "post-train the teacher encoder on title-body matching")
    add("distill-stage1", cmd_distill_stage1, "distill the post-trained teacher into the student").add_argument(
        "--teacher", required=True, help="post-trained teacher checkpoint")
    add("finetune-teachers", cmd_finetune_teachers, "finetune M teachers on recommendation").add_argument(
        "--posttrained", help="post-trained encoder checkpoint (omit to start from random)")
    p = add("distill-stage2", cmd_distill_stage2, "distill the teacher ensemble into the student")
    p.add_argument("--teachers", nargs="+", required=True, help="finetuned teacher checkpoints")
    p.add_argument("--student", help="stage-one student checkpoint (omit to start from random)")
    p = add("finetune-baseline", cmd_finetune_baseline, "finetune an encoder directly on recommendation")
    p.add_argument("--encoder", help="initial news encoder checkpoint (default: random)")
    p.add_argument("--layers", type=int, help="encoder depth when starting from random")
    add("eval", cmd_eval, "evaluate recommender checkpoints (one per seed)").add_argument(
        "--models", nargs="+", required=True)
    p = add("bench", cmd_bench, "news-encoding throughput across depths")
    p.add_argument("--layers", type=int, nargs="+", default=[1, 2, 4, 12])
    p.add_argument("--n-news", type=int, default=64)
    p.add_argument("--duration", type=float, default=0.5, help="seconds per timed window")
    p = add("recipe", cmd_recipe, "run a named experiment over several seeds")
    p.add_argument("name", help=f"one of: {', '.join(recipe_names())}")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--spec", help="synthetic spec file used when no MIND data is given")
    p.add_argument("--test-behaviors", help="held-out behaviors.tsv for evaluation")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (KeyError, ValueError, OSError, FloatingPointError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"tinyrec {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
