"""Command-line entry point.

Subcommands wire the corpus, teachers, students, and evaluation into
reproducible runs. Exit codes: 0 success, 2 configuration or input error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .corpus import (
    PROPAGANDA,
    RELATIONS,
    ROLES,
    build_article,
    load_propaganda_corpus,
    load_relation_corpus,
    load_role_corpus,
)
from .errors import (
    ConfigError,
    MissingTeacherCacheError,
    NumericalError,
    PropdistillError,
    ValidationError,
)
from .evaluation import ratio_analysis
from .student import (
    TrainConfig,
    _TeacherSource,
    evaluate_student,
    load_student,
    predict,
    save_student,
    train_student,
)
from .teachers import (
    cache_teacher_outputs,
    load_teacher,
    load_teacher_outputs,
    save_teacher,
    train_relation_teacher,
    train_role_teacher,
)

RELATION_CKPT = "relation.ckpt"
ROLE_CKPT = "role.ckpt"


def _load_articles(cfg) -> list:
    articles_dir = cfgmod.require_path(cfg, "articles_dir")
    manifest = cfgmod.require_path(cfg, "split_manifest")
    spans = cfgmod.optional_path(cfg, "spans_file")
    labels = cfgmod.optional_path(cfg, "sentence_labels_file")
    return load_propaganda_corpus(articles_dir, spans, manifest, labels)


def _write(path: Path, payload: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(payload, encoding="utf-8")


def cmd_train_teacher(args, cfg) -> int:
    kind = args.kind
    teacher_config = cfgmod.teacher_train_config_from(cfg)
    teacher_dir = cfgmod.require_path(cfg, "teacher_dir")
    if kind == "relation":
        pairs = load_relation_corpus(cfgmod.require_path(cfg, "relation_corpus"))
        dev_path = cfgmod.optional_path(cfg, "relation_dev_corpus")
        dev = load_relation_corpus(dev_path) if dev_path else None
        teacher = train_relation_teacher(pairs, teacher_config, dev_pairs=dev)
        out = Path(args.out) if args.out else teacher_dir / RELATION_CKPT
    else:
        docs = load_role_corpus(cfgmod.require_path(cfg, "role_corpus"))
        dev_path = cfgmod.optional_path(cfg, "role_dev_corpus")
        dev = load_role_corpus(dev_path) if dev_path else None
        teacher = train_role_teacher(docs, teacher_config, dev_docs=dev)
        out = Path(args.out) if args.out else teacher_dir / ROLE_CKPT
    save_teacher(teacher, out)
    history = getattr(teacher, "history", [])
    _write(out.with_suffix(".metrics.json"), json.dumps(history, indent=2))
    best = max((h["dev_macro_f1"] for h in history), default=0.0)
    print(f"saved {kind} teacher to {out} (best dev macro-F1 {best:.4f})")
    return 0


def cmd_cache_teacher(args, cfg) -> int:
    if args.articles is not None:
        cfg["paths"]["articles_dir"] = str(args.articles)
    if args.out is not None:
        cfg["paths"]["cache_dir"] = str(args.out)
    teacher_dir = cfgmod.require_path(cfg, "teacher_dir")
    rel_path = teacher_dir / RELATION_CKPT
    role_path = teacher_dir / ROLE_CKPT
    for path in (rel_path, role_path):
        if not path.exists():
            raise ConfigError(f"missing teacher checkpoint {path}; run `propdistill train-teacher`")
    rel = load_teacher(rel_path)
    role = load_teacher(role_path)
    articles = _load_articles(cfg)
    cache_dir = cfgmod.require_path(cfg, "cache_dir")
    manifest = cache_teacher_outputs(articles, rel, role, cache_dir)
    print(
        f"cache at {cache_dir}: {len(manifest['records'])} records, "
        f"{len(manifest['recomputed'])} recomputed"
    )
    return 0


def _run_id(train_config: TrainConfig, cfg) -> str:
    return (
        f"{train_config.mode}-{train_config.level}-seed{train_config.seed}-{cfgmod.config_hash(cfg)}"
    )


def cmd_train_student(args, cfg) -> int:
    train_config = cfgmod.train_config_from(cfg)
    encoder_config = cfgmod.encoder_config_from(cfg)
    articles = _load_articles(cfg)
    cache_dir = cfgmod.optional_path(cfg, "cache_dir")
    teacher_cache = cache_dir if train_config.mode in ("concat", "distill") else None
    if teacher_cache is not None and not Path(teacher_cache).exists():
        raise MissingTeacherCacheError(
            f"cache directory {teacher_cache} not found; run `propdistill cache-teacher`"
        )

    result = train_student(articles, teacher_cache, train_config, encoder_config)

    run_dir = cfgmod.require_path(cfg, "output_dir") / _run_id(train_config, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_student(result, run_dir / "model.ckpt")
    _write(run_dir / "config.snapshot", cfgmod.config_snapshot(cfg))
    _write(
        run_dir / "metrics.jsonl",
        "".join(json.dumps(entry) + "\n" for entry in result.history),
    )
    teachers = (
        _TeacherSource(teacher_cache, train_config.ablate_relations)
        if train_config.mode in ("concat", "distill")
        else None
    )
    for split in ("dev", "test"):
        subset = [a for a in articles if a.split == split]
        if not subset:
            continue
        report = evaluate_student(subset, result.model, train_config, teachers)
        _write(run_dir / f"report_{split}.json", json.dumps(report.as_dict(), indent=2))
        _write(run_dir / f"report_{split}.tsv", report.to_tsv())
        print(f"{split}: P={report.precision:.4f} R={report.recall:.4f} F1={report.f1:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    checkpoint = load_student(args.checkpoint)
    articles = [a for a in _load_articles(cfg) if a.split == args.split]
    if not articles:
        raise ValidationError(f"no articles in split {args.split!r}")
    teachers = None
    if checkpoint.config.mode == "concat":
        teachers = _TeacherSource(
            cfgmod.require_path(cfg, "cache_dir"), checkpoint.config.ablate_relations
        )
    report = evaluate_student(articles, checkpoint.model, checkpoint.config, teachers)
    out_dir = cfgmod.require_path(cfg, "output_dir")
    stem = f"eval-{args.split}-{Path(args.checkpoint).stem}"
    _write(out_dir / f"{stem}.json", json.dumps(report.as_dict(), indent=2))
    _write(out_dir / f"{stem}.tsv", report.to_tsv())
    print(report.to_tsv().rstrip())
    return 0


def cmd_analyze(args, cfg) -> int:
    articles = [a for a in _load_articles(cfg) if a.split == args.split]
    if not articles:
        raise ValidationError(f"no articles in split {args.split!r}")
    cache_dir = cfgmod.require_path(cfg, "cache_dir")
    out_dir = cfgmod.require_path(cfg, "output_dir")

    relation_gold, relation_cls = [], []
    role_gold, role_cls = [], []
    for article in articles:
        outputs = load_teacher_outputs(cache_dir, article.article_id)
        by_row = {idx: row for row, idx in enumerate(outputs.sentence_indices)}
        for sentence in article.sentences:
            row = by_row.get(sentence.index)
            if row is None or sentence.gold_label is None:
                continue
            role_gold.append(sentence.gold_label)
            role_cls.append(ROLES[int(np.argmax(outputs.p_global[row]))])
            if row > 0:  # the first sentence has no preceding-sentence relation
                relation_gold.append(sentence.gold_label)
                relation_cls.append(RELATIONS[int(np.argmax(outputs.p_local[row]))])

    for axis, gold, cls in (("relation", relation_gold, relation_cls), ("role", role_gold, role_cls)):
        table = ratio_analysis(gold, cls, axis)
        print(f"\n{axis} analysis ({args.split} split)")
        print(table.format_text())
        _write(out_dir / f"analysis_{axis}_{args.split}.tsv", table.to_tsv())
        _write(out_dir / f"analysis_{axis}_{args.split}.json", table.to_json())
    return 0


def cmd_predict(args, cfg) -> int:
    article_path = Path(args.article)
    if not article_path.exists():
        raise ConfigError(f"article file not found: {article_path}")
    checkpoint = load_student(args.checkpoint)
    article = build_article(article_path.stem, article_path.read_text(encoding="utf-8"))
    teacher_outputs = None
    cache_dir = cfgmod.optional_path(cfg, "cache_dir")
    if cache_dir is not None:
        try:
            teacher_outputs = load_teacher_outputs(cache_dir, article.article_id)
        except MissingTeacherCacheError:
            if checkpoint.config.mode == "concat":
                raise
            teacher_outputs = None  # labels without explanations
    explained = predict(article, checkpoint, teacher_outputs)
    for entry in explained.explanations:
        print(json.dumps(entry))
    n_propaganda = sum(1 for e in explained.explanations if e["label"] == PROPAGANDA)
    print(f"# {n_propaganda}/{len(explained.explanations)} sentences labeled propaganda", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-teacher", help="train a frozen teacher model")
    p.add_argument("kind", choices=["relation", "role"])
    p.add_argument("--out", type=Path, default=None)
    common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("cache-teacher", help="cache teacher outputs for all articles")
    common(p)
    p.add_argument("--articles", type=Path, default=None, help="override paths.articles_dir")
    p.add_argument("--out", type=Path, default=None, help="override paths.cache_dir")
    p.set_defaults(func=cmd_cache_teacher)

    p = sub.add_parser("train-student", help="train a student model")
    common(p)
    p.add_argument("--mode", choices=["baseline", "concat", "distill"], default=None)
    p.add_argument("--level", choices=["sentence", "token"], default=None)
    p.add_argument(
        "--ablate-loss",
        action="append",
        default=[],
        choices=["propaganda", "response_local", "response_global", "relation_local", "relation_global"],
        help="set the named loss weight to 0",
    )
    p.add_argument("--ablate-relation", action="append", default=[], choices=list(RELATIONS))
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="gold label vs teacher class ratio tables")
    common(p)
    p.add_argument("--split", choices=["train", "dev", "test"], default="dev")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("predict", help="label one article with explanations")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--article", type=Path, required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def _apply_cli_overrides(args, cfg) -> None:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "mode", None):
        cfg["train"]["mode"] = args.mode
    if getattr(args, "level", None):
        cfg["train"]["level"] = args.level
    for name in getattr(args, "ablate_loss", []):
        cfg["loss"]["weights"][name] = 0.0
    ablated = list(cfg["train"]["ablate_relations"]) + list(getattr(args, "ablate_relation", []))
    if ablated:
        cfg["train"]["ablate_relations"] = ablated


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_run_config(args.config, args.overrides)
        _apply_cli_overrides(args, cfg)
        return args.func(args, cfg)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.last_report is not None:
            print(f"last finite losses: {exc.last_report.as_dict()}", file=sys.stderr)
        return 3
    except (PropdistillError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
