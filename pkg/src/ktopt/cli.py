"""Command-line pipeline over the toolkit.

Stages run in a fixed order: load data, split by student, derive
difficulty from the training half, correct the records as the variant
flags dictate, pretrain embeddings when requested, train the predictor,
evaluate against observed answers.  Artifacts land under ``--out-dir``
with stable names (dataset.json, optimized.json, corrections.csv,
embeddings.bin, model.bin, metrics.json, sweep.csv, ...), so scripted
runs can always find them.

Any stage failure exits nonzero naming the stage; a missing input file
exits with code 2.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (SWEEP_PARAMS, ConfigError, RunConfig, load_config,
                     set_value, stage_seed)
from .dpopt import CorrectionRecord, corrections_to_csv, optimize_student
from .ingest import (Dataset, EmptyDatasetError, load_dataset, parse_dataset,
                     save_dataset, split_train_test)
from .predict import Metrics, evaluate, load_model, save_model, train_predictor
from .pretrain import (EmbeddingSet, build_graphs, load_embeddings,
                       save_embeddings, train_embeddings)
from .stats import compute_difficulty
from .synth import generate

# the baseline plus every meaningful flag combination
# (per gates predicate clauses, so it never appears without ov or su)
ABLATION_VARIANTS: list[dict[str, bool]] = [
    {},
    {"ov": True},
    {"su": True},
    {"ov": True, "su": True},
    {"ov": True, "per": True},
    {"su": True, "per": True},
    {"ov": True, "su": True, "per": True},
    {"be": True},
    {"be": True, "ov": True},
    {"be": True, "su": True},
    {"be": True, "ov": True, "su": True},
    {"be": True, "ov": True, "per": True},
    {"be": True, "su": True, "per": True},
    {"be": True, "ov": True, "su": True, "per": True},
]


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, code: int = 1):
        super().__init__(message)
        self.stage = stage
        self.code = code


def _require_file(path: str | None, stage: str) -> str:
    if not path:
        raise StageError(stage, f"no input path given to stage '{stage}'", 2)
    if not os.path.exists(path):
        raise StageError(stage, f"stage '{stage}': input not found: {path}", 2)
    return path


def _load_data(path: str | None, stage: str = "ingest") -> Dataset:
    _require_file(path, stage)
    try:
        return load_dataset(path)
    except (ValueError, KeyError, OSError) as exc:
        raise StageError(stage, f"stage '{stage}': {exc}")


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2))
        fh.write("\n")


def _write_loss_csv(path: str, history: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history):
            w.writerow([i, repr(loss)])


def _clone_metadata(base: Dataset, students) -> Dataset:
    return Dataset(students=students, num_questions=base.num_questions,
                   num_skills=base.num_skills, question_key=base.question_key,
                   skill_key=base.skill_key, student_key=base.student_key,
                   dropped_rows=base.dropped_rows)


def _optimize_dataset(ds: Dataset, cfg: RunConfig,
                      limit_fraction: float | None = None,
                      ) -> tuple[Dataset, list[CorrectionRecord]]:
    params = cfg.dp_params()
    part = cfg.partition_params()
    students = []
    records: list[CorrectionRecord] = []
    for seq in ds.students:
        limit = None
        if limit_fraction is not None:
            limit = int(limit_fraction * len(seq))
        new_seq, recs = optimize_student(seq, params, part=part, ov=cfg.ov,
                                         su=cfg.su, mu=cfg.mu, limit=limit)
        students.append(new_seq)
        records.extend(recs)
    return _clone_metadata(ds, students), records


def _difficulty_attributes(table, num_questions: int):
    return [table.d(q) for q in range(num_questions)]


def _pretrain_embeddings(train: Dataset, cfg: RunConfig) -> tuple[EmbeddingSet, list[float]]:
    graphs = build_graphs(train)
    table = compute_difficulty(train)
    attrs = _difficulty_attributes(table, train.num_questions)
    return train_embeddings(graphs, np.asarray(attrs), cfg.pretrain_params(),
                            seed=stage_seed(cfg.seed, "pretrain"))


def run_pipeline(cfg: RunConfig, data_path: str, out_dir: str | None,
                 emb_cache: dict | None = None,
                 quantize_fraction: float | None = None,
                 ) -> tuple[Metrics, dict]:
    """Execute every enabled stage; returns metrics plus run details."""
    ds = _load_data(data_path)
    extra: dict = {"variant_name": cfg.variant_name}

    try:
        train, test = split_train_test(ds, cfg.test_fraction,
                                       stage_seed(cfg.seed, "split"))
    except (ValueError, EmptyDatasetError) as exc:
        raise StageError("split", f"stage 'split': {exc}")

    try:
        table = compute_difficulty(train)
        table.apply(test)
    except ValueError as exc:
        raise StageError("difficulty", f"stage 'difficulty': {exc}")

    optimizing = cfg.ov or cfg.su
    records: list[CorrectionRecord] = []
    if optimizing:
        try:
            train, train_recs = _optimize_dataset(train, cfg, quantize_fraction)
            test, test_recs = _optimize_dataset(test, cfg, quantize_fraction)
            records = train_recs + test_recs
        except ValueError as exc:
            raise StageError("optimize", f"stage 'optimize': {exc}")
    extra["corrections"] = len(records)

    emb = None
    emb_history: list[float] = []
    if cfg.be:
        cache_key = (cfg.seed, cfg.test_fraction, cfg.dim_vertex,
                     cfg.dim_final, cfg.lam, cfg.pretrain_lr,
                     cfg.pretrain_epochs, cfg.pretrain_batch,
                     cfg.negative_ratio, cfg.full_sum,
                     cfg.pretrain_init_scale)
        if emb_cache is not None and cache_key in emb_cache:
            emb, emb_history = emb_cache[cache_key]
        else:
            try:
                emb, emb_history = _pretrain_embeddings(train, cfg)
            except (ValueError, RuntimeError) as exc:
                raise StageError("pretrain", f"stage 'pretrain': {exc}")
            if emb_cache is not None:
                emb_cache[cache_key] = (emb, emb_history)

    try:
        model, losses = train_predictor(train, emb, cfg.fusion_params(),
                                        cfg.predictor_params())
    except (ValueError, RuntimeError) as exc:
        raise StageError("train", f"stage 'train': {exc}")

    try:
        metrics = evaluate(model, test)
    except (ValueError, RuntimeError) as exc:
        raise StageError("eval", f"stage 'eval': {exc}")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if optimizing:
            merged = _clone_metadata(
                ds, sorted(list(train.students) + list(test.students),
                           key=lambda s: s.student_id))
            save_dataset(merged, os.path.join(out_dir, "optimized.json"))
            corrections_to_csv(records, os.path.join(out_dir, "corrections.csv"))
        if emb is not None:
            save_embeddings(emb, os.path.join(out_dir, "embeddings.bin"))
            _write_loss_csv(os.path.join(out_dir, "pretrain_loss.csv"),
                            emb_history)
        save_model(model, os.path.join(out_dir, "model.bin"))
        _write_loss_csv(os.path.join(out_dir, "train_loss.csv"), losses)
        _write_json(os.path.join(out_dir, "metrics.json"),
                    metrics.to_json(cfg.variant_name))
    return metrics, extra


def _build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        _require_file(args.config, "config")
        cfg = load_config(args.config, base=cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        section, _, key = dotted.strip().partition(".")
        cfg = set_value(cfg, section, key.strip(), raw.strip())
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    for flag in ("ov", "su", "per", "be"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg = dataclasses.replace(cfg, **{flag: val})
    return cfg.validate()


def _out_dir(args) -> str:
    out = args.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_ingest(args) -> int:
    out = _out_dir(args)
    _require_file(args.input, "ingest")
    fmt = {"assist_csv": "csv", "csv": "csv", "jsonl": "jsonl"}[args.format]
    try:
        ds = parse_dataset(args.input, fmt=fmt)
    except (ValueError, OSError) as exc:
        raise StageError("ingest", f"stage 'ingest': {exc}")
    path = os.path.join(out, "dataset.json")
    save_dataset(ds, path)
    print(f"students={len(ds.students)} questions={ds.num_questions} "
          f"skills={ds.num_skills} records={ds.num_records} "
          f"dropped={ds.dropped_rows}")
    print(f"wrote {path}")
    return 0


def cmd_difficulty(args) -> int:
    out = _out_dir(args)
    ds = _load_data(args.data, "difficulty")
    table = compute_difficulty(ds)
    path = os.path.join(out, "difficulty.csv")
    table.to_csv(path)
    print(f"difficulty for {len(table.rows)} questions -> {path}")
    return 0


def cmd_optimize(args) -> int:
    out = _out_dir(args)
    cfg = _build_config(args)
    if not (cfg.ov or cfg.su):
        cfg = dataclasses.replace(cfg, ov=True)
    ds = _load_data(args.data, "optimize")
    try:
        compute_difficulty(ds)
        optimized, records = _optimize_dataset(ds, cfg)
    except ValueError as exc:
        raise StageError("optimize", f"stage 'optimize': {exc}")
    save_dataset(optimized, os.path.join(out, "optimized.json"))
    corrections_to_csv(records, os.path.join(out, "corrections.csv"))
    print(f"corrected {len(records)} responses across "
          f"{len({r.student_id for r in records})} students")
    return 0


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    cfg = _build_config(args)
    ds = _load_data(args.data, "pretrain")
    try:
        emb, history = _pretrain_embeddings(ds, cfg)
    except (ValueError, RuntimeError) as exc:
        raise StageError("pretrain", f"stage 'pretrain': {exc}")
    save_embeddings(emb, os.path.join(out, "embeddings.bin"))
    _write_loss_csv(os.path.join(out, "pretrain_loss.csv"), history)
    print(f"trained {emb.question.shape[0]}x{emb.dim_vertex} question and "
          f"{emb.skill.shape[0]}x{emb.dim_vertex} skill embeddings "
          f"(final epoch loss {history[-1]:.4f})")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _build_config(args)
    metrics, extra = run_pipeline(cfg, args.data, out)
    print(f"variant={extra['variant_name']} corrections={extra['corrections']} "
          f"auc={_fmt(metrics.auc)} acc={metrics.acc:.4f} "
          f"n={metrics.n_predictions}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    cfg = _build_config(args)
    model_path = _require_file(
        args.model or os.path.join(out, "model.bin"), "eval")
    emb = None
    emb_path = args.embeddings or os.path.join(out, "embeddings.bin")
    if os.path.exists(emb_path):
        emb = load_embeddings(emb_path)
    try:
        model = load_model(model_path, emb=emb)
    except ValueError as exc:
        raise StageError("eval", f"stage 'eval': {exc}")
    ds = _load_data(args.data, "eval")
    try:
        train, test = split_train_test(ds, cfg.test_fraction,
                                       stage_seed(cfg.seed, "split"))
        table = compute_difficulty(train)
        table.apply(test)
        if cfg.ov or cfg.su:
            test, _ = _optimize_dataset(test, cfg)
        metrics = evaluate(model, test)
    except (ValueError, RuntimeError) as exc:
        raise StageError("eval", f"stage 'eval': {exc}")
    _write_json(os.path.join(out, "metrics.json"),
                metrics.to_json(cfg.variant_name))
    print(f"variant={cfg.variant_name} auc={_fmt(metrics.auc)} "
          f"acc={metrics.acc:.4f} n={metrics.n_predictions}")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    base = _build_config(args)
    emb_cache: dict = {}
    rows = []
    for flags in ABLATION_VARIANTS:
        cfg = dataclasses.replace(
            base, ov=flags.get("ov", False), su=flags.get("su", False),
            per=flags.get("per", False), be=flags.get("be", False))
        sub = os.path.join(out, cfg.variant_name)
        metrics, _ = run_pipeline(cfg, args.data, sub, emb_cache=emb_cache)
        rows.append((cfg.variant_name, metrics.auc, metrics.acc,
                     metrics.n_predictions))
        print(f"{cfg.variant_name}: auc={_fmt(metrics.auc)} "
              f"acc={metrics.acc:.4f}")
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "auc", "acc", "n_predictions"])
        for name, auc, acc, n in rows:
            w.writerow([name, "" if auc is None else repr(auc), repr(acc), n])
    best = max((r for r in rows if r[1] is not None), key=lambda r: r[1],
               default=None)
    if best:
        print(f"best: {best[0]} (auc={best[1]:.4f}) -> {path}")
    return 0


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    base = _build_config(args)
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of "
                          f"{sorted(SWEEP_PARAMS)}, got {args.param!r}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs a non-empty value list")
    section, key = SWEEP_PARAMS[args.param]
    rows = []
    emb_cache: dict = {}
    for raw in values:
        cfg = set_value(base, section, key, raw)
        metrics, _ = run_pipeline(cfg, args.data, None, emb_cache=emb_cache)
        rows.append((float(raw), metrics.auc, metrics.acc))
        print(f"{args.param}={raw}: auc={_fmt(metrics.auc)} "
              f"acc={metrics.acc:.4f}")
    rows.sort(key=lambda r: r[0])
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([args.param, "auc", "acc"])
        for value, auc, acc in rows:
            w.writerow([repr(value), "" if auc is None else repr(auc),
                        repr(acc)])
    print(f"wrote {path}")
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = _build_config(args)
    ds, latent = generate(cfg.synth_config())
    data_path = os.path.join(out, "dataset.json")
    save_dataset(ds, data_path)
    _write_json(os.path.join(out, "latent.json"), latent)
    print(f"generated {len(ds.students)} students x {cfg.seq_len} "
          f"interactions -> {data_path}")
    return 0


def cmd_quantize(args) -> int:
    out = _out_dir(args)
    base = _build_config(args)
    if not (base.ov or base.su):
        base = dataclasses.replace(base, ov=True)
    fractions = sorted({float(v) for v in args.fractions.split(",") if v.strip()})
    if not fractions:
        raise ConfigError("quantize needs a non-empty fraction list")
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ConfigError(f"fractions must lie in [0, 1], got {f}")
    emb_cache: dict = {}
    rows = []
    for f in fractions:
        metrics, _ = run_pipeline(base, args.data, None, emb_cache=emb_cache,
                                  quantize_fraction=f)
        rows.append((f, metrics.auc, metrics.acc))
        print(f"prefix={f:.0%}: auc={_fmt(metrics.auc)} acc={metrics.acc:.4f}")
    path = os.path.join(out, "quantize.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "auc", "acc"])
        for f, auc, acc in rows:
            w.writerow([repr(f), "" if auc is None else repr(auc), repr(acc)])
    print(f"wrote {path}")
    return 0


def _fmt(auc: float | None) -> str:
    return "n/a" if auc is None else f"{auc:.4f}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ktopt",
        description="Correct interaction records by dynamic programming, "
                    "pretrain relation embeddings, and measure the effect "
                    "on response prediction.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="TOML-style config file")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out-dir", help="artifact directory (default .)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
        if data:
            p.add_argument("--data", help="dataset.json produced by "
                           "'ingest' or 'synth'")

    def flags(p):
        for name, desc in (("ov", "whole-sequence optimization"),
                           ("su", "partition-local optimization"),
                           ("per", "performance-continuity clauses"),
                           ("be", "pretrained embeddings")):
            p.add_argument(f"--{name}", dest=name, action="store_const",
                           const=True, default=None, help=f"enable {desc}")

    p = sub.add_parser("ingest", help="parse a raw log into dataset.json")
    common(p, data=False)
    p.add_argument("--input", required=True, help="raw log file")
    p.add_argument("--format", choices=["assist_csv", "csv", "jsonl"],
                   default="assist_csv")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("difficulty", help="write per-question difficulty")
    common(p)
    p.set_defaults(func=cmd_difficulty)

    p = sub.add_parser("optimize", help="correct responses, write optimized.json")
    common(p)
    flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("pretrain", help="train relation embeddings")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run the full pipeline and save the model")
    common(p)
    flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    common(p)
    flags(p)
    p.add_argument("--model", help="model checkpoint (default out-dir/model.bin)")
    p.add_argument("--embeddings", help="embedding file for Be checkpoints")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run every flag variant")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one parameter, write sweep.csv")
    common(p)
    flags(p)
    p.add_argument("--param", required=True,
                   help=f"one of {sorted(SWEEP_PARAMS)}")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("quantize", help="optimize only leading prefixes")
    common(p)
    flags(p)
    p.add_argument("--fractions", default="0,0.3,0.5,0.7",
                   help="comma-separated prefix fractions")
    p.set_defaults(func=cmd_quantize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # parameter invariants rejected the assembled configuration
        print(f"error: config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
