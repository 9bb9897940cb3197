"""Command-line workflow: corpus -> train -> run -> report.

    complab corpus            write a synthetic corpus and prompt file
    complab train             train the teacher and the base student
    complab run KD-P-Q        execute one ordering (or: complab run all)
    complab report            tabulate every finished run

Progress goes to stderr; only `report` writes to stdout, so tables can
be redirected cleanly. Common flags: --config, --seed (master seed
override), --out-dir, --judge-stub, --json-errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

from . import textgen
from .checkpoint import deserialize, model_hash, serialize
from .config import AppConfig, load_config
from .corpus import ByteTokenizer, load_corpus_dir, prepare_data
from .errors import CompressionLabError
from .evaluate import evaluate, load_prompts
from .judge import JudgeConfig
from .model import init_model
from .pipeline import (ALL_SEQUENCES, PipelineSpec, RunManifest, execute,
                       stage_seed, write_run)
from .train import train_lm

# seed fan-out slots for the pre-pipeline phase; pipeline stages use 0..n
TEACHER_INIT_SLOT = 101
STUDENT_INIT_SLOT = 102
TEACHER_TRAIN_SLOT = 111
STUDENT_TRAIN_SLOT = 112

REPORT_ORDER = ["base", "KD", "P", "Q",
                "KD-P-Q", "KD-Q-P", "P-KD-Q", "P-Q-KD", "Q-KD-P", "Q-P-KD"]

REPORT_COLUMNS = ["Model", "G-Eval", "Prompt Alignment", "Clarity",
                  "Size (MB)", "Perplexity", "Compression Ratio"]

ABSENT = "—"  # em dash marks judge columns with no judge configured


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _settings(args) -> AppConfig:
    """Config with command-line overrides folded in."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.pipeline.master_seed = args.seed
    if args.out_dir is not None:
        cfg.pipeline.out_dir = args.out_dir
    if args.judge_stub:
        cfg.judge.stub = True
    return cfg


def _judge_config(cfg: AppConfig) -> JudgeConfig:
    env = JudgeConfig.from_env()
    return JudgeConfig(
        endpoint=env.endpoint,
        api_key=env.api_key,
        stub=cfg.judge.stub or env.stub,
        timeout=cfg.judge.timeout,
        max_retries=cfg.judge.max_retries,
        backoff_seconds=cfg.judge.backoff_seconds,
    )


def _fractions(cfg: AppConfig):
    c = cfg.corpus
    return (c.train_fraction, c.calibration_fraction,
            c.finetune_fraction, c.heldout_fraction)


def _load_data(cfg: AppConfig, tokenizer: ByteTokenizer):
    docs = load_corpus_dir(cfg.corpus.dir)
    return prepare_data(docs, tokenizer, cfg.corpus.max_seq_len,
                        cfg.corpus.batch_size, _fractions(cfg),
                        cfg.corpus.seed)


def cmd_corpus(args) -> int:
    cfg = _settings(args)
    out_dir = Path(cfg.corpus.dir)
    paths = textgen.generate_corpus(out_dir, n_docs=args.docs, seed=args.corpus_seed)
    textgen.write_prompts(cfg.eval.prompts)
    total = sum(p.stat().st_size for p in paths)
    _log(f"wrote {len(paths)} documents ({total / 1e6:.2f} MB) to {out_dir}")
    _log(f"wrote prompts to {cfg.eval.prompts}")
    return 0


def _loss_span(report) -> str:
    first = report.details["first_loss"]
    final = report.details["final_loss"]
    if first is None:
        return "no training steps"
    return f"loss {first:.3f} -> {final:.3f}"


def cmd_train(args) -> int:
    cfg = _settings(args)
    master = cfg.pipeline.master_seed
    out = Path(cfg.pipeline.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer = ByteTokenizer()
    data = _load_data(cfg, tokenizer)
    _log(f"data: {len(data.train)} train / {len(data.calibration)} cal / "
         f"{len(data.finetune)} finetune / {len(data.heldout)} heldout batches")

    def progress(msg):
        _log("  " + msg)

    teacher = init_model(cfg.teacher_config(),
                         seed=stage_seed(master, TEACHER_INIT_SLOT))
    _log(f"training teacher ({teacher.parameter_count():,} params, "
         f"{cfg.teacher.steps} steps)")
    t_rep = train_lm(teacher, data.train, cfg.teacher.steps,
                     cfg.teacher.learning_rate,
                     seed=stage_seed(master, TEACHER_TRAIN_SLOT),
                     log_every=cfg.teacher.log_every, log=progress)
    serialize(teacher, out / "teacher.ckpt")
    _log(f"teacher: {_loss_span(t_rep)}, saved {out / 'teacher.ckpt'}")

    base = init_model(cfg.student_config(),
                      seed=stage_seed(master, STUDENT_INIT_SLOT))
    _log(f"training base student ({base.parameter_count():,} params, "
         f"{cfg.student.steps} steps)")
    b_rep = train_lm(base, data.train, cfg.student.steps,
                     cfg.student.learning_rate,
                     seed=stage_seed(master, STUDENT_TRAIN_SLOT),
                     log_every=cfg.student.log_every, log=progress)

    prompts = load_prompts(cfg.eval.prompts)
    t_eval = time.perf_counter()
    report = evaluate(base, data, prompts, tokenizer, reference_model=teacher,
                      judge_config=_judge_config(cfg), cfg=cfg.eval_config())
    eval_seconds = time.perf_counter() - t_eval
    manifest = RunManifest(
        sequence="base",
        stages=[],
        master_seed=master,
        stage_seeds=[],
        base_model_hash=model_hash(base),
        final_model_hash=model_hash(base),
        configs={"train": {"steps": cfg.student.steps,
                           "learning_rate": cfg.student.learning_rate}},
        stage_reports=[b_rep.to_dict()],
        eval=report.to_dict(),
    )
    timings = {
        "stages": [{"stage": b_rep.stage, "seconds": b_rep.duration_seconds}],
        "eval_seconds": eval_seconds,
        "total_seconds": b_rep.duration_seconds + eval_seconds,
    }
    write_run(out, "base", base, manifest, timings)
    _log(f"base: {_loss_span(b_rep)}, perplexity {report.perplexity:.2f}, "
         f"saved {out / 'base.ckpt'}")
    return 0


def cmd_run(args) -> int:
    cfg = _settings(args)
    names = list(ALL_SEQUENCES) if args.sequence == "all" else [args.sequence]
    out = Path(cfg.pipeline.out_dir)
    teacher_path = out / "teacher.ckpt"
    base_path = out / "base.ckpt"
    for p in (teacher_path, base_path):
        if not p.exists():
            raise CompressionLabError(
                f"{p} missing; run `complab train` first")
    teacher = deserialize(teacher_path)
    base = deserialize(base_path)
    tokenizer = ByteTokenizer()
    data = _load_data(cfg, tokenizer)
    prompts = load_prompts(cfg.eval.prompts)
    judge_cfg = _judge_config(cfg)

    for name in names:
        spec = PipelineSpec.from_name(name, kd=cfg.distill_config(),
                                      prune=cfg.prune_config(),
                                      quant_block_size=cfg.quant.block_size)
        _log(f"running {name}: stages {'-'.join(spec.stages)}")
        model, manifest, timings = execute(
            spec, base, teacher, data, prompts, tokenizer,
            master_seed=cfg.pipeline.master_seed, judge_config=judge_cfg,
            eval_cfg=cfg.eval_config())
        paths = write_run(out, name, model, manifest, timings)
        rep = manifest.eval_report
        _log(f"  {name}: perplexity {rep.perplexity:.2f}, "
             f"clarity {rep.clarity:.3f}, "
             f"size {rep.size_bytes / 1e6:.2f} MB "
             f"({timings['total_seconds']:.1f}s) -> {paths['manifest']}")
    return 0


def _fmt(value, digits: int = 3) -> str:
    if value is None:
        return ABSENT
    return f"{value:.{digits}f}"


def _report_rows(out_dir: Path) -> list[dict]:
    rows = []
    found = {p.name[:-len(".manifest.json")]: p
             for p in out_dir.glob("*.manifest.json")}
    ordered = [n for n in REPORT_ORDER if n in found]
    ordered += sorted(n for n in found if n not in REPORT_ORDER)
    for name in ordered:
        manifest = RunManifest.from_json(
            found[name].read_text(encoding="utf-8"))
        e = manifest.eval_report
        rows.append({
            "Model": name,
            "G-Eval": e.g_eval,
            "Prompt Alignment": e.prompt_alignment,
            "Clarity": e.clarity,
            "Size (MB)": e.size_bytes / 1e6,
            "Perplexity": e.perplexity,
            "Compression Ratio": e.compression_ratio,
        })
    return rows


def _render_markdown(rows: list[dict]) -> str:
    header = "| " + " | ".join(REPORT_COLUMNS) + " |"
    rule = "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|"
    lines = [header, rule]
    for r in rows:
        cells = [
            r["Model"],
            _fmt(r["G-Eval"]),
            _fmt(r["Prompt Alignment"]),
            _fmt(r["Clarity"]),
            _fmt(r["Size (MB)"], 2),
            _fmt(r["Perplexity"], 2),
            _fmt(r["Compression Ratio"], 2),
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def cmd_report(args) -> int:
    cfg = _settings(args)
    out_dir = Path(cfg.pipeline.out_dir)
    rows = _report_rows(out_dir)
    if not rows:
        raise CompressionLabError(f"no run manifests found in {out_dir}")
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    elif args.format == "csv":
        text = _render_csv(rows)
    else:
        text = _render_markdown(rows)
    if args.report_out == "auto":
        target = out_dir / f"report.{args.format}"
    else:
        target = Path(args.report_out) if args.report_out else None
    if target is not None:
        target.write_text(text, encoding="utf-8")
        _log(f"wrote report to {target}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML config path")
    common.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    common.add_argument("--out-dir", default=None,
                        help="override the artifact directory")
    common.add_argument("--judge-stub", action="store_true",
                        help="score with the offline stub judge")
    common.add_argument("--json-errors", action="store_true",
                        help="emit errors to stderr as JSON")

    parser = argparse.ArgumentParser(
        prog="complab",
        description="Compression-ordering laboratory for toy language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_corpus = sub.add_parser("corpus", parents=[common],
                              help="generate a synthetic corpus")
    p_corpus.add_argument("--docs", type=int, default=150,
                          help="number of documents (default 150)")
    p_corpus.add_argument("--corpus-seed", type=int, default=7,
                          help="corpus generator seed (default 7)")
    p_corpus.set_defaults(func=cmd_corpus)

    p_train = sub.add_parser("train", parents=[common],
                             help="train teacher and base student models")
    p_train.set_defaults(func=cmd_train)

    p_run = sub.add_parser("run", parents=[common],
                           help="execute a compression sequence")
    p_run.add_argument("sequence",
                       help="ordering such as KD-P-Q, a single technique, "
                            "or 'all' for every ordering")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", parents=[common],
                              help="tabulate finished runs")
    p_report.add_argument("--format", choices=("md", "csv", "json"),
                          default="md")
    p_report.add_argument("--out", dest="report_out", nargs="?", const="auto",
                          default=None,
                          help="write report.<format> into the artifact "
                               "directory, or to the given path")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CompressionLabError, FileNotFoundError) as exc:
        if getattr(args, "json_errors", False):
            payload = {"error": str(exc), "type": type(exc).__name__}
            _log(json.dumps(payload, sort_keys=True))
        else:
            _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
