"""Command line front end.

Exit codes: 0 when everything asked for completed, 2 when some movies
failed a stage (a failure manifest is written next to the run manifest),
1 on configuration or usage problems.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .backends import make_chat_backend, make_embedding_backend
from .config import load_backend_table, load_config
from .dataset import compute_stats
from .errors import CinesynthError, ConfigError
from .judge import JudgeConfig, build_eval_items, run_benchmark
from .metrics import evaluate_frames, load_svr_model
from .pipeline import Pipeline, load_themes, propose_themes, write_failure_manifest, write_themes
from .util import atomic_write_json, atomic_write_text, read_json

PROG = "cinesynth"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting itself."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name: str, help_text: str, config: bool = True, seed: bool = True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="pipeline config TOML")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the run seed from the config")
        return p

    p = add("themes", "propose theme phrases or normalize a phrase file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--count", type=int, help="ask the chat backend for N themes")
    group.add_argument("--from-file", help="read phrases from this file instead")
    p.add_argument("--out", required=True, help="write the theme list here")

    p = add("plot", "expand themes into full plots")
    p.add_argument("--themes", required=True, help="theme list file")

    add("style", "reference scenes and style token per movie")
    add("frames", "render every key frame")
    add("qa", "generate the question-answer pairs")

    p = add("package", "seal movies into the instruction dataset")
    p.add_argument("--allow-gaps", action="store_true",
                   help="package even when some frames are missing")

    p = add("generate", "run every stage in order")
    p.add_argument("--themes", required=True, help="theme list file")
    p.add_argument("--allow-gaps", action="store_true",
                   help="package even when some frames are missing")

    p = add("stats", "summarize an instruction dataset file", config=False, seed=False)
    p.add_argument("--dataset", required=True, help="instructions.jsonl path")
    p.add_argument("--run-dir", default=None,
                   help="run directory, for the per-genre breakdown")

    p = add("metrics", "score rendered frames", config=False, seed=False)
    p.add_argument("--frames", required=True, help="directory of PNG frames")
    p.add_argument("--captions", required=True,
                   help="JSON caption list or {filename: caption} object")
    p.add_argument("--embed-backend", required=True,
                   help="TOML file with an [embedding] backend table")
    p.add_argument("--svr-model", required=True, help="quality model file")
    p.add_argument("--out", required=True, help="write the metric report here")
    p.add_argument("--movie-id", default=None, help="label for the report")

    p = add("eval", "pairwise judged comparison of two prediction files",
            config=False)
    p.add_argument("--benchmark", required=True, help="ground truth JSONL")
    p.add_argument("--pred-a", required=True, help="system A predictions JSONL")
    p.add_argument("--pred-b", required=True, help="system B predictions JSONL")
    p.add_argument("--judge-backend", required=True,
                   help="TOML file with a [judge] or [chat] backend table")
    p.add_argument("--out", default="eval_report.json", help="report path")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _configure(args) -> "PipelineConfig":
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _print_stage(report) -> None:
    print(
        f"{report.stage}: {len(report.completed)} done, "
        f"{len(report.skipped)} already done, {len(report.failures)} failed"
    )


def _finish(store, reports) -> int:
    failures = [f for r in reports for f in r.failures]
    for report in reports:
        _print_stage(report)
    path = write_failure_manifest(store, failures)
    if failures:
        for f in failures:
            print(
                f"failed: movie {f['movie_id']} stage {f['stage']}: {f['error']}",
                file=sys.stderr,
            )
        print(f"failure manifest: {path}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# subcommands


def cmd_themes(args) -> int:
    config = _configure(args)
    if args.from_file:
        themes = load_themes(args.from_file, genres=config.expansion.genres)
    else:
        pipeline = Pipeline(config)
        themes = propose_themes(
            pipeline.chat,
            args.count,
            seed=config.seed,
            genres=config.expansion.genres,
            model_name=config.expansion.model_name,
            max_repair_attempts=config.expansion.max_repair_attempts,
        )
    write_themes(args.out, themes)
    print(f"wrote {len(themes)} themes to {args.out}")
    return 0


def cmd_plot(args) -> int:
    config = _configure(args)
    pipeline = Pipeline(config)
    themes = load_themes(args.themes, genres=config.expansion.genres)
    store = pipeline.open_store()
    return _finish(store, [pipeline.stage_plot(store, themes)])


def _single_stage(args, method_name: str, **kwargs) -> int:
    config = _configure(args)
    pipeline = Pipeline(config)
    store = pipeline.open_store()
    report = getattr(pipeline, method_name)(store, **kwargs)
    return _finish(store, [report])


def cmd_style(args) -> int:
    return _single_stage(args, "stage_style")


def cmd_frames(args) -> int:
    return _single_stage(args, "stage_frames")


def cmd_qa(args) -> int:
    return _single_stage(args, "stage_qa")


def cmd_package(args) -> int:
    return _single_stage(args, "stage_package", allow_gaps=args.allow_gaps)


def cmd_generate(args) -> int:
    config = _configure(args)
    pipeline = Pipeline(config)
    themes = load_themes(args.themes, genres=config.expansion.genres)
    store = pipeline.open_store()
    run = pipeline.generate(themes, allow_gaps=args.allow_gaps, store=store)
    code = _finish(store, run.stages)
    if code == 0 and store.dataset_done():
        print(f"dataset sealed: {pipeline._instructions_path(store)}")
    return code


def _fmt(value, digits) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def cmd_stats(args) -> int:
    dataset = Path(args.dataset)
    genre_of = None
    if args.run_dir:
        genres = {}
        for plot_path in sorted(Path(args.run_dir).glob("*/plot.json")):
            row = read_json(plot_path)
            genres[row["movie_id"]] = row["theme"]["genre_tag"]
        genre_of = lambda mid: genres.get(mid, "")
    stats = compute_stats(dataset, genre_of=genre_of)
    print(f"{'videos':<14}{stats.n_videos:>10}")
    print(f"{'qa pairs':<14}{stats.n_qa:>10}")
    print(f"{'qa per video':<14}{_fmt(stats.qa_per_video, 1):>10}")
    print(f"{'qa per image':<14}{_fmt(stats.qa_per_image, 4):>10}")
    print(f"{'genres':<14}{stats.n_genres:>10}")
    for genre in sorted(stats.per_genre):
        print(f"  {genre:<12}{stats.per_genre[genre]:>10}")
    return 0


def _load_captions(path: Path, frame_paths) -> list:
    raw = read_json(path)
    if isinstance(raw, list):
        return [str(c) for c in raw]
    if isinstance(raw, dict):
        missing = [p.name for p in frame_paths if p.name not in raw]
        if missing:
            raise ConfigError(f"captions file is missing entries for: {missing[:5]}")
        return [str(raw[p.name]) for p in frame_paths]
    raise ConfigError("captions file must be a JSON list or object")


def cmd_metrics(args) -> int:
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise ConfigError(f"frames directory not found: {frames_dir}")
    frame_paths = sorted(frames_dir.glob("*.png"))
    captions = _load_captions(Path(args.captions), frame_paths)
    backend_cfg = load_backend_table(args.embed_backend, "embedding")
    embedder = make_embedding_backend(backend_cfg)
    svr = load_svr_model(args.svr_model)
    report = evaluate_frames(
        args.movie_id or frames_dir.name, frame_paths, captions, embedder, svr
    )
    atomic_write_json(Path(args.out), report.to_dict())
    print(f"frames         {len(frame_paths)}")
    print(f"consistency    {_fmt(report.consistency, 6)}")
    print(f"alignment      {_fmt(report.alignment, 6)}")
    print(f"quality mean   {report.brisque_mean:.3f}")
    print(f"report: {args.out}")
    return 0


def cmd_eval(args) -> int:
    try:
        judge_cfg = load_backend_table(args.judge_backend, "judge")
    except ConfigError:
        judge_cfg = load_backend_table(args.judge_backend, "chat")
    chat = make_chat_backend(judge_cfg)
    items, unmatched = build_eval_items(args.benchmark, args.pred_a, args.pred_b)
    if unmatched:
        print(f"skipping {len(unmatched)} items missing from some file", file=sys.stderr)
    result, verdicts, failures = run_benchmark(
        items, chat, seed=args.seed or 0, config=JudgeConfig()
    )
    out = Path(args.out)
    aspects = result.to_dict()["aspects"]
    payload = {
        "aspects": aspects,
        "n_items": len(items),
        "unmatched": unmatched,
        "failures": failures,
        "seed": args.seed or 0,
    }
    atomic_write_json(out, payload)
    log = out.with_name(out.stem + "_verdicts.jsonl")
    atomic_write_text(
        log,
        "".join(
            json.dumps(v.to_dict(), sort_keys=True) + "\n" for v in verdicts
        ),
    )
    for aspect, row in sorted(aspects.items()):
        ratio = row["compare_ratio_a"]
        shown = "n/a" if ratio is None else f"{ratio:.4f}"
        print(f"{aspect:<10} ratio_a {shown}  valid {row['n_valid']}  invalid {row['n_invalid']}")
    print(f"report: {out}")
    return 0


COMMANDS = {
    "themes": cmd_themes,
    "plot": cmd_plot,
    "style": cmd_style,
    "frames": cmd_frames,
    "qa": cmd_qa,
    "package": cmd_package,
    "generate": cmd_generate,
    "stats": cmd_stats,
    "metrics": cmd_metrics,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CinesynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; completed work is checkpointed", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
