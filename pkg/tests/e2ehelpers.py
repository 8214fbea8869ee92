"""Shared scaffolding for the pipeline and CLI tests: a small three-movie
run driven entirely by scripted backends."""

import json
from pathlib import Path

from cinesynth.dataset import QAConfig
from cinesynth.story import ExpansionConfig
from cinesynth.store import strip_timestamps
from cinesynth.util import read_json, sha256_hex

from mockscripts import build_chat_script, chapter_title, qa_entries, write_script

PHRASES = (
    "a city that forgets overnight",
    "the last lighthouse keeper",
    "orchards on the moon",
)

SMALL_EXPANSION = dict(n_chapters=3, n_threads_per_chapter=2, n_frames_per_thread=2)
SMALL_QA = dict(overview=1, plot_what=2, plot_where=2, plot_why=2, temporal=2)

FRAMES_PER_MOVIE = 3 * 2 * 2
QA_PER_MOVIE = sum(SMALL_QA.values())


def exp_cfg() -> ExpansionConfig:
    return ExpansionConfig(**SMALL_EXPANSION)


def qa_cfg() -> QAConfig:
    return QAConfig(**SMALL_QA)


def full_script(path: Path, phrases=PHRASES, skip_qa_for=()) -> Path:
    """Chat script covering every story and qa stage of each movie."""
    cfg = exp_cfg()
    entries = build_chat_script(phrases, cfg)
    events = [chapter_title(ci) for ci in range(cfg.n_chapters)]
    budget = qa_cfg().budget()
    for phrase in phrases:
        if phrase in skip_qa_for:
            continue
        entries += qa_entries(phrase, budget, events)
    return write_script(path, entries)


CONFIG_TEMPLATE = """\
[run]
seed = {seed}
workspace = "{workspace}"

[chat]
kind = "mock"
script_path = "{script}"

[image]
kind = "mock"

[embedding]
kind = "mock"
embedding_dim = 32

[expansion]
n_chapters = 3
n_threads_per_chapter = 2
n_frames_per_thread = 2

[qa]
overview = 1
plot_what = 2
plot_where = 2
plot_why = 2
temporal = 2

[style]
n_reference_scenes = 2
image_size = 96

[keyframes]
width = 96
height = 96
max_parallel = 2
{extra}
"""


def write_config(directory: Path, seed=77, workspace="ws", script_name="script.json",
                 phrases=PHRASES, skip_qa_for=(), extra="") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    full_script(directory / script_name, phrases, skip_qa_for=skip_qa_for)
    path = directory / "pipeline.toml"
    path.write_text(
        CONFIG_TEMPLATE.format(
            seed=seed, workspace=workspace, script=script_name, extra=extra
        ),
        encoding="utf-8",
    )
    return path


def write_themes_file(path: Path, phrases=PHRASES) -> Path:
    path.write_text("".join(f"{p}\n" for p in phrases), encoding="utf-8")
    return path


def run_snapshot(workspace: Path, seed: int) -> dict:
    """Stable view of one run directory: hashes for artifacts, parsed and
    timestamp-stripped JSON for the bookkeeping files."""
    run_dir = Path(workspace) / "runs" / f"run-{seed}"
    assert run_dir.is_dir(), f"no run directory at {run_dir}"
    snap = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_dir():
            continue
        rel = str(path.relative_to(run_dir))
        if path.name in ("manifest.json", "styles.json"):
            snap[rel] = json.dumps(strip_timestamps(read_json(path)), sort_keys=True)
        else:
            snap[rel] = sha256_hex(path.read_bytes())
    return snap
