"""End-to-end orchestration: theme phrases in, packaged dataset out.

Stages run in a fixed order (plot, style, frames, qa, package) and every
stage is resumable: completed work is recorded in the run manifest and
skipped on the next invocation, so a rerun after success performs zero
backend calls and a rerun after a crash converges on the same bytes.

Failures are collected per movie rather than aborting the whole run; a
movie that fails one stage is skipped by the later ones and reported in
the failure manifest so the caller can rerun just the stragglers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backends import (
    ChatRequest,
    make_chat_backend,
    make_embedding_backend,
    make_image_backend,
)
from .config import PipelineConfig
from .dataset import compute_stats, generate_qa, package_movie
from .errors import CinesynthError, ConfigError, NotFound, ParseFailed, StageFailed
from .keyframes import KeyFrameRecord, generate_keyframes
from .parsing import parse_structured
from .plot import DEFAULT_GENRES, MoviePlot, MovieTheme
from .store import RunStore
from .story import StoryExpander, load_templates
from .style import (
    CommandStyleTrainer,
    MockStyleTrainer,
    StylePipeline,
    StyleRegistry,
    run_style_stage,
)
from .util import atomic_write_json, make_movie_id, read_json, sha256_hex

GENERATE_STAGES = ("plot", "style", "frames", "qa", "package")


@dataclass
class StageReport:
    """What one stage invocation did across the run's movies."""

    stage: str
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def fail(self, movie_id: str, error: str) -> None:
        self.failures.append({"movie_id": movie_id, "stage": self.stage, "error": error})


@dataclass
class RunReport:
    """Aggregate over one CLI invocation, possibly several stages."""

    run_id: str
    stages: list[StageReport] = field(default_factory=list)

    @property
    def failures(self) -> list[dict]:
        return [f for s in self.stages for f in s.failures]

    @property
    def ok(self) -> bool:
        return not self.failures


def load_themes(path, genres=DEFAULT_GENRES) -> list[MovieTheme]:
    """Theme list from a text file.

    Each non-empty, non-comment line is either a JSON object with
    ``phrase``/``genre_tag`` keys or a bare phrase; bare phrases get a
    genre assigned by hashing the phrase into the configured genre list,
    so the same file always yields the same themes.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"themes file not found: {path}")
    themes: list[MovieTheme] = []
    seen = set()
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            try:
                row = parse_structured(line)
            except ParseFailed as exc:
                raise ParseFailed(f"themes file line {i}: {exc}") from exc
            if not isinstance(row, dict) or "phrase" not in row:
                raise ParseFailed(f"themes file line {i} has no 'phrase' key")
            phrase = str(row["phrase"]).strip()
            genre = str(row.get("genre_tag") or row.get("genre") or "").strip()
        else:
            phrase, genre = line, ""
        if not phrase:
            raise ParseFailed(f"themes file line {i} has an empty phrase")
        if not genre:
            genre = genres[int(sha256_hex(phrase.encode("utf-8")), 16) % len(genres)]
        if phrase in seen:
            raise ParseFailed(f"themes file line {i} repeats phrase {phrase!r}")
        seen.add(phrase)
        themes.append(MovieTheme(phrase=phrase, genre_tag=genre))
    if not themes:
        raise ConfigError(f"themes file {path} contains no themes")
    return themes


def write_themes(path, themes) -> None:
    lines = [MovieTheme.to_dict(t) for t in themes]
    text = "\n".join(json.dumps(row, sort_keys=True) for row in lines) + "\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


THEMES_PROMPT = (
    'Propose exactly {count} distinct one-sentence movie theme phrases, varied '
    'in subject matter. Respond as json: {{"themes": [{{"phrase": "...", '
    '"genre": "..."}}]}} with each genre drawn from: {genres}.'
)


def propose_themes(chat, count: int, seed: int, genres=DEFAULT_GENRES,
                   model_name: str = "gpt-4", max_repair_attempts: int = 2):
    """Ask the chat backend for theme phrases; repair malformed replies."""
    if count < 1:
        raise ConfigError("theme count must be >= 1")
    prompt = THEMES_PROMPT.format(count=count, genres=", ".join(genres))
    messages = [{"role": "user", "content": prompt}]
    for attempt in range(max_repair_attempts + 1):
        raw = chat.chat(
            ChatRequest(
                model_name=model_name,
                messages=messages,
                temperature=0.9,
                seed=seed,
                max_tokens=2048,
            )
        )
        problem = ""
        try:
            payload = parse_structured(raw)
        except ParseFailed as exc:
            problem = f"reply was not valid json: {exc}"
            payload = None
        themes: list[MovieTheme] = []
        if problem == "" and payload is not None:
            rows = payload.get("themes") if isinstance(payload, dict) else None
            if not isinstance(rows, list):
                problem = 'reply must be {"themes": [...]}'
            else:
                seen = set()
                for row in rows:
                    phrase = str(row.get("phrase", "")).strip() if isinstance(row, dict) else ""
                    genre = str(row.get("genre", "")).strip() if isinstance(row, dict) else ""
                    if not phrase:
                        problem = "every theme needs a non-empty phrase"
                        break
                    if genre not in genres:
                        problem = f"genre {genre!r} is not in the allowed list"
                        break
                    if phrase in seen:
                        problem = f"phrase {phrase!r} appears twice"
                        break
                    seen.add(phrase)
                    themes.append(MovieTheme(phrase=phrase, genre_tag=genre))
                if problem == "" and len(themes) != count:
                    problem = f"expected {count} themes, got {len(themes)}"
        if problem == "":
            return themes
        messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user", "content": f"Rejected: {problem}. Send the corrected json only."},
        ]
    raise StageFailed("themes", f"no valid theme list after {max_repair_attempts + 1} attempts")


class Pipeline:
    """Builds backends once and drives any subset of the stages.

    ``after_stage(stage, movie_id)`` fires after each (movie, stage) commit
    and after the final dataset seal with movie_id None; tests use it to
    simulate crashes at exact stage boundaries.
    """

    def __init__(self, config: PipelineConfig, after_stage=None):
        self.config = config
        self.after_stage = after_stage or (lambda stage, movie_id: None)
        self.templates = load_templates(config.template_dir)
        self.chat = make_chat_backend(config.chat)
        self.image = make_image_backend(config.image)
        self.embedding = make_embedding_backend(config.embedding)
        if config.style.trainer == "command":
            self.trainer = CommandStyleTrainer(
                config.style.trainer_command, timeout=config.style.trainer_timeout
            )
        else:
            self.trainer = MockStyleTrainer()

    # -- plumbing --------------------------------------------------------

    def open_store(self) -> RunStore:
        return RunStore.create(
            self.config.workspace, self.config.seed, self.config.config_hash
        )

    def _movie_ids(self, store: RunStore) -> list[str]:
        # sorted, not insertion order: the manifest round-trips through
        # sorted-key json, so this is the only order a resumed run can
        # reproduce exactly
        return sorted(store.manifest["movies"])

    def _plot_path(self, store: RunStore, movie_id: str) -> Path:
        return store.movie_dir(movie_id) / "plot.json"

    def _load_plot(self, store: RunStore, movie_id: str) -> MoviePlot:
        path = self._plot_path(store, movie_id)
        if not path.exists():
            raise NotFound(f"movie {movie_id} has no plot document at {path}")
        return MoviePlot.from_dict(read_json(path))

    def _instructions_path(self, store: RunStore) -> Path:
        return store.run_dir / "dataset" / "instructions.jsonl"

    # -- stages ------------------------------------------------------------

    def stage_plot(self, store: RunStore, themes) -> StageReport:
        report = StageReport("plot")
        expander = StoryExpander(
            self.chat,
            self.config.expansion,
            self.templates,
            store=store,
            seed=self.config.seed,
        )
        for theme in themes:
            movie_id = make_movie_id(theme.phrase, self.config.seed)
            if store.stage_done(movie_id, "plot"):
                report.skipped.append(movie_id)
                continue
            try:
                plot = expander.build_plot(theme, movie_id)
                atomic_write_json(self._plot_path(store, movie_id), plot.to_dict())
                store.mark_stage(movie_id, "plot", {"n_frames": plot.total_frames()})
            except CinesynthError as exc:
                report.fail(movie_id, str(exc))
                continue
            report.completed.append(movie_id)
            self.after_stage("plot", movie_id)
        return report

    def stage_style(self, store: RunStore) -> StageReport:
        report = StageReport("style")
        registry = StyleRegistry(store.run_dir / "styles.json")
        pipeline = StylePipeline(
            self.image,
            store,
            self.trainer,
            n_reference_scenes=self.config.style.n_reference_scenes,
            image_size=self.config.style.image_size,
        )
        for movie_id in self._movie_ids(store):
            if not store.stage_done(movie_id, "plot"):
                continue
            if store.stage_done(movie_id, "style"):
                report.skipped.append(movie_id)
                continue
            try:
                plot = self._load_plot(store, movie_id)
                token = run_style_stage(plot, pipeline, registry, seed=self.config.seed)
                atomic_write_json(self._plot_path(store, movie_id), plot.to_dict())
                store.mark_stage(movie_id, "style", {"trigger": token.trigger})
            except CinesynthError as exc:
                report.fail(movie_id, str(exc))
                continue
            report.completed.append(movie_id)
            self.after_stage("style", movie_id)
        return report

    def stage_frames(self, store: RunStore) -> StageReport:
        report = StageReport("frames")
        for movie_id in self._movie_ids(store):
            if not store.stage_done(movie_id, "style"):
                continue
            if store.stage_done(movie_id, "frames"):
                report.skipped.append(movie_id)
                continue
            try:
                plot = self._load_plot(store, movie_id)
                result = generate_keyframes(
                    plot,
                    self.image,
                    store,
                    run_seed=self.config.seed,
                    width=self.config.keyframes.width,
                    height=self.config.keyframes.height,
                    max_parallel=self.config.keyframes.max_parallel,
                )
            except CinesynthError as exc:
                report.fail(movie_id, str(exc))
                continue
            if result.failures:
                worst = result.failures[0]
                report.fail(
                    movie_id,
                    f"{len(result.failures)} frames failed, first: "
                    f"index {worst['global_index']}: {worst['error']}",
                )
                continue
            store.mark_stage(movie_id, "frames", {"n_frames": len(result.records)})
            report.completed.append(movie_id)
            self.after_stage("frames", movie_id)
        return report

    def stage_qa(self, store: RunStore) -> StageReport:
        report = StageReport("qa")
        for movie_id in self._movie_ids(store):
            if not store.stage_done(movie_id, "frames"):
                continue
            if store.stage_done(movie_id, "qa"):
                report.skipped.append(movie_id)
                continue
            try:
                plot = self._load_plot(store, movie_id)
                pairs = generate_qa(
                    plot,
                    self.chat,
                    self.config.qa,
                    seed=self.config.seed,
                    store=store,
                )
                store.mark_stage(movie_id, "qa", {"n_pairs": len(pairs)})
            except CinesynthError as exc:
                report.fail(movie_id, str(exc))
                continue
            report.completed.append(movie_id)
            self.after_stage("qa", movie_id)
        return report

    def _load_keyframes(self, store: RunStore, movie_id: str) -> list[KeyFrameRecord]:
        path = store.movie_dir(movie_id) / "frames.json"
        if not path.exists():
            raise NotFound(f"movie {movie_id} has no frame manifest at {path}")
        return [KeyFrameRecord.from_dict(row) for row in read_json(path)]

    def stage_package(self, store: RunStore, allow_gaps: bool = False) -> StageReport:
        report = StageReport("package")
        for movie_id in self._movie_ids(store):
            if not store.stage_done(movie_id, "qa"):
                continue
            if store.stage_done(movie_id, "package"):
                report.skipped.append(movie_id)
                continue
            try:
                plot = self._load_plot(store, movie_id)
                keyframes = self._load_keyframes(store, movie_id)
                pairs = generate_qa(
                    plot,
                    self.chat,
                    self.config.qa,
                    seed=self.config.seed,
                    store=store,
                )
                package, _ = package_movie(
                    store, plot, keyframes, pairs, allow_gaps=allow_gaps
                )
                store.mark_stage(
                    movie_id, "package", {"manifest_hash": package.manifest_hash}
                )
            except CinesynthError as exc:
                report.fail(movie_id, str(exc))
                continue
            report.completed.append(movie_id)
            self.after_stage("package", movie_id)
        self._maybe_seal_dataset(store, report)
        return report

    def _maybe_seal_dataset(self, store: RunStore, report: StageReport) -> None:
        movies = self._movie_ids(store)
        if not movies or store.dataset_done():
            return
        if not all(store.stage_done(m, "package") for m in movies):
            return
        plots = {m: self._load_plot(store, m) for m in movies}
        stats = compute_stats(
            self._instructions_path(store),
            genre_of=lambda mid: plots[mid].theme.genre_tag if mid in plots else "",
        )
        atomic_write_json(store.run_dir / "dataset" / "stats.json", stats.to_dict())
        store.mark_dataset({"stats": stats.to_dict()})
        self.after_stage("dataset", None)

    # -- full run ------------------------------------------------------------

    def generate(self, themes, allow_gaps: bool = False,
                 store: RunStore | None = None) -> RunReport:
        store = store if store is not None else self.open_store()
        run = RunReport(store.run_id)
        run.stages.append(self.stage_plot(store, themes))
        run.stages.append(self.stage_style(store))
        run.stages.append(self.stage_frames(store))
        run.stages.append(self.stage_qa(store))
        run.stages.append(self.stage_package(store, allow_gaps=allow_gaps))
        return run


def write_failure_manifest(store: RunStore, failures: list) -> Path:
    path = store.run_dir / "failures.json"
    if failures:
        atomic_write_json(path, failures)
    elif path.exists():
        path.unlink()
    return path
