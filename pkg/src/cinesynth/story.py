"""Staged plot synthesis: theme -> overview -> style -> characters -> tree.

Each tree expansion receives a bounded context: the overview, the direct
parent chain summaries, and a capped recap of the immediately preceding
sibling subtree. Prompt size therefore stays flat no matter how long the
movie grows. Every stage demands one fenced json block, re-prompts with the
violation on bad output, and gives up with StageFailed after the configured
number of repairs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .backends import ChatRequest
from .errors import ConfigError, InvalidPlot, ParseFailed, StageFailed
from .parsing import parse_structured
from .plot import (
    DEFAULT_GENRES,
    Character,
    EpochChapter,
    FrameDescription,
    MoviePlot,
    MovieTheme,
    NarrativeThread,
    StyleSpec,
    extract_mentions,
    validate_plot,
)
from .util import atomic_write_text, make_movie_id

TEMPLATE_STAGES = ("overview", "style", "characters", "chapters", "threads", "frames")

REQUIRED_PLACEHOLDERS = {
    "overview": frozenset({"theme", "genre"}),
    "style": frozenset({"theme", "overview"}),
    "characters": frozenset({"theme", "overview", "min_count", "max_count"}),
    "chapters": frozenset({"theme", "overview", "count"}),
    "threads": frozenset(
        {"theme", "overview", "chapter_title", "chapter_summary", "previous_recap", "count"}
    ),
    "frames": frozenset(
        {
            "theme",
            "overview",
            "chapter_summary",
            "thread_summary",
            "previous_recap",
            "count",
            "characters",
        }
    ),
}

# {lowercase_identifier} only; JSON braces in template bodies never match
PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")

SYSTEM_PROMPT = (
    "You are a meticulous film production assistant. "
    "Always reply with a single fenced json block and nothing else."
)


@dataclass
class PromptTemplate:
    template_id: str
    text: str
    required: frozenset

    def __post_init__(self):
        found = set(PLACEHOLDER_RE.findall(self.text))
        unknown = found - self.required
        missing = self.required - found
        if unknown:
            raise ConfigError(
                f"template '{self.template_id}' uses unknown placeholders {sorted(unknown)}"
            )
        if missing:
            raise ConfigError(
                f"template '{self.template_id}' is missing placeholders {sorted(missing)}"
            )

    def render(self, bindings: dict) -> str:
        def sub(m):
            name = m.group(1)
            if name not in bindings:
                raise ConfigError(
                    f"template '{self.template_id}': placeholder '{name}' unbound"
                )
            return str(bindings[name])

        return PLACEHOLDER_RE.sub(sub, self.text)


def default_template_dir() -> Path:
    return Path(__file__).parent / "templates"


def load_templates(directory=None) -> dict:
    directory = Path(directory) if directory else default_template_dir()
    templates = {}
    for stage in TEMPLATE_STAGES:
        path = directory / f"{stage}.txt"
        if not path.exists():
            raise ConfigError(f"missing template file {path}")
        templates[stage] = PromptTemplate(
            template_id=stage,
            text=path.read_text(encoding="utf-8"),
            required=REQUIRED_PLACEHOLDERS[stage],
        )
    return templates


@dataclass
class ExpansionConfig:
    n_chapters: int = 5
    n_threads_per_chapter: int = 3
    n_frames_per_thread: int = 8
    max_repair_attempts: int = 2
    min_characters: int = 2
    max_characters: int = 6
    recap_max_chars: int = 600
    prompt_char_cap: int = 12000
    max_total_frames: int = 2000  # cost ceiling guard
    model_name: str = "gpt-4"
    temperature: float = 0.7
    max_tokens: int = 2048
    genres: tuple = DEFAULT_GENRES

    def validate(self) -> None:
        for label, v in (
            ("n_chapters", self.n_chapters),
            ("n_threads_per_chapter", self.n_threads_per_chapter),
            ("n_frames_per_thread", self.n_frames_per_thread),
        ):
            if v < 1:
                raise ConfigError(f"{label} must be >= 1")
        if self.max_repair_attempts < 0:
            raise ConfigError("max_repair_attempts must be >= 0")
        if not (1 <= self.min_characters <= self.max_characters):
            raise ConfigError("need 1 <= min_characters <= max_characters")
        total = self.n_chapters * self.n_threads_per_chapter * self.n_frames_per_thread
        if total > self.max_total_frames:
            raise ConfigError(
                f"{total} frames per movie exceeds ceiling {self.max_total_frames}"
            )
        if self.recap_max_chars < 16 or self.prompt_char_cap < 256:
            raise ConfigError("recap_max_chars/prompt_char_cap too small")

    def frames_per_movie(self) -> int:
        return self.n_chapters * self.n_threads_per_chapter * self.n_frames_per_thread


class _RepairNeeded(Exception):
    """Internal: stage output rejected; message becomes the repair prompt."""


def _truncate(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    return text[: cap - 3] + "..."


class StoryExpander:
    """Drives all chat stages for one or more movies."""

    def __init__(self, chat, config: ExpansionConfig | None = None, templates=None,
                 store=None, seed: int | None = None):
        self.chat = chat
        self.config = config or ExpansionConfig()
        self.config.validate()
        self.templates = templates or load_templates()
        self.store = store
        self.seed = seed

    # -- shared prompting loop ------------------------------------------

    def _request(self, messages) -> ChatRequest:
        return ChatRequest(
            model_name=self.config.model_name,
            messages=messages,
            temperature=self.config.temperature,
            seed=self.seed,
            max_tokens=self.config.max_tokens,
        )

    def _transcript(self, movie_id, stage, attempt, prompt, completion) -> None:
        if self.store is None or movie_id is None:
            return
        path = self.store.transcript_path(movie_id, stage, attempt)
        atomic_write_text(
            path, f"== prompt ==\n{prompt}\n\n== completion ==\n{completion}\n"
        )

    def _run_stage(self, stage: str, movie_id, prompt: str, check):
        if len(prompt) > self.config.prompt_char_cap:
            raise StageFailed(
                stage,
                f"rendered prompt is {len(prompt)} chars, cap {self.config.prompt_char_cap}",
            )
        messages = [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]
        last_reason = "no attempts made"
        for attempt in range(self.config.max_repair_attempts + 1):
            raw = self.chat.chat(self._request(messages))
            self._transcript(movie_id, stage, attempt, messages[-1]["content"], raw)
            try:
                return check(raw)
            except _RepairNeeded as r:
                last_reason = str(r)
                repair = (
                    f"Your previous reply was rejected: {last_reason}.\n"
                    "Reply again with only the required fenced json block.\n\n"
                    f"{prompt}"
                )
                messages = messages + [
                    {"role": "assistant", "content": raw},
                    {"role": "user", "content": repair},
                ]
        raise StageFailed(stage, last_reason)

    @staticmethod
    def _parse_object(raw: str) -> dict:
        try:
            payload = parse_structured(raw)
        except ParseFailed as e:
            raise _RepairNeeded(f"reply was not parseable: {e}")
        if not isinstance(payload, dict):
            raise _RepairNeeded("reply must be a json object")
        return payload

    @staticmethod
    def _str_field(obj: dict, key: str) -> str:
        v = obj.get(key)
        if not isinstance(v, str) or not v.strip():
            raise _RepairNeeded(f"the json must contain a non-empty '{key}' string")
        return v.strip()

    def _list_field(self, obj: dict, key: str) -> list:
        v = obj.get(key)
        if not isinstance(v, list):
            raise _RepairNeeded(f"the json must contain a '{key}' list")
        return v

    # -- stages -----------------------------------------------------------

    def generate_overview(self, theme: MovieTheme, movie_id=None) -> str:
        prompt = self.templates["overview"].render(
            {"theme": theme.phrase, "genre": theme.genre_tag}
        )

        def check(raw):
            return self._str_field(self._parse_object(raw), "overview")

        return self._run_stage("overview", movie_id, prompt, check)

    def generate_style(self, theme: MovieTheme, overview: str, movie_id=None) -> StyleSpec:
        prompt = self.templates["style"].render(
            {"theme": theme.phrase, "overview": overview}
        )

        def check(raw):
            obj = self._parse_object(raw)
            return StyleSpec(
                style_name=self._str_field(obj, "style_name"),
                description=self._str_field(obj, "description"),
                token=None,
            )

        return self._run_stage("style", movie_id, prompt, check)

    def generate_characters(self, theme: MovieTheme, overview: str, movie_id=None) -> list:
        cfg = self.config
        prompt = self.templates["characters"].render(
            {
                "theme": theme.phrase,
                "overview": overview,
                "min_count": cfg.min_characters,
                "max_count": cfg.max_characters,
            }
        )

        def check(raw):
            obj = self._parse_object(raw)
            rows = self._list_field(obj, "characters")
            if not (cfg.min_characters <= len(rows) <= cfg.max_characters):
                raise _RepairNeeded(
                    f"expected between {cfg.min_characters} and {cfg.max_characters} "
                    f"characters, got {len(rows)}"
                )
            characters = []
            seen = set()
            for row in rows:
                if not isinstance(row, dict):
                    raise _RepairNeeded("each character must be a json object")
                name = self._str_field(row, "name")
                celebrity = self._str_field(row, "celebrity_name")
                if name in seen:
                    raise _RepairNeeded(f"duplicate character name '{name}'")
                seen.add(name)
                if name == celebrity:
                    raise _RepairNeeded(f"character '{name}' must not be cast as themself")
                characters.append(
                    Character(
                        name=name,
                        description=str(row.get("description", "")).strip(),
                        celebrity_name=celebrity,
                    )
                )
            return characters

        return self._run_stage("characters", movie_id, prompt, check)

    def expand_chapters(self, theme: MovieTheme, overview: str, movie_id=None) -> list:
        cfg = self.config
        prompt = self.templates["chapters"].render(
            {"theme": theme.phrase, "overview": overview, "count": cfg.n_chapters}
        )

        def check(raw):
            obj = self._parse_object(raw)
            rows = self._list_field(obj, "chapters")
            if len(rows) != cfg.n_chapters:
                raise _RepairNeeded(
                    f"expected exactly {cfg.n_chapters} chapters, got {len(rows)}"
                )
            chapters = []
            for i, row in enumerate(rows):
                if not isinstance(row, dict):
                    raise _RepairNeeded("each chapter must be a json object")
                chapters.append(
                    EpochChapter(
                        index=i,
                        title=self._str_field(row, "title"),
                        summary=self._str_field(row, "summary"),
                        threads=[],
                    )
                )
            return chapters

        return self._run_stage("chapters", movie_id, prompt, check)

    def _recap_for_threads(self, chapters: list, ci: int) -> str:
        if ci == 0:
            return "None."
        prev = chapters[ci - 1]
        bits = f"Chapter '{prev.title}' covered: {prev.summary}"
        if prev.threads:
            bits += f" Its last thread: {prev.threads[-1].summary}"
        return _truncate(bits, self.config.recap_max_chars)

    def _recap_for_frames(self, chapters: list, ci: int, ti: int) -> str:
        if ti > 0:
            prev = chapters[ci].threads[ti - 1]
        elif ci > 0:
            prev = chapters[ci - 1].threads[-1]
        else:
            return "None."
        bits = f"The previous thread was: {prev.summary}"
        if prev.frames:
            bits += f" It closed on: {prev.frames[-1].text}"
        return _truncate(bits, self.config.recap_max_chars)

    def expand_threads(self, theme: MovieTheme, overview: str, chapters: list,
                       ci: int, movie_id=None) -> list:
        cfg = self.config
        chapter = chapters[ci]
        prompt = self.templates["threads"].render(
            {
                "theme": theme.phrase,
                "overview": overview,
                "chapter_title": chapter.title,
                "chapter_summary": chapter.summary,
                "previous_recap": self._recap_for_threads(chapters, ci),
                "count": cfg.n_threads_per_chapter,
            }
        )

        def check(raw):
            obj = self._parse_object(raw)
            rows = self._list_field(obj, "threads")
            if len(rows) != cfg.n_threads_per_chapter:
                raise _RepairNeeded(
                    f"expected exactly {cfg.n_threads_per_chapter} threads, got {len(rows)}"
                )
            threads = []
            for i, row in enumerate(rows):
                if not isinstance(row, dict):
                    raise _RepairNeeded("each thread must be a json object")
                threads.append(
                    NarrativeThread(index=i, summary=self._str_field(row, "summary"), frames=[])
                )
            return threads

        return self._run_stage(f"threads-{ci}", movie_id, prompt, check)

    def expand_frames(self, theme: MovieTheme, overview: str, characters: list,
                      chapters: list, ci: int, ti: int, start_index: int,
                      movie_id=None) -> list:
        cfg = self.config
        chapter = chapters[ci]
        thread = chapter.threads[ti]
        known = [c.name for c in characters]
        prompt = self.templates["frames"].render(
            {
                "theme": theme.phrase,
                "overview": overview,
                "chapter_summary": chapter.summary,
                "thread_summary": thread.summary,
                "previous_recap": self._recap_for_frames(chapters, ci, ti),
                "count": cfg.n_frames_per_thread,
                "characters": ", ".join(known),
            }
        )

        def check(raw):
            obj = self._parse_object(raw)
            rows = self._list_field(obj, "frames")
            if len(rows) != cfg.n_frames_per_thread:
                raise _RepairNeeded(
                    f"expected exactly {cfg.n_frames_per_thread} frames, got {len(rows)}"
                )
            frames = []
            for i, row in enumerate(rows):
                if not isinstance(row, dict):
                    raise _RepairNeeded("each frame must be a json object")
                text = self._str_field(row, "text")
                declared = row.get("characters", [])
                if not isinstance(declared, list):
                    raise _RepairNeeded("frame 'characters' must be a list of names")
                unknown = [n for n in declared if n not in known]
                if unknown:
                    raise _RepairNeeded(
                        f"unknown character name(s): {', '.join(map(str, unknown))}; "
                        f"allowed names: {', '.join(known)}"
                    )
                frames.append(
                    FrameDescription(
                        global_index=start_index + i,
                        text=text,
                        mentioned_characters=extract_mentions(text, known),
                    )
                )
            return frames

        return self._run_stage(f"frames-{ci}-{ti}", movie_id, prompt, check)

    # -- orchestration ----------------------------------------------------

    def _cached(self, movie_id, name, produce, encode, decode):
        if self.store is not None and movie_id is not None:
            saved = self.store.load_checkpoint(movie_id, name)
            if saved is not None:
                return decode(saved)
        value = produce()
        if self.store is not None and movie_id is not None:
            self.store.save_checkpoint(movie_id, name, encode(value))
        return value

    def build_plot(self, theme: MovieTheme, movie_id: str | None = None) -> MoviePlot:
        """All stages in order, checkpointed; resume skips finished stages."""
        cfg = self.config
        if movie_id is None:
            movie_id = make_movie_id(theme.phrase, self.seed or 0)

        overview = self._cached(
            movie_id,
            "overview",
            lambda: self.generate_overview(theme, movie_id),
            lambda v: {"text": v},
            lambda d: d["text"],
        )
        style = self._cached(
            movie_id,
            "style",
            lambda: self.generate_style(theme, overview, movie_id),
            lambda v: v.to_dict(),
            StyleSpec.from_dict,
        )
        characters = self._cached(
            movie_id,
            "characters",
            lambda: self.generate_characters(theme, overview, movie_id),
            lambda v: [c.to_dict() for c in v],
            lambda d: [Character.from_dict(c) for c in d],
        )
        chapters = self._cached(
            movie_id,
            "chapters",
            lambda: self.expand_chapters(theme, overview, movie_id),
            lambda v: [{"title": c.title, "summary": c.summary} for c in v],
            lambda d: [
                EpochChapter(index=i, title=r["title"], summary=r["summary"], threads=[])
                for i, r in enumerate(d)
            ],
        )
        for ci in range(cfg.n_chapters):
            chapters[ci].threads = self._cached(
                movie_id,
                f"threads-{ci}",
                lambda ci=ci: self.expand_threads(theme, overview, chapters, ci, movie_id),
                lambda v: [{"summary": t.summary} for t in v],
                lambda d: [
                    NarrativeThread(index=i, summary=r["summary"], frames=[])
                    for i, r in enumerate(d)
                ],
            )
        start = 0
        for ci in range(cfg.n_chapters):
            for ti in range(cfg.n_threads_per_chapter):
                frames = self._cached(
                    movie_id,
                    f"frames-{ci}-{ti}",
                    lambda ci=ci, ti=ti, start=start: self.expand_frames(
                        theme, overview, characters, chapters, ci, ti, start, movie_id
                    ),
                    lambda v: [f.to_dict() for f in v],
                    lambda d: [FrameDescription.from_dict(f) for f in d],
                )
                chapters[ci].threads[ti].frames = frames
                start += len(frames)

        plot = MoviePlot(
            movie_id=movie_id,
            theme=theme,
            overview=overview,
            style=style,
            characters=characters,
            chapters=chapters,
        )
        violations = validate_plot(plot, genres=cfg.genres)
        if violations:
            raise InvalidPlot(violations)
        return plot
