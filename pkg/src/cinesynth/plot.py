"""Plot tree and package data model shared by all pipeline stages.

The plot is a three-level tree: epoch chapters hold narrative threads, threads
hold frame descriptions. All types here are pure values; mutation happens only
while a stage constructs them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import InvalidPlot

# Default closed genre set (15 labels). Override via the `genres` argument or
# the [genres] config section.
DEFAULT_GENRES = (
    "action",
    "adventure",
    "animation",
    "comedy",
    "crime",
    "documentary",
    "drama",
    "fantasy",
    "history",
    "horror",
    "musical",
    "mystery",
    "romance",
    "sci-fi",
    "thriller",
)

QA_CATEGORIES = ("overview", "plot_what", "plot_where", "plot_why", "temporal")

TRIGGER_RE = re.compile(r"^<[a-z0-9-]+>$")


@dataclass
class MovieTheme:
    phrase: str
    genre_tag: str

    def to_dict(self) -> dict:
        return {"phrase": self.phrase, "genre_tag": self.genre_tag}

    @classmethod
    def from_dict(cls, d: dict) -> "MovieTheme":
        return cls(phrase=d["phrase"], genre_tag=d["genre_tag"])


@dataclass
class Character:
    name: str
    description: str
    celebrity_name: str

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "celebrity_name": self.celebrity_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Character":
        return cls(
            name=d["name"],
            description=d.get("description", ""),
            celebrity_name=d.get("celebrity_name", ""),
        )


@dataclass
class StyleToken:
    trigger: str
    embedding_artifact: str
    source_style: str

    def to_dict(self) -> dict:
        return {
            "trigger": self.trigger,
            "embedding_artifact": self.embedding_artifact,
            "source_style": self.source_style,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleToken":
        return cls(
            trigger=d["trigger"],
            embedding_artifact=d["embedding_artifact"],
            source_style=d["source_style"],
        )


@dataclass
class StyleSpec:
    style_name: str
    description: str
    token: StyleToken | None = None
    reference_image_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "style_name": self.style_name,
            "description": self.description,
            "token": self.token.to_dict() if self.token else None,
            "reference_image_ids": list(self.reference_image_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleSpec":
        token = d.get("token")
        return cls(
            style_name=d["style_name"],
            description=d.get("description", ""),
            token=StyleToken.from_dict(token) if token else None,
            reference_image_ids=list(d.get("reference_image_ids", [])),
        )


@dataclass
class FrameDescription:
    global_index: int
    text: str
    mentioned_characters: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "global_index": self.global_index,
            "text": self.text,
            "mentioned_characters": list(self.mentioned_characters),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameDescription":
        return cls(
            global_index=d["global_index"],
            text=d["text"],
            mentioned_characters=list(d.get("mentioned_characters", [])),
        )


@dataclass
class NarrativeThread:
    index: int
    summary: str
    frames: list[FrameDescription] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "summary": self.summary,
            "frames": [f.to_dict() for f in self.frames],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NarrativeThread":
        return cls(
            index=d["index"],
            summary=d["summary"],
            frames=[FrameDescription.from_dict(f) for f in d.get("frames", [])],
        )


@dataclass
class EpochChapter:
    index: int
    title: str
    summary: str
    threads: list[NarrativeThread] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "title": self.title,
            "summary": self.summary,
            "threads": [t.to_dict() for t in self.threads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpochChapter":
        return cls(
            index=d["index"],
            title=d["title"],
            summary=d["summary"],
            threads=[NarrativeThread.from_dict(t) for t in d.get("threads", [])],
        )


@dataclass
class MoviePlot:
    movie_id: str
    theme: MovieTheme
    overview: str
    style: StyleSpec
    characters: list[Character] = field(default_factory=list)
    chapters: list[EpochChapter] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "movie_id": self.movie_id,
            "theme": self.theme.to_dict(),
            "overview": self.overview,
            "style": self.style.to_dict(),
            "characters": [c.to_dict() for c in self.characters],
            "chapters": [c.to_dict() for c in self.chapters],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoviePlot":
        return cls(
            movie_id=d["movie_id"],
            theme=MovieTheme.from_dict(d["theme"]),
            overview=d["overview"],
            style=StyleSpec.from_dict(d["style"]),
            characters=[Character.from_dict(c) for c in d.get("characters", [])],
            chapters=[EpochChapter.from_dict(c) for c in d.get("chapters", [])],
        )

    def character_names(self) -> list[str]:
        return [c.name for c in self.characters]

    def total_frames(self) -> int:
        return sum(len(t.frames) for ch in self.chapters for t in ch.threads)


@dataclass
class QAPair:
    question: str
    answer: str
    category: str

    def to_dict(self) -> dict:
        return {"question": self.question, "answer": self.answer, "category": self.category}

    @classmethod
    def from_dict(cls, d: dict) -> "QAPair":
        return cls(question=d["question"], answer=d["answer"], category=d["category"])


@dataclass
class Violation:
    code: str
    message: str

    def __repr__(self) -> str:
        return f"Violation({self.code}: {self.message})"


def validate_plot(plot: MoviePlot, genres=DEFAULT_GENRES) -> list[Violation]:
    """Check every structural invariant; returns violations (empty = valid).

    Pure: never raises and never mutates. Violations are data, not errors.
    """
    out: list[Violation] = []

    def bad(code: str, message: str) -> None:
        out.append(Violation(code, message))

    if not plot.theme.phrase.strip():
        bad("empty-theme", "theme phrase is empty")
    if plot.theme.genre_tag not in genres:
        bad("unknown-genre", f"genre tag '{plot.theme.genre_tag}' not in configured genre list")
    if not plot.overview.strip():
        bad("empty-overview", "overview is empty")
    if not plot.characters:
        bad("no-characters", "plot has no characters")
    if not plot.chapters:
        bad("no-chapters", "plot has no chapters")

    seen_names = set()
    for ch in plot.characters:
        if not ch.name.strip():
            bad("empty-character-name", "character with empty name")
            continue
        if ch.name in seen_names:
            bad("duplicate-character", f"duplicate character name '{ch.name}'")
        seen_names.add(ch.name)
        if not ch.celebrity_name.strip():
            bad("casting-incomplete", f"character '{ch.name}' has no celebrity cast")
        elif ch.name == ch.celebrity_name:
            bad("self-cast", f"character '{ch.name}' is cast as themself")

    if not plot.style.style_name.strip():
        bad("empty-style-name", "style name is empty")
    if plot.style.token is not None and not TRIGGER_RE.match(plot.style.token.trigger):
        bad("bad-trigger", f"style trigger '{plot.style.token.trigger}' is malformed")

    known = {c.name for c in plot.characters}
    expected_global = 0
    for ci, chapter in enumerate(plot.chapters):
        if chapter.index != ci:
            bad("chapter-index", f"chapter at position {ci} has index {chapter.index}")
        for ti, thread in enumerate(chapter.threads):
            if thread.index != ti:
                bad(
                    "thread-index",
                    f"chapter {ci} thread at position {ti} has index {thread.index}",
                )
            for frame in thread.frames:
                if frame.global_index != expected_global:
                    bad(
                        "frame-index",
                        "non-contiguous frame indices: expected "
                        f"{expected_global}, got {frame.global_index}",
                    )
                expected_global += 1
                if not frame.text.strip():
                    bad("empty-frame", f"frame {frame.global_index} has empty text")
                for name in frame.mentioned_characters:
                    if name not in known:
                        bad(
                            "unknown-character",
                            f"frame {frame.global_index} has unknown character reference '{name}'",
                        )
    return out


def flatten_frames(plot: MoviePlot, genres=DEFAULT_GENRES) -> list[FrameDescription]:
    """Depth-first (chapter, thread, frame) leaf order.

    Raises InvalidPlot carrying the validation report when the plot is bad.
    """
    violations = validate_plot(plot, genres=genres)
    if violations:
        raise InvalidPlot(violations)
    return [
        frame
        for chapter in plot.chapters
        for thread in chapter.threads
        for frame in thread.frames
    ]


def extract_mentions(text: str, character_names: list[str]) -> list[str]:
    """Characters mentioned in a frame text.

    Exact whole-word case-insensitive match against the plot's character list;
    the generator controls both sides, so fuzzy matching is not wanted.
    Returned in the order of `character_names`.
    """
    found = []
    for name in character_names:
        if re.search(rf"\b{re.escape(name)}\b", text, flags=re.IGNORECASE):
            found.append(name)
    return found
