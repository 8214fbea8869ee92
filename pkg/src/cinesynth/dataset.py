"""QA pair generation, movie packaging, and dataset statistics.

Each QA category is one batched chat request (plus bounded top-up repairs).
Temporal items are special: the model only phrases the question over a
shuffled event group; the true order, and therefore the answer, comes from
the plot itself.

The instruction file is line-per-record JSONL. Packaging a movie replaces
that movie's lines and appends fresh ones, so a resumed run converges to
the same file an uninterrupted run writes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .backends import ChatRequest
from .errors import (
    PackagingRefused,
    ParseFailed,
    StageFailed,
)
from .parsing import parse_structured
from .plot import QA_CATEGORIES, MoviePlot, QAPair
from .store import RunStore
from .util import atomic_write_text, content_hash, jsonl_line, read_jsonl

QA_SYSTEM_PROMPT = (
    "You are writing question-answer training data about one movie. "
    "Always reply with a single fenced json block and nothing else."
)

# prose labels used in prompts and repair messages, per category
CATEGORY_LABELS = {
    "overview": "overall story",
    "plot_what": "what happens",
    "plot_where": "where does it happen",
    "plot_why": "why does it happen",
}


@dataclass
class QAConfig:
    # per-category targets; defaults aim near 125 pairs per movie
    overview: int = 5
    plot_what: int = 40
    plot_where: int = 40
    plot_why: int = 30
    temporal: int = 10
    max_repair_attempts: int = 2
    model_name: str = "gpt-4"
    temperature: float = 0.7
    max_tokens: int = 4096
    material_max_chars: int = 8000

    def budget(self) -> dict:
        return {
            "overview": self.overview,
            "plot_what": self.plot_what,
            "plot_where": self.plot_where,
            "plot_why": self.plot_why,
            "temporal": self.temporal,
        }

    def validate(self) -> None:
        from .errors import ConfigError

        for cat, n in self.budget().items():
            if n < 0:
                raise ConfigError(f"qa budget for {cat} must be >= 0")
        if self.max_repair_attempts < 0:
            raise ConfigError("max_repair_attempts must be >= 0")


@dataclass
class DatasetRecord:
    movie_id: str
    video_dir: str
    category: str
    question: str
    answer: str
    frame_count: int

    def to_dict(self) -> dict:
        return {
            "movie_id": self.movie_id,
            "video_dir": self.video_dir,
            "category": self.category,
            "question": self.question,
            "answer": self.answer,
            "frame_count": self.frame_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(
            movie_id=d["movie_id"],
            video_dir=d["video_dir"],
            category=d["category"],
            question=d["question"],
            answer=d["answer"],
            frame_count=d["frame_count"],
        )


@dataclass
class DatasetStats:
    n_videos: int
    n_qa: int
    qa_per_video: float | None
    qa_per_image: float | None
    n_genres: int
    per_genre: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_videos": self.n_videos,
            "n_qa": self.n_qa,
            "qa_per_video": self.qa_per_video,
            "qa_per_image": self.qa_per_image,
            "n_genres": self.n_genres,
            "per_genre": dict(sorted(self.per_genre.items())),
        }


@dataclass
class MoviePackage:
    plot: MoviePlot
    keyframes: list
    qa_pairs: list
    manifest_hash: str


# ---------------------------------------------------------------------------
# QA generation


def story_events(plot: MoviePlot) -> list:
    """Ordered event strings for temporal questions, coarsest level first."""
    titles = [c.title for c in plot.chapters]
    if len(titles) >= 2:
        return titles
    threads = [t.summary for c in plot.chapters for t in c.threads]
    if len(threads) >= 2:
        return threads
    return [f.text for c in plot.chapters for t in c.threads for f in t.frames]


def temporal_group_indices(n_events: int, count: int) -> list:
    """Deterministic sliding windows of up to 3 events per question."""
    size = min(3, n_events)
    span = n_events - size + 1
    return [list(range(k % span, k % span + size)) for k in range(count)]


class _QARunner:
    def __init__(self, plot, chat, config: QAConfig, seed: int, store=None):
        self.plot = plot
        self.chat = chat
        self.config = config
        self.seed = seed
        self.store = store

    def _transcript(self, stage, attempt, prompt, completion):
        if self.store is None:
            return
        path = self.store.transcript_path(self.plot.movie_id, stage, attempt)
        atomic_write_text(path, f"== prompt ==\n{prompt}\n\n== completion ==\n{completion}\n")

    def _ask(self, messages) -> str:
        req = ChatRequest(
            model_name=self.config.model_name,
            messages=messages,
            temperature=self.config.temperature,
            seed=self.seed,
            max_tokens=self.config.max_tokens,
        )
        return self.chat.chat(req)

    @staticmethod
    def _rows(raw) -> list:
        try:
            payload = parse_structured(raw)
        except ParseFailed as e:
            raise _Reject(f"reply was not parseable: {e}")
        if not isinstance(payload, dict) or not isinstance(payload.get("qa"), list):
            raise _Reject("reply must be a json object with a 'qa' list")
        return payload["qa"]

    def _material(self) -> str:
        parts = []
        for ch in self.plot.chapters:
            parts.append(f"[{ch.title}] {ch.summary}")
            for t in ch.threads:
                parts.append(f"- {t.summary}")
        text = "\n".join(parts)
        cap = self.config.material_max_chars
        return text if len(text) <= cap else text[: cap - 3] + "..."

    # -- count-based categories ---------------------------------------

    def run_pairs_category(self, category: str, count: int) -> list:
        phrase = self.plot.theme.phrase
        label = CATEGORY_LABELS[category]
        if category == "overview":
            source = f"Movie overview:\n{self.plot.overview}"
            ask = (
                f"Write exactly {count} question-answer pairs about the "
                f'overall story of the movie themed "{phrase}".'
            )
        else:
            source = f"Story material:\n{self._material()}"
            ask = (
                f'Write exactly {count} "{label}" question-answer pairs '
                f'for the movie themed "{phrase}".'
            )
        prompt = (
            f"{source}\n\n{ask}\n"
            "Ground every answer in the text above.\n\n"
            "Reply with one fenced json block only:\n"
            '{"qa": [{"question": "<q>", "answer": "<a>"}]}'
        )
        stage = f"qa-{category}"
        messages = [
            {"role": "system", "content": QA_SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]
        pairs: list[QAPair] = []
        seen = set()
        last_reason = "no attempts made"
        for attempt in range(self.config.max_repair_attempts + 1):
            raw = self._ask(messages)
            self._transcript(stage, attempt, messages[-1]["content"], raw)
            try:
                for row in self._rows(raw):
                    if not isinstance(row, dict):
                        continue
                    q = str(row.get("question", "")).strip()
                    a = str(row.get("answer", "")).strip()
                    if q and a and q not in seen:
                        seen.add(q)
                        pairs.append(QAPair(question=q, answer=a, category=category))
            except _Reject as r:
                last_reason = str(r)
            if len(pairs) >= count:
                return pairs
            remaining = count - len(pairs)
            last_reason = f"got {len(pairs)} of {count} valid pairs"
            topup = (
                f"You returned {len(pairs)} usable pairs so far; provide exactly "
                f'{remaining} more {label} pairs for the movie themed "{phrase}". '
                "Same json format; no repeats."
            )
            messages = messages + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": topup},
            ]
        raise StageFailed(f"qa:{category}", last_reason)

    # -- temporal ---------------------------------------------------------

    def run_temporal(self, count: int) -> list:
        phrase = self.plot.theme.phrase
        events = story_events(self.plot)
        if len(events) < 2:
            raise StageFailed("qa:temporal", "movie has fewer than two orderable events")
        groups = temporal_group_indices(len(events), count)
        presented = []
        for k, idx in enumerate(groups):
            shuffled = [events[i] for i in idx]
            random.Random(f"{self.seed}:temporal:{k}").shuffle(shuffled)
            presented.append(shuffled)
        listing = "\n".join(
            f"Group {k + 1}: " + "; ".join(g) for k, g in enumerate(presented)
        )
        prompt = (
            f"Event groups:\n{listing}\n\n"
            f"For each of the numbered groups of events from the movie themed "
            f'"{phrase}", write one question asking the viewer to arrange that '
            "group's events in story order. Mention every event of the group "
            "verbatim in its question.\n\n"
            "Reply with one fenced json block only:\n"
            '{"qa": [{"question": "<q for group 1>"}, ...]}'
        )
        messages = [
            {"role": "system", "content": QA_SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]
        last_reason = "no attempts made"
        for attempt in range(self.config.max_repair_attempts + 1):
            raw = self._ask(messages)
            self._transcript("qa-temporal", attempt, messages[-1]["content"], raw)
            try:
                rows = self._rows(raw)
                if len(rows) != count:
                    raise _Reject(f"expected exactly {count} questions, got {len(rows)}")
                pairs = []
                for k, row in enumerate(rows):
                    q = str(row.get("question", "")).strip() if isinstance(row, dict) else ""
                    if not q:
                        raise _Reject(f"question {k + 1} is empty")
                    missing = [e for e in presented[k] if e not in q]
                    if missing:
                        raise _Reject(
                            f"question {k + 1} must mention every event of its group; "
                            f"missing: {'; '.join(missing)}"
                        )
                    ordered = [events[i] for i in groups[k]]
                    answer = "In story order: " + "; then ".join(ordered) + "."
                    pairs.append(QAPair(question=q, answer=answer, category="temporal"))
                return pairs
            except _Reject as r:
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
        raise StageFailed("qa:temporal", last_reason)


class _Reject(Exception):
    pass


def generate_qa(plot: MoviePlot, chat, config: QAConfig | None = None,
                seed: int = 0, store: RunStore | None = None) -> list:
    """All category batches for one movie, checkpointed per category."""
    config = config or QAConfig()
    config.validate()
    runner = _QARunner(plot, chat, config, seed, store)
    out: list[QAPair] = []
    for category, count in config.budget().items():
        if count == 0:
            continue
        ckpt_name = f"qa-{category}"
        if store is not None:
            saved = store.load_checkpoint(plot.movie_id, ckpt_name)
            if saved is not None:
                out.extend(QAPair.from_dict(p) for p in saved)
                continue
        if category == "temporal":
            pairs = runner.run_temporal(count)
        else:
            pairs = runner.run_pairs_category(category, count)
        if store is not None:
            store.save_checkpoint(plot.movie_id, ckpt_name, [p.to_dict() for p in pairs])
        out.extend(pairs)
    return out


# ---------------------------------------------------------------------------
# packaging


def _replace_movie_lines(path, movie_id: str, new_records: list) -> None:
    # stable position: a repackaged movie keeps its slot in the file
    rows = read_jsonl(path) if path.exists() else []
    position = len(rows)
    kept = []
    for r in rows:
        if r.get("movie_id") == movie_id:
            position = min(position, len(kept))
        else:
            kept.append(r)
    fresh = [r.to_dict() for r in new_records]
    final = kept[:position] + fresh + kept[position:]
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, "".join(jsonl_line(r) for r in final))


def package_movie(store: RunStore, plot: MoviePlot, keyframes: list,
                  qa_pairs: list, allow_gaps: bool = False):
    """Seal one movie: per-movie manifest + its lines in the instruction file."""
    expected = set(range(plot.total_frames()))
    got = {r.global_index for r in keyframes}
    missing = sorted(expected - got)
    if missing and not allow_gaps:
        raise PackagingRefused(
            f"movie {plot.movie_id} is missing frames {missing[:12]}"
            f"{'...' if len(missing) > 12 else ''}; rerun or pass allow_gaps"
        )
    if not qa_pairs:
        raise PackagingRefused(f"movie {plot.movie_id} has no qa pairs")
    if plot.total_frames() >= 2:
        absent = [c for c in QA_CATEGORIES if c not in {p.category for p in qa_pairs}]
        if absent:
            raise PackagingRefused(
                f"movie {plot.movie_id} is missing qa categories: {', '.join(absent)}"
            )

    video_dir = f"{plot.movie_id}/frames"
    if not (store.run_dir / video_dir).is_dir():
        raise PackagingRefused(f"frames directory {video_dir} does not exist")

    body = {
        "plot": plot.to_dict(),
        "keyframes": [r.to_dict() for r in keyframes],
        "qa_pairs": [p.to_dict() for p in qa_pairs],
    }
    manifest_hash = content_hash(body)
    from .util import atomic_write_json

    atomic_write_json(
        store.movie_dir(plot.movie_id) / "package.json",
        {**body, "manifest_hash": manifest_hash},
    )

    frame_count = len(keyframes)
    records = [
        DatasetRecord(
            movie_id=plot.movie_id,
            video_dir=video_dir,
            category=p.category,
            question=p.question,
            answer=p.answer,
            frame_count=frame_count,
        )
        for p in qa_pairs
    ]
    _replace_movie_lines(store.run_dir / "dataset" / "instructions.jsonl",
                         plot.movie_id, records)
    package = MoviePackage(
        plot=plot, keyframes=list(keyframes), qa_pairs=list(qa_pairs),
        manifest_hash=manifest_hash,
    )
    return package, records


# ---------------------------------------------------------------------------
# statistics


RECORD_FIELDS = ("movie_id", "video_dir", "category", "question", "answer", "frame_count")


def compute_stats(dataset_path, genre_of=None) -> DatasetStats:
    """Table-shaped dataset summary; exact arithmetic, no division blowups."""
    rows = read_jsonl(dataset_path) if dataset_path.exists() else []
    frame_counts: dict[str, int] = {}
    for i, row in enumerate(rows, start=1):
        for f in RECORD_FIELDS:
            if f not in row:
                raise ParseFailed(f"record at line {i} is missing field '{f}'")
        if row["category"] not in QA_CATEGORIES:
            raise ParseFailed(f"record at line {i} has unknown category {row['category']!r}")
        mid = row["movie_id"]
        fc = row["frame_count"]
        if not isinstance(fc, int) or fc < 0:
            raise ParseFailed(f"record at line {i} has a bad frame_count")
        if mid in frame_counts and frame_counts[mid] != fc:
            raise ParseFailed(
                f"record at line {i}: frame_count {fc} disagrees with earlier "
                f"{frame_counts[mid]} for movie {mid}"
            )
        frame_counts[mid] = fc

    n_qa = len(rows)
    n_videos = len(frame_counts)
    total_frames = sum(frame_counts.values())
    qa_per_video = (n_qa / n_videos) if n_videos else None
    qa_per_image = (n_qa / total_frames) if total_frames else None

    per_genre: dict[str, int] = {}
    if genre_of is not None:
        for mid in frame_counts:
            genre = genre_of(mid)
            if genre:
                per_genre[genre] = per_genre.get(genre, 0) + 1

    return DatasetStats(
        n_videos=n_videos,
        n_qa=n_qa,
        qa_per_video=qa_per_video,
        qa_per_image=qa_per_image,
        n_genres=len(per_genre),
        per_genre=per_genre,
    )
