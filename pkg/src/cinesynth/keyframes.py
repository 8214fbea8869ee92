"""Keyframe rendering: celebrity substitution, style prefix, one image per frame.

Frame prompts are rewritten in a single pass: every character name with a
celebrity mapping is replaced whole-word, case-insensitively, longest name
first, so "Anna" never loses her tail to "Ann" and substituted celebrity
text is never rescanned. Every prompt starts with the style-token prefix
sentence.

Image generation is per-frame seeded (run_seed + global_index), fans out to
the backend in parallel, persists the manifest after every completion, and
treats per-frame failures as data: the movie continues, failures land in a
manifest, and a resume regenerates only what is missing.
"""

from __future__ import annotations

import re
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

from .backends import ImageRequest
from .errors import CinesynthError, ContractViolation, MissingCasting
from .plot import FrameDescription, MoviePlot, StyleToken, flatten_frames
from .store import RunStore
from .util import atomic_write_bytes, atomic_write_json, read_json

PROMPT_PREFIX_RE = re.compile(r"^generate an image in <[a-z0-9-]+(-[0-9]+)?> style: ")


@dataclass
class KeyFrameRecord:
    global_index: int
    source_text: str
    prompt: str
    image_hash: str
    image_path: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "global_index": self.global_index,
            "source_text": self.source_text,
            "prompt": self.prompt,
            "image_hash": self.image_hash,
            "image_path": self.image_path,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyFrameRecord":
        return cls(
            global_index=d["global_index"],
            source_text=d["source_text"],
            prompt=d["prompt"],
            image_hash=d["image_hash"],
            image_path=d["image_path"],
            seed=d["seed"],
        )


@dataclass
class KeyframeResult:
    records: list
    failures: list  # [{"global_index": int, "error": str}]

    @property
    def ok(self) -> bool:
        return not self.failures


def render_prompt(frame: FrameDescription, characters: list, token: StyleToken) -> str:
    """Style prefix + frame text with character names swapped for celebrities."""
    if token is None or not token.trigger:
        raise ContractViolation("style token not registered for this movie")
    mapping = {c.name: c.celebrity_name for c in characters}
    names = sorted(mapping, key=len, reverse=True)
    text = frame.text
    if names:
        pattern = re.compile(
            r"\b(" + "|".join(re.escape(n) for n in names) + r")\b", re.IGNORECASE
        )
        lowered = {n.lower(): n for n in names}

        def swap(m):
            name = lowered[m.group(0).lower()]
            celebrity = mapping[name]
            if not celebrity.strip():
                raise MissingCasting(name)
            return celebrity

        text = pattern.sub(swap, text)
    return f"generate an image in {token.trigger} style: {text}"


def _image_rel_path(movie_id: str, global_index: int) -> str:
    return f"{movie_id}/frames/{global_index:05d}.png"


def generate_keyframes(plot: MoviePlot, image_backend, store: RunStore,
                       run_seed: int, width: int = 512, height: int = 512,
                       max_parallel: int = 4) -> KeyframeResult:
    """One image per frame; resumable; per-frame failures do not abort."""
    frames = flatten_frames(plot)
    token = plot.style.token
    movie_dir = store.movie_dir(plot.movie_id)
    frames_dir = movie_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = movie_dir / "frames.json"
    failures_path = movie_dir / "failures.json"

    done: dict[int, KeyFrameRecord] = {}
    if manifest_path.exists():
        for row in read_json(manifest_path):
            rec = KeyFrameRecord.from_dict(row)
            if (store.run_dir / rec.image_path).exists():
                done[rec.global_index] = rec

    lock = threading.Lock()

    def flush() -> None:
        rows = [done[i].to_dict() for i in sorted(done)]
        atomic_write_json(manifest_path, rows)

    def work(frame: FrameDescription) -> KeyFrameRecord:
        prompt = render_prompt(frame, plot.characters, token)
        seed = run_seed + frame.global_index
        req = ImageRequest(
            prompt=prompt,
            seed=seed,
            width=width,
            height=height,
            style_embedding_ref=token.embedding_artifact,
        )
        data, digest = image_backend.generate_image(req)
        rel = _image_rel_path(plot.movie_id, frame.global_index)
        atomic_write_bytes(store.run_dir / rel, data)
        return KeyFrameRecord(
            global_index=frame.global_index,
            source_text=frame.text,
            prompt=prompt,
            image_hash=digest,
            image_path=rel,
            seed=seed,
        )

    pending = [f for f in frames if f.global_index not in done]
    failures: list[dict] = []
    # MissingCasting/ContractViolation are bugs in the plot, not transient
    # backend weather; let them propagate instead of recording a failure.
    for frame in pending:
        render_prompt(frame, plot.characters, token)

    if pending:
        with ThreadPoolExecutor(max_workers=max(1, max_parallel)) as pool:
            futures = {pool.submit(work, f): f for f in pending}
            for fut in as_completed(futures):
                frame = futures[fut]
                try:
                    rec = fut.result()
                except CinesynthError as e:
                    with lock:
                        failures.append(
                            {"global_index": frame.global_index, "error": str(e)}
                        )
                else:
                    with lock:
                        done[rec.global_index] = rec
                        flush()

    with lock:
        flush()
        failures.sort(key=lambda f: f["global_index"])
        if failures:
            atomic_write_json(failures_path, failures)
        elif failures_path.exists():
            failures_path.unlink()

    records = [done[i] for i in sorted(done)]
    return KeyframeResult(records=records, failures=failures)
