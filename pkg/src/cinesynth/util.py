"""Hashing, canonical serialization, and atomic file helpers."""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from pathlib import Path


def canonical_json(obj) -> str:
    """Serialize to a canonical JSON string: sorted keys, compact separators.

    Whitespace inside content strings is preserved as-is; only structural
    whitespace is normalized.
    """
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def content_hash(obj) -> str:
    """Hash of the canonical JSON serialization of a value."""
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def make_movie_id(theme_phrase: str, run_seed: int) -> str:
    """Stable 16-hex-char movie identifier from theme phrase and run seed."""
    return content_hash({"phrase": theme_phrase, "seed": run_seed})[:16]


def slugify(name: str) -> str:
    """Lowercase slug: runs of non-alphanumerics collapse to single dashes."""
    slug = re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")
    return slug or "style"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n")


def read_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def jsonl_line(obj) -> str:
    """One canonical JSONL line (newline included)."""
    return canonical_json(obj) + "\n"


def read_jsonl(path: Path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                from .errors import ParseFailed

                raise ParseFailed(f"malformed record on line {lineno}: {exc}", raw=line)
    return records
