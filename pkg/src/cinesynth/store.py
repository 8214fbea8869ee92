"""Resumable on-disk run state.

Layout under a workspace root:

    blobs/<first2>/<sha256>          content-addressed immutable artifacts
    runs/<run_id>/manifest.json      stage ledger for one run
    runs/<run_id>/<movie_id>/...     per-movie working files (checkpoints,
                                     transcripts, frames, dataset inputs)

Every write lands via a temp file plus os.replace, so a crash leaves either
the old state or the new state, never a torn file. Completed stages are
recorded in the manifest; rerunning a finished stage is a no-op for callers
that check stage_done first.
"""

from __future__ import annotations

import datetime as _dt
import os
from pathlib import Path

from .errors import NotFound, StageOrderViolation
from .util import atomic_write_bytes, atomic_write_json, read_json, sha256_hex

STAGES = ("plot", "style", "frames", "qa", "package")


def _utcnow() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class BlobStore:
    """Write-once store keyed by sha256 of content."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def rel_path(self, digest: str) -> str:
        return f"blobs/{digest[:2]}/{digest}"

    def put(self, data: bytes) -> str:
        digest = sha256_hex(data)
        path = self._path(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            atomic_write_bytes(path, data)
        return digest

    def has(self, digest: str) -> bool:
        return self._path(digest).exists()

    def get(self, digest: str) -> bytes:
        path = self._path(digest)
        if not path.exists():
            raise NotFound(f"blob {digest} not in store")
        return path.read_bytes()

    def path_for(self, digest: str) -> Path:
        path = self._path(digest)
        if not path.exists():
            raise NotFound(f"blob {digest} not in store")
        return path


class RunStore:
    """Manifest-backed view of one run's progress."""

    def __init__(self, workspace, run_id: str, manifest: dict):
        self.workspace = Path(workspace)
        self.run_id = run_id
        self.manifest = manifest
        self.blobs = BlobStore(self.workspace / "blobs")

    # -- lifecycle -----------------------------------------------------

    @classmethod
    def create(cls, workspace, seed: int, config_hash: str = "") -> "RunStore":
        run_id = f"run-{seed}"
        workspace = Path(workspace)
        manifest_path = workspace / "runs" / run_id / "manifest.json"
        if manifest_path.exists():
            store = cls.open(workspace, run_id)
            if config_hash and store.manifest.get("config_hash") not in ("", config_hash):
                raise StageOrderViolation(
                    f"run {run_id} exists with a different configuration; "
                    "pick a new seed or remove the run directory"
                )
            return store
        manifest = {
            "run_id": run_id,
            "seed": seed,
            "config_hash": config_hash,
            "created_at": _utcnow(),
            "updated_at": _utcnow(),
            "movies": {},
            "dataset": None,
        }
        store = cls(workspace, run_id, manifest)
        store._flush()
        return store

    @classmethod
    def open(cls, workspace, run_id: str) -> "RunStore":
        workspace = Path(workspace)
        path = workspace / "runs" / run_id / "manifest.json"
        if not path.exists():
            raise NotFound(f"run {run_id} has no manifest at {path}")
        return cls(workspace, run_id, read_json(path))

    # -- paths ---------------------------------------------------------

    @property
    def run_dir(self) -> Path:
        return self.workspace / "runs" / self.run_id

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def movie_dir(self, movie_id: str) -> Path:
        d = self.run_dir / movie_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def transcript_path(self, movie_id: str, stage: str, attempt: int) -> Path:
        d = self.movie_dir(movie_id) / "transcripts"
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{stage}-{attempt}.txt"

    # -- checkpoints (sub-stage granularity, order managed by callers) --

    def checkpoint_path(self, movie_id: str, name: str) -> Path:
        d = self.movie_dir(movie_id) / "checkpoints"
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{name}.json"

    def save_checkpoint(self, movie_id: str, name: str, obj) -> None:
        atomic_write_json(self.checkpoint_path(movie_id, name), obj)

    def load_checkpoint(self, movie_id: str, name: str):
        path = self.checkpoint_path(movie_id, name)
        if not path.exists():
            return None
        return read_json(path)

    # -- stage ledger ----------------------------------------------------

    def _movie_entry(self, movie_id: str) -> dict:
        return self.manifest["movies"].setdefault(movie_id, {"stages": {}})

    def stage_done(self, movie_id: str, stage: str) -> bool:
        entry = self.manifest["movies"].get(movie_id, {})
        record = entry.get("stages", {}).get(stage)
        return bool(record) and record.get("status") == "done"

    def stage_payload(self, movie_id: str, stage: str):
        entry = self.manifest["movies"].get(movie_id, {})
        record = entry.get("stages", {}).get(stage)
        return record.get("payload") if record else None

    def mark_stage(self, movie_id: str, stage: str, payload=None) -> None:
        if stage not in STAGES:
            raise StageOrderViolation(f"unknown stage '{stage}'")
        missing = [
            s
            for s in STAGES[: STAGES.index(stage)]
            if not self.stage_done(movie_id, s)
        ]
        if missing:
            raise StageOrderViolation(
                f"cannot complete '{stage}' for {movie_id}: "
                f"unfinished predecessor stages {missing}"
            )
        entry = self._movie_entry(movie_id)
        entry["stages"][stage] = {
            "status": "done",
            "completed_at": _utcnow(),
            "payload": payload,
        }
        self._flush()

    def mark_dataset(self, payload=None) -> None:
        incomplete = [
            m
            for m in self.manifest["movies"]
            if not self.stage_done(m, "package")
        ]
        if incomplete:
            raise StageOrderViolation(
                f"cannot record dataset: movies not packaged yet: {incomplete}"
            )
        self.manifest["dataset"] = {
            "status": "done",
            "completed_at": _utcnow(),
            "payload": payload,
        }
        self._flush()

    def dataset_done(self) -> bool:
        ds = self.manifest.get("dataset")
        return bool(ds) and ds.get("status") == "done"

    def reload(self) -> None:
        self.manifest = read_json(self.manifest_path)

    def _flush(self) -> None:
        self.manifest["updated_at"] = _utcnow()
        atomic_write_json(self.manifest_path, self.manifest)


def strip_timestamps(obj):
    """Copy of a manifest-like structure without volatile time fields."""
    volatile = {"created_at", "updated_at", "completed_at"}
    if isinstance(obj, dict):
        return {k: strip_timestamps(v) for k, v in obj.items() if k not in volatile}
    if isinstance(obj, list):
        return [strip_timestamps(v) for v in obj]
    return obj
