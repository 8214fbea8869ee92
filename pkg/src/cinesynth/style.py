"""Style immobilization: reference scenes, inversion job dispatch, registry.

The trainer is pluggable behind one filesystem contract: the orchestrator
prepares a workdir with `style.json` and `refs/NNN.png`, the trainer (mock,
subprocess, anything) fills `out/`, and the orchestrator registers the
resulting embedding under a unique `<trigger>` token. Primary-side code
never looks inside the embedding bytes.
"""

from __future__ import annotations

import datetime as _dt
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .backends import ImageRequest
from .errors import ContractViolation, NotFound, StyleTrainingFailed
from .plot import StyleSpec, StyleToken
from .store import RunStore
from .util import (
    atomic_write_bytes,
    atomic_write_json,
    read_json,
    sha256_hex,
    slugify,
)


@dataclass
class StyleTrainingJob:
    job_id: str
    style: StyleSpec
    workdir: Path
    status: str = "pending"  # pending | running | done | failed
    output: dict | None = None

    def start(self) -> None:
        self.status = "running"

    def complete(self, output: dict) -> None:
        if not output or "embedding_artifact" not in output or "trigger" not in output:
            raise ContractViolation("job completion requires embedding_artifact and trigger")
        self.status = "done"
        self.output = output

    def fail(self) -> None:
        self.status = "failed"
        self.output = None


class StyleRegistry:
    """trigger -> {embedding_artifact, source_movie, created_at}; one writer."""

    def __init__(self, path):
        self.path = Path(path)
        self.entries = read_json(self.path) if self.path.exists() else {}
        self._lock = threading.Lock()

    def claim(self, style_name: str, movie_id: str) -> str:
        """Reserve a unique trigger for this movie's style, idempotently."""
        slug = slugify(style_name)
        with self._lock:
            base = f"<{slug}>"
            candidate, k = base, 1
            while candidate in self.entries:
                if self.entries[candidate]["source_movie"] == movie_id:
                    return candidate
                k += 1
                candidate = f"<{slug}-{k}>"
            self.entries[candidate] = {
                "embedding_artifact": None,
                "source_movie": movie_id,
                "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            }
            self._save()
            return candidate

    def set_artifact(self, trigger: str, artifact: str) -> None:
        with self._lock:
            if trigger not in self.entries:
                raise NotFound(f"trigger {trigger} was never claimed")
            self.entries[trigger]["embedding_artifact"] = artifact
            self._save()

    def lookup(self, trigger: str) -> dict:
        if trigger not in self.entries:
            raise NotFound(f"trigger {trigger} not registered")
        return dict(self.entries[trigger])

    def triggers(self) -> list:
        return sorted(self.entries)

    def verify_artifacts(self, blobs) -> None:
        for trigger, entry in self.entries.items():
            artifact = entry["embedding_artifact"]
            if artifact is not None and not blobs.has(artifact):
                raise ContractViolation(
                    f"registry entry {trigger} points at missing artifact {artifact}"
                )

    def _save(self) -> None:
        atomic_write_json(self.path, self.entries)


# ---------------------------------------------------------------------------
# trainers (all satisfy: run(workdir) -> int exit code)


class MockStyleTrainer:
    """In-process stand-in: the artifact is a hash-derived stub.

    Exercises the contract, not the training. Deterministic: the stub bytes
    depend only on the style description, so reruns produce identical
    artifact hashes.
    """

    def run(self, workdir) -> int:
        workdir = Path(workdir)
        out = workdir / "out"
        out.mkdir(parents=True, exist_ok=True)
        refs = sorted((workdir / "refs").glob("*.png"))
        if not refs:
            atomic_write_bytes(out / "error.log", b"no reference images in refs/\n")
            return 1
        spec = read_json(workdir / "style.json")
        import hashlib

        stub = hashlib.blake2b(
            spec["description"].encode("utf-8"), digest_size=64
        ).digest()
        atomic_write_bytes(out / "embedding.bin", stub)
        atomic_write_json(
            out / "meta.json",
            {"trigger": spec["trigger"], "steps": 0, "final_loss": 0.0},
        )
        return 0


class CommandStyleTrainer:
    """Launches an external worker: `command` is a template with {workdir}."""

    def __init__(self, command: str, timeout: float = 600.0):
        if "{workdir}" not in command:
            raise ContractViolation("trainer command template must contain {workdir}")
        self.command = command
        self.timeout = timeout

    def run(self, workdir) -> int:
        cmd = shlex.split(self.command.format(workdir=shlex.quote(str(workdir))))
        proc = subprocess.run(cmd, capture_output=True, timeout=self.timeout)
        return proc.returncode


# ---------------------------------------------------------------------------
# orchestration


class StylePipeline:
    def __init__(self, image_backend, store: RunStore, trainer,
                 n_reference_scenes: int = 5, image_size: int = 512):
        self.image_backend = image_backend
        self.store = store
        self.trainer = trainer
        self.n_reference_scenes = n_reference_scenes
        self.image_size = image_size

    def generate_reference_scenes(self, style: StyleSpec, movie_id: str,
                                  seed: int, n: int | None = None) -> list:
        """n scene images from the style description; resumable mid-list."""
        n = self.n_reference_scenes if n is None else n
        if n < 1:
            raise ContractViolation("need at least one reference scene")
        if not style.description.strip():
            raise ContractViolation("style description is empty")

        saved = self.store.load_checkpoint(movie_id, "style-refs") or {"hashes": []}
        hashes = list(saved["hashes"])
        for i in range(len(hashes), n):
            req = ImageRequest(
                prompt=f"{style.description}, scene {i}",
                seed=seed + i,
                width=self.image_size,
                height=self.image_size,
            )
            data, digest = self.image_backend.generate_image(req)
            self.store.blobs.put(data)
            hashes.append(digest)
            # persist after every image so an interruption keeps its work
            self.store.save_checkpoint(movie_id, "style-refs", {"hashes": hashes})
        style.reference_image_ids = hashes
        return hashes

    def immobilize_style(self, style: StyleSpec, movie_id: str,
                         registry: StyleRegistry) -> StyleToken:
        """Dispatch the inversion job and register the resulting token."""
        done = self.store.load_checkpoint(movie_id, "style-token")
        if done is not None:
            token = StyleToken.from_dict(done)
            style.token = token
            return token

        if not style.reference_image_ids:
            raise StyleTrainingFailed(
                "style has no reference images; generate reference scenes first"
            )
        trigger = registry.claim(style.style_name, movie_id)
        workdir = self.store.movie_dir(movie_id) / "style-job"
        refs_dir = workdir / "refs"
        refs_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_json(
            workdir / "style.json",
            {
                "style_name": style.style_name,
                "description": style.description,
                "trigger": trigger,
            },
        )
        for i, digest in enumerate(style.reference_image_ids):
            target = refs_dir / f"{i:03d}.png"
            if not target.exists():
                atomic_write_bytes(target, self.store.blobs.get(digest))

        job = StyleTrainingJob(job_id=f"{movie_id}-style", style=style, workdir=workdir)
        job.start()
        code = self.trainer.run(workdir)
        if code != 0:
            job.fail()
            log = workdir / "out" / "error.log"
            raise StyleTrainingFailed(
                f"inversion worker exited with code {code}",
                log_path=log if log.exists() else None,
            )

        out = workdir / "out"
        embedding_path = out / "embedding.bin"
        meta_path = out / "meta.json"
        if not embedding_path.exists() or not meta_path.exists():
            raise ContractViolation(
                "worker exited 0 but did not write out/embedding.bin and out/meta.json"
            )
        meta = read_json(meta_path)
        if meta.get("trigger") != trigger:
            raise ContractViolation(
                f"worker meta trigger {meta.get('trigger')!r} does not match job trigger {trigger!r}"
            )
        if not isinstance(meta.get("steps"), int) or not isinstance(
            meta.get("final_loss"), (int, float)
        ):
            raise ContractViolation("worker meta must carry integer steps and numeric final_loss")

        artifact = self.store.blobs.put(embedding_path.read_bytes())
        registry.set_artifact(trigger, artifact)
        job.complete({"embedding_artifact": artifact, "trigger": trigger})

        token = StyleToken(
            trigger=trigger,
            embedding_artifact=artifact,
            source_style=style.style_name,
        )
        style.token = token
        self.store.save_checkpoint(movie_id, "style-token", token.to_dict())
        return token


def run_style_stage(plot, pipeline: StylePipeline, registry: StyleRegistry,
                    seed: int) -> StyleToken:
    """Reference scenes then immobilization for one movie's style."""
    pipeline.generate_reference_scenes(plot.style, plot.movie_id, seed=seed)
    return pipeline.immobilize_style(plot.style, plot.movie_id, registry)
