"""Toy reconstruction-objective optimizer for one style token.

The "base model" is a frozen random linear decoder from the token-embedding
space to a grayscale patch grid; training runs plain gradient descent on a
single embedding vector until the decoded grid reconstructs the reference
scenes. That keeps the full worker contract honest (config, seeding, artifact
layout, failure modes) at a scale that runs in milliseconds on a CPU. All
defaults are deliberately tiny, scaled far below production inversion runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# token-embedding width per known base model identifier
BASE_MODELS = {
    "toy-clip-256": 256,
    "toy-clip-512": 512,
    "toy-clip-768": 768,
}

DEFAULT_MODEL = "toy-clip-768"


class JobError(Exception):
    """Any contract failure the worker reports through error.log."""


@dataclass
class InversionConfig:
    base_model: str = DEFAULT_MODEL
    steps: int = 40
    learning_rate: float = 0.05
    batch_size: int = 2
    resolution: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.base_model not in BASE_MODELS:
            known = ", ".join(sorted(BASE_MODELS))
            raise JobError(f"unknown base model {self.base_model!r}; known: {known}")
        if not isinstance(self.steps, int) or self.steps < 1:
            raise JobError(f"steps must be an integer >= 1, got {self.steps!r}")
        if not isinstance(self.resolution, int) or self.resolution < 8 or self.resolution % 8:
            raise JobError(f"resolution must be a multiple of 8, got {self.resolution!r}")
        if not (float(self.learning_rate) > 0.0):
            raise JobError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise JobError(f"batch_size must be an integer >= 1, got {self.batch_size!r}")
        if not isinstance(self.seed, int):
            raise JobError(f"seed must be an integer, got {self.seed!r}")

    @classmethod
    def from_workdir(cls, workdir: Path) -> "InversionConfig":
        path = workdir / "inversion.json"
        if not path.exists():
            config = cls()
        else:
            try:
                raw = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise JobError(f"inversion.json is unreadable: {exc}") from exc
            if not isinstance(raw, dict):
                raise JobError("inversion.json must hold a JSON object")
            known = set(cls().__dict__)
            unknown = sorted(set(raw) - known)
            if unknown:
                raise JobError(f"inversion.json has unknown keys: {', '.join(unknown)}")
            config = cls(**raw)
        config.validate()
        return config


def decoder_matrix(base_model: str, resolution: int) -> np.ndarray:
    """Frozen decoder for one (model, resolution) pair; never depends on the
    run seed, so every job against the same base model shares a space."""
    dim = BASE_MODELS[base_model]
    key = hashlib.blake2b(
        f"{base_model}:{resolution}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(key, "big")))
    cells = resolution * resolution
    return rng.standard_normal((dim, cells)) / np.sqrt(dim)


def load_references(refs_dir: Path, resolution: int) -> np.ndarray:
    """Reference scenes as rows of normalized grayscale pixels."""
    from PIL import Image

    paths = sorted(refs_dir.glob("*.png")) if refs_dir.is_dir() else []
    if not paths:
        raise JobError("no reference images in refs/")
    rows = []
    for path in paths:
        try:
            with Image.open(path) as im:
                small = im.convert("L").resize(
                    (resolution, resolution), Image.BILINEAR
                )
        except OSError as exc:
            raise JobError(f"reference {path.name} is not a readable image: {exc}") from exc
        rows.append(np.asarray(small, dtype=np.float64).reshape(-1) / 255.0)
    return np.stack(rows)


def train(targets: np.ndarray, config: InversionConfig) -> tuple[np.ndarray, float]:
    """Gradient descent on one embedding; returns (embedding, final loss).

    The reported loss is measured over the full reference set after the
    last update, not the last minibatch, so it is stable under batch_size.
    """
    dim = BASE_MODELS[config.base_model]
    decoder = decoder_matrix(config.base_model, config.resolution)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    embedding = rng.standard_normal(dim) * 0.01

    n_refs = targets.shape[0]
    cells = targets.shape[1]
    # overflow here is not a numeric bug, it is the divergence signal the
    # finiteness check below turns into a job failure
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(config.steps):
            batch_idx = rng.integers(0, n_refs, size=config.batch_size)
            batch = targets[batch_idx]
            residual = embedding @ decoder - batch
            grad = (2.0 / (config.batch_size * cells)) * (residual @ decoder.T).sum(axis=0)
            embedding = embedding - config.learning_rate * grad
            if not np.all(np.isfinite(embedding)):
                raise JobError(f"non-finite loss at step {step + 1}; lower the learning rate")

        final_loss = float(np.mean((embedding @ decoder - targets) ** 2))
    if not np.isfinite(final_loss):
        raise JobError("non-finite loss after the final step; lower the learning rate")
    assert embedding.shape == (dim,)
    return embedding.astype(np.float32), final_loss


def _read_style(workdir: Path) -> dict:
    path = workdir / "style.json"
    if not path.exists():
        raise JobError(f"missing style.json in {workdir}")
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise JobError(f"style.json is unreadable: {exc}") from exc
    trigger = spec.get("trigger", "")
    if not isinstance(trigger, str) or not trigger.strip():
        raise JobError("style.json has no usable trigger")
    return spec


def run_job(workdir) -> int:
    """The whole contract: artifacts under out/, exit status as the verdict."""
    workdir = Path(workdir)
    if not workdir.is_dir():
        print(f"workdir does not exist: {workdir}")
        return 1
    out = workdir / "out"
    out.mkdir(parents=True, exist_ok=True)
    try:
        spec = _read_style(workdir)
        config = InversionConfig.from_workdir(workdir)
        targets = load_references(workdir / "refs", config.resolution)
        embedding, final_loss = train(targets, config)
    except JobError as exc:
        (out / "error.log").write_text(f"{exc}\n", encoding="utf-8")
        return 1

    (out / "embedding.bin").write_bytes(embedding.tobytes())
    meta = {
        "trigger": spec["trigger"],
        "steps": config.steps,
        "final_loss": final_loss,
    }
    (out / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    return 0
