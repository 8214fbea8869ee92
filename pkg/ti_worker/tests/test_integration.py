"""End-to-end: the dataset pipeline drives this worker over the job-directory
contract, exactly as a production trainer would be wired in."""

import json
import sys

import pytest

cinesynth = pytest.importorskip("cinesynth")

from cinesynth.backends import MockImageBackend
from cinesynth.plot import TRIGGER_RE, StyleSpec
from cinesynth.store import RunStore
from cinesynth.style import CommandStyleTrainer, StylePipeline, StyleRegistry

WORKER_CMD = f"{sys.executable} -m ti_worker {{workdir}}"


def test_style_pipeline_uses_real_worker(tmp_path):
    store = RunStore.create(tmp_path / "ws", seed=5)
    registry = StyleRegistry(store.run_dir / "style_registry.json")
    pipeline = StylePipeline(
        image_backend=MockImageBackend(),
        store=store,
        trainer=CommandStyleTrainer(WORKER_CMD, timeout=120.0),
        n_reference_scenes=2,
        image_size=96,
    )
    style = StyleSpec(
        style_name="Gothic Noir",
        description="rain-slick streets, hard chiaroscuro, brass and fog",
    )
    pipeline.generate_reference_scenes(style, "m1", seed=3)
    token = pipeline.immobilize_style(style, "m1", registry)

    assert token.trigger == "<gothic-noir>"
    assert TRIGGER_RE.match(token.trigger)
    assert store.blobs.has(token.embedding_artifact)

    workdir = store.run_dir / "m1" / "style-job"
    meta = json.loads((workdir / "out" / "meta.json").read_text())
    assert meta["trigger"] == "<gothic-noir>"
    assert meta["steps"] == 40  # worker default when no inversion.json is provided
    blob = (workdir / "out" / "embedding.bin").read_bytes()
    assert len(blob) == 768 * 4


def test_worker_failure_surfaces_log(tmp_path):
    store = RunStore.create(tmp_path / "ws", seed=5)
    registry = StyleRegistry(store.run_dir / "style_registry.json")
    pipeline = StylePipeline(
        image_backend=MockImageBackend(),
        store=store,
        trainer=CommandStyleTrainer(WORKER_CMD, timeout=120.0),
        n_reference_scenes=2,
        image_size=96,
    )
    style = StyleSpec(style_name="Broken", description="anything")
    pipeline.generate_reference_scenes(style, "m1", seed=3)
    # poison the job config so the worker must refuse it
    workdir = store.run_dir / "m1" / "style-job"
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "inversion.json").write_text(json.dumps({"steps": 0}))

    from cinesynth.errors import StyleTrainingFailed

    with pytest.raises(StyleTrainingFailed) as exc:
        pipeline.immobilize_style(style, "m1", registry)
    assert exc.value.log_path is not None
