"""Configuration loading and end-to-end orchestration.

The expensive claims live here: a full scripted run is deterministic to
the byte, reruns touch no backend, and a crash at any stage boundary
resumes to the same output as an uninterrupted run.
"""

import dataclasses

import pytest

from cinesynth.config import load_backend_table, load_config
from cinesynth.errors import (
    ConfigError,
    ParseFailed,
    StageFailed,
    StageOrderViolation,
)
from cinesynth.keyframes import PROMPT_PREFIX_RE
from cinesynth.pipeline import Pipeline, load_themes, propose_themes, write_themes
from cinesynth.plot import DEFAULT_GENRES
from cinesynth.store import RunStore
from cinesynth.util import read_json, read_jsonl

from e2ehelpers import (
    FRAMES_PER_MOVIE,
    PHRASES,
    QA_PER_MOVIE,
    run_snapshot,
    write_config,
)
from mockscripts import fenced, write_script


# ---------------------------------------------------------------------------
# config loading


def test_load_config_resolves_paths_and_sections(tmp_path):
    path = write_config(tmp_path, seed=123)
    config = load_config(path)
    assert config.seed == 123
    assert config.workspace == (tmp_path / "ws").resolve()
    assert config.chat.kind == "mock"
    assert config.chat.script_path == str((tmp_path / "script.json").resolve())
    assert config.expansion.n_chapters == 3
    assert config.qa.budget()["plot_what"] == 2
    assert config.style.n_reference_scenes == 2
    assert config.keyframes.width == 96
    assert config.config_hash
    assert config.run_id() == "run-123"


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")


def test_load_config_rejects_bad_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[run\nseed = 1")
    with pytest.raises(ConfigError, match="not valid TOML"):
        load_config(path)


def test_load_config_requires_seed(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[run]\nworkspace = "ws"\n\n[chat]\nkind = "http"\nendpoint = "x"\n')
    with pytest.raises(ConfigError, match="run.seed is required"):
        load_config(path)


def test_load_config_rejects_bool_seed(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[run]\nseed = true\n\n[chat]\nkind = "http"\nendpoint = "x"\n')
    with pytest.raises(ConfigError, match="seed must be an integer"):
        load_config(path)


def test_load_config_requires_chat_section(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[run]\nseed = 5\n")
    with pytest.raises(ConfigError, match=r"\[chat\] backend section"):
        load_config(path)


def test_load_config_rejects_unknown_section(tmp_path):
    path = write_config(tmp_path)
    path.write_text(path.read_text() + "\n[surprise]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown keys: surprise"):
        load_config(path)


def test_load_config_rejects_unknown_backend_key(tmp_path):
    path = write_config(tmp_path, extra='\n[judge]\nkind = "mock"\nscripty = "x"\n')
    with pytest.raises(ConfigError, match="unknown keys: scripty"):
        load_config(path)


def test_load_config_missing_script_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        '[run]\nseed = 5\n\n[chat]\nkind = "mock"\nscript_path = "gone.json"\n'
    )
    with pytest.raises(ConfigError, match="script_path not found"):
        load_config(path)


def test_load_config_mock_chat_needs_script(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[run]\nseed = 5\n\n[chat]\nkind = "mock"\n')
    with pytest.raises(ConfigError, match="requires script_path"):
        load_config(path)


def test_load_config_missing_template_dir_names_path(tmp_path):
    path = write_config(tmp_path, extra='\n[templates]\ndirectory = "tpl"\n')
    with pytest.raises(ConfigError, match="tpl"):
        load_config(path)


def test_load_config_template_dir_missing_one_file(tmp_path):
    tpl = tmp_path / "tpl"
    tpl.mkdir()
    (tpl / "overview.txt").write_text("{theme} {genre}")
    path = write_config(tmp_path, extra='\n[templates]\ndirectory = "tpl"\n')
    with pytest.raises(ConfigError, match="missing style.txt"):
        load_config(path)


def test_load_config_svr_model_must_exist(tmp_path):
    path = write_config(tmp_path, extra='\n[metrics]\nsvr_model = "m.txt"\n')
    with pytest.raises(ConfigError, match="svr_model not found"):
        load_config(path)


def test_load_config_svr_model_needs_ranges(tmp_path):
    (tmp_path / "m.txt").write_text("gamma 0.1\nbias 0.0\n")
    path = write_config(tmp_path, extra='\n[metrics]\nsvr_model = "m.txt"\n')
    with pytest.raises(ConfigError, match="no ranges file"):
        load_config(path)


def test_endpoint_env_interpolation(tmp_path, monkeypatch):
    monkeypatch.setenv("API_HOST", "api.example.test")
    path = write_config(
        tmp_path,
        extra='\n[judge]\nkind = "http"\nendpoint = "https://${API_HOST}/v1"\n',
    )
    config = load_config(path)
    assert config.judge.endpoint == "https://api.example.test/v1"


def test_endpoint_env_interpolation_unset_var(tmp_path, monkeypatch):
    monkeypatch.delenv("NO_SUCH_HOST", raising=False)
    path = write_config(
        tmp_path,
        extra='\n[judge]\nkind = "http"\nendpoint = "https://${NO_SUCH_HOST}/v1"\n',
    )
    with pytest.raises(ConfigError, match="NO_SUCH_HOST"):
        load_config(path)


def test_judge_falls_back_to_chat_backend(tmp_path):
    config = load_config(write_config(tmp_path))
    assert config.judge is config.chat


def test_load_backend_table(tmp_path):
    path = tmp_path / "b.toml"
    path.write_text('[embedding]\nkind = "mock"\nembedding_dim = 16\n')
    cfg = load_backend_table(path, "embedding")
    assert cfg.embedding_dim == 16
    with pytest.raises(ConfigError, match=r"no \[judge\] table"):
        load_backend_table(path, "judge")


# ---------------------------------------------------------------------------
# themes


def test_load_themes_plain_lines_get_stable_genres(tmp_path):
    path = tmp_path / "themes.txt"
    path.write_text("# comment\n\nalpha story\nbeta story\n")
    first = load_themes(path)
    second = load_themes(path)
    assert [t.phrase for t in first] == ["alpha story", "beta story"]
    assert first == second
    assert all(t.genre_tag in DEFAULT_GENRES for t in first)


def test_load_themes_json_lines(tmp_path):
    path = tmp_path / "themes.txt"
    path.write_text('{"phrase": "gamma", "genre_tag": "noir"}\n')
    themes = load_themes(path)
    assert themes[0].phrase == "gamma"
    assert themes[0].genre_tag == "noir"


def test_load_themes_rejects_duplicates(tmp_path):
    path = tmp_path / "themes.txt"
    path.write_text("same\nsame\n")
    with pytest.raises(ParseFailed, match="repeats"):
        load_themes(path)


def test_load_themes_rejects_empty_file(tmp_path):
    path = tmp_path / "themes.txt"
    path.write_text("\n# nothing\n")
    with pytest.raises(ConfigError, match="no themes"):
        load_themes(path)


def test_load_themes_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_themes(tmp_path / "gone.txt")


def test_write_themes_roundtrip(tmp_path):
    src = tmp_path / "in.txt"
    src.write_text("one tale\ntwo tales\n")
    themes = load_themes(src)
    out = tmp_path / "out.txt"
    write_themes(out, themes)
    assert load_themes(out) == themes


class _ScriptedChat:
    def __init__(self, entries):
        self.entries = entries

    def chat(self, request):
        text = request.messages[-1]["content"]
        for match, response in self.entries:
            if match in text:
                return response
        raise AssertionError(f"no scripted reply for: {text[:80]}")


def test_propose_themes_happy_path():
    reply = fenced(
        {
            "themes": [
                {"phrase": "tidal archives", "genre": "mystery"},
                {"phrase": "glass orchards", "genre": "drama"},
            ]
        }
    )
    chat = _ScriptedChat([("Propose exactly 2", reply)])
    themes = propose_themes(chat, 2, seed=9)
    assert [t.phrase for t in themes] == ["tidal archives", "glass orchards"]
    assert [t.genre_tag for t in themes] == ["mystery", "drama"]


def test_propose_themes_repairs_bad_genre():
    bad = fenced({"themes": [{"phrase": "a", "genre": "nope"}]})
    good = fenced({"themes": [{"phrase": "a", "genre": "drama"}]})
    chat = _ScriptedChat([("Rejected:", good), ("Propose exactly 1", bad)])
    themes = propose_themes(chat, 1, seed=9)
    assert themes[0].genre_tag == "drama"


def test_propose_themes_gives_up():
    bad = fenced({"themes": [{"phrase": "a", "genre": "nope"}]})
    chat = _ScriptedChat([("", bad)])
    with pytest.raises(StageFailed, match="themes"):
        propose_themes(chat, 1, seed=9, max_repair_attempts=1)


# ---------------------------------------------------------------------------
# end-to-end generation


def build_pipeline(tmp_path, seed=77, after_stage=None, **kwargs):
    config = load_config(write_config(tmp_path, seed=seed, **kwargs))
    return Pipeline(config, after_stage=after_stage), config


def load_themes_from(phrases):
    from cinesynth.plot import MovieTheme

    return [
        MovieTheme(phrase=p, genre_tag=DEFAULT_GENRES[i % len(DEFAULT_GENRES)])
        for i, p in enumerate(phrases)
    ]


def test_generate_end_to_end(tmp_path):
    pipeline, config = build_pipeline(tmp_path)
    run = pipeline.generate(load_themes_from(PHRASES))
    assert run.ok, run.failures
    assert all(len(s.completed) == 3 for s in run.stages)

    store = RunStore.open(config.workspace, config.run_id())
    assert store.dataset_done()
    movie_ids = list(store.manifest["movies"])
    assert len(movie_ids) == 3

    rows = read_jsonl(config.workspace / "runs" / config.run_id() / "dataset" / "instructions.jsonl")
    assert len(rows) == 3 * QA_PER_MOVIE
    assert [r["movie_id"] for r in rows[:QA_PER_MOVIE]] == [movie_ids[0]] * QA_PER_MOVIE

    for movie_id in movie_ids:
        movie_dir = store.movie_dir(movie_id)
        frames = read_json(movie_dir / "frames.json")
        assert len(frames) == FRAMES_PER_MOVIE
        assert all(PROMPT_PREFIX_RE.match(f["prompt"]) for f in frames)
        pngs = sorted((movie_dir / "frames").glob("*.png"))
        assert len(pngs) == FRAMES_PER_MOVIE
        package = read_json(movie_dir / "package.json")
        assert package["manifest_hash"]
        plot_doc = read_json(movie_dir / "plot.json")
        assert plot_doc["style"]["token"] is not None

    stats = read_json(store.run_dir / "dataset" / "stats.json")
    assert stats["n_videos"] == 3
    assert stats["n_qa"] == 3 * QA_PER_MOVIE
    assert stats["qa_per_video"] == pytest.approx(QA_PER_MOVIE)
    assert stats["qa_per_image"] == pytest.approx(QA_PER_MOVIE / FRAMES_PER_MOVIE)


def test_generate_twice_from_scratch_is_byte_identical(tmp_path):
    pipeline_a, config_a = build_pipeline(tmp_path / "a", seed=311)
    pipeline_b, config_b = build_pipeline(tmp_path / "b", seed=311)
    assert pipeline_a.generate(load_themes_from(PHRASES)).ok
    assert pipeline_b.generate(load_themes_from(PHRASES)).ok
    snap_a = run_snapshot(config_a.workspace, 311)
    snap_b = run_snapshot(config_b.workspace, 311)
    assert snap_a == snap_b
    assert any(k.endswith("instructions.jsonl") for k in snap_a)


def test_rerun_after_success_makes_no_backend_calls(tmp_path):
    pipeline, config = build_pipeline(tmp_path)
    assert pipeline.generate(load_themes_from(PHRASES)).ok
    before = run_snapshot(config.workspace, 77)

    fresh = Pipeline(config)
    run = fresh.generate(load_themes_from(PHRASES))
    assert run.ok
    assert fresh.chat.calls.value == 0
    assert fresh.image.calls.value == 0
    for stage in run.stages:
        assert stage.completed == []
        assert len(stage.skipped) == 3
    assert run_snapshot(config.workspace, 77) == before


class _Boom(Exception):
    pass


@pytest.mark.parametrize("crash_stage,crash_hit", [
    ("plot", 0),
    ("plot", 2),
    ("style", 0),
    ("frames", 1),
    ("qa", 0),
    ("package", 0),
    ("package", 2),
    ("dataset", 0),
])
def test_crash_at_stage_boundary_resumes_to_identical_bytes(
    tmp_path, crash_stage, crash_hit
):
    ref_pipeline, ref_config = build_pipeline(tmp_path / "ref", seed=500)
    assert ref_pipeline.generate(load_themes_from(PHRASES)).ok
    reference = run_snapshot(ref_config.workspace, 500)

    hits = {"n": 0}

    def boom(stage, movie_id):
        if stage == crash_stage:
            if hits["n"] == crash_hit:
                raise _Boom(f"simulated crash after {stage}/{movie_id}")
            hits["n"] += 1

    crashing, config = build_pipeline(tmp_path / "crash", seed=500, after_stage=boom)
    with pytest.raises(_Boom):
        crashing.generate(load_themes_from(PHRASES))

    resumed = Pipeline(config)
    run = resumed.generate(load_themes_from(PHRASES))
    assert run.ok, run.failures
    assert run_snapshot(config.workspace, 500) == reference


def test_partial_qa_failure_reports_and_leaves_dataset_unsealed(tmp_path):
    pipeline, config = build_pipeline(tmp_path, skip_qa_for=(PHRASES[2],))
    run = pipeline.generate(load_themes_from(PHRASES))
    assert not run.ok
    assert len(run.failures) == 1
    failure = run.failures[0]
    assert failure["stage"] == "qa"

    store = RunStore.open(config.workspace, config.run_id())
    assert not store.dataset_done()
    rows = read_jsonl(store.run_dir / "dataset" / "instructions.jsonl")
    assert len(rows) == 2 * QA_PER_MOVIE
    assert failure["movie_id"] not in {r["movie_id"] for r in rows}


def test_config_drift_on_same_run_is_refused(tmp_path):
    pipeline, config = build_pipeline(tmp_path)
    assert pipeline.generate(load_themes_from(PHRASES)).ok

    drifted_path = write_config(
        tmp_path, seed=77, extra='\n[judge]\nkind = "mock"\nscript_path = "script.json"\n'
    )
    drifted = Pipeline(load_config(drifted_path))
    with pytest.raises(StageOrderViolation, match="different configuration"):
        drifted.open_store()


def test_stage_methods_skip_movies_missing_prerequisites(tmp_path):
    pipeline, config = build_pipeline(tmp_path)
    store = pipeline.open_store()
    report = pipeline.stage_style(store)
    assert report.completed == []
    assert report.skipped == []
    assert report.failures == []


def test_seed_override_changes_run_identity(tmp_path):
    config = load_config(write_config(tmp_path))
    override = dataclasses.replace(config, seed=900)
    pipeline = Pipeline(override)
    assert pipeline.generate(load_themes_from(PHRASES)).ok
    assert (config.workspace / "runs" / "run-900").is_dir()
    assert not (config.workspace / "runs" / "run-77").exists()
