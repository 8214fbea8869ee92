"""Run configuration loaded from a single TOML file.

One file describes everything a run needs: backend wiring, story expansion
shape, question budget, image size, and the workspace path. The seed is
mandatory; nothing in the pipeline may fall back to wall-clock entropy.

Secrets never live in the file. Auth tokens are read at request time from
the environment variable named by ``auth_env``, and endpoint strings may
embed ``${VAR}`` references that are substituted from the environment when
the config loads. Interpolation applies to endpoints only; every other
value is taken literally.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass
from pathlib import Path

try:  # tomllib landed in 3.11; tomli is the same parser for 3.10
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .backends import BackendConfig
from .dataset import QAConfig
from .errors import ConfigError
from .story import TEMPLATE_STAGES, ExpansionConfig
from .util import content_hash

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

KNOWN_SECTIONS = (
    "run",
    "chat",
    "image",
    "embedding",
    "judge",
    "expansion",
    "qa",
    "style",
    "keyframes",
    "templates",
    "metrics",
)


@dataclass
class StyleStageConfig:
    n_reference_scenes: int = 5
    image_size: int = 512
    trainer: str = "mock"  # "mock" | "command"
    trainer_command: str = ""
    trainer_timeout: float = 600.0

    def validate(self) -> None:
        if self.trainer not in ("mock", "command"):
            raise ConfigError(f"style.trainer must be mock or command, got {self.trainer!r}")
        if self.trainer == "command" and "{workdir}" not in self.trainer_command:
            raise ConfigError("style.trainer_command must contain {workdir}")
        if self.n_reference_scenes < 1:
            raise ConfigError("style.n_reference_scenes must be >= 1")
        if self.image_size < 64:
            raise ConfigError("style.image_size must be >= 64")


@dataclass
class KeyframeStageConfig:
    width: int = 512
    height: int = 512
    max_parallel: int = 4

    def validate(self) -> None:
        if self.width < 64 or self.height < 64:
            raise ConfigError("keyframes.width/height must be >= 64")
        if self.max_parallel < 1:
            raise ConfigError("keyframes.max_parallel must be >= 1")


@dataclass
class PipelineConfig:
    seed: int
    workspace: Path
    chat: BackendConfig
    image: BackendConfig
    embedding: BackendConfig
    judge: BackendConfig
    expansion: ExpansionConfig
    qa: QAConfig
    style: StyleStageConfig
    keyframes: KeyframeStageConfig
    template_dir: Path | None = None
    svr_model: Path | None = None
    config_hash: str = ""

    def run_id(self) -> str:
        return f"run-{self.seed}"


def _interpolate_env(value: str, where: str) -> str:
    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in os.environ:
            raise ConfigError(
                f"{where} references ${{{name}}} but the variable is not set"
            )
        return os.environ[name]

    return _ENV_REF.sub(sub, value)


def _typed(table: dict, key: str, kinds, default, where: str):
    if key not in table:
        return default
    value = table[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigError(f"{where}.{key} has the wrong type: {value!r}")
    return value


def _reject_unknown(table: dict, known, where: str) -> None:
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"[{where}] has unknown keys: {', '.join(unknown)}")


def _dataclass_section(cls, table: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _reject_unknown(table, fields, where)
    kwargs = {}
    for name, value in table.items():
        if name == "genres" and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc
    obj.validate()
    return obj


def _backend_section(name: str, table: dict, base_dir: Path) -> BackendConfig:
    cfg = _dataclass_section(BackendConfig, dict(table), name)
    if cfg.endpoint:
        cfg.endpoint = _interpolate_env(cfg.endpoint, f"{name}.endpoint")
    if cfg.script_path:
        path = (base_dir / cfg.script_path).resolve()
        if not path.exists():
            raise ConfigError(f"{name}.script_path not found: {path}")
        cfg.script_path = str(path)
    if cfg.kind == "mock" and name in ("chat", "judge") and not cfg.script_path:
        raise ConfigError(f"mock {name} backend requires script_path")
    return cfg


def load_config(path) -> PipelineConfig:
    """Parse and validate one TOML file; all referenced files must exist."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc

    base_dir = path.parent.resolve()
    _reject_unknown(data, KNOWN_SECTIONS, "config")
    for section in KNOWN_SECTIONS:
        if section in data and not isinstance(data[section], dict):
            raise ConfigError(f"[{section}] must be a table")

    run = data.get("run", {})
    _reject_unknown(run, ("seed", "workspace"), "run")
    if "seed" not in run:
        raise ConfigError("run.seed is required; runs never seed from the clock")
    seed = run["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"run.seed must be an integer, got {seed!r}")
    workspace = (base_dir / _typed(run, "workspace", str, "workspace", "run")).resolve()

    if "chat" not in data:
        raise ConfigError("config needs a [chat] backend section")
    chat = _backend_section("chat", data["chat"], base_dir)
    image = _backend_section("image", data.get("image", {"kind": "mock"}), base_dir)
    embedding = _backend_section(
        "embedding", data.get("embedding", {"kind": "mock"}), base_dir
    )
    judge = (
        _backend_section("judge", data["judge"], base_dir)
        if "judge" in data
        else chat
    )

    expansion = _dataclass_section(
        ExpansionConfig, dict(data.get("expansion", {})), "expansion"
    )
    qa = _dataclass_section(QAConfig, dict(data.get("qa", {})), "qa")
    style = _dataclass_section(StyleStageConfig, dict(data.get("style", {})), "style")
    keyframes = _dataclass_section(
        KeyframeStageConfig, dict(data.get("keyframes", {})), "keyframes"
    )

    template_dir = None
    templates = data.get("templates", {})
    _reject_unknown(templates, ("directory",), "templates")
    if templates.get("directory"):
        template_dir = (base_dir / templates["directory"]).resolve()
        if not template_dir.is_dir():
            raise ConfigError(f"templates.directory not found: {template_dir}")
        for stage in TEMPLATE_STAGES:
            if not (template_dir / f"{stage}.txt").exists():
                raise ConfigError(
                    f"templates.directory is missing {stage}.txt: {template_dir}"
                )

    svr_model = None
    metrics = data.get("metrics", {})
    _reject_unknown(metrics, ("svr_model",), "metrics")
    if metrics.get("svr_model"):
        svr_model = (base_dir / metrics["svr_model"]).resolve()
        if not svr_model.exists():
            raise ConfigError(f"metrics.svr_model not found: {svr_model}")
        ranges = svr_model.with_name(svr_model.name + ".ranges")
        if not ranges.exists():
            raise ConfigError(f"metrics.svr_model has no ranges file: {ranges}")

    return PipelineConfig(
        seed=seed,
        workspace=workspace,
        chat=chat,
        image=image,
        embedding=embedding,
        judge=judge,
        expansion=expansion,
        qa=qa,
        style=style,
        keyframes=keyframes,
        template_dir=template_dir,
        svr_model=svr_model,
        config_hash=content_hash(data),
    )


def load_backend_table(path, section: str) -> BackendConfig:
    """One backend table out of a TOML file, for metric and eval tooling."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"backend config not found: {path}")
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"backend config {path} is not valid TOML: {exc}") from exc
    if section not in data or not isinstance(data[section], dict):
        raise ConfigError(f"backend config {path} has no [{section}] table")
    return _backend_section(section, data[section], path.parent.resolve())
