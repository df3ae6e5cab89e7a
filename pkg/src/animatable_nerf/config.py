"""Application configuration.

Precedence, lowest first: built-in defaults, environment variables
(``ANERF_LOG_LEVEL``, ``ANERF_THREADS``, ``ANERF_SEED``), the config file,
explicit overrides.

Config file format, one setting per line::

    # comment
    train.lambda_d = 0.1
    deformation.canonical_preset = X
    run.seed = 7
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from animatable_nerf.deformation import DeformationConfig
from animatable_nerf.geometry import MeshConfig
from animatable_nerf.radiance_field import FieldArch
from animatable_nerf.renderer import RenderConfig
from animatable_nerf.trainer import TrainConfig

logger = logging.getLogger(__name__)

LOG_LEVELS = ("debug", "info", "warning", "error")
RUN_SECTION = "run"
_SECTIONS = {
    "deformation": DeformationConfig,
    "field": FieldArch,
    "render": RenderConfig,
    "train": TrainConfig,
    "mesh": MeshConfig,
}
# Keys that are derived at run time and never read from text.
_INTERNAL = {("deformation", "canonical_pose"), ("field", "latent_dim"), ("field", "view_direction")}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    deformation: DeformationConfig = dataclasses.field(default_factory=DeformationConfig)
    field: FieldArch = dataclasses.field(default_factory=FieldArch)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    mesh: MeshConfig = dataclasses.field(default_factory=MeshConfig)
    log_level: str = "info"
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {', '.join(LOG_LEVELS)}, got {self.log_level!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


def _keys(section: str) -> dict[str, object]:
    """Configurable keys of a section with their default values."""
    if section == RUN_SECTION:
        defaults = Config()
        return {"log_level": defaults.log_level, "threads": defaults.threads, "seed": defaults.seed}
    cls = _SECTIONS[section]
    instance = cls()
    return {
        f.name: getattr(instance, f.name)
        for f in fields(cls)
        if f.init and (section, f.name) not in _INTERNAL
    }


def _parse_value(raw: object, default: object) -> object:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """``section.key`` -> typed value for every setting line of ``text``."""
    settings: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        try:
            settings[key] = _coerce(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return settings


def _coerce(key: str, raw: object) -> object:
    section, dot, name = key.partition(".")
    if not dot or (section != RUN_SECTION and section not in _SECTIONS):
        raise ConfigError(f"unknown section in {key!r}")
    keys = _keys(section)
    if name not in keys:
        raise ConfigError(f"unknown key {key!r}")
    try:
        return _parse_value(raw, keys[name])
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None


def _from_env() -> dict[str, object]:
    env = {
        "run.log_level": os.environ.get("ANERF_LOG_LEVEL", ""),
        "run.threads": os.environ.get("ANERF_THREADS", ""),
        "run.seed": os.environ.get("ANERF_SEED", ""),
    }
    settings = {}
    for key, raw in env.items():
        if raw:
            try:
                settings[key] = _coerce(key, raw.lower() if key == "run.log_level" else raw)
            except ConfigError as e:
                raise ConfigError(f"environment: {e}") from None
    return settings


def build_config(settings: dict[str, object]) -> Config:
    sections: dict[str, dict[str, object]] = {}
    for key, value in settings.items():
        section, _, name = key.partition(".")
        sections.setdefault(section, {})[name] = value
    try:
        parts = {name: replace(cls(), **sections.get(name, {})) for name, cls in _SECTIONS.items()}
        return Config(**parts, **sections.get(RUN_SECTION, {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> Config:
    settings = _from_env()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no config file at {path}")
        settings.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            settings[key] = _coerce(key, value)
    config = build_config(settings)
    logger.debug("Config loaded (%d explicit settings)", len(settings))
    return config


def format_config(config: Config) -> str:
    lines = []
    for section in (RUN_SECTION, *_SECTIONS):
        source = config if section == RUN_SECTION else getattr(config, section)
        for name in _keys(section):
            lines.append(f"{section}.{name} = {_format_value(getattr(source, name))}")
    return "\n".join(lines) + "\n"
