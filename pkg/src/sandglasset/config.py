"""Plain-text run configuration: one ``key = value`` per line.

Every key is optional and defaults to the published full-size setting;
unknown keys are an error so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    out_dir: str | None = None
    checkpoint: str | None = None

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        return self


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_optional_float(raw: str):
    low = raw.strip().lower()
    if low in ("none", "off"):
        return None
    return float(raw)


def _parsers():
    table = {}
    for f in dataclasses.fields(ModelConfig):
        if f.type in ("int", int):
            table[f.name] = ("model", f.name, int)
        elif f.type in ("float", float):
            table[f.name] = ("model", f.name, float)
        elif f.type in ("bool", bool):
            table[f.name] = ("model", f.name, _parse_bool)
        else:
            table[f.name] = ("model", f.name, str)
    for f in dataclasses.fields(TrainConfig):
        if f.name == "clip_norm":
            table[f.name] = ("train", f.name, _parse_optional_float)
        elif f.type in ("int", int):
            table[f.name] = ("train", f.name, int)
        elif f.type in ("float", float):
            table[f.name] = ("train", f.name, float)
        elif f.type in ("bool", bool):
            table[f.name] = ("train", f.name, _parse_bool)
        elif f.type in ("float | None",):
            table[f.name] = ("train", f.name, _parse_optional_float)
        else:
            table[f.name] = ("train", f.name, str)
    table["out_dir"] = ("run", "out_dir", str)
    table["checkpoint"] = ("run", "checkpoint", str)
    return table


_KEY_TABLE = _parsers()


def default_run_config() -> RunConfig:
    return RunConfig(model=ModelConfig(), train=TrainConfig())


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    model_kv = {}
    train_kv = {}
    run_kv = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEY_TABLE:
            raise ConfigError(f"{source}:{lineno}: unknown configuration key '{key}'")
        section, name, parse = _KEY_TABLE[key]
        try:
            parsed = parse(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from exc
        {"model": model_kv, "train": train_kv, "run": run_kv}[section][name] = parsed
    return RunConfig(
        model=ModelConfig(**model_kv),
        train=TrainConfig(**train_kv),
        **run_kv,
    )


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return default_run_config().validate()
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path)).validate()


def render_run_config(cfg: RunConfig) -> str:
    """Echo of the fully resolved configuration, one key per line."""
    lines = []
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name} = {getattr(cfg.model, f.name)}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(cfg.train, f.name)}")
    lines.append(f"out_dir = {cfg.out_dir}")
    lines.append(f"checkpoint = {cfg.checkpoint}")
    return "\n".join(lines)
