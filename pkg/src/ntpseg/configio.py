"""Flat key-value config files and CLI override plumbing.

The config file is a human-readable text document of `key = value` lines
(# comments allowed). Keys are the field names of CodecConfig, ModelConfig,
LossConfig, and TrainConfig; the four field sets are disjoint, so keys are
flat. CLI flags use the dotted spelling --<section>.<field-with-dashes>;
each flag maps to exactly one config key.

vocab_size and k_heads are derived (from the codec and loss sections) unless
explicitly overridden, and het_start_epoch resolves its -1 default to 60% of
the epoch count at train time.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from ntpseg.codec import CodecConfig
from ntpseg.losses import LossConfig
from ntpseg.model import ModelConfig
from ntpseg.sequence import VocabLayout
from ntpseg.trainer import TrainConfig

SECTIONS = {
    "codec": CodecConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}

DERIVED = {"vocab_size", "k_heads"}


class ConfigError(ValueError):
    pass


def _field_map() -> dict[str, tuple[str, dataclasses.Field]]:
    out = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in out:
                raise AssertionError(f"duplicate config field {f.name}")
            out[f.name] = (section, f)
    return out


FIELDS = _field_map()


def default_flat() -> dict:
    flat = {}
    for section, cls in SECTIONS.items():
        obj = cls()
        for f in dataclasses.fields(cls):
            flat[f.name] = getattr(obj, f.name)
    return flat


def parse_value(name: str, text: str):
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    ftype = FIELDS[name][1].type
    text = text.strip()
    if ftype in ("bool", bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name} expects a boolean, got {text!r}")
    if ftype in ("int", int):
        return int(text)
    if ftype in ("float", float):
        return float(text)
    return text


def load_config_file(path) -> dict:
    flat = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if "." in key:
            section, key = key.split(".", 1)
            if key in FIELDS and FIELDS[key][0] != section:
                raise ConfigError(f"{path}:{line_no}: key {key!r} is not in section {section!r}")
        flat[key] = parse_value(key, val)
    return flat


def save_config_file(path, flat: dict) -> None:
    lines = []
    for section, cls in SECTIONS.items():
        lines.append(f"# {section}")
        for f in dataclasses.fields(cls):
            if f.name in flat:
                v = flat[f.name]
                lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def resolve_configs(flat: dict):
    """flat dict -> (CodecConfig, ModelConfig, LossConfig, TrainConfig)."""
    merged = default_flat()
    for key, val in flat.items():
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = val
    built = {}
    for section, cls in SECTIONS.items():
        kwargs = {f.name: merged[f.name] for f in dataclasses.fields(cls)}
        built[section] = cls(**kwargs)
    codec, model, loss = built["codec"], built["model"], built["loss"]
    if "vocab_size" not in flat:
        model.vocab_size = VocabLayout.from_codec(codec).vocab_size
    if "k_heads" not in flat:
        model.k_heads = loss.k
    if model.k_heads < loss.k:
        raise ConfigError(f"model k_heads {model.k_heads} < loss k {loss.k}")
    return codec, model, loss, built["train"]


def flat_from_configs(codec, model, loss, train) -> dict:
    out = {}
    for obj in (codec, model, loss, train):
        out.update(dataclasses.asdict(obj))
    return out
