"""Flat key=value run configuration with section prefixes.

The format is deliberately plain text so resolved snapshots diff cleanly:
one `section.key=value` per line, `#` comments, order preserved. Sections:
`data.*` feed the synthetic generator, `train.*` the trainer, `run.*`
everything else (n_samples, fractions, tasks...).
"""

from __future__ import annotations

import dataclasses

from .model import TrainConfig
from .synthdata import GeneratorSpec


class ConfigError(Exception):
    pass


def parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if "," in raw:
        return tuple(parse_value(p) for p in raw.split(","))
    return raw


def parse_lines(lines, source="<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, _, val = stripped.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} missing section prefix")
        out[key] = parse_value(val)
    return out


def load_config(path) -> dict:
    with open(path) as f:
        return parse_lines(f, source=str(path))


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = dict(cfg)
    cfg.update(parse_lines(overrides, source="--set"))
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def build_train_config(cfg: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    section = _section(cfg, "train.")
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(f"unknown train.* keys: {sorted(unknown)}")
    for key in ("fsq_levels", "club_disable_layers"):
        if key in section and not isinstance(section[key], tuple):
            section[key] = (section[key],)
    return TrainConfig(**section).validate()


def build_generator_spec(cfg: dict) -> GeneratorSpec:
    fields = {f.name for f in dataclasses.fields(GeneratorSpec)}
    section = _section(cfg, "data.")
    dims = {}
    for key in list(section):
        if key.startswith("dim_"):
            dims[key[4:]] = section.pop(key)
    unknown = set(section) - fields - {"n_samples", "fractions"}
    if unknown:
        raise ConfigError(f"unknown data.* keys: {sorted(unknown)}")
    section.pop("n_samples", None)
    section.pop("fractions", None)
    if dims:
        section["modality_dims"] = dims
    return GeneratorSpec(**section)


def format_config(cfg: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(cfg.items()))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def write_snapshot(cfg: dict, path) -> None:
    with open(path, "w") as f:
        f.write(format_config(cfg))
