# dge/config.py
# Purpose: load a RunConfig from an INI file (`key = value` under [section]),
# apply command-line overrides and validate the merged result.

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Any, Mapping

from pydantic import ValidationError

from dge.errors import ConfigError
from dge.schemas import RunConfig

TOP_LEVEL = "run"
SECTIONS = ("model", "dataset", "optim", "train")


def _format_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "config"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def validate(data: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(dict(data))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_format_error(e)}") from e


def parse_ini(text: str, source: str = "<string>") -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    data: dict[str, Any] = {}
    for section in parser.sections():
        if section == TOP_LEVEL:
            data.update(dict(parser.items(section)))
        elif section in SECTIONS:
            data[section] = dict(parser.items(section))
        else:
            raise ConfigError(f"{source}: unknown section [{section}], expected one of {[TOP_LEVEL, *SECTIONS]}")
    return data


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """File values, then overrides ("section.key" or top-level names), validated once merged."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        data = parse_ini(text, str(path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        target = data.setdefault(section, {}) if section else data
        target[name] = value
    return validate(data)


def cli_overrides(seed=None, out=None, budget=None, phi=None, precision=None) -> dict[str, Any]:
    return {"seed": seed, "out_dir": None if out is None else str(out), "model.gamma": budget,
            "model.phi": phi, "train.precision": precision}
