"""JSON experiment configs with line-precise error messages."""

from __future__ import annotations

import json
import re
from pathlib import Path

__all__ = ["ConfigError", "Config", "load_config"]


class ConfigError(ValueError):
    """Invalid experiment config; the message names the file and line."""


class Config:
    """Parsed JSON object plus enough of the source text to locate keys."""

    def __init__(self, data: dict, text: str = "", path: str = "<config>"):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}:1: top level must be a JSON object")
        self.data = data
        self.text = text
        self.path = str(path)

    @property
    def base_dir(self) -> Path:
        return Path(self.path).parent if self.path != "<config>" else Path(".")

    def line_of(self, key: str) -> int:
        match = re.search(r'"%s"\s*:' % re.escape(key), self.text)
        if match is None:
            return 1
        return self.text.count("\n", 0, match.start()) + 1

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"{self.path}:{self.line_of(key)}: {key}: {message}")

    def __contains__(self, key):
        return key in self.data

    def get(self, key, default=None):
        return self.data.get(key, default)

    def require(self, key):
        if key not in self.data:
            return self._missing(key)
        return self.data[key]

    def _missing(self, key):
        raise ConfigError(f"{self.path}:1: missing required key '{key}'")

    def number(self, key, default=None, positive=False, nonnegative=False) -> float:
        value = self.data.get(key, default) if default is not None else self.require(key)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, f"expected a number, got {json.dumps(value)}")
        if positive and not value > 0:
            raise self.error(key, "must be positive")
        if nonnegative and not value >= 0:
            raise self.error(key, "must be non-negative")
        return float(value)

    def integer(self, key, default=None, minimum=None) -> int:
        value = self.data.get(key, default) if default is not None else self.require(key)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, f"expected an integer, got {json.dumps(value)}")
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be at least {minimum}")
        return value

    def numbers(self, key, default=None, positive=False, nonnegative=False) -> list[float]:
        value = self.data.get(key, default) if default is not None else self.require(key)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not value:
            raise self.error(key, "expected a number or a non-empty list of numbers")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise self.error(key, f"expected numbers, found {json.dumps(v)}")
            if positive and not v > 0:
                raise self.error(key, "entries must be positive")
            if nonnegative and not v >= 0:
                raise self.error(key, "entries must be non-negative")
            out.append(float(v))
        return out

    def integers(self, key, default=None, minimum=None) -> list[int]:
        value = self.data.get(key, default) if default is not None else self.require(key)
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not value:
            raise self.error(key, "expected an integer or a non-empty list of integers")
        for v in value:
            if isinstance(v, bool) or not isinstance(v, int):
                raise self.error(key, f"expected integers, found {json.dumps(v)}")
            if minimum is not None and v < minimum:
                raise self.error(key, f"entries must be at least {minimum}")
        return list(value)

    def choice(self, key, options, default=None) -> str:
        value = self.data.get(key, default) if default is not None else self.require(key)
        if value not in options:
            raise self.error(key, f"expected one of {sorted(options)}, got {json.dumps(value)}")
        return value


def load_config(path) -> Config:
    """Read and parse a JSON config, reporting syntax errors by line and column."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    return Config(data, text, path)
