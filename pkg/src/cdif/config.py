"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Every key a command consumes is declared with a type and default; values
from a config file are overridden by command-line flags, and unknown keys are
rejected.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)

    parse.__name__ = f"optional_{conv.__name__}"
    return parse


PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _bool,
    "floats": _floats,
    "opt_float": _optional(float),
    "opt_str": _optional(str),
}


@dataclass(frozen=True)
class Option:
    name: str
    kind: str
    default: Any
    help: str = ""

    def parse(self, text):
        if not isinstance(text, str):
            return text
        try:
            return PARSERS[self.kind](text)
        except ValueError as e:
            raise ConfigError(f"bad value for {self.name}: {e}") from None


def format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return " ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values.get("seed")

    def dump(self) -> str:
        lines = [f"# cdif {self.command} resolved config"]
        lines += [f"{k} = {format_value(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:8]


def resolve(command: str, options: list[Option], file_values: dict[str, str],
            flag_values: dict[str, Any]) -> RunConfig:
    declared = {o.name: o for o in options}
    unknown = sorted(set(file_values) - set(declared))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    values = {o.name: o.default for o in options}
    for k, v in file_values.items():
        values[k] = declared[k].parse(v)
    for k, v in flag_values.items():
        if k not in declared:
            raise ConfigError(f"unknown option {k}")
        if v is not None:
            values[k] = declared[k].parse(v)
    return RunConfig(command, values)
