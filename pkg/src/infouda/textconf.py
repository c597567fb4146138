"""Sectioned ``key = value`` text format shared by configs and world fixtures.

Grammar (one construct per line)::

    # comment            full-line comments start with '#' or ';'
    [section]            opens a section; names are [A-Za-z0-9_.-]+
    key = value          key is [A-Za-z0-9_.-]+, value is the rest of the line, stripped

Blank lines are ignored.  Keys are case-sensitive, there is no interpolation,
no default section, and a repeated section or key is an error.  Lists are
comma-separated values; typed access goes through :class:`Section`.
"""
from __future__ import annotations

import builtins
import re
from dataclasses import dataclass, field

import numpy as np

_SECTION = re.compile(r"^\[([A-Za-z0-9_.\-]+)\]$")
_ENTRY = re.compile(r"^([A-Za-z0-9_.\-]+)\s*=\s*(.*)$")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: int | None = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key + ': ' if key else ''}{message}{where}")


@dataclass
class Section:
    name: str
    entries: dict[str, str] = field(default_factory=dict)
    lines: dict[str, int] = field(default_factory=dict)
    _used: set[str] = field(default_factory=set)

    def _path(self, key):
        return f"{self.name}.{key}"

    def has(self, key: str) -> bool:
        return key in self.entries

    def raw(self, key: str, default=None):
        if key not in self.entries:
            if default is None:
                raise ConfigError("missing required key", self._path(key))
            return default
        self._used.add(key)
        return self.entries[key]

    def str(self, key, default=None) -> str:
        return self.raw(key, default)

    def int(self, key, default=None) -> int:
        val = self.raw(key, None if default is None else str(default))
        try:
            return int(val)
        except ValueError:
            raise ConfigError(f"expected an integer, got {val!r}", self._path(key)) from None

    def float(self, key, default=None) -> float:
        val = self.raw(key, None if default is None else repr(float(default)))
        try:
            return float(val)
        except ValueError:
            raise ConfigError(f"expected a number, got {val!r}", self._path(key)) from None

    def bool(self, key, default=None) -> bool:
        val = self.raw(key, None if default is None else str(default).lower())
        low = val.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {val!r}", self._path(key))

    def list(self, key, default=None, cast=builtins.str) -> list:
        if default is not None and key not in self.entries:
            return list(default)
        val = self.raw(key)
        items = [v.strip() for v in val.split(",") if v.strip()]
        try:
            return [cast(v) for v in items]
        except ValueError:
            raise ConfigError(f"bad list element in {val!r}", self._path(key)) from None

    def floats(self, key, default=None) -> list[float]:
        return self.list(key, default, float)

    def unused(self) -> list[str]:
        return [self._path(k) for k in self.entries if k not in self._used]


@dataclass
class Document:
    sections: dict[str, Section]

    def section(self, name: str, required: bool = True) -> Section:
        if name not in self.sections:
            if required:
                raise ConfigError("missing required section", f"[{name}]")
            return Section(name)
        return self.sections[name]

    def has(self, name: str) -> bool:
        return name in self.sections

    def check_unused(self, allowed_sections=None):
        """Reject any section or key nobody read."""
        for name, sec in self.sections.items():
            if allowed_sections is not None and name not in allowed_sections:
                raise ConfigError("unknown section", f"[{name}]")
            leftover = sec.unused()
            if leftover:
                raise ConfigError("unknown key", leftover[0], sec.lines.get(leftover[0].split(".", 1)[1]))


def parse(text: str) -> Document:
    sections: dict[str, Section] = {}
    current: Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = _SECTION.match(line)
        if m:
            name = m.group(1)
            if name in sections:
                raise ConfigError("duplicate section", f"[{name}]", lineno)
            current = sections[name] = Section(name)
            continue
        m = _ENTRY.match(line)
        if not m:
            raise ConfigError(f"unparsable line {raw!r}", "", lineno)
        if current is None:
            raise ConfigError("entry before any [section]", m.group(1), lineno)
        key, value = m.group(1), m.group(2).strip()
        if key in current.entries:
            raise ConfigError("duplicate key", f"{current.name}.{key}", lineno)
        current.entries[key] = value
        current.lines[key] = lineno
    return Document(sections)


def dump(sections: dict[str, dict[str, object]], header: str = "") -> str:
    out = []
    if header:
        out.extend(f"# {h}" for h in header.splitlines())
    for name, entries in sections.items():
        if out:
            out.append("")
        out.append(f"[{name}]")
        for key, value in entries.items():
            if isinstance(value, (list, tuple, np.ndarray)):
                value = ", ".join(_fmt(v) for v in value)
            else:
                value = _fmt(value)
            out.append(f"{key} = {value}")
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
