"""Named hyper-parameter bundles shipped with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources


class UnknownPreset(KeyError):
    def __init__(self, name: str, available: list[str]):
        self.name = name
        self.available = available
        super().__init__(f"unknown preset {name!r}; available: {', '.join(available)}")

    def __str__(self) -> str:
        return self.args[0]


@lru_cache(maxsize=1)
def _all() -> dict:
    text = resources.files("ufnet.resources").joinpath("presets.json").read_text(encoding="utf-8")
    return json.loads(text)


def names(group: str | None = None) -> list[str]:
    data = _all()
    groups = [group] if group else list(data)
    return sorted(n for g in groups for n in data[g])


def get(name: str, group: str | None = None) -> dict:
    """Return a fresh copy of a preset's settings."""
    data = _all()
    for g in [group] if group else list(data):
        if name in data[g]:
            return json.loads(json.dumps(data[g][name]))
    raise UnknownPreset(name, names(group))


def group_of(name: str) -> str:
    for g, entries in _all().items():
        if name in entries:
            return g
    raise UnknownPreset(name, names())
