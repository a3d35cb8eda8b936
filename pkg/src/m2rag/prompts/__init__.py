"""Versioned prompt assets.

Each asset is a ``string.Template``; user-facing templates start with a
``# Task: <name>`` line so scripted backends can route on it.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

VERSION = "v1"


@lru_cache(maxsize=None)
def load(name: str, version: str = VERSION) -> Template:
    text = resources.files(__package__).joinpath(f"{name}.{version}.txt").read_text(encoding="utf-8")
    return Template(text)


def render(name: str, version: str = VERSION, **values: object) -> str:
    return load(name, version).substitute({k: str(v) for k, v in values.items()})


def guideline(name: str, version: str = VERSION) -> str:
    return load(name, version).template.strip()
