"""Loader for the versioned prompt templates shipped as text assets.

Each asset's first line is ``version: N``; the rest is a string.Template
body. Templates use ``$name`` placeholders so braces in payload text never
collide with the substitution syntax.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template


class PromptError(Exception):
    pass


@lru_cache(maxsize=None)
def _load(name: str) -> tuple[int, Template]:
    try:
        raw = resources.files("evolab.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    except FileNotFoundError as exc:
        raise PromptError(f"no prompt template named {name!r}") from exc
    first, _, body = raw.partition("\n")
    if not first.startswith("version:"):
        raise PromptError(f"template {name!r} missing version header")
    return int(first.split(":", 1)[1].strip()), Template(body.strip())


def template_version(name: str) -> int:
    return _load(name)[0]


def render(name: str, **fields: str) -> str:
    version, template = _load(name)
    try:
        body = template.substitute(**fields)
    except KeyError as exc:
        raise PromptError(f"template {name!r} missing field {exc}") from exc
    return f"[template {name} v{version}]\n{body}"
