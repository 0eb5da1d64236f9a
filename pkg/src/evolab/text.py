"""Small text utilities used across the sim harness and diagnostics."""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9_]+")
# Tool-style identifier: lowercase words joined by at least one underscore.
_KEY_RE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)+$")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.casefold())


def is_key_shaped(token: str) -> bool:
    return bool(_KEY_RE.match(token))


def first_key_token(text: str) -> str | None:
    """First tool-style identifier in the text, or None."""
    for tok in tokenize(text):
        if is_key_shaped(tok):
            return tok
    return None


def keys_in(text: str, allowed: set[str] | frozenset[str]) -> list[str]:
    """Allowed keys mentioned in the text, in order of first appearance."""
    seen: list[str] = []
    for tok in tokenize(text):
        if tok in allowed and tok not in seen:
            seen.append(tok)
    return seen


def bigram_keys(text: str) -> list[str]:
    """Candidate identifiers formed by joining adjacent word tokens.

    Queries talk about "the amber harbor register" while tools are registered
    as amber_harbor, so matching needs the joined form too.
    """
    toks = tokenize(text)
    return [f"{a}_{b}" for a, b in zip(toks, toks[1:])]


def normalize_answer(text: str) -> str:
    """Normalization used by exact-match scoring.

    Trims, casefolds, collapses internal whitespace, and strips one layer of
    surrounding quotes. Punctuation is deliberately kept.
    """
    out = " ".join(text.strip().casefold().split())
    for quote in ('"', "'"):
        if len(out) >= 2 and out.startswith(quote) and out.endswith(quote):
            out = out[1:-1].strip()
            break
    return out
