"""Tokenization shared by retrieval, features, evaluation and scoring."""

from __future__ import annotations

import re
from functools import lru_cache

_WORD = re.compile(r"[^\W_]+")

STOPWORDS = frozenset(
    """
    a an the of by in on at to for with and or is are was were be been being
    which what who whom whose how many much does do did this that these those
    it its from as has have had number there their than into about
    """.split()
)


def tokenize(text: str) -> list[str]:
    """Case-fold and split on anything that is not a letter or digit."""
    return _WORD.findall(text.casefold())


def words_with_case(text: str) -> list[str]:
    """Same split as :func:`tokenize` but keeps the original casing."""
    return _WORD.findall(text)


def content_tokens(text: str) -> list[str]:
    toks = tokenize(text)
    kept = [t for t in toks if t not in STOPWORDS]
    return kept if kept else toks


@lru_cache(maxsize=65536)
def stem(token: str) -> str:
    # crude suffix stripping: "cites"/"cited" -> "cit", "papers" -> "paper"
    for suffix in ("ing", "ed", "es", "s"):
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            return token[: -len(suffix)]
    return token


def is_number(text: str) -> bool:
    return re.fullmatch(r"[-+]?\d+(\.\d+)?", text.strip()) is not None


@lru_cache(maxsize=65536)
def stem_set(text: str) -> frozenset[str]:
    return frozenset(stem(t) for t in tokenize(text))


@lru_cache(maxsize=4096)
def content_stem_set(text: str) -> frozenset[str]:
    return frozenset(stem(t) for t in content_tokens(text))


@lru_cache(maxsize=65536)
def token_set(text: str) -> frozenset[str]:
    return frozenset(tokenize(text))
