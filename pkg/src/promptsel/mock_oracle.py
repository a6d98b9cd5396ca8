"""Deterministic offline stand-in for the chat and embedding endpoints.

The oracle reads the prompts this package renders. For ranking prompts it
scores each candidate line by lexical overlap with the user block (shared
tokens weighted by inverse candidate frequency), perturbs the normalized
scores with seeded Gaussian noise of amplitude ``noise`` and answers with the
full index list. For summarization prompts it returns the most frequent
content tokens of the listed items.
"""

from __future__ import annotations

import math
import random
import re
from collections import Counter
from functools import lru_cache

import numpy as np

from .utils import derive_seed, sha256_text

USER_MARK = "User information:\n"
CANDIDATE_MARK = "Candidate items:\n"
END_MARK = "\n\nOnce more:"
SUMMARY_ITEMS_MARK = "following items:\n"
SUMMARY_ASK = "\n\nSummarize the user's preferences"

SUMMARY_TOKENS = 25
GIBBERISH = "I am sorry, but I would rather describe each of these items in detail before ranking anything."

_TOKEN_RE = re.compile(r"[a-z0-9]+")
STOPWORDS = frozenset("""
a an and are as at be by for from has have in is it its of on or that the this to was with
title category description none preferred themes
""".split())


class UnrecognizedPrompt(ValueError):
    pass


@lru_cache(maxsize=500_000)
def content_tokens(line: str) -> tuple[str, ...]:
    return tuple(t for t in _TOKEN_RE.findall(line.lower()) if t not in STOPWORDS)


def _between(text: str, start: str, end: str) -> str | None:
    i = text.find(start)
    if i < 0:
        return None
    i += len(start)
    j = text.find(end, i)
    if j < 0:
        return None
    return text[i:j]


def _parse_candidates(block: str) -> list[str]:
    lines = []
    for expected, raw in enumerate(block.strip("\n").split("\n"), start=1):
        num, sep, rest = raw.partition(". ")
        if not sep or not num.isdigit() or int(num) != expected:
            raise UnrecognizedPrompt(f"bad candidate line {raw[:40]!r}")
        lines.append(rest)
    return lines


def score_candidates(user_block: str, candidate_lines: list[str]) -> list[float]:
    user_counts: Counter = Counter()
    for line in user_block.split("\n"):
        user_counts.update(content_tokens(line))
    cand_sets = [frozenset(content_tokens(line)) for line in candidate_lines]
    df: Counter = Counter()
    for s in cand_sets:
        df.update(s)
    n = len(cand_sets)
    scores = []
    for s in cand_sets:
        total = 0.0
        for t in s:
            c = user_counts.get(t)
            if c:
                total += math.log((n + 1) / (df[t] + 0.5)) * (1.0 + math.log(c))
        scores.append(total / math.sqrt(len(s)) if s else 0.0)
    return scores


def _rank(prompt: str, seed: int, noise: float, attempt: int) -> str:
    user_block = _between(prompt, USER_MARK, CANDIDATE_MARK)
    cand_block = _between(prompt, CANDIDATE_MARK, END_MARK)
    if user_block is None or cand_block is None:
        raise UnrecognizedPrompt("inference prompt without user or candidate block")
    lines = _parse_candidates(cand_block)
    scores = score_candidates(user_block, lines)
    top = max(scores) if scores else 0.0
    if top > 0:
        scores = [s / top for s in scores]
    if noise > 0:
        rng = random.Random(derive_seed(seed, sha256_text(prompt), attempt))
        scores = [s + noise * rng.gauss(0.0, 1.0) for s in scores]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return "[" + ",".join(str(i + 1) for i in order) + "]"


def _summarize(prompt: str) -> str:
    block = _between(prompt, SUMMARY_ITEMS_MARK, SUMMARY_ASK)
    if block is None:
        raise UnrecognizedPrompt("summarization prompt without item list")
    counts: Counter = Counter()
    first: dict[str, int] = {}
    for line in block.split("\n"):
        for tok in content_tokens(line):
            counts[tok] += 1
            first.setdefault(tok, len(first))
    top = sorted(counts, key=lambda t: (-counts[t], first[t]))[:SUMMARY_TOKENS]
    return "Preferred themes: " + ", ".join(top) + "."


def mock_oracle_complete(
    prompt: str,
    attempt: int = 1,
    seed: int = 0,
    noise: float = 0.0,
    failures: int = 0,
) -> str:
    """Answer a rendered prompt; the first ``failures`` attempts return unparseable text."""
    is_inference = CANDIDATE_MARK in prompt and USER_MARK in prompt
    is_summary = SUMMARY_ASK in prompt
    if not (is_inference or is_summary):
        raise UnrecognizedPrompt("prompt is neither a ranking nor a summarization prompt")
    if attempt <= failures:
        return GIBBERISH
    if is_inference:
        return _rank(prompt, seed, noise, attempt)
    return _summarize(prompt)


@lru_cache(maxsize=100_000)
def _token_vector(token: str, seed: int, dim: int) -> np.ndarray:
    vec = np.random.default_rng(derive_seed("embed", seed, token)).standard_normal(dim)
    vec.setflags(write=False)
    return vec


def mock_embedding(text: str, seed: int = 0, dim: int = 64) -> np.ndarray:
    """Hashed bag-of-words vector: sum of seeded per-token Gaussian vectors.

    Texts without content tokens hash as a whole, so the vector is never zero.
    """
    toks = content_tokens(text) or (f"<text>{text}",)
    out = np.zeros(dim)
    for t in toks:
        out += _token_vector(t, seed, dim)
    return out
