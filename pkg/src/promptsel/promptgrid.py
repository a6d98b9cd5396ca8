"""Prompt grid enumeration, user-history sampling and prompt rendering."""

from __future__ import annotations

import fnmatch
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .catalog import EvalInstance, Item, UserHistory
from .utils import byte_tokens, derive_seed, normalize_ws, sha256_text


class Approach(str, Enum):
    SAMPLING = "Sampling"
    SUMMARIZING = "Summarizing"


class Format(str, Enum):
    RANDOM = "R"
    LATEST = "L"
    EXTRACT = "E"


class AttrCombo(str, Enum):
    T = "T"
    C = "C"
    TC = "TC"
    TD = "TD"
    CD = "CD"
    TCD = "TCD"

    @property
    def has_title(self) -> bool:
        return "T" in self.value

    @property
    def has_category(self) -> bool:
        return "C" in self.value

    @property
    def has_description(self) -> bool:
        return "D" in self.value


APPROACH_ORDER = list(Approach)
FORMAT_ORDER = list(Format)
ATTR_ORDER = list(AttrCombo)

_NAME_RE = re.compile(r"^(S?)([RLE])-(\d+)-(TCD|TC|TD|CD|T|C)$")


class ContextOverflowError(Exception):
    def __init__(self, spec: "PromptSpec | None", user_id: str, tokens: int, limit: int):
        self.spec = spec
        self.user_id = user_id
        self.tokens = tokens
        self.limit = limit
        name = spec.name if spec else "?"
        super().__init__(f"prompt for {name} / user {user_id} needs ~{tokens} tokens, limit {limit}")


@dataclass(frozen=True)
class PromptSpec:
    approach: Approach
    format: Format
    k: int
    attrs: AttrCombo

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")

    @property
    def name(self) -> str:
        prefix = "S" if self.approach is Approach.SUMMARIZING else ""
        return f"{prefix}{self.format.value}-{self.k}-{self.attrs.value}"

    @property
    def sort_key(self) -> tuple:
        return (APPROACH_ORDER.index(self.approach), FORMAT_ORDER.index(self.format),
                self.k, ATTR_ORDER.index(self.attrs))

    @classmethod
    def parse(cls, name: str) -> "PromptSpec":
        m = _NAME_RE.match(name.strip())
        if not m:
            raise ValueError(f"not a prompt name: {name!r}")
        summ, fmt, k, attrs = m.groups()
        return cls(Approach.SUMMARIZING if summ else Approach.SAMPLING, Format(fmt), int(k), AttrCombo(attrs))

    def __str__(self) -> str:
        return self.name


def _default_summary_sizes() -> dict[AttrCombo, int]:
    # description-bearing summaries stay at 30 items to fit the context window
    return {AttrCombo.T: 100, AttrCombo.C: 100, AttrCombo.TC: 100,
            AttrCombo.TD: 30, AttrCombo.CD: 30, AttrCombo.TCD: 30}


@dataclass(frozen=True)
class GridConfig:
    formats: tuple[Format, ...] = tuple(Format)
    sizes: tuple[int, ...] = (5, 10, 20, 30)
    attrs: tuple[AttrCombo, ...] = tuple(AttrCombo)
    summary_sizes: Mapping[AttrCombo, int] = field(default_factory=_default_summary_sizes)
    include_sampling: bool = True
    include_summarizing: bool = True
    context_limit: int = 16384
    summary_max_words: int = 150

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "GridConfig":
        data = dict(data or {})
        kwargs: dict = {}
        if "formats" in data:
            kwargs["formats"] = tuple(Format(f) for f in data["formats"])
        if "sizes" in data:
            kwargs["sizes"] = tuple(int(k) for k in data["sizes"])
        if "attrs" in data:
            kwargs["attrs"] = tuple(AttrCombo(a) for a in data["attrs"])
        if "summary_sizes" in data:
            kwargs["summary_sizes"] = {AttrCombo(a): int(k) for a, k in data["summary_sizes"].items()}
        for key in ("include_sampling", "include_summarizing"):
            if key in data:
                kwargs[key] = bool(data[key])
        for key in ("context_limit", "summary_max_words"):
            if key in data:
                kwargs[key] = int(data[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "formats": [f.value for f in self.formats],
            "sizes": list(self.sizes),
            "attrs": [a.value for a in self.attrs],
            "summary_sizes": {a.value: k for a, k in self.summary_sizes.items()},
            "include_sampling": self.include_sampling,
            "include_summarizing": self.include_summarizing,
            "context_limit": self.context_limit,
            "summary_max_words": self.summary_max_words,
        }


def enumerate_grid(config: GridConfig | None = None) -> list[PromptSpec]:
    config = config or GridConfig()
    if not config.formats or not config.attrs:
        raise ValueError("grid needs at least one format and one attribute combination")
    if config.include_sampling and not config.sizes:
        raise ValueError("sampling grid needs at least one size")
    specs: list[PromptSpec] = []
    if config.include_sampling:
        for fmt in config.formats:
            for k in config.sizes:
                for attrs in config.attrs:
                    specs.append(PromptSpec(Approach.SAMPLING, fmt, k, attrs))
    if config.include_summarizing:
        missing = [a.value for a in config.attrs if a not in config.summary_sizes]
        if missing:
            raise ValueError(f"summary_sizes lacks entries for {missing}")
        for fmt in config.formats:
            for attrs in config.attrs:
                specs.append(PromptSpec(Approach.SUMMARIZING, fmt, config.summary_sizes[attrs], attrs))
    if not specs:
        raise ValueError("grid is empty")
    return sorted(specs, key=lambda s: s.sort_key)


def filter_specs(specs: Iterable[PromptSpec], patterns: str | Sequence[str] | None) -> list[PromptSpec]:
    """Keep specs whose name matches any comma-separated glob pattern."""
    if not patterns:
        return list(specs)
    if isinstance(patterns, str):
        patterns = [p.strip() for p in patterns.split(",") if p.strip()]
    return [s for s in specs if any(fnmatch.fnmatchcase(s.name, p) for p in patterns)]


# ---------------------------------------------------------------------------
# sampling; all samplers return item ids newest-first


def _newest_first(history: UserHistory, positions: Iterable[int]) -> list[str]:
    return [history.events[i].item_id for i in sorted(positions, reverse=True)]


def sample_latest_k(history: UserHistory, k: int) -> list[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(history.events)
    return _newest_first(history, range(max(0, n - k), n))


def sample_random_k(history: UserHistory, k: int, seed: int) -> list[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(history.events)
    if k >= n:
        return sample_latest_k(history, n) if n else []
    picked = random.Random(seed).sample(range(n), k)
    return _newest_first(history, picked)


def max_similarity(history_vecs: np.ndarray, candidate_vecs: np.ndarray,
                   history_ids: Sequence[str] = (), candidate_ids: Sequence[str] = ()) -> np.ndarray:
    """Per history row, the maximum cosine similarity to any candidate row."""
    h = np.asarray(history_vecs, dtype=float)
    c = np.asarray(candidate_vecs, dtype=float)
    if h.ndim != 2 or c.ndim != 2 or h.shape[1] != c.shape[1]:
        raise ValueError(f"embedding shapes disagree: {h.shape} vs {c.shape}")
    for vecs, ids in ((h, history_ids), (c, candidate_ids)):
        norms = np.linalg.norm(vecs, axis=1)
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            label = ids[bad[0]] if len(ids) > bad[0] else f"row {bad[0]}"
            raise ValueError(f"zero-norm embedding for item {label}; cosine similarity undefined")
    hn = h / np.linalg.norm(h, axis=1, keepdims=True)
    cn = c / np.linalg.norm(c, axis=1, keepdims=True)
    # rounding makes exact ties (duplicate vectors) robust to float noise
    return np.round((hn @ cn.T).max(axis=1), 12)


def sample_extract_k(
    history: UserHistory,
    candidates: Sequence[str],
    embedder: Callable[[Sequence[str]], np.ndarray],
    k: int,
) -> list[str]:
    """Top-k history items by max cosine similarity to any candidate; ties go to the newer item."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hist_ids = history.item_ids
    if not hist_ids:
        return []
    scores = max_similarity(embedder(hist_ids), embedder(list(candidates)), hist_ids, list(candidates))
    order = sorted(range(len(hist_ids)), key=lambda i: (-scores[i], -i))
    return _newest_first(history, order[:k])


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class EmbeddingText:
    item_id: str
    text: str


@dataclass(frozen=True)
class PromptText:
    text: str
    estimated_tokens: int
    spec: PromptSpec | None
    user_id: str
    kind: str = "inference"


def render_item(item: Item, attrs: AttrCombo) -> str:
    parts = []
    if attrs.has_title:
        parts.append(f"title: {item.title or 'None'}")
    if attrs.has_category:
        parts.append(f"category: {', '.join(item.categories) or 'None'}")
    if attrs.has_description:
        parts.append(f"description: {item.description or 'None'}")
    return " | ".join(parts)


def render_embedding_text(item: Item, attrs: AttrCombo) -> EmbeddingText:
    cats = ", ".join(item.categories)
    if attrs in (AttrCombo.T, AttrCombo.TD):
        text = item.title
    elif attrs in (AttrCombo.C, AttrCombo.CD):
        text = cats
    else:
        text = f"{item.title}-{cats}"
    return EmbeddingText(item.item_id, text)


@dataclass(frozen=True)
class PromptTemplates:
    inference: str
    summarization: str
    recency: str
    sha256: str

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PromptTemplates":
        if path is None:
            raw = resources.files("promptsel").joinpath("templates/prompts_v1.txt").read_text("utf-8")
        else:
            raw = Path(path).read_text("utf-8")
        sections: dict[str, list[str]] = {}
        current = None
        for line in raw.splitlines():
            if line.startswith("## "):
                current = line[3:].strip()
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        missing = {"inference", "summarization", "recency"} - sections.keys()
        if missing:
            raise ValueError(f"template file lacks sections: {sorted(missing)}")
        body = {k: "\n".join(v).strip("\n") for k, v in sections.items()}
        return cls(body["inference"], body["summarization"], body["recency"], sha256_text(raw))


@dataclass
class PromptRenderer:
    """Renders prompts for one dataset; item lines are memoized per attribute combo."""

    catalog: Mapping[str, Item]
    genre: str = "item"
    recency_verb: str = "interacted with"
    templates: PromptTemplates = field(default_factory=PromptTemplates.load)
    context_limit: int = 16384
    summary_max_words: int = 150
    tokenizer: Callable[[str], int] = byte_tokens
    _lines: dict = field(default_factory=dict, repr=False)

    def item_line(self, item_id: str, attrs: AttrCombo) -> str:
        key = (item_id, attrs)
        line = self._lines.get(key)
        if line is None:
            line = render_item(self.catalog[item_id], attrs)
            self._lines[key] = line
        return line

    def items_block(self, item_ids: Sequence[str], attrs: AttrCombo) -> str:
        return "\n".join("- " + self.item_line(i, attrs) for i in item_ids)

    def candidates_block(self, candidates: Sequence[str], attrs: AttrCombo) -> str:
        return "\n".join(f"{n}. {self.item_line(c, attrs)}" for n, c in enumerate(candidates, start=1))

    def _guard(self, text: str, spec: PromptSpec | None, user_id: str, kind: str) -> PromptText:
        tokens = self.tokenizer(text)
        if tokens > self.context_limit:
            raise ContextOverflowError(spec, user_id, tokens, self.context_limit)
        return PromptText(text, tokens, spec, user_id, kind)

    def render_inference_prompt(self, instance: EvalInstance, spec: PromptSpec, user_block: str) -> PromptText:
        recency = ""
        if spec.format is Format.LATEST:
            recency = self.templates.recency.format(verb=self.recency_verb) + "\n\n"
        text = self.templates.inference.format(
            genre=self.genre,
            n_candidates=len(instance.candidates),
            user_block=user_block,
            recency_line=recency,
            candidates=self.candidates_block(instance.candidates, spec.attrs),
        )
        return self._guard(text, spec, instance.user_id, "inference")

    def render_summarization_prompt(self, sampled_items: Sequence[str], attrs: AttrCombo,
                                    spec: PromptSpec | None = None, user_id: str = "") -> PromptText:
        if not sampled_items:
            raise ValueError("summarization needs at least one item")
        text = self.templates.summarization.format(
            genre=self.genre,
            items=self.items_block(sampled_items, attrs),
            max_words=self.summary_max_words,
        )
        return self._guard(text, spec, user_id, "summarization")


def sample_items(
    instance: EvalInstance,
    spec: PromptSpec,
    run_seed: int,
    embedder: Callable[[Sequence[str]], np.ndarray] | None = None,
) -> list[str]:
    """Apply the spec's sampling format to the instance's withheld history."""
    if spec.format is Format.LATEST:
        return sample_latest_k(instance.history, spec.k)
    if spec.format is Format.RANDOM:
        return sample_random_k(instance.history, spec.k, derive_seed(run_seed, instance.user_id, spec.name))
    if embedder is None:
        raise ValueError(f"{spec.name} needs an item embedder")
    return sample_extract_k(instance.history, instance.candidates, embedder, spec.k)


def summary_block(summary: str) -> str:
    return normalize_ws(summary)
