"""Seeded synthetic review corpora with topic-correlated item attributes.

Every item belongs to one latent topic. Titles, categories and descriptions
draw a profile-specific share of their words from that topic's vocabulary
and the rest from a shared filler vocabulary, so each attribute carries a
different amount of preference signal. Users mostly consume one main topic
and drift toward a second topic late in their history; their newest events
(the withheld positives) therefore favour the drift topic.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .utils import derive_seed

_ONSETS = ["b", "br", "c", "d", "dr", "f", "g", "gl", "h", "j", "k", "l", "m", "n", "p", "pl", "r", "s",
           "st", "t", "tr", "v", "w", "z"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_CODAS = ["", "n", "r", "s", "l", "m", "x", "th", "nd", "rk"]


@dataclass(frozen=True)
class SyntheticProfile:
    name: str
    genre: str
    recency_verb: str = "interacted with"
    n_items: int = 2400
    n_topics: int = 60
    title_len: tuple[int, int] = (2, 6)
    title_topic_p: float = 0.5
    n_categories: tuple[int, int] = (1, 3)
    category_topic_p: float = 0.8
    desc_len: tuple[int, int] = (10, 60)
    desc_empty_p: float = 0.2
    desc_topic_p: float = 0.3
    history_len: tuple[int, int] = (32, 70)
    main_topic_p: float = 0.9
    drift_share: float = 0.3
    drift_topic_p: float = 0.97
    low_rating_p: float = 0.1


PROFILES = (
    SyntheticProfile("music", "music", "listened to", title_len=(1, 5), title_topic_p=0.4,
                     category_topic_p=0.7, desc_empty_p=0.3, desc_topic_p=0.55),
    SyntheticProfile("movie", "movie", "watched", title_len=(1, 6), title_topic_p=0.65,
                     category_topic_p=0.6, desc_empty_p=0.1, desc_topic_p=0.35),
    SyntheticProfile("grocery", "grocery", "purchased", title_len=(8, 14), title_topic_p=0.45,
                     n_categories=(3, 5), category_topic_p=0.7, desc_empty_p=0.07, desc_topic_p=0.25),
    SyntheticProfile("clothes", "clothing", "purchased", title_len=(7, 12), title_topic_p=0.4,
                     n_categories=(3, 6), category_topic_p=0.85, desc_empty_p=0.2, desc_topic_p=0.3),
    SyntheticProfile("book", "book", "read", title_len=(3, 12), title_topic_p=0.55,
                     category_topic_p=0.5, desc_empty_p=0.15, desc_topic_p=0.4),
)


class _Words:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set()

    def make(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            syl = self.rng.randint(2, 3)
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(syl))
            w += self.rng.choice(_CODAS)
            if w not in self.used:
                self.used.add(w)
                out.append(w)
        return out


def _draw(rng: random.Random, n: int, topic_vocab: list[str], filler: list[str], p: float) -> list[str]:
    return [rng.choice(topic_vocab) if rng.random() < p else rng.choice(filler) for _ in range(n)]


def generate_dataset(profile: SyntheticProfile, n_users: int, seed: int) -> tuple[list[dict], list[dict]]:
    """Return ``(catalog records, review records)`` in the ingest JSONL schemas."""
    rng = random.Random(derive_seed("synthetic", profile.name, seed))
    words = _Words(rng)
    filler = words.make(400)
    topics = []
    for _ in range(profile.n_topics):
        topics.append({
            "title": words.make(40),
            "cats": [w.capitalize() for w in words.make(6)],
            "desc": words.make(60),
        })
    all_cats = [c for t in topics for c in t["cats"]]
    root_cat = profile.genre.capitalize()

    catalog, by_topic = [], [[] for _ in topics]
    for i in range(profile.n_items):
        z = rng.randrange(profile.n_topics)
        t = topics[z]
        title = " ".join(_draw(rng, rng.randint(*profile.title_len), t["title"], filler, profile.title_topic_p))
        n_c = rng.randint(*profile.n_categories)
        cats = [root_cat] + [rng.choice(t["cats"]) if rng.random() < profile.category_topic_p
                             else rng.choice(all_cats) for _ in range(n_c - 1)]
        cats = list(dict.fromkeys(cats))
        desc = ""
        if rng.random() >= profile.desc_empty_p:
            desc = " ".join(_draw(rng, rng.randint(*profile.desc_len), t["desc"], filler, profile.desc_topic_p))
        item_id = f"{profile.name[:2]}{i:05d}"
        catalog.append({"item_id": item_id, "title": title.title(), "categories": cats, "description": desc})
        by_topic[z].append(item_id)

    reviews = []
    all_ids = [c["item_id"] for c in catalog]
    for u in range(n_users):
        uid = f"{profile.name[:2]}u{u:04d}"
        main, drift = rng.sample(range(profile.n_topics), 2)
        n = rng.randint(*profile.history_len)
        n_drift = max(2, round(n * profile.drift_share))
        ts = 1_300_000_000 + rng.randrange(10_000_000)
        seen: set[str] = set()
        for e in range(n):
            late = e >= n - n_drift
            topic, p = (drift, profile.drift_topic_p) if late else (main, profile.main_topic_p)
            for _ in range(20):
                pool = by_topic[topic] if rng.random() < p else all_ids
                item = rng.choice(pool)
                if item not in seen:
                    break
            seen.add(item)
            ts += rng.choice([0, 3600, 86_400, 86_400 * rng.randint(2, 30)])
            rating = rng.choice([1, 2]) if rng.random() < profile.low_rating_p else rng.choice([3, 4, 5, 5])
            reviews.append({"user_id": uid, "item_id": item, "rating": rating, "timestamp": ts})
    rng.shuffle(reviews)
    reviews.sort(key=lambda r: r["timestamp"])
    return catalog, reviews


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def write_corpus(out_dir, n_users: int = 240, seed: int = 0, profiles=PROFILES,
                 min_count: int = 30) -> list[dict]:
    """Write one catalog/reviews pair per profile; returns config dataset entries."""
    out = Path(out_dir)
    entries = []
    for prof in profiles:
        catalog, reviews = generate_dataset(prof, n_users, seed)
        d = out / prof.name
        d.mkdir(parents=True, exist_ok=True)
        _write_jsonl(d / "catalog.jsonl", catalog)
        _write_jsonl(d / "reviews.jsonl", reviews)
        entries.append({"name": prof.name, "genre": prof.genre, "recency_verb": prof.recency_verb,
                        "catalog": str(d / "catalog.jsonl"), "reviews": str(d / "reviews.jsonl"),
                        "min_rating": 3, "min_count": min_count})
    return entries


def mock_config(datasets: list[dict], n_validation: int = 100, n_test: int = 100, seed: int = 0,
                cheap_noise: float = 0.3, expensive_noise: float = 0.05, mock_noise: float = 0.05) -> dict:
    """A complete run config that only touches the mock endpoints.

    Output paths are relative, i.e. resolved next to the config file.
    """
    return {
        "run": {"output_dir": "run", "seed": seed, "workers": 1},
        "cache_dir": "cache",
        "evaluation": {"n_pos": 2, "n_neg": 18, "max_attempts": 10, "ndcg_k": 10,
                       "n_validation_users": n_validation, "n_test_users": n_test},
        "datasets": datasets,
        "models": {
            "cheap": {"name": "mock-cheap", "endpoint_base": "mock://", "temperature": 0.3,
                      "price_in": 0.15, "price_out": 0.6, "mock_noise": cheap_noise, "mock_seed": 1},
            "expensive": {"name": "mock-expensive", "endpoint_base": "mock://", "temperature": 0.3,
                          "price_in": 2.5, "price_out": 10.0, "mock_noise": expensive_noise, "mock_seed": 2},
            "mock": {"name": "mock", "endpoint_base": "mock://", "temperature": 0.3, "mock_noise": mock_noise,
                     "mock_seed": 1},
            "embedding": {"name": "mock-embed", "kind": "embedding", "endpoint_base": "mock://"},
        },
        "selection": {"baselines": ["R-10-T", "SR-100-T", "E-30-T", "L-10-T"], "rpi_mode": "pairwise"},
    }


def write_mock_setup(out_dir, n_users: int = 240, seed: int = 0, profiles=PROFILES, **config_kw) -> Path:
    """Write the corpus under ``out_dir/data`` and ``out_dir/config.yaml`` referring to it."""
    out = Path(out_dir)
    datasets = write_corpus(out / "data", n_users=n_users, seed=seed, profiles=profiles)
    for entry in datasets:
        for key in ("catalog", "reviews"):
            entry[key] = Path(entry[key]).relative_to(out).as_posix()
    cfg = mock_config(datasets, seed=seed, **config_kw)
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False), "utf-8")
    return path


def with_overrides(profile: SyntheticProfile, **kw) -> SyntheticProfile:
    return replace(profile, **kw)
