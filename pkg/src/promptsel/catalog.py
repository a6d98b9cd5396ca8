"""Review-dataset ingestion, dataset statistics and evaluation-instance construction."""

from __future__ import annotations

import csv
import io
import logging
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .utils import DataError, derive_seed, iter_jsonl, normalize_ws, whitespace_tokens

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str = ""
    categories: tuple[str, ...] = ()
    description: str = ""

    @classmethod
    def from_record(cls, record: Mapping) -> "Item":
        cats = record.get("categories") or []
        if isinstance(cats, str):
            cats = [cats]
        return cls(
            item_id=str(record["item_id"]),
            title=normalize_ws(record.get("title")),
            categories=tuple(c for c in (normalize_ws(str(c)) for c in cats) if c),
            description=normalize_ws(record.get("description")),
        )

    def to_record(self) -> dict:
        return {
            "item_id": self.item_id,
            "title": self.title,
            "categories": list(self.categories),
            "description": self.description,
        }


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: float
    seq: int = 0  # position in the input file; breaks timestamp ties


@dataclass(frozen=True)
class UserHistory:
    """Events sorted ascending by ``(timestamp, seq)``; the last event is the newest."""

    user_id: str
    events: tuple[Interaction, ...]
    reviewed: frozenset[str] = frozenset()

    @property
    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.events]

    def __len__(self) -> int:
        return len(self.events)

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id,
            "events": [[e.item_id, e.timestamp, e.rating, e.seq] for e in self.events],
            "reviewed": sorted(self.reviewed),
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "UserHistory":
        uid = str(record["user_id"])
        events = tuple(
            Interaction(uid, str(iid), int(ts), float(r), int(seq))
            for iid, ts, r, seq in record["events"]
        )
        reviewed = frozenset(record.get("reviewed") or (e.item_id for e in events))
        return cls(uid, events, reviewed)


def make_history(user_id: str, events: Iterable[Interaction], reviewed: Iterable[str] | None = None) -> UserHistory:
    ordered = tuple(sorted(events, key=lambda e: (e.timestamp, e.seq)))
    seen = frozenset(reviewed) if reviewed is not None else frozenset(e.item_id for e in ordered)
    return UserHistory(user_id, ordered, seen | frozenset(e.item_id for e in ordered))


@dataclass
class DatasetStats:
    title_le5: float
    title_ge10: float
    title_dup: float
    cat_le1: float
    cat_ge3: float
    cat_dup: float
    desc_eq0: float
    desc_le5: float
    desc_ge50: float
    users_ge50: int
    users_ge100: int
    n_items: int = 0
    n_users: int = 0

    COLUMNS = (
        "title_le5", "title_ge10", "title_dup",
        "cat_le1", "cat_ge3", "cat_dup",
        "desc_eq0", "desc_le5", "desc_ge50",
        "users_ge50", "users_ge100",
    )


@dataclass(frozen=True)
class EvalInstance:
    user_id: str
    candidates: tuple[str, ...]
    positive_mask: tuple[bool, ...]
    history: UserHistory
    candidate_seed: int
    dataset: str = ""

    @property
    def positives(self) -> list[str]:
        return [c for c, p in zip(self.candidates, self.positive_mask) if p]

    def to_record(self) -> dict:
        return {
            "dataset": self.dataset,
            "user_id": self.user_id,
            "candidates": list(self.candidates),
            "positive_mask": [int(p) for p in self.positive_mask],
            "candidate_seed": self.candidate_seed,
            "history": self.history.to_record(),
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "EvalInstance":
        return cls(
            user_id=str(record["user_id"]),
            candidates=tuple(record["candidates"]),
            positive_mask=tuple(bool(x) for x in record["positive_mask"]),
            history=UserHistory.from_record(record["history"]),
            candidate_seed=int(record["candidate_seed"]),
            dataset=record.get("dataset", ""),
        )


# ---------------------------------------------------------------------------
# ingestion


def load_catalog(catalog_path) -> dict[str, Item]:
    catalog: dict[str, Item] = {}
    for lineno, rec in iter_jsonl(catalog_path):
        if "item_id" not in rec:
            raise DataError(f"{catalog_path}:{lineno}: missing 'item_id'")
        cats = rec.get("categories")
        if cats is not None and not isinstance(cats, (list, str)):
            raise DataError(f"{catalog_path}:{lineno}: 'categories' must be a list of strings")
        item = Item.from_record(rec)
        if item.item_id in catalog:
            raise DataError(f"{catalog_path}:{lineno}: duplicate item_id {item.item_id!r}")
        catalog[item.item_id] = item
    return catalog


def _parse_interaction(path, lineno: int, rec: Mapping, seq: int) -> Interaction:
    try:
        user_id = rec["user_id"]
        item_id = rec["item_id"]
        rating = float(rec["rating"])
        ts = rec["timestamp"]
    except KeyError as exc:
        raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError):
        raise DataError(f"{path}:{lineno}: rating is not a number") from None
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or ts != int(ts) or ts < 0:
        raise DataError(f"{path}:{lineno}: timestamp must be a non-negative integer")
    if not 1 <= rating <= 5:
        raise DataError(f"{path}:{lineno}: rating {rating} outside [1, 5]")
    return Interaction(str(user_id), str(item_id), int(ts), rating, seq)


def ingest_reviews(
    reviews_path,
    catalog_path,
    min_rating: float = 3.0,
    min_count: int = 30,
) -> tuple[dict[str, Item], list[UserHistory]]:
    """Load a catalog and its reviews and keep users with enough qualifying events.

    The rating filter is inclusive. Histories are returned sorted by user id,
    each ordered by ``(timestamp, file order)``.
    """
    if not 1 <= min_rating <= 5:
        raise ValueError(f"min_rating must lie in [1, 5], got {min_rating}")
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")

    catalog = load_catalog(catalog_path)
    kept: dict[str, list[Interaction]] = defaultdict(list)
    reviewed: dict[str, set[str]] = defaultdict(set)
    unknown: set[str] = set()
    for seq, (lineno, rec) in enumerate(iter_jsonl(reviews_path)):
        inter = _parse_interaction(reviews_path, lineno, rec, seq)
        if inter.item_id not in catalog:
            unknown.add(inter.item_id)
            continue
        reviewed[inter.user_id].add(inter.item_id)
        if inter.rating >= min_rating:
            kept[inter.user_id].append(inter)
    if unknown:
        listed = ", ".join(sorted(unknown)[:20])
        more = f" (+{len(unknown) - 20} more)" if len(unknown) > 20 else ""
        raise DataError(f"{reviews_path}: interactions reference unknown items: {listed}{more}")

    histories = [
        make_history(uid, events, reviewed[uid])
        for uid, events in sorted(kept.items())
        if len(events) >= min_count
    ]
    logger.info("ingested %d items, %d users kept (min_rating=%s, min_count=%d)",
                len(catalog), len(histories), min_rating, min_count)
    return catalog, histories


# ---------------------------------------------------------------------------
# statistics


def _pct(count: int, total: int) -> float:
    return 100.0 * count / total if total else 0.0


def _dup_count(values: Sequence) -> int:
    counts = Counter(values)
    return sum(1 for v in values if counts[v] > 1)


def compute_stats(
    catalog: Mapping[str, Item],
    histories: Sequence[UserHistory],
    tokenizer: Callable[[str], int] = whitespace_tokens,
) -> DatasetStats:
    """Table-1 style statistics: attribute proportions over items, transaction counts over users.

    Buckets are inclusive, so an empty description counts toward both ``=0``
    and ``<=5``.
    """
    if not catalog:
        raise ValueError("catalog is empty")
    items = list(catalog.values())
    n = len(items)
    title_tok = [tokenizer(it.title) for it in items]
    desc_tok = [tokenizer(it.description) for it in items]
    n_cats = [len(it.categories) for it in items]
    return DatasetStats(
        title_le5=_pct(sum(t <= 5 for t in title_tok), n),
        title_ge10=_pct(sum(t >= 10 for t in title_tok), n),
        title_dup=_pct(_dup_count([it.title for it in items]), n),
        cat_le1=_pct(sum(c <= 1 for c in n_cats), n),
        cat_ge3=_pct(sum(c >= 3 for c in n_cats), n),
        cat_dup=_pct(_dup_count([it.categories for it in items]), n),
        desc_eq0=_pct(sum(t == 0 for t in desc_tok), n),
        desc_le5=_pct(sum(t <= 5 for t in desc_tok), n),
        desc_ge50=_pct(sum(t >= 50 for t in desc_tok), n),
        users_ge50=sum(len(h) >= 50 for h in histories),
        users_ge100=sum(len(h) >= 100 for h in histories),
        n_items=n,
        n_users=len(histories),
    )


def stats_to_csv(rows: Mapping[str, DatasetStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("dataset",) + DatasetStats.COLUMNS)
    for name, st in rows.items():
        values = asdict(st)
        writer.writerow([name] + [
            values[c] if c.startswith("users_") else f"{values[c]:.1f}" for c in DatasetStats.COLUMNS
        ])
    return buf.getvalue()


def stats_to_markdown(rows: Mapping[str, DatasetStats]) -> str:
    lines = [
        "| | Title ≤5 | Title ≥10 | Title Dup | Category ≤1 | Category ≥3 | Category Dup "
        "| Description =0 | Description ≤5 | Description ≥50 | Transaction ≥50 | Transaction ≥100 |",
        "|---" * 12 + "|",
    ]
    for name, st in rows.items():
        v = asdict(st)
        cells = [v[c] if c.startswith("users_") else f"{v[c]:.1f}" for c in DatasetStats.COLUMNS]
        lines.append("| " + " | ".join([name] + [str(c) for c in cells]) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation instances


def _withhold(history: UserHistory, n_pos: int) -> tuple[list[str], UserHistory] | None:
    """Latest ``n_pos`` distinct items and the history with every event of them removed."""
    positives: list[str] = []
    for ev in reversed(history.events):
        if ev.item_id not in positives:
            positives.append(ev.item_id)
            if len(positives) == n_pos:
                break
    if len(positives) < n_pos:
        return None
    rest = tuple(e for e in history.events if e.item_id not in positives)
    if not rest:
        return None
    return positives, UserHistory(history.user_id, rest, history.reviewed)


def eligible_users(histories: Iterable[UserHistory], n_pos: int = 2) -> list[UserHistory]:
    out = []
    for h in histories:
        if _withhold(h, n_pos) is None:
            logger.warning("user %s skipped: needs %d positives plus a non-empty remaining history",
                           h.user_id, n_pos)
            continue
        out.append(h)
    return out


def split_user_pools(
    histories: Sequence[UserHistory],
    sizes: Sequence[int],
    seed: int,
    n_pos: int = 2,
) -> list[list[UserHistory]]:
    """Seeded partition of eligible users into disjoint pools of the given sizes."""
    pool = sorted(eligible_users(histories, n_pos), key=lambda h: h.user_id)
    if sum(sizes) > len(pool):
        raise DataError(f"need {sum(sizes)} eligible users for the splits, only {len(pool)} available")
    random.Random(derive_seed(seed, "split")).shuffle(pool)
    out, start = [], 0
    for size in sizes:
        out.append(sorted(pool[start:start + size], key=lambda h: h.user_id))
        start += size
    return out


def build_eval_split(
    histories: Sequence[UserHistory],
    catalog_ids: Iterable[str],
    n_users: int,
    n_pos: int = 2,
    n_neg: int = 18,
    seed: int = 0,
    dataset: str = "",
) -> list[EvalInstance]:
    """One instance per selected user: latest items as positives plus sampled negatives.

    Negatives are drawn from catalog items the user never reviewed (at any
    rating), seeded by ``(seed, user_id)``, so every prompt sees the same
    candidates. Returned instances are sorted by user id.
    """
    pool = sorted(eligible_users(histories, n_pos), key=lambda h: h.user_id)
    if n_users > len(pool):
        raise DataError(f"requested {n_users} users but only {len(pool)} are eligible")
    if n_users < len(pool):
        random.Random(derive_seed(seed, "users")).shuffle(pool)
        pool = sorted(pool[:n_users], key=lambda h: h.user_id)
    all_items = sorted(set(catalog_ids))

    instances = []
    for hist in pool:
        positives, rest = _withhold(hist, n_pos)
        negatives_pool = [i for i in all_items if i not in hist.reviewed]
        if len(negatives_pool) < n_neg:
            raise DataError(
                f"user {hist.user_id}: only {len(negatives_pool)} unreviewed catalog items, need {n_neg}"
            )
        cseed = derive_seed(seed, hist.user_id)
        rng = random.Random(cseed)
        negatives = rng.sample(negatives_pool, n_neg)
        cands = positives + negatives
        rng.shuffle(cands)
        pos = set(positives)
        instances.append(EvalInstance(
            user_id=hist.user_id,
            candidates=tuple(cands),
            positive_mask=tuple(c in pos for c in cands),
            history=rest,
            candidate_seed=cseed,
            dataset=dataset,
        ))
    return instances
