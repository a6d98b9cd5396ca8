"""Published result tables bundled as CSV fixtures.

These let the RPI and selection code run against the reference numbers
without any API access. Only per-spec values that were actually published
are available, so the accuracy grid built here is sparse.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources

from .metrics import PromptResult, ResultGrid
from .promptgrid import Approach
from .selector import Dimension, RpiTable, _argmax, dimensions, parse_value

DATASETS = ("Music", "Movie", "Grocery", "Clothes", "Book")

FIXTURES = {
    "stats": "published_stats.csv",
    "minmax": "published_minmax.csv",
    "rpi_sampling": "published_rpi_sampling.csv",
    "rpi_summarizing": "published_rpi_summarizing.csv",
    "selection_small": "published_selection_small.csv",
    "selection_large": "published_selection_large.csv",
}

_LABEL_COUNTS = {Approach.SAMPLING: (3, 4, 6), Approach.SUMMARIZING: (3, 6)}


def read_fixture(key: str) -> list[dict[str, str]]:
    text = resources.files("promptsel").joinpath("data", FIXTURES[key]).read_text("utf-8")
    return list(csv.DictReader(text.splitlines()))


@dataclass
class PublishedRpi:
    dataset: str
    table: RpiTable
    prompt: str
    ratio: float


def load_rpi_tables(approach: Approach) -> dict[str, PublishedRpi]:
    """RPI rows keyed by dataset, with the published best-combination prompt and ratio."""
    rows = read_fixture("rpi_sampling" if approach is Approach.SAMPLING else "rpi_summarizing")
    out = {}
    for row in rows:
        labels = [k for k in row if k not in ("dataset", "prompt", "ratio")]
        values: dict[Dimension, dict] = {}
        pos = 0
        for dim, count in zip(dimensions(approach), _LABEL_COUNTS[approach]):
            values[dim] = {parse_value(dim, lab): float(row[lab]) for lab in labels[pos:pos + count]}
            pos += count
        table = RpiTable(approach, values, {d: _argmax(v, d.value) for d, v in values.items()})
        out[row["dataset"]] = PublishedRpi(row["dataset"], table, row["prompt"], float(row["ratio"]))
    return out


def load_selection(key: str = "selection_small") -> dict[str, dict[str, tuple[str, float]]]:
    """``{dataset: {method: (spec, ndcg)}}`` for a selection table fixture."""
    out: dict[str, dict[str, tuple[str, float]]] = {}
    for row in read_fixture(key):
        out.setdefault(row["dataset"], {})[row["method"]] = (row["spec"], float(row["ndcg"]))
    return out


def published_grid() -> ResultGrid:
    """Every per-spec test accuracy published for the smaller model.

    Drawn from the min/max table and the selection table. A spec reported in
    both places must carry the same value.
    """
    cells: dict[tuple[str, str], float] = {}
    sources = [(r["dataset"], r["spec"], float(r["ndcg"])) for r in read_fixture("minmax")]
    sources += [(r["dataset"], r["spec"], float(r["ndcg"])) for r in read_fixture("selection_small")]
    for dataset, spec, acc in sources:
        prev = cells.setdefault((dataset, spec), acc)
        if prev != acc:
            raise ValueError(f"conflicting published values for {dataset}/{spec}: {prev} vs {acc}")
    return ResultGrid(PromptResult(spec, ds, acc) for (ds, spec), acc in sorted(cells.items()))
