"""Bundled reference tables: values are pinned by hand and replayed through the RPI code."""

from __future__ import annotations

import pytest

from promptsel.catalog import DatasetStats
from promptsel.published import (DATASETS, load_rpi_tables, load_selection, published_grid, read_fixture)
from promptsel.promptgrid import Approach, AttrCombo, Format
from promptsel.selector import Dimension, select_gs

RPI_PROMPTS = {
    Approach.SAMPLING: {"Music": "L-20-TCD", "Movie": "L-20-T", "Grocery": "E-30-T",
                        "Clothes": "E-10-T", "Book": "L-10-T"},
    Approach.SUMMARIZING: {"Music": "SL-30-TCD", "Movie": "SR-30-TD", "Grocery": "SR-30-TCD",
                           "Clothes": "SL-30-TCD", "Book": "SR-30-TCD"},
}


def test_stats_rows_pinned():
    rows = {r["dataset"]: r for r in read_fixture("stats")}
    assert list(rows) == list(DATASETS)
    assert [rows["Grocery"][c] for c in DatasetStats.COLUMNS] == \
        ["0.4", "93.7", "0.9", "1.7", "80.9", "92.7", "6.7", "6.8", "83.5", "38", "12"]
    assert rows["Book"]["users_ge100"] == "46" and rows["Music"]["title_le5"] == "54.7"


@pytest.mark.parametrize("approach", list(Approach))
def test_rpi_rows_replay_to_published_prompt(approach):
    tables = load_rpi_tables(approach)
    assert list(tables) == list(DATASETS)
    for ds, pub in tables.items():
        assert pub.table.best_spec().name == pub.prompt == RPI_PROMPTS[approach][ds]


def test_rpi_values_pinned():
    music = load_rpi_tables(Approach.SAMPLING)["Music"].table
    assert music.values[Dimension.FORMAT] == {Format.RANDOM: -1.8, Format.LATEST: 5.1, Format.EXTRACT: -2.6}
    assert music.values[Dimension.SIZE] == {5: -1.9, 10: -0.3, 20: 1.9, 30: 1.0}
    movie = load_rpi_tables(Approach.SUMMARIZING)["Movie"]
    assert movie.table.values[Dimension.ATTRS][AttrCombo.TD] == 23.1 and movie.ratio == 92.4


def test_selection_rows_pinned():
    mini = load_selection("selection_small")
    assert mini["Book"]["RPI"] == ("SL-30-TCD", 0.620)
    assert mini["Grocery"]["GS"] == ("E-30-TC", 0.438)
    assert mini["Movie"]["R-10-T"] == ("R-10-T", 0.655)
    big = load_selection("selection_large")
    assert big["Music"]["R-10-T"] == ("R-10-T", 0.672)
    assert set(big["Book"]) == {"R-10-T", "SR-100-T", "E-30-T", "L-10-T", "GS", "RPI", "GS*"}


def test_published_grid_is_consistent_and_maxima_are_maximal():
    grid = published_grid()
    maxima = {r["dataset"]: (r["spec"], float(r["ndcg"])) for r in read_fixture("minmax") if r["kind"] == "max"}
    for ds in DATASETS:
        spec, acc = maxima[ds]
        assert max(grid.accuracy(ds, s) for s in grid.specs(ds)) == acc
        assert select_gs(grid, ds, grid.specs(ds)).spec == spec
