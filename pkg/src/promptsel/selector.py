"""Relative performance indicators and validation-based prompt selection.

RPI of a component value ``v`` in dimension ``D``: over every ordered pair of
prompts that differ only in ``D`` (one using ``v``, the other some ``v' != v``),
average the accuracy ratio ``acc(p_v) / acc(p_v')``, subtract one and express
it as a percentage.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .gateway import CostReport, Ledger, cost_report
from .metrics import Evaluator, PromptResult, ResultGrid
from .promptgrid import Approach, AttrCombo, Format, GridConfig, PromptSpec, enumerate_grid

logger = logging.getLogger(__name__)

DEFAULT_BASELINES = ("R-10-T", "SR-100-T", "E-30-T", "L-10-T")


class Dimension(str, Enum):
    FORMAT = "format"
    SIZE = "size"
    ATTRS = "attrs"


class MissingCellsError(ValueError):
    def __init__(self, dataset: str, missing: Sequence[str]):
        self.dataset = dataset
        self.missing = list(missing)
        shown = ", ".join(self.missing[:12]) + (" ..." if len(self.missing) > 12 else "")
        super().__init__(f"{dataset}: result grid lacks {len(self.missing)} specs: {shown}")


class TwoTierError(RuntimeError):
    def __init__(self, message: str, partial_ledger: list, partial_results: dict):
        super().__init__(message)
        self.partial_ledger = partial_ledger
        self.partial_results = partial_results


def dimensions(approach: Approach) -> list[Dimension]:
    if approach is Approach.SAMPLING:
        return [Dimension.FORMAT, Dimension.SIZE, Dimension.ATTRS]
    return [Dimension.FORMAT, Dimension.ATTRS]


def dimension_values(approach: Approach, dim: Dimension, config: GridConfig) -> list:
    if dim is Dimension.FORMAT:
        return list(config.formats)
    if dim is Dimension.ATTRS:
        return list(config.attrs)
    if approach is Approach.SUMMARIZING:
        raise ValueError("summarizing prompts have no free size dimension")
    return list(config.sizes)


def value_label(approach: Approach, dim: Dimension, value) -> str:
    if dim is Dimension.FORMAT:
        return ("S" if approach is Approach.SUMMARIZING else "") + value.value
    if dim is Dimension.ATTRS:
        return value.value
    return str(value)


def parse_value(dim: Dimension, label: str):
    label = label.strip()
    if dim is Dimension.FORMAT:
        return Format(label[-1])
    if dim is Dimension.ATTRS:
        return AttrCombo(label)
    return int(label)


def spec_from_coords(approach: Approach, coords: Mapping[Dimension, object], config: GridConfig) -> PromptSpec:
    attrs = coords[Dimension.ATTRS]
    k = coords[Dimension.SIZE] if approach is Approach.SAMPLING else config.summary_sizes[attrs]
    return PromptSpec(approach, coords[Dimension.FORMAT], k, attrs)


def factorial(approach: Approach, config: GridConfig) -> list[dict]:
    dims = dimensions(approach)
    axes = [dimension_values(approach, d, config) for d in dims]
    return [dict(zip(dims, combo)) for combo in itertools.product(*axes)]


def _accuracy_table(grid: ResultGrid, dataset: str, approach: Approach, config: GridConfig) -> dict[tuple, float]:
    dims = dimensions(approach)
    table, missing = {}, []
    for coords in factorial(approach, config):
        name = spec_from_coords(approach, coords, config).name
        if (dataset, name) not in grid:
            missing.append(name)
            continue
        table[tuple(coords[d] for d in dims)] = grid.accuracy(dataset, name)
    if missing:
        raise MissingCellsError(dataset, missing)
    zero = [k for k, v in table.items() if v == 0]
    if zero:
        name = spec_from_coords(approach, dict(zip(dims, zero[0])), config).name
        raise ValueError(f"{dataset}: accuracy of {name} is zero; RPI ratio undefined")
    return table


def compute_rpi(
    grid: ResultGrid,
    dataset: str,
    approach: Approach,
    dimension: Dimension,
    config: GridConfig | None = None,
    mode: str = "pairwise",
) -> dict:
    """RPI percentage per value of ``dimension``, in canonical value order.

    ``mode="pairwise"`` averages all qualifying ordered pairs at once;
    ``mode="table"`` first builds the value-by-value ratio table (each cell
    averaged over the fixed other components) and then averages each row.
    On a complete factorial the two agree.
    """
    config = config or GridConfig()
    dims = dimensions(approach)
    axis = dims.index(dimension)
    values = dimension_values(approach, dimension, config)
    table = _accuracy_table(grid, dataset, approach, config)

    def swap(coords: tuple, value) -> tuple:
        return coords[:axis] + (value,) + coords[axis + 1:]

    out = {}
    for v in values:
        own = [c for c in table if c[axis] == v]
        others = [w for w in values if w != v]
        if not others:
            out[v] = 0.0
            continue
        if mode == "pairwise":
            ratios = [table[c] / table[swap(c, w)] for c in own for w in others]
            out[v] = 100.0 * (sum(ratios) / len(ratios) - 1.0)
        elif mode == "table":
            row = [sum(table[c] / table[swap(c, w)] for c in own) / len(own) for w in others]
            out[v] = 100.0 * (sum(row) / len(row) - 1.0)
        else:
            raise ValueError(f"unknown RPI mode {mode!r}")
    return out


def _argmax(values: Mapping, what: str = "") -> object:
    best, best_val, ties = None, None, []
    for v, score in values.items():
        if best_val is None or score > best_val:
            best, best_val, ties = v, score, [v]
        elif score == best_val:
            ties.append(v)
    if len(ties) > 1:
        logger.info("RPI tie in %s among %s; keeping %s", what or "dimension", ties, best)
    return best


@dataclass
class RpiTable:
    approach: Approach
    values: dict  # Dimension -> {value: rpi}
    argmax: dict = field(default_factory=dict)

    def best_spec(self, config: GridConfig | None = None) -> PromptSpec:
        return best_combo_from_rpi(self.values, self.approach, config)

    def labelled(self) -> dict[str, float]:
        return {value_label(self.approach, d, v): r for d in self.values for v, r in self.values[d].items()}


def compute_rpi_table(grid: ResultGrid, dataset: str, approach: Approach,
                      config: GridConfig | None = None, mode: str = "pairwise") -> RpiTable:
    config = config or GridConfig()
    values = {d: compute_rpi(grid, dataset, approach, d, config, mode) for d in dimensions(approach)}
    return RpiTable(approach, values, {d: _argmax(vals, d.value) for d, vals in values.items()})


def best_combo_from_rpi(tables: Mapping, approach: Approach, config: GridConfig | None = None) -> PromptSpec:
    """Assemble the spec from each dimension's highest-RPI value (ties keep the canonical first)."""
    config = config or GridConfig()
    coords = {}
    for d in dimensions(approach):
        vals = tables.get(d)
        if not vals:
            raise ValueError(f"RPI table missing dimension {d.value}")
        order = [v for v in dimension_values(approach, d, config) if v in vals]
        order += [v for v in vals if v not in order]
        coords[d] = _argmax({v: vals[v] for v in order}, d.value)
    return spec_from_coords(approach, coords, config)


# ---------------------------------------------------------------------------
# selection


@dataclass
class SelectionOutcome:
    strategy: str  # GS | RPI | GS*
    spec: str
    val_ndcg: float
    shortlist: list[str]
    dataset: str = ""
    profiles: dict = field(default_factory=dict)
    candidates: dict = field(default_factory=dict)  # spec -> validation accuracy
    costs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "dataset": self.dataset, "spec": self.spec,
                "val_ndcg": self.val_ndcg, "shortlist": self.shortlist, "profiles": self.profiles,
                "candidates": self.candidates, "costs": self.costs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _canonical_key(name: str) -> tuple:
    try:
        return (0,) + PromptSpec.parse(name).sort_key
    except ValueError:
        return (1, name)


def _pick(grid: ResultGrid, dataset: str, names: Sequence[str]) -> str:
    return min(names, key=lambda n: (-grid.accuracy(dataset, n),
                                     grid.get(dataset, n).mean_prompt_tokens,
                                     _canonical_key(n)))


def select_gs(grid: ResultGrid, dataset: str, shortlist: Iterable[str | PromptSpec] | None = None,
              config: GridConfig | None = None, strategy: str = "GS") -> SelectionOutcome:
    """Highest validation accuracy; ties go to fewer prompt tokens, then canonical order."""
    names = [str(s) for s in (shortlist if shortlist is not None else enumerate_grid(config or GridConfig()))]
    names = list(dict.fromkeys(names))
    if not names:
        raise ValueError("empty shortlist")
    missing = grid.missing(dataset, names)
    if missing:
        raise MissingCellsError(dataset, missing)
    chosen = _pick(grid, dataset, names)
    return SelectionOutcome(strategy, chosen, grid.accuracy(dataset, chosen), names, dataset,
                            candidates={n: grid.accuracy(dataset, n) for n in names} if len(names) <= 12 else {})


def select_rpi(grid: ResultGrid, dataset: str, config: GridConfig | None = None,
               mode: str = "pairwise") -> SelectionOutcome:
    """Best-RPI combination per approach; the one with higher validation accuracy wins (Sampling on ties)."""
    config = config or GridConfig()
    approaches = [a for a, on in ((Approach.SAMPLING, config.include_sampling),
                                  (Approach.SUMMARIZING, config.include_summarizing)) if on]
    combos = [compute_rpi_table(grid, dataset, a, config, mode).best_spec(config).name for a in approaches]
    accs = {n: grid.accuracy(dataset, n) for n in combos}
    chosen = combos[0]
    for n in combos[1:]:
        if accs[n] > accs[chosen]:
            chosen = n
        elif accs[n] == accs[chosen]:
            logger.info("RPI selection tie between %s and %s; keeping %s", chosen, n, chosen)
    return SelectionOutcome("RPI", chosen, accs[chosen], combos, dataset, candidates=accs)


def shortlist_two_tier(cheap_grid: ResultGrid, dataset: str, baselines: Sequence[str] = DEFAULT_BASELINES,
                       config: GridConfig | None = None, rpi_mode: str = "pairwise") -> list[str]:
    gs = select_gs(cheap_grid, dataset, config=config).spec
    rpi = select_rpi(cheap_grid, dataset, config, rpi_mode).spec
    return list(dict.fromkeys([*baselines, gs, rpi]))


def select_two_tier(
    cheap_grid: ResultGrid,
    dataset: str,
    expensive: Evaluator | Callable[[PromptSpec], PromptResult],
    instances: Sequence | None = None,
    baselines: Sequence[str] = DEFAULT_BASELINES,
    config: GridConfig | None = None,
    rpi_mode: str = "pairwise",
    ledger: Ledger | None = None,
    cheap_cost: CostReport | None = None,
) -> SelectionOutcome:
    """Search the grid cheaply, re-score the short list with the expensive model, keep the best.

    ``expensive`` is either an :class:`Evaluator` bound to the expensive
    profile (then ``instances`` are the validation instances) or any callable
    returning a :class:`PromptResult` for a spec.
    """
    shortlist = shortlist_two_tier(cheap_grid, dataset, baselines, config, rpi_mode)
    if isinstance(expensive, Evaluator):
        if instances is None:
            raise ValueError("validation instances required with an Evaluator")
        ev = expensive
        ledger = ledger or ev.gateway.ledger

        def run(spec: PromptSpec) -> PromptResult:
            return PromptResult.from_results(spec.name, dataset, ev.evaluate_prompt(spec, instances))
        profile_name = ev.profile.name
    else:
        run = expensive
        profile_name = getattr(expensive, "profile_name", "expensive")
    start = len(ledger.records()) if ledger else 0
    results: dict[str, PromptResult] = {}
    try:
        for name in shortlist:
            results[name] = run(PromptSpec.parse(name))
    except Exception as exc:
        partial = ledger.records()[start:] if ledger else []
        raise TwoTierError(f"expensive phase failed on {dataset}: {exc}", partial, results) from exc
    grid = ResultGrid(results.values())
    out = select_gs(grid, dataset, shortlist, strategy="GS*")
    out.profiles = {"search": "cheap", "rescore": profile_name}
    costs = {}
    if cheap_cost is not None:
        costs["cheap"] = asdict(cheap_cost)
    if ledger is not None:
        costs["expensive"] = asdict(cost_report(ledger.records()[start:]))
    out.costs = costs
    return out


# ---------------------------------------------------------------------------
# reporting helpers


def ratio_percent(selected: float, best: float) -> Decimal:
    """``100 * selected / best`` rounded half-up to one decimal."""
    if best == 0:
        raise ValueError("best accuracy is zero")
    return (Decimal(repr(selected)) / Decimal(repr(best)) * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def rpi_rows(tables: Mapping[str, RpiTable], config: GridConfig | None = None,
             grid: ResultGrid | None = None) -> tuple[list[str], list[list[str]]]:
    config = config or GridConfig()
    rows: list[list[str]] = []
    header: list[str] = []
    for dataset, table in tables.items():
        labels, cells = [], []
        for d in dimensions(table.approach):
            for v, r in table.values[d].items():
                labels.append(value_label(table.approach, d, v))
                cells.append(f"{r:.1f}")
        spec = table.best_spec(config).name
        ratio = ""
        if grid is not None and (dataset, spec) in grid:
            best = max(grid.accuracy(dataset, s) for s in grid.specs(dataset))
            ratio = str(ratio_percent(grid.accuracy(dataset, spec), best))
        header = ["dataset", *labels, "prompt", "ratio"]
        rows.append([dataset, *cells, spec, ratio])
    return header, rows


def rpi_csv(tables: Mapping[str, RpiTable], config: GridConfig | None = None, grid: ResultGrid | None = None) -> str:
    header, rows = rpi_rows(tables, config, grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def rpi_markdown(tables: Mapping[str, RpiTable], config: GridConfig | None = None,
                 grid: ResultGrid | None = None) -> str:
    header, rows = rpi_rows(tables, config, grid)
    if not rows:
        return ""
    lines = ["| " + " | ".join([""] + header[1:]) + " |", "|---" * len(header) + "|"]
    for (dataset, table), row in zip(tables.items(), rows):
        marked, col = [], 1
        for d in dimensions(table.approach):
            best = table.argmax[d]
            for v in table.values[d]:
                marked.append(f"**{row[col]}**" if v == best else row[col])
                col += 1
        lines.append("| " + " | ".join([dataset, *marked, *row[col:]]) + " |")
    return "\n".join(lines) + "\n"
