"""Markdown reports assembled from a workspace's stored outputs.

Reports contain no timestamps or wall-clock figures, so regenerating one from
unchanged results yields identical bytes.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

from .catalog import stats_to_markdown
from .gateway import CostReport
from .metrics import ResultGrid
from .promptgrid import Approach
from .selector import MissingCellsError, compute_rpi_table, rpi_markdown

NA = "n/a"


def rank_marks(values: Sequence[float | None], decimals: int = 3) -> list[str]:
    """Format values; the best distinct value is bold, the runner-up underlined.

    Ranks are taken on the printed (rounded) values, so ties share a mark.
    """
    shown = [None if v is None else round(v, decimals) for v in values]
    distinct = sorted({v for v in shown if v is not None}, reverse=True)
    out = []
    for v in shown:
        if v is None:
            out.append(NA)
            continue
        text = f"{v:.{decimals}f}"
        if v == distinct[0]:
            text = f"**{text}**"
        elif len(distinct) > 1 and v == distinct[1]:
            text = f"<u>{text}</u>"
        out.append(text)
    return out


def selection_table(
    test_grid: ResultGrid,
    datasets: Sequence[str],
    baselines: Sequence[str],
    picks: Mapping[str, Mapping[str, str]],
) -> str:
    """Rows: each baseline spec, then each strategy (with its chosen spec below the scores).

    ``picks`` maps strategy label to ``{dataset: spec}``. Cells not evaluated on
    the test split print as ``n/a``.
    """
    rows: list[tuple[str, dict[str, str]]] = [(b, {d: b for d in datasets}) for b in baselines]
    rows += [(label, dict(chosen)) for label, chosen in picks.items()]
    columns = []
    for d in datasets:
        vals = []
        for _, chosen in rows:
            spec = chosen.get(d)
            vals.append(test_grid.accuracy(d, spec) if spec and (d, spec) in test_grid else None)
        columns.append(rank_marks(vals))
    lines = ["| | " + " | ".join(datasets) + " |", "|---" * (len(datasets) + 1) + "|"]
    for r, (label, chosen) in enumerate(rows):
        lines.append(f"| {label} | " + " | ".join(col[r] for col in columns) + " |")
        if label in picks:
            lines.append("| | " + " | ".join(chosen.get(d, NA) for d in datasets) + " |")
    return "\n".join(lines) + "\n"


def minmax_table(grid: ResultGrid, datasets: Sequence[str]) -> str:
    lines = ["| | " + " | ".join(f"{d} prompt | {d} acc" for d in datasets) + " |",
             "|---" * (2 * len(datasets) + 1) + "|"]
    for label, pick in (("Max", max), ("Min", min)):
        cells = []
        for d in datasets:
            specs = sorted(grid.specs(d))
            if not specs:
                cells += [NA, NA]
                continue
            best = pick(specs, key=lambda s: grid.accuracy(d, s))
            cells += [best, f"{grid.accuracy(d, best):.3f}"]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _cost_md(costs: Mapping) -> str:
    rep = CostReport(**{k: v for k, v in costs.items() if k in CostReport.__dataclass_fields__})
    return rep.to_markdown(timing=False)


def build_report(ws, role: str = "cheap", expensive_role: str = "expensive") -> str:
    """Markdown summary of everything stored in workspace ``ws``."""
    cfg = ws.config
    m = ws.manifest
    datasets = [d.name for d in cfg.datasets]
    out = [
        "# Prompt selection report",
        "",
        f"- manifest: `{m.identity_hash}`",
        f"- config: `{m.config_hash}`",
        f"- templates: `{m.template_hash}`",
        f"- software: {m.version}",
        f"- seed: {cfg.seed}",
        "",
        "## Dataset statistics",
        "",
        stats_to_markdown(ws.load_stats()),
    ]

    val = ws.grid("validation", role)
    if len(val):
        out += [f"## Validation accuracy range ({role})", "", minmax_table(val, datasets)]
        for approach in Approach:
            tables, problems = {}, []
            for d in datasets:
                try:
                    tables[d] = compute_rpi_table(val, d, approach, cfg.grid, cfg.rpi_mode)
                except (MissingCellsError, ValueError) as exc:
                    problems.append(f"- {d}: {exc}")
            out += [f"## RPI, {approach.value.lower()} approach (validation, {role})", ""]
            if tables:
                out.append(rpi_markdown(tables, cfg.grid, val))
            out += problems + ([""] if problems else [])

    selections = {}
    for strategy, label in (("gs", "GS"), ("rpi", "RPI"), ("gs-star", "GS*")):
        path = ws.root / "selection" / f"{strategy}.json"
        if path.exists():
            selections[label] = json.loads(path.read_text("utf-8"))
    if selections:
        cheap_picks = {label: {o["dataset"]: o["spec"] for o in outs}
                       for label, outs in selections.items() if label != "GS*"}
        out += [f"## Selected prompts on the test split ({role})", "",
                "Bold marks the best value per column, underline the second best.", "",
                selection_table(ws.grid("test", role), datasets, cfg.baselines, cheap_picks)]
        if "GS*" in selections:
            picks = dict(cheap_picks, **{"GS*": {o["dataset"]: o["spec"] for o in selections["GS*"]}})
            out += [f"## Two-tier selection on the test split ({expensive_role})", "",
                    selection_table(ws.grid("test", expensive_role), datasets, cfg.baselines, picks)]
            out += ["### Two-tier phase costs", ""]
            for o in selections["GS*"]:
                out += [f"**{o['dataset']}**, shortlist {', '.join(o['shortlist'])}", ""]
                for phase in ("cheap", "expensive"):
                    if phase in o["costs"]:
                        out += [f"{phase} phase:", "", _cost_md(o["costs"][phase])]

    run_dirs = sorted(p for p in (ws.root / "runs").glob("*") if p.is_dir()) if (ws.root / "runs").exists() else []
    if run_dirs:
        out += ["## Cost summary", ""]
        for rdir in run_dirs:
            split, _, r = rdir.name.partition("-")
            out += [f"### {rdir.name}", "", ws.costs(split, r).to_markdown(timing=False)]
    return "\n".join(out).rstrip("\n") + "\n"
