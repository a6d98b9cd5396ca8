"""Command line entry point: ``promptsel <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 upstream (API) error, 4 stopped by the budget cap.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .catalog import compute_stats, ingest_reviews, stats_to_csv, stats_to_markdown
from .config import ConfigError, load_config
from .gateway import BudgetExceeded, UpstreamError
from .metrics import random_baseline, random_baseline_interval
from .promptgrid import Approach
from .report import build_report
from .runner import BudgetStop, ManifestMismatch, Workspace, WorkspaceBusy
from .selector import MissingCellsError, compute_rpi_table, rpi_csv, rpi_markdown
from .utils import DataError, atomic_write_text

logger = logging.getLogger("promptsel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_UPSTREAM, EXIT_BUDGET = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
        logger.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _workspace(args) -> Workspace:
    return Workspace(load_config(args.config), lock_timeout=args.lock_timeout)


def cmd_ingest(args) -> int:
    with _workspace(args) as ws:
        stats = ws.ingest()
    for name, st in stats.items():
        print(f"{name}: {st.n_items} items, {st.n_users} users after filtering")
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.config:
        with _workspace(args) as ws:
            rows = ws.load_stats()
    else:
        if not (args.catalog and args.reviews):
            raise UsageError("stats needs a config or both --catalog and --reviews")
        catalog, histories = ingest_reviews(args.reviews, args.catalog, args.min_rating, args.min_count)
        rows = {args.name: compute_stats(catalog, histories)}
    _emit(stats_to_csv(rows) if args.format == "csv" else stats_to_markdown(rows), args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    def progress(dataset, spec, n):
        logger.info("%s %s done (%d users)", dataset, spec, n)

    with _workspace(args) as ws:
        grid = ws.run(args.split, args.model, args.specs, args.datasets, args.budget_usd, progress)
        costs = ws.costs(args.split, args.model)
    print(f"{len(grid)} prompt results in {ws.run_dir(args.split, args.model)}; "
          f"cumulative cost {costs.usd:.6f} USD")
    return EXIT_OK


def cmd_select(args) -> int:
    with _workspace(args) as ws:
        outcomes = ws.select(args.strategy, args.model, args.expensive)
        report = build_report(ws, args.model, args.expensive)
        atomic_write_text(ws.root / "reports" / "report.md", report)
    for o in outcomes:
        print(f"{o.dataset}: {o.strategy} -> {o.spec} (validation nDCG@10 {o.val_ndcg:.4f}, "
              f"shortlist {len(o.shortlist)})")
    return EXIT_OK


def cmd_rpi(args) -> int:
    with _workspace(args) as ws:
        cfg = ws.config
        grid = ws.grid(args.split, args.model)
        approaches = list(Approach) if args.approach == "both" else [Approach(args.approach.capitalize())]
        parts = []
        for approach in approaches:
            tables = {d.name: compute_rpi_table(grid, d.name, approach, cfg.grid, args.mode or cfg.rpi_mode)
                      for d in cfg.datasets}
            if args.format == "csv":
                parts.append(rpi_csv(tables, cfg.grid, grid))
            else:
                parts.append(f"### {approach.value}\n\n" + rpi_markdown(tables, cfg.grid, grid))
    _emit("\n".join(parts), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    with _workspace(args) as ws:
        text = build_report(ws, args.model, args.expensive)
    _emit(text, args.out)
    return EXIT_OK


def cmd_baseline(args) -> int:
    mean = random_baseline(args.n_pos, args.n_cand, args.k, args.trials, args.seed)
    lo, hi = random_baseline_interval(args.users, args.n_pos, args.n_cand, args.k,
                                      trials=args.trials, seed=args.seed)
    print(json.dumps({"mean": round(mean, 6), "users": args.users, "ci99": [round(lo, 6), round(hi, 6)]}))
    return EXIT_OK


def cmd_cost(args) -> int:
    with _workspace(args) as ws:
        rep = ws.costs(args.split, args.model)
    text = rep.to_json() + "\n" if args.json else rep.to_markdown()
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import write_mock_setup

    path = write_mock_setup(args.out_dir, n_users=args.users, seed=args.seed,
                            n_validation=args.validation_users, n_test=args.test_users)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptsel", description="Prompt grid evaluation and selection for LLM recommenders.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=True):
        sp.add_argument("config", nargs=None if required else "?", help="run configuration (YAML)")
        sp.add_argument("--lock-timeout", type=float, default=0.0,
                        help="seconds to wait for another process to release the output directory")
        return sp

    def model_arg(sp):
        sp.add_argument("--model", default="cheap", choices=["cheap", "expensive", "mock"])

    sp = with_config(sub.add_parser("ingest", help="filter reviews, compute statistics, draw user splits"))
    sp.set_defaults(func=cmd_ingest)

    sp = with_config(sub.add_parser("stats", help="catalog statistics table"), required=False)
    sp.add_argument("--catalog")
    sp.add_argument("--reviews")
    sp.add_argument("--name", default="dataset")
    sp.add_argument("--min-rating", type=float, default=3.0)
    sp.add_argument("--min-count", type=int, default=30)
    sp.add_argument("--format", choices=["csv", "md"], default="csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stats)

    sp = with_config(sub.add_parser("run", help="evaluate prompts on a split"))
    sp.add_argument("--split", choices=["validation", "test"], required=True)
    model_arg(sp)
    sp.add_argument("--specs", help="comma-separated glob patterns, e.g. 'L-*-T,SR-*'")
    sp.add_argument("--datasets", nargs="+")
    sp.add_argument("--budget-usd", type=float)
    sp.set_defaults(func=cmd_run)

    sp = with_config(sub.add_parser("select", help="choose a prompt per dataset"))
    sp.add_argument("--strategy", choices=["gs", "rpi", "gs-star"], required=True)
    model_arg(sp)
    sp.add_argument("--expensive", default="expensive", help="model role used to re-score the GS* shortlist")
    sp.set_defaults(func=cmd_select)

    sp = with_config(sub.add_parser("rpi", help="RPI tables from a result grid"))
    sp.add_argument("--split", choices=["validation", "test"], default="validation")
    model_arg(sp)
    sp.add_argument("--approach", choices=["sampling", "summarizing", "both"], default="both")
    sp.add_argument("--mode", choices=["pairwise", "table"])
    sp.add_argument("--format", choices=["csv", "md"], default="md")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rpi)

    sp = with_config(sub.add_parser("report", help="markdown report of stored results"))
    model_arg(sp)
    sp.add_argument("--expensive", default="expensive")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("baseline", help="Monte-Carlo nDCG of a random ranking")
    sp.add_argument("--n-pos", type=int, default=2)
    sp.add_argument("--n-cand", type=int, default=20)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--trials", type=int, default=200_000)
    sp.add_argument("--users", type=int, default=100, help="users per prompt, for the 99%% interval")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_baseline)

    sp = with_config(sub.add_parser("cost", help="cost ledger summary of a run"))
    sp.add_argument("--split", choices=["validation", "test"], default="validation")
    model_arg(sp)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("synth", help="write a synthetic corpus and an offline mock config")
    sp.add_argument("out_dir")
    sp.add_argument("--users", type=int, default=240)
    sp.add_argument("--validation-users", type=int, default=100)
    sp.add_argument("--test-users", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WorkspaceBusy as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BudgetStop, BudgetExceeded) as exc:
        print(f"budget stop: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except UpstreamError as exc:
        print(f"upstream error: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (DataError, ConfigError, ManifestMismatch, MissingCellsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
