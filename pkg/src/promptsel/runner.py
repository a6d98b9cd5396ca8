"""Resumable pipeline stages over one output directory.

Layout under ``output_dir``::

    manifest.json                      identity of the run plus stage markers
    ingest/<dataset>/histories.jsonl   filtered user histories
    ingest/<dataset>/stats.json        catalog statistics
    splits/<dataset>/<split>.jsonl     evaluation instances (validation, test)
    runs/<split>-<role>/results.jsonl  one EvalResult per line, append-only
    runs/<split>-<role>/calls.jsonl    call ledger of that run
    runs/<split>-<role>/summary.csv    per-spec means, rewritten after each run
    selection/<strategy>.json          SelectionOutcome per dataset

A single process owns the directory at a time (``.lock``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from filelock import FileLock, Timeout

from . import __version__
from .catalog import (DatasetStats, EvalInstance, Item, UserHistory, build_eval_split, compute_stats,
                      ingest_reviews, load_catalog, split_user_pools)
from .config import RunConfig
from .gateway import BudgetExceeded, Gateway, Ledger, cost_report, drop_partial_line
from .metrics import EvalResult, Evaluator, PromptResult, ResultGrid
from .promptgrid import PromptRenderer, PromptSpec, PromptTemplates, enumerate_grid, filter_specs
from .selector import (SelectionOutcome, select_gs, select_rpi, select_two_tier)
from .utils import DataError, atomic_write_text, canonical_json, iter_jsonl, sha256_file, sha256_text, write_jsonl

logger = logging.getLogger(__name__)

SPLITS = ("validation", "test")


class ManifestMismatch(RuntimeError):
    """The output directory belongs to a run with a different configuration."""


class BudgetStop(RuntimeError):
    def __init__(self, message: str, stage: str):
        super().__init__(message)
        self.stage = stage


class WorkspaceBusy(RuntimeError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    template_hash: str
    inputs: dict[str, str]
    specs: list[str]
    version: str = __version__
    stages: dict[str, dict] = field(default_factory=dict)

    @property
    def identity_hash(self) -> str:
        """Hash of everything except stage markers; reports cite this value."""
        ident = {k: v for k, v in asdict(self).items() if k != "stages"}
        return sha256_text(canonical_json(ident))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(path.read_text("utf-8")))


def result_key(rec: dict) -> tuple[str, str, str]:
    return rec["dataset"], rec["spec"], rec["user_id"]


def read_results(path: Path) -> list[EvalResult]:
    """Load results, keeping the first record per (dataset, spec, user)."""
    if not path.exists():
        return []
    seen, out = set(), []
    for _, rec in iter_jsonl(path):
        key = result_key(rec)
        if key in seen:
            logger.warning("duplicate result row %s ignored", key)
            continue
        seen.add(key)
        out.append(EvalResult.from_record(rec))
    return out


class Workspace:
    """Owns ``config.output_dir`` for the lifetime of a ``with`` block."""

    def __init__(self, config: RunConfig, lock_timeout: float = 0.0):
        self.config = config
        self.root = Path(config.output_dir)
        self.lock_timeout = lock_timeout
        self.templates = PromptTemplates.load(config.templates)
        self._lock: FileLock | None = None
        self.manifest: RunManifest | None = None
        self._catalogs: dict[str, dict[str, Item]] = {}

    # -- lifecycle ---------------------------------------------------------

    def __enter__(self) -> "Workspace":
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))
        try:
            self._lock.acquire(timeout=self.lock_timeout)
        except Timeout:
            raise WorkspaceBusy(f"{self.root} is in use by another process") from None
        try:
            self.manifest = self._open_manifest()
        except BaseException:
            self._lock.release()
            raise
        return self

    def __exit__(self, *exc) -> None:
        if self._lock is not None:
            self._lock.release()

    def _fresh_manifest(self) -> RunManifest:
        cfg = self.config
        cfg.validate_paths()
        inputs = {}
        for d in cfg.datasets:
            inputs[f"{d.name}/catalog"] = sha256_file(d.catalog)
            inputs[f"{d.name}/reviews"] = sha256_file(d.reviews)
        return RunManifest(cfg.config_hash, self.templates.sha256, inputs,
                           [s.name for s in enumerate_grid(cfg.grid)])

    def _open_manifest(self) -> RunManifest:
        fresh = self._fresh_manifest()
        path = self.root / "manifest.json"
        if not path.exists():
            atomic_write_text(path, fresh.to_json())
            return fresh
        old = RunManifest.load(path)
        if old.identity_hash != fresh.identity_hash:
            changed = [k for k in ("config_hash", "template_hash", "inputs", "specs", "version")
                       if getattr(old, k) != getattr(fresh, k)]
            raise ManifestMismatch(
                f"{self.root} was produced with a different {', '.join(changed)}; "
                "refusing to reuse its outputs (choose a new output_dir)"
            )
        return old

    def mark(self, stage: str, **info) -> None:
        self.manifest.stages[stage] = info
        atomic_write_text(self.root / "manifest.json", self.manifest.to_json())

    def stage_done(self, stage: str) -> bool:
        return bool(self.manifest.stages.get(stage, {}).get("complete"))

    # -- paths -------------------------------------------------------------

    def run_dir(self, split: str, role: str) -> Path:
        return self.root / "runs" / f"{split}-{role}"

    def split_path(self, dataset: str, split: str) -> Path:
        return self.root / "splits" / dataset / f"{split}.jsonl"

    # -- ingest ------------------------------------------------------------

    def ingest(self) -> dict[str, DatasetStats]:
        """Filter histories, compute statistics and draw the disjoint user splits."""
        cfg, ev = self.config, self.config.evaluation
        stats = {}
        for d in cfg.datasets:
            catalog, histories = ingest_reviews(d.reviews, d.catalog, d.min_rating, d.min_count)
            self._catalogs[d.name] = catalog
            st = compute_stats(catalog, histories)
            stats[d.name] = st
            out = self.root / "ingest" / d.name
            write_jsonl(out / "histories.jsonl", (h.to_record() for h in histories))
            atomic_write_text(out / "stats.json", json.dumps(asdict(st), indent=2, sort_keys=True) + "\n")
            pools = split_user_pools(histories, [ev.n_validation_users, ev.n_test_users], cfg.seed, ev.n_pos)
            for split, pool in zip(SPLITS, pools):
                instances = build_eval_split(pool, catalog, len(pool), ev.n_pos, ev.n_neg, cfg.seed, d.name)
                write_jsonl(self.split_path(d.name, split), (i.to_record() for i in instances))
            logger.info("%s: %d users after filtering, %d validation / %d test",
                        d.name, len(histories), len(pools[0]), len(pools[1]))
        self.mark("ingest", complete=True, users={n: s.n_users for n, s in stats.items()})
        return stats

    def require_ingest(self) -> None:
        if not self.stage_done("ingest"):
            self.ingest()

    def load_stats(self) -> dict[str, DatasetStats]:
        self.require_ingest()
        out = {}
        for d in self.config.datasets:
            data = json.loads((self.root / "ingest" / d.name / "stats.json").read_text("utf-8"))
            out[d.name] = DatasetStats(**data)
        return out

    def catalog(self, dataset: str) -> dict[str, Item]:
        if dataset not in self._catalogs:
            self._catalogs[dataset] = load_catalog(self.config.dataset(dataset).catalog)
        return self._catalogs[dataset]

    def histories(self, dataset: str) -> list[UserHistory]:
        self.require_ingest()
        path = self.root / "ingest" / dataset / "histories.jsonl"
        return [UserHistory.from_record(rec) for _, rec in iter_jsonl(path)]

    def instances(self, dataset: str, split: str) -> list[EvalInstance]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.require_ingest()
        return [EvalInstance.from_record(rec) for _, rec in iter_jsonl(self.split_path(dataset, split))]

    # -- evaluation --------------------------------------------------------

    def gateway(self, ledger: Ledger, budget_usd: float | None = None) -> Gateway:
        cfg = self.config
        return Gateway(cache_dir=cfg.cache_dir, use_cache=cfg.cache_dir is not None, ledger=ledger,
                       budget_usd=budget_usd if budget_usd is not None else cfg.budget_usd)

    def evaluator(self, gateway: Gateway, dataset: str, role: str, phase: str) -> Evaluator:
        cfg = self.config
        d = cfg.dataset(dataset)
        profile = cfg.model(role)
        renderer = PromptRenderer(self.catalog(dataset), d.genre, d.recency_verb, self.templates,
                                  context_limit=min(cfg.grid.context_limit, profile.context_limit),
                                  summary_max_words=cfg.grid.summary_max_words)
        return Evaluator(gateway, profile, renderer, cfg.models.get("embedding"), run_seed=cfg.seed,
                         max_attempts=cfg.evaluation.max_attempts, k=cfg.evaluation.ndcg_k,
                         phase=phase, workers=cfg.workers)

    def run(
        self,
        split: str,
        role: str,
        specs: str | Sequence[str] | None = None,
        datasets: Sequence[str] | None = None,
        budget_usd: float | None = None,
        progress: Callable[[str, str, int], None] | None = None,
    ) -> ResultGrid:
        """Evaluate the selected specs on one split; completed triples are skipped.

        Raises :class:`BudgetStop` after flushing partial results when the
        cumulative cost of this run directory reaches the budget.
        """
        self.require_ingest()
        self.config.model(role)
        if specs is None or isinstance(specs, str):
            chosen = filter_specs(enumerate_grid(self.config.grid), specs)
        else:
            chosen = [PromptSpec.parse(s) for s in specs]
        if not chosen:
            raise ValueError(f"spec filter {specs!r} matches no prompt")
        names = [d.name for d in self.config.datasets] if datasets is None else list(datasets)
        rdir = self.run_dir(split, role)
        rdir.mkdir(parents=True, exist_ok=True)
        results_path = rdir / "results.jsonl"
        drop_partial_line(results_path)
        done = {(r.dataset, r.spec, r.user_id) for r in read_results(results_path)}
        stage = f"run:{split}:{role}"
        ledger = Ledger(rdir / "calls.jsonl", load_existing=True)
        gw = self.gateway(ledger, budget_usd)
        try:
            with open(results_path, "a", encoding="utf-8", buffering=1) as out:
                def write(res: EvalResult) -> None:
                    out.write(json.dumps(res.to_record(), sort_keys=True) + "\n")

                for dataset in names:
                    instances = self.instances(dataset, split)
                    ev = self.evaluator(gw, dataset, role, phase=split)
                    for spec in chosen:
                        skip = {u for (d, s, u) in done if d == dataset and s == spec.name}
                        if len(skip) >= len(instances):
                            continue
                        ev.evaluate_prompt(spec, instances, on_result=write, skip_users=skip)
                        if progress:
                            progress(dataset, spec.name, len(instances))
        except BudgetExceeded as exc:
            self._finish_run(split, role, stage, complete=False, stopped="budget")
            raise BudgetStop(f"{stage}: {exc}; partial results kept in {results_path}", stage) from exc
        finally:
            ledger.close()
        return self._finish_run(split, role, stage, complete=True)

    def _finish_run(self, split: str, role: str, stage: str, complete: bool, stopped: str = "") -> ResultGrid:
        grid = self.grid(split, role)
        rdir = self.run_dir(split, role)
        atomic_write_text(rdir / "summary.csv", grid.to_summary_csv())
        info = {"complete": complete, "partial": not complete, "specs": sorted({pr.spec for pr in grid})}
        if stopped:
            info["stopped"] = stopped
        self.mark(stage, **info)
        return grid

    def grid(self, split: str, role: str) -> ResultGrid:
        return ResultGrid.from_results(read_results(self.run_dir(split, role) / "results.jsonl"))

    def costs(self, split: str, role: str):
        return cost_report(Ledger.load(self.run_dir(split, role) / "calls.jsonl"))

    # -- selection ---------------------------------------------------------

    def select(self, strategy: str, role: str = "cheap", expensive_role: str = "expensive") -> list[SelectionOutcome]:
        """Run a selection strategy for every dataset and store the outcomes."""
        cfg = self.config
        grid = self.grid("validation", role)
        outcomes = []
        for d in cfg.datasets:
            if strategy == "gs":
                out = select_gs(grid, d.name, config=cfg.grid)
            elif strategy == "rpi":
                out = select_rpi(grid, d.name, cfg.grid, cfg.rpi_mode)
            elif strategy == "gs-star":
                out = self._two_tier(grid, d.name, role, expensive_role)
            else:
                raise ValueError(f"unknown strategy {strategy!r}")
            out.profiles.setdefault("search", role)
            outcomes.append(out)
        payload = [o.to_dict() for o in outcomes]
        atomic_write_text(self.root / "selection" / f"{strategy}.json",
                          json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return outcomes

    def _two_tier(self, cheap_grid: ResultGrid, dataset: str, role: str, expensive_role: str) -> SelectionOutcome:
        cfg = self.config

        def rescore(spec: PromptSpec) -> PromptResult:
            grid = self.run("validation", expensive_role, [spec.name], datasets=[dataset])
            return grid.get(dataset, spec.name)
        rescore.profile_name = cfg.model(expensive_role).name

        cheap_records = [r for r in Ledger.load(self.run_dir("validation", role) / "calls.jsonl")
                         if r.dataset == dataset]
        out = select_two_tier(cheap_grid, dataset, rescore, baselines=cfg.baselines, config=cfg.grid,
                              rpi_mode=cfg.rpi_mode, cheap_cost=cost_report(cheap_records))
        # every call spent on shortlist cells, including cells scored by an earlier invocation
        shortlist = set(out.shortlist)
        spent = [r for r in Ledger.load(self.run_dir("validation", expensive_role) / "calls.jsonl")
                 if r.dataset == dataset and (r.spec in shortlist or r.kind == "embedding")]
        out.costs["expensive"] = asdict(cost_report(spent))
        out.profiles = {"search": role, "rescore": expensive_role}
        return out
