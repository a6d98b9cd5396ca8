from __future__ import annotations

import json

import pytest
import yaml
from filelock import FileLock

from promptsel.config import load_config
from promptsel.gateway import Ledger
from promptsel.runner import BudgetStop, ManifestMismatch, Workspace, WorkspaceBusy, read_results

SPECS = "L-*-T"


def _open(path, **kw):
    return Workspace(load_config(path), **kw)


def test_ingest_writes_disjoint_splits(tiny_setup):
    with _open(tiny_setup) as ws:
        stats = ws.ingest()
        val = {i.user_id for i in ws.instances("music", "validation")}
        test = {i.user_id for i in ws.instances("music", "test")}
        assert len(val) == 10 and len(test) == 10 and not val & test
        assert stats["music"].n_users == 24
        assert ws.stage_done("ingest")


def test_run_then_resume_skips_completed(tiny_setup):
    with _open(tiny_setup) as ws:
        grid = ws.run("validation", "cheap", SPECS)
        assert sorted(pr.spec for pr in grid) == ["L-10-T", "L-20-T", "L-30-T", "L-5-T"]
        rdir = ws.run_dir("validation", "cheap")
        summary = (rdir / "summary.csv").read_text()
        lines = (rdir / "results.jsonl").read_text().splitlines(keepends=True)
        # simulate a crash: drop the last results and leave half a line behind
        (rdir / "results.jsonl").write_text("".join(lines[:-7]) + lines[-7][:15])
        ws.run("validation", "cheap", SPECS)
        rows = [json.loads(x) for x in (rdir / "results.jsonl").read_text().splitlines()]
        keys = [(r["dataset"], r["spec"], r["user_id"]) for r in rows]
        assert len(keys) == len(set(keys)) == 40
        assert (rdir / "summary.csv").read_text() == summary
        assert ws.manifest.stages["run:validation:cheap"]["complete"]


def test_cached_rerun_makes_no_upstream_calls(tiny_setup):
    with _open(tiny_setup) as ws:
        ws.run("validation", "cheap", "L-10-*")
        rdir = ws.run_dir("validation", "cheap")
        first = Ledger.load(rdir / "calls.jsonl")
        (rdir / "results.jsonl").unlink()
        (rdir / "calls.jsonl").unlink()
        ws.run("validation", "cheap", "L-10-*")
        again = Ledger.load(rdir / "calls.jsonl")
    assert len(again) == len(first) and all(r.cached and r.cost == 0 for r in again)


def test_manifest_mismatch_refuses(tiny_setup):
    with _open(tiny_setup) as ws:
        ws.ingest()
    data = yaml.safe_load(tiny_setup.read_text())
    data["run"]["seed"] = 99
    tiny_setup.write_text(yaml.safe_dump(data))
    with pytest.raises(ManifestMismatch, match="config_hash"):
        with _open(tiny_setup):
            pass


def test_changed_input_file_refuses(tiny_setup):
    with _open(tiny_setup):
        pass
    reviews = tiny_setup.parent / "data" / "music" / "reviews.jsonl"
    reviews.write_text(reviews.read_text() + "\n")
    with pytest.raises(ManifestMismatch, match="inputs"):
        with _open(tiny_setup):
            pass


def test_second_owner_is_refused(tiny_setup):
    cfg = load_config(tiny_setup)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(cfg.output_dir / ".lock")):
        with pytest.raises(WorkspaceBusy):
            with Workspace(cfg):
                pass


def test_budget_stop_keeps_partial_results(tiny_setup):
    with _open(tiny_setup) as ws:
        with pytest.raises(BudgetStop) as err:
            ws.run("validation", "cheap", SPECS, budget_usd=0.0005)
        assert err.value.stage == "run:validation:cheap"
        info = ws.manifest.stages["run:validation:cheap"]
        assert info["partial"] and info["stopped"] == "budget"
        rdir = ws.run_dir("validation", "cheap")
        partial = read_results(rdir / "results.jsonl")
        assert 0 < len(partial) < 40
        total = sum(r.cost for r in Ledger.load(rdir / "calls.jsonl"))
        # the cap is checked before each call, so at most one call overshoots it
        assert total >= 0.0005
        # the budget is cumulative for the run directory, so the same cap stops again at once
        with pytest.raises(BudgetStop):
            ws.run("validation", "cheap", SPECS, budget_usd=0.0005)
        assert len(read_results(rdir / "results.jsonl")) == len(partial)


def test_unknown_spec_filter(tiny_setup):
    with _open(tiny_setup) as ws:
        with pytest.raises(ValueError, match="matches no prompt"):
            ws.run("validation", "cheap", "Q-*")


def test_select_writes_outcomes(tiny_setup):
    with _open(tiny_setup) as ws:
        ws.run("validation", "cheap")
        (gs,) = ws.select("gs")
        (rpi,) = ws.select("rpi")
        (star,) = ws.select("gs-star")
        assert gs.spec in ws.manifest.specs and rpi.spec in rpi.shortlist
        assert star.spec in star.shortlist and len(star.shortlist) <= 6
        assert star.costs["cheap"]["calls"] > 0 and star.costs["expensive"]["calls"] > 0
        saved = json.loads((ws.root / "selection" / "gs-star.json").read_text())
        assert saved[0]["spec"] == star.spec
        expensive = ws.grid("validation", "expensive")
        assert {pr.spec for pr in expensive} == set(star.shortlist)
