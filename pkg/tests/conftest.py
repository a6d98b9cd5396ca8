from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import pytest

from promptsel.catalog import Interaction, Item, make_history

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "promptsel" / "data" / "fixtures"

# criterion id -> list of (sub-check label, passed)
_CRITERIA: dict[str, list[tuple[str, bool]]] = defaultdict(list)
_TITLES: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, title = marker.args[0], marker.args[1]
    main = cid.rstrip("abcdefgh")
    _TITLES.setdefault(main, title)
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA[main].append((cid if cid != main else item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=int):
        checks = _CRITERIA[cid]
        ok = all(p for _, p in checks)
        detail = ", ".join(f"{label} {'pass' if p else 'FAIL'}" for label, p in checks)
        tr.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {_TITLES[cid]}  [{detail}]")


def history(user_id: str, item_ids, start: int = 1) -> "object":
    events = [Interaction(user_id, iid, start + i, 5.0, i) for i, iid in enumerate(item_ids)]
    return make_history(user_id, events)


def make_catalog(n: int, prefix: str = "i") -> dict[str, Item]:
    return {f"{prefix}{j}": Item(f"{prefix}{j}", f"Title {j}", (f"Cat{j % 3}",), f"about item {j}")
            for j in range(n)}


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), "utf-8")
    return path


@pytest.fixture
def tiny_setup(tmp_path):
    """A one-dataset mock workspace config with 24 users (10 validation, 10 test)."""
    from promptsel.synthetic import PROFILES, write_mock_setup, with_overrides

    prof = with_overrides(PROFILES[0], n_items=300, n_topics=10)
    return write_mock_setup(tmp_path / "setup", n_users=24, seed=3, profiles=[prof],
                            n_validation=10, n_test=10)
