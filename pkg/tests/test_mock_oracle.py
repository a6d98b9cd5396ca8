from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from promptsel import synthetic
from promptsel.catalog import EvalInstance, Item, build_eval_split, ingest_reviews
from promptsel.gateway import Gateway, ModelProfile
from promptsel.metrics import Evaluator, parse_ranking
from promptsel.mock_oracle import GIBBERISH, UnrecognizedPrompt, mock_embedding, mock_oracle_complete
from promptsel.promptgrid import AttrCombo, PromptRenderer, PromptSpec
from conftest import history


def _prompt(user_items, cand_titles):
    cat = {f"h{i}": Item(f"h{i}", t, ("misc",), "") for i, t in enumerate(user_items)}
    cat.update({f"c{i}": Item(f"c{i}", t, ("misc",), "") for i, t in enumerate(cand_titles)})
    r = PromptRenderer(cat, genre="music")
    inst = EvalInstance("u", tuple(f"c{i}" for i in range(len(cand_titles))),
                        tuple([False] * len(cand_titles)), history("u", [f"h{i}" for i in range(len(user_items))]),
                        0, "d")
    block = r.items_block([f"h{i}" for i in range(len(user_items))], AttrCombo.T)
    return r.render_inference_prompt(inst, PromptSpec.parse("L-10-T"), block).text


def test_verbatim_positives_rank_first():
    cands = [f"zzq{i} filler{i}" for i in range(18)]
    cands[4] = "Moonlight Sonata Piano"
    cands[11] = "Blue Train Saxophone"
    text = _prompt(["Moonlight Sonata Piano", "Blue Train Saxophone"], cands)
    ranking = parse_ranking(mock_oracle_complete(text), 18)
    assert set(ranking[:2]) == {5, 12}


def test_failure_injection_then_valid_list():
    text = _prompt(["a b"], [f"x{i}" for i in range(20)])
    for attempt in (1, 2, 3):
        out = mock_oracle_complete(text, attempt=attempt, failures=3)
        assert out == GIBBERISH and parse_ranking(out, 20) is None
    assert parse_ranking(mock_oracle_complete(text, attempt=4, failures=3), 20) is not None


def test_noise_is_seeded_per_attempt():
    text = _prompt(["alpha beta"], [f"alpha x{i}" for i in range(20)])
    a = mock_oracle_complete(text, attempt=1, seed=7, noise=0.5)
    assert a == mock_oracle_complete(text, attempt=1, seed=7, noise=0.5)
    assert a != mock_oracle_complete(text, attempt=2, seed=7, noise=0.5)


def test_summary_lists_frequent_tokens():
    from promptsel.promptgrid import PromptRenderer
    cat = {f"i{j}": Item(f"i{j}", f"jazz night {j}", ("Jazz",), "") for j in range(5)}
    text = PromptRenderer(cat).render_summarization_prompt(list(cat), AttrCombo.TC).text
    out = mock_oracle_complete(text)
    assert out.startswith("Preferred themes: jazz, night")


def test_unrecognized_prompt_raises():
    with pytest.raises(UnrecognizedPrompt):
        mock_oracle_complete("hello there")


def test_mock_embedding_stable_and_nonzero():
    a = mock_embedding("Abbey Road", seed=1)
    assert np.array_equal(a, mock_embedding("Abbey Road", seed=1))
    assert np.linalg.norm(mock_embedding("", seed=1)) > 0
    assert not np.array_equal(a, mock_embedding("Abbey Road", seed=2))


def test_richer_attributes_rank_better_on_category_correlated_data(tmp_path):
    # categories carry most of the topic signal in the clothes profile
    prof = synthetic.PROFILES[3]
    items, reviews = synthetic.generate_dataset(prof, 130, seed=0)
    synthetic._write_jsonl(tmp_path / "c.jsonl", items)
    synthetic._write_jsonl(tmp_path / "r.jsonl", reviews)
    catalog, hists = ingest_reviews(tmp_path / "r.jsonl", tmp_path / "c.jsonl")
    instances = build_eval_split(hists, catalog, 100, seed=0, dataset="clothes")
    ev = Evaluator(Gateway(use_cache=False), ModelProfile("m"), PromptRenderer(catalog),
                   ModelProfile("e", kind="embedding"))
    mean = {}
    for name in ("L-10-T", "L-10-TC"):
        rows = ev.evaluate_prompt(PromptSpec.parse(name), instances)
        mean[name] = sum(r.ndcg for r in rows) / len(rows)
    assert mean["L-10-TC"] > mean["L-10-T"]
