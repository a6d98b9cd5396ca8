"""Ranking parsing, nDCG@k, the retry/fallback evaluation protocol and result aggregation."""

from __future__ import annotations

import csv
import io
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .catalog import EvalInstance
from .gateway import Gateway, ModelProfile, UpstreamError
from .promptgrid import (
    Approach,
    AttrCombo,
    ContextOverflowError,
    PromptRenderer,
    PromptSpec,
    render_embedding_text,
    sample_items,
    summary_block,
)
from .utils import derive_seed

logger = logging.getLogger(__name__)

MIN_LISTED = 10

_LIST_RE = re.compile(r"\[\s*(-?\d+(?:\s*,\s*-?\d+)*)\s*,?\s*\]")


def parse_ranking(text: str, n_candidates: int, seed: int = 0, min_listed: int = MIN_LISTED) -> list[int] | None:
    """Permutation of ``1..n_candidates`` read from the last bracketed integer list, or None.

    The list must hold at least ``min_listed`` distinct in-range indices (all of
    them when there are fewer candidates); repeats are dropped, any
    out-of-range value rejects the answer. Unlisted candidates are appended in
    seeded random order.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    found = _LIST_RE.findall(text or "")
    if not found:
        return None
    values = [int(v) for v in found[-1].split(",")]
    if any(v < 1 or v > n_candidates for v in values):
        return None
    listed = list(dict.fromkeys(values))
    if len(listed) < min(min_listed, n_candidates):
        return None
    seen = set(listed)
    rest = [i for i in range(1, n_candidates + 1) if i not in seen]
    random.Random(seed).shuffle(rest)
    return listed + rest


_DISCOUNTS = [1.0 / math.log2(r + 1) for r in range(1, 257)]


def _discount(rank: int) -> float:
    return _DISCOUNTS[rank - 1] if rank <= len(_DISCOUNTS) else 1.0 / math.log2(rank + 1)


def ndcg_at_k(ranking: Sequence[int], positive_mask: Sequence[bool], k: int = 10) -> float:
    """Binary-relevance nDCG@k; ``ranking[r-1]`` is the 1-based candidate index placed at rank r."""
    if len(ranking) != len(positive_mask):
        raise ValueError(f"ranking has {len(ranking)} entries, mask has {len(positive_mask)}")
    n_pos = sum(1 for p in positive_mask if p)
    if n_pos == 0:
        raise ValueError("nDCG undefined without positives")
    dcg = sum(_discount(r) for r, idx in enumerate(ranking[:k], start=1) if positive_mask[idx - 1])
    idcg = sum(_discount(r) for r in range(1, min(n_pos, k) + 1))
    return dcg / idcg


def random_ndcg_samples(n_pos: int = 2, n_cand: int = 20, k: int = 10, trials: int = 200_000,
                        seed: int = 0, chunk: int = 50_000) -> np.ndarray:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 1 <= n_pos <= n_cand:
        raise ValueError("need 1 <= n_pos <= n_cand")
    rng = np.random.default_rng(seed)
    kk = min(k, n_cand)
    disc = 1.0 / np.log2(np.arange(2, kk + 2))
    idcg = disc[:min(n_pos, kk)].sum()
    out = np.empty(trials)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        perms = np.argsort(rng.random((m, n_cand)), axis=1)
        # candidates 0..n_pos-1 play the positives
        out[done:done + m] = (perms[:, :kk] < n_pos) @ disc / idcg
        done += m
    return out


def random_baseline(n_pos: int = 2, n_cand: int = 20, k: int = 10, trials: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo mean nDCG@k of uniformly random rankings."""
    return float(random_ndcg_samples(n_pos, n_cand, k, trials, seed).mean())


def random_baseline_interval(n_users: int, n_pos: int = 2, n_cand: int = 20, k: int = 10,
                             trials: int = 200_000, seed: int = 0, z: float = 2.5758) -> tuple[float, float]:
    """Interval expected to hold the mean random nDCG over ``n_users`` users (z=2.5758 → 99%)."""
    s = random_ndcg_samples(n_pos, n_cand, k, trials, seed)
    half = z * s.std(ddof=1) / math.sqrt(n_users)
    return float(s.mean() - half), float(s.mean() + half)


# ---------------------------------------------------------------------------
# results


@dataclass
class EvalResult:
    dataset: str
    spec: str
    user_id: str
    ndcg: float
    attempts_used: int
    fell_back_random: bool = False
    context_overflow: bool = False
    prompt_tokens: int = 0

    def to_record(self) -> dict:
        return {"dataset": self.dataset, "spec": self.spec, "user_id": self.user_id, "ndcg": self.ndcg,
                "attempts": self.attempts_used, "fallback": self.fell_back_random,
                "overflow": self.context_overflow, "prompt_tokens": self.prompt_tokens}

    @classmethod
    def from_record(cls, rec: Mapping) -> "EvalResult":
        return cls(rec["dataset"], rec["spec"], rec["user_id"], float(rec["ndcg"]), int(rec["attempts"]),
                   bool(rec["fallback"]), bool(rec.get("overflow", False)), int(rec.get("prompt_tokens", 0)))


@dataclass
class PromptResult:
    spec: str
    dataset: str
    mean_ndcg: float
    results: list[EvalResult] = field(default_factory=list)
    failed_attempts: int = 0
    fallbacks: int = 0
    mean_prompt_tokens: float = 0.0

    @classmethod
    def from_results(cls, spec: str, dataset: str, results: Iterable[EvalResult]) -> "PromptResult":
        rows = sorted(results, key=lambda r: r.user_id)
        if not rows:
            raise ValueError(f"no results for {dataset}/{spec}")
        return cls(
            spec=spec,
            dataset=dataset,
            mean_ndcg=sum(r.ndcg for r in rows) / len(rows),
            results=rows,
            failed_attempts=sum(r.attempts_used - (0 if r.fell_back_random else 1) for r in rows),
            fallbacks=sum(r.fell_back_random for r in rows),
            mean_prompt_tokens=sum(r.prompt_tokens for r in rows) / len(rows),
        )


class ResultGrid:
    """Accuracy matrix keyed by ``(dataset, spec name)``."""

    def __init__(self, entries: Iterable[PromptResult] = ()):
        self._cells: dict[tuple[str, str], PromptResult] = {}
        for pr in entries:
            self.add(pr)

    def add(self, pr: PromptResult) -> None:
        key = (pr.dataset, pr.spec)
        if key in self._cells:
            raise ValueError(f"duplicate grid entry {key}")
        self._cells[key] = pr

    @classmethod
    def from_accuracies(cls, dataset: str, accuracies: Mapping[str, float],
                        tokens: Mapping[str, float] | None = None) -> "ResultGrid":
        grid = cls()
        for name, acc in accuracies.items():
            grid.add(PromptResult(spec=name, dataset=dataset, mean_ndcg=float(acc),
                                  mean_prompt_tokens=float((tokens or {}).get(name, 0.0))))
        return grid

    @classmethod
    def from_results(cls, results: Iterable[EvalResult]) -> "ResultGrid":
        groups: dict[tuple[str, str], list[EvalResult]] = {}
        for r in results:
            groups.setdefault((r.dataset, r.spec), []).append(r)
        return cls(PromptResult.from_results(spec, ds, rows) for (ds, spec), rows in sorted(groups.items()))

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._cells

    def __iter__(self) -> Iterator[PromptResult]:
        return iter(self._cells.values())

    def __len__(self) -> int:
        return len(self._cells)

    def get(self, dataset: str, spec: str) -> PromptResult:
        return self._cells[(dataset, spec)]

    def accuracy(self, dataset: str, spec: str | PromptSpec) -> float:
        return self._cells[(dataset, str(spec))].mean_ndcg

    def datasets(self) -> list[str]:
        return sorted({d for d, _ in self._cells})

    def specs(self, dataset: str) -> list[str]:
        return [s for d, s in self._cells if d == dataset]

    def missing(self, dataset: str, names: Iterable[str]) -> list[str]:
        return [n for n in names if (dataset, n) not in self._cells]

    def scaled(self, factor: float) -> "ResultGrid":
        return ResultGrid(
            PromptResult(pr.spec, pr.dataset, pr.mean_ndcg * factor, mean_prompt_tokens=pr.mean_prompt_tokens)
            for pr in self
        )

    def to_summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "spec", "mean_ndcg", "users", "fallbacks", "failed_attempts", "mean_prompt_tokens"])
        for (ds, spec), pr in sorted(self._cells.items()):
            w.writerow([ds, spec, f"{pr.mean_ndcg:.6f}", len(pr.results), pr.fallbacks, pr.failed_attempts,
                        f"{pr.mean_prompt_tokens:.1f}"])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# protocol


@dataclass
class Evaluator:
    """Runs the ranking protocol for one dataset against one chat profile."""

    gateway: Gateway
    profile: ModelProfile
    renderer: PromptRenderer
    embedding_profile: ModelProfile | None = None
    run_seed: int = 0
    max_attempts: int = 10
    k: int = 10
    phase: str = ""
    workers: int = 1

    def embedder(self, attrs: AttrCombo, dataset: str = "") -> Callable[[Sequence[str]], np.ndarray]:
        if self.embedding_profile is None:
            raise ValueError("Extract prompts need an embedding profile")
        catalog = self.renderer.catalog

        def embed(item_ids: Sequence[str]) -> np.ndarray:
            texts = [render_embedding_text(catalog[i], attrs) for i in item_ids]
            return np.vstack(self.gateway.embed(self.embedding_profile, texts,
                                                tags={"dataset": dataset, "phase": "embed"}))
        return embed

    def _summarize(self, instance: EvalInstance, spec: PromptSpec, items: list[str], tags: dict) -> str | None:
        prompt = self.renderer.render_summarization_prompt(items, spec.attrs, spec, instance.user_id)
        stags = dict(tags, phase=(self.phase + ":summarize") if self.phase else "summarize")
        answered = False
        for attempt in range(1, self.max_attempts + 1):
            try:
                text = self.gateway.chat_complete(self.profile, prompt, attempt,
                                                  validate=lambda t: bool(t.strip()), tags=stags)
            except UpstreamError as exc:
                logger.warning("summary %s/%s attempt %d failed: %s", spec.name, instance.user_id, attempt, exc)
                if attempt == self.max_attempts and not answered:
                    raise
                continue
            answered = True
            if text.strip():
                return text
        return None

    def user_block(self, instance: EvalInstance, spec: PromptSpec, tags: dict | None = None) -> str | None:
        embed = self.embedder(spec.attrs, instance.dataset) if spec.format.value == "E" else None
        items = sample_items(instance, spec, self.run_seed, embed)
        if spec.approach is Approach.SAMPLING:
            return self.renderer.items_block(items, spec.attrs)
        summary = self._summarize(instance, spec, items, tags or {})
        return None if summary is None else summary_block(summary)

    def _fallback(self, instance: EvalInstance, spec: PromptSpec, overflow: bool, tokens: int) -> EvalResult:
        perm = list(range(1, len(instance.candidates) + 1))
        random.Random(derive_seed(self.run_seed, instance.user_id, spec.name, "fallback")).shuffle(perm)
        return EvalResult(instance.dataset, spec.name, instance.user_id,
                          ndcg_at_k(perm, instance.positive_mask, self.k), self.max_attempts,
                          fell_back_random=True, context_overflow=overflow, prompt_tokens=tokens)

    def evaluate_user(self, instance: EvalInstance, spec: PromptSpec) -> EvalResult:
        tags = {"dataset": instance.dataset, "spec": spec.name, "user_id": instance.user_id, "phase": self.phase}
        n = len(instance.candidates)
        try:
            block = self.user_block(instance, spec, tags)
            if block is None:
                return self._fallback(instance, spec, False, 0)
            prompt = self.renderer.render_inference_prompt(instance, spec, block)
        except ContextOverflowError as exc:
            logger.warning("context overflow, random fallback: %s", exc)
            return self._fallback(instance, spec, True, exc.tokens)

        parsed: list = [None]

        def accept(text: str, attempt: int) -> bool:
            parsed[0] = parse_ranking(text, n, seed=derive_seed(self.run_seed, instance.user_id, spec.name,
                                                               "complete", attempt))
            return parsed[0] is not None

        answered = False
        for attempt in range(1, self.max_attempts + 1):
            parsed[0] = None
            try:
                self.gateway.chat_complete(self.profile, prompt, attempt,
                                           validate=lambda t, a=attempt: accept(t, a), tags=tags)
            except UpstreamError as exc:
                logger.warning("%s/%s attempt %d: %s", spec.name, instance.user_id, attempt, exc)
                if attempt == self.max_attempts and not answered:
                    # the endpoint never answered: stop instead of recording a fake random result
                    raise
                continue
            except ContextOverflowError as exc:
                logger.warning("context overflow, random fallback: %s", exc)
                return self._fallback(instance, spec, True, exc.tokens)
            answered = True
            if parsed[0] is not None:
                return EvalResult(instance.dataset, spec.name, instance.user_id,
                                  ndcg_at_k(parsed[0], instance.positive_mask, self.k), attempt,
                                  prompt_tokens=prompt.estimated_tokens)
        return self._fallback(instance, spec, False, prompt.estimated_tokens)

    def evaluate_prompt(
        self,
        spec: PromptSpec,
        instances: Sequence[EvalInstance],
        on_result: Callable[[EvalResult], None] | None = None,
        skip_users: Iterable[str] = (),
    ) -> list[EvalResult]:
        """Evaluate ``spec`` for every instance not in ``skip_users``; results sorted by user id."""
        datasets = {inst.dataset for inst in instances}
        if len(datasets) > 1:
            raise ValueError(f"instances span several datasets: {sorted(datasets)}")
        skip = set(skip_users)
        todo = [inst for inst in instances if inst.user_id not in skip]
        results: list[EvalResult] = []
        if self.workers <= 1:
            for inst in todo:
                res = self.evaluate_user(inst, spec)
                results.append(res)
                if on_result:
                    on_result(res)
        else:
            with ThreadPoolExecutor(self.workers) as pool:
                futures = [pool.submit(self.evaluate_user, inst, spec) for inst in todo]
                for fut in as_completed(futures):
                    res = fut.result()
                    results.append(res)
                    if on_result:
                        on_result(res)
        return sorted(results, key=lambda r: r.user_id)


def evaluate_prompt(
    spec: PromptSpec,
    instances: Sequence[EvalInstance],
    gateway: Gateway,
    profile: ModelProfile,
    renderer: PromptRenderer,
    max_attempts: int = 10,
    seed: int = 0,
    embedding_profile: ModelProfile | None = None,
    k: int = 10,
) -> PromptResult:
    ev = Evaluator(gateway, profile, renderer, embedding_profile, run_seed=seed, max_attempts=max_attempts, k=k)
    results = ev.evaluate_prompt(spec, instances)
    dataset = instances[0].dataset if instances else ""
    return PromptResult.from_results(spec.name, dataset, results)
