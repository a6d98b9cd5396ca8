"""Slow, obviously-correct reference implementations used by the tests.

None of these import the code under test's algorithms; they re-derive the
quantities from their definitions.
"""

from __future__ import annotations

import itertools
import math


def brute_ndcg(ranking, mask, k=10):
    """DCG/IDCG with binary gains, written directly from the definition."""
    relevant = {i + 1 for i, m in enumerate(mask) if m}
    dcg = 0.0
    for pos, idx in enumerate(ranking[:k], start=1):
        if idx in relevant:
            dcg += 1.0 / math.log(pos + 1, 2)
    ideal = 0.0
    for pos in range(1, min(k, len(relevant)) + 1):
        ideal += 1.0 / math.log(pos + 1, 2)
    return dcg / ideal


def brute_rpi(acc: dict, axes: list[list], axis: int) -> dict:
    """RPI per value of ``axes[axis]`` by listing every qualifying ordered pair.

    ``acc`` maps coordinate tuples to accuracy; ``axes`` lists the value sets.
    """
    out = {}
    for v in axes[axis]:
        ratios = []
        for p in itertools.product(*axes):
            if p[axis] != v:
                continue
            for q in itertools.product(*axes):
                differs = [i for i in range(len(axes)) if p[i] != q[i]]
                if differs == [axis]:
                    ratios.append(acc[p] / acc[q])
        out[v] = 100.0 * (sum(ratios) / len(ratios) - 1.0) if ratios else 0.0
    return out


def brute_extract(hist_vecs, cand_vecs, k):
    """Indices (oldest = 0) of the selected history items, newest first.

    Score each history item by its best cosine against any candidate; take
    the k best, preferring the more recent item on equal score.
    """
    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(x * x for x in b))
        return sum(x * y for x, y in zip(a, b)) / (na * nb)

    scores = [round(max(cos(h, c) for c in cand_vecs), 12) for h in hist_vecs]
    chosen = []
    remaining = list(range(len(hist_vecs)))
    for _ in range(min(k, len(remaining))):
        best = None
        for i in remaining:
            if best is None or scores[i] > scores[best] or (scores[i] == scores[best] and i > best):
                best = i
        chosen.append(best)
        remaining.remove(best)
    return sorted(chosen, reverse=True)
