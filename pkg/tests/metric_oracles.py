"""Brute-force reference implementations of the evaluation metrics.

They deliberately avoid the library's code paths: ideal DCG comes from
maximising over every permutation, ranks from pairwise counting and
entropies from explicit probability tables.
"""
import itertools
import math
from collections import Counter

import numpy as np

from embedlab import evaluation as E


def dcg(grades):
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg_query(ranked_grades, all_grades, k):
    """nDCG@k for one query; the ideal is the best DCG@k over every ordering
    of the judged grades (only usable for small candidate sets)."""
    ideal = max(dcg(p[:k]) for p in itertools.permutations(all_grades))
    return dcg(ranked_grades[:k]) / ideal


def ndcg_query_sorted(ranked_grades, all_grades, k):
    """Same as :func:`ndcg_query`, ideal by sorting (for larger sets)."""
    return dcg(ranked_grades[:k]) / dcg(sorted(all_grades, reverse=True)[:k])


def ap_query(ranked_relevant, n_relevant, k):
    """Average precision at k from explicit precision-at-rank counting."""
    total = 0.0
    for r in range(1, min(k, len(ranked_relevant)) + 1):
        if ranked_relevant[r - 1]:
            total += sum(ranked_relevant[:r]) / r
    return total / n_relevant


def average_ranks(x):
    """1-based ranks with ties averaged, by counting smaller and equal values."""
    return [sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x]


def spearman(pred, gold):
    rp, rg = average_ranks(list(pred)), average_ranks(list(gold))
    n = len(rp)
    mp, mg = sum(rp) / n, sum(rg) / n
    cov = sum((a - mp) * (b - mg) for a, b in zip(rp, rg))
    vp = sum((a - mp) ** 2 for a in rp)
    vg = sum((b - mg) ** 2 for b in rg)
    return cov / math.sqrt(vp * vg)


def _H(counter, n):
    return -sum(c / n * math.log(c / n) for c in counter.values() if c)


def v_measure(labels, clusters):
    n = len(labels)
    joint = Counter(zip(labels, clusters))
    lab, clu = Counter(labels), Counter(clusters)
    h_c, h_k = _H(lab, n), _H(clu, n)
    h_c_k = -sum(c / n * math.log(c / clu[k]) for (_, k), c in joint.items())
    h_k_c = -sum(c / n * math.log(c / lab[l]) for (l, _), c in joint.items())
    h = 1.0 if h_c == 0 else 1 - h_c_k / h_c
    c = 1.0 if h_k == 0 else 1 - h_k_c / h_k
    return 0.0 if h + c == 0 else 2 * h * c / (h + c)


def set_partitions(n):
    """Every partition of range(n) as a restricted-growth label list."""
    def grow(prefix, top):
        if len(prefix) == n:
            yield list(prefix)
            return
        for b in range(top + 2):
            yield from grow(prefix + [b], max(top, b))
    yield from grow([0], 0) if n else iter([[]])


# ---------------------------------------------------------------- sweeps


def _as_query(grades):
    docs = [f"d{i}" for i in range(len(grades))]
    return {"q": docs}, {"q": {d: g for d, g in zip(docs, grades) if g > 0}}


def exhaustive_ranking(max_items: int = 6, grade_levels=(0, 1, 2)) -> int:
    """Compare ndcg/map with the oracles on every grade vector over every
    cut-off; returns the number of instances checked (raises on mismatch)."""
    checked = 0
    for n in range(1, max_items + 1):
        for grades in itertools.product(grade_levels, repeat=n):
            if not any(grades):
                continue
            ranking, qrels = _as_query(grades)
            for k in range(1, n + 1):
                want = ndcg_query(list(grades), [g for g in grades if g > 0], k)
                got = E.ndcg_at_k(ranking, qrels, k)
                assert abs(got - want) <= 1e-12, (grades, k, got, want)
                rel = [g > 0 for g in grades]
                want = ap_query(rel, sum(rel), k)
                got = E.map_at_k(ranking, qrels, k)
                assert abs(got - want) <= 1e-12, (grades, k, got, want)
                checked += 1
    return checked


def exhaustive_spearman(max_items: int = 6) -> int:
    checked = 0
    for n in range(2, max_items + 1):
        base = list(range(n))
        for gold in itertools.product(range(3), repeat=n):
            if len(set(gold)) < 2:
                continue
            for pred in (base, base[::-1], [(i * 2) % n for i in base]):
                if len(set(pred)) < 2:
                    continue
                assert abs(E.spearman(pred, gold) - spearman(pred, gold)) <= 1e-12
                checked += 1
        for pred in itertools.permutations(base):
            assert abs(E.spearman(pred, base) - spearman(pred, base)) <= 1e-12
            checked += 1
    return checked


def exhaustive_v_measure(max_items: int = 6) -> int:
    checked = 0
    for n in range(1, max_items + 1):
        parts = list(set_partitions(n))
        for labels in parts:
            for clusters in parts:
                assert abs(E.v_measure(labels, clusters) - v_measure(labels, clusters)) <= 1e-12
                checked += 1
    return checked


def random_instances(count: int = 100, max_items: int = 50, seed: int = 0) -> int:
    """Random instances of up to ``max_items`` items for every metric."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, max_items + 1))
        # ranking metrics: several queries, partial rankings, graded relevance
        ranking, qrels, want_n, want_ap = {}, {}, [], []
        k = int(rng.integers(1, n + 1))
        for q in range(int(rng.integers(1, 4))):
            grades = rng.integers(0, 4, size=n) * (rng.random(n) < 0.3)
            if not grades.any():
                grades[int(rng.integers(n))] = 1
            docs = [f"q{q}d{i}" for i in range(n)]
            order = rng.permutation(n)[: int(rng.integers(1, n + 1))]
            ranking[f"q{q}"] = [docs[i] for i in order]
            qrels[f"q{q}"] = {docs[i]: int(g) for i, g in enumerate(grades) if g > 0}
            ranked = [int(grades[i]) for i in order]
            want_n.append(ndcg_query_sorted(ranked, [int(g) for g in grades if g > 0], k))
            want_ap.append(ap_query([g > 0 for g in ranked], int((grades > 0).sum()), k))
        assert abs(E.ndcg_at_k(ranking, qrels, k) - np.mean(want_n)) <= 1e-12
        assert abs(E.map_at_k(ranking, qrels, k) - np.mean(want_ap)) <= 1e-12
        # spearman with ties
        pred, gold = rng.integers(0, 8, size=n).tolist(), rng.integers(0, 8, size=n).tolist()
        if len(set(pred)) > 1 and len(set(gold)) > 1:
            assert abs(E.spearman(pred, gold) - spearman(pred, gold)) <= 1e-12
        # v-measure
        labels, clusters = rng.integers(0, 5, size=n).tolist(), rng.integers(0, 6, size=n).tolist()
        assert abs(E.v_measure(labels, clusters) - v_measure(labels, clusters)) <= 1e-12
    return count
