"""Two-pass retrieval and the micro/macro ranking metric suite.

Binary relevance (same category as the query) drives P@N, R@N, F1@N and AP.
NDCG uses graded gains: 2 for matching category and subcategory, 1 for
category only, 0 otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StateError
from .training import evaluate

METRICS = ("P@N", "R@N", "F1@N", "mAP", "NDCG")


@dataclass
class RankList:
    query_id: str
    entries: list[tuple[str, float]] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [sid for sid, _ in self.entries]


@dataclass
class QueryScores:
    precision: float
    recall: float
    f1: float
    ap: float
    ndcg: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.precision, self.recall, self.f1, self.ap, self.ndcg)


@dataclass
class MetricReport:
    micro: dict[str, float]
    macro: dict[str, float]
    n: int = 1000

    def to_csv(self) -> str:
        lines = ["average," + ",".join(METRICS)]
        for name, row in (("micro", self.micro), ("macro", self.macro)):
            lines.append(name + "," + ",".join(repr(row[m]) for m in METRICS))
        return "\n".join(lines) + "\n"


def stable_partition(items: Sequence, keep) -> list:
    """Items satisfying ``keep`` first, the rest after; relative order preserved."""
    return [x for x in items if keep(x)] + [x for x in items if not keep(x)]


def build_rank_list(query_id: str, gallery_ids: Sequence[str], cat_probs: dict[str, np.ndarray],
                    sub_pred: dict[str, int] | None = None) -> RankList:
    """Rank the gallery for one query.

    Pass 1 keeps gallery shapes whose predicted category equals the query's and
    sorts them by their probability for that category (descending, ties by
    shape id). Pass 2, when subcategory predictions are given, moves shapes
    sharing the query's predicted subcategory to the front without otherwise
    changing the order.
    """
    q_cat = int(np.argmax(cat_probs[query_id]))
    hits = [(sid, float(cat_probs[sid][q_cat])) for sid in gallery_ids
            if sid != query_id and int(np.argmax(cat_probs[sid])) == q_cat]
    hits.sort(key=lambda e: (-e[1], e[0]))
    if sub_pred is not None:
        q_sub = sub_pred[query_id]
        hits = stable_partition(hits, lambda e: sub_pred[e[0]] == q_sub)
    return RankList(query_id, hits)


def precision_recall_f1_at_n(rels: Sequence[int], total_relevant: int, n: int) -> tuple[float, float, float]:
    if n < 1:
        raise ValueError("N must be >= 1")
    top = list(rels[:n])
    hits = sum(1 for r in top if r)
    p = hits / len(top) if top else 0.0
    r = hits / total_relevant if total_relevant > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def average_precision(rels: Sequence[int], total_relevant: int) -> float:
    if total_relevant <= 0:
        return 0.0
    hits, acc = 0, 0.0
    for k, r in enumerate(rels, 1):
        if r:
            hits += 1
            acc += hits / k
    return acc / total_relevant


def dcg(gains: Sequence[float], n: int) -> float:
    return sum(g / math.log2(k + 1) for k, g in enumerate(gains[:n], 1))


def ndcg(gains: Sequence[float], n: int) -> float:
    """DCG of the first ``n`` gains over that of the same gains sorted descending."""
    ideal = dcg(sorted(gains, reverse=True), n)
    return dcg(gains, n) / ideal if ideal > 0 else 0.0


def graded_gain(sid: str, query: str, labels: dict[str, int], sublabels: dict[str, int]) -> int:
    if labels[sid] != labels[query]:
        return 0
    return 2 if sublabels[sid] == sublabels[query] else 1


def score_query(rank: RankList, labels: dict[str, int], sublabels: dict[str, int], gallery_ids: Sequence[str],
                n: int, graded: bool = True) -> QueryScores:
    """Scores for one rank list; ``graded=False`` uses binary gains for NDCG too."""
    q = rank.query_id
    ids = rank.ids[:n]
    rels = [int(labels[i] == labels[q]) for i in ids]
    gains = [graded_gain(i, q, labels, sublabels) for i in ids] if graded else rels
    total = sum(1 for g in gallery_ids if g != q and labels[g] == labels[q])
    p, r, f1 = precision_recall_f1_at_n(rels, total, n)
    return QueryScores(p, r, f1, average_precision(rels, total), ndcg(gains, n))


def aggregate(scores: Sequence[QueryScores], categories: Sequence[int], n: int = 1000) -> MetricReport:
    """Micro: mean over queries. Macro: mean over categories of per-category means."""
    if not scores:
        raise ValueError("aggregate needs at least one query")
    arr = np.array([s.as_tuple() for s in scores])
    cats = np.asarray(categories)
    micro = arr.mean(axis=0)
    macro = np.mean([arr[cats == c].mean(axis=0) for c in np.unique(cats)], axis=0)
    return MetricReport(dict(zip(METRICS, map(float, micro))), dict(zip(METRICS, map(float, macro))), n)


def model_predictions(shapes, cat_model, sub_model=None, views=None):
    """Category distributions and predicted subcategories keyed by shape id."""
    for name, model in (("category", cat_model), ("subcategory", sub_model)):
        if model is not None and not getattr(model, "trained", False):
            raise StateError(f"{name} model has not been trained")
    _, _, probs = evaluate(cat_model, shapes, views=views)
    cat_probs = {s.shape_id: p for s, p in zip(shapes, probs)}
    sub_pred = None
    if sub_model is not None:
        _, _, sp = evaluate(sub_model, shapes, target="sublabel", views=views)
        sub_pred = {s.shape_id: int(i) for s, i in zip(shapes, sp.argmax(axis=1))}
    return cat_probs, sub_pred


def retrieve(query_ids: Sequence[str], gallery_ids: Sequence[str], cat_probs: dict[str, np.ndarray],
             sub_pred: dict[str, int] | None, labels: dict[str, int], sublabels: dict[str, int],
             n: int = 1000, graded: bool = True) -> tuple[list[RankList], MetricReport]:
    ranks, scores = [], []
    for q in query_ids:
        rl = build_rank_list(q, gallery_ids, cat_probs, sub_pred)
        ranks.append(rl)
        scores.append(score_query(rl, labels, sublabels, gallery_ids, n, graded))
    return ranks, aggregate(scores, [labels[q] for q in query_ids], n)


def format_rank_lists(ranks: Sequence[RankList], n: int | None = None) -> str:
    return "".join(f"{r.query_id}: {' '.join(r.ids[:n] if n else r.ids)}\n" for r in ranks)


def write_rank_lists(path: str | Path, ranks: Sequence[RankList], n: int | None = None) -> None:
    Path(path).write_text(format_rank_lists(ranks, n))
