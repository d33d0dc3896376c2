"""Linear probe, retrieval metrics, feature algebra and the aggregation comparison."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractError


# ---------------------------------------------------------------- linear classifier

@dataclass
class LinearClassifier:
    classes: np.ndarray  # label value per output column
    W: np.ndarray  # (d, k)
    b: np.ndarray  # (k,)
    mean: np.ndarray
    scale: np.ndarray
    prior: np.ndarray  # class frequencies, used only to break exact score ties
    history: np.ndarray = field(default=None, repr=False)  # (epochs + 1,) summed objective

    def decision(self, X) -> np.ndarray:
        Z = (np.asarray(X, np.float64) - self.mean) / self.scale
        return Z @ self.W + self.b

    def predict(self, X) -> np.ndarray:
        s = self.decision(X)
        best = s.max(axis=1, keepdims=True)
        tied = s >= best - 1e-12 * np.maximum(1.0, np.abs(best))
        # ties go to the most frequent class, then the lowest label
        pick = np.argmax(np.where(tied, self.prior[None, :], -np.inf), axis=1)
        return self.classes[pick]


def _hinge_objective(W, b, Z, Y, C):
    margins = 1.0 - Y * (Z @ W + b)
    return 0.5 * (W * W).sum(axis=0) + C * np.maximum(margins, 0.0).sum(axis=0)


def train_linear_classifier(features, labels, C: float = 1.0, epochs: int = 300, seed=0) -> LinearClassifier:
    """One-vs-rest linear SVM: L2-regularised hinge loss, full-batch subgradient descent.

    Features are standardised with training statistics. Each class's step size
    backtracks whenever a step would raise its objective, so every per-class
    objective (and their sum, kept in ``history``) is non-increasing. The
    procedure uses no randomness; ``seed`` is accepted for interface symmetry.
    """
    X = np.asarray(features, np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractError("features must be (n, d) aligned with labels")
    if not np.isfinite(X).all():
        raise ContractError("features contain non-finite values")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ContractError("need at least two classes to train a classifier")
    if C <= 0:
        raise ValueError("C must be positive")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    n, d = Z.shape
    k = len(classes)
    Y = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    W = np.zeros((d, k))
    b = np.zeros(k)
    step = np.full(k, 1.0 / (C * n))
    obj = _hinge_objective(W, b, Z, Y, C)
    history = [obj.sum()]
    for _ in range(epochs):
        active = (1.0 - Y * (Z @ W + b)) > 0
        gW = W - C * Z.T @ (Y * active)
        gb = -C * (Y * active).sum(axis=0)
        done = np.zeros(k, bool)
        for _try in range(40):
            W_new = W - step * gW
            b_new = b - step * gb
            new = _hinge_objective(W_new, b_new, Z, Y, C)
            ok = (new <= obj) & ~done
            W[:, ok], b[ok], obj[ok] = W_new[:, ok], b_new[ok], new[ok]
            step[ok] *= 1.1
            done |= ok
            if done.all():
                break
            step[~done] *= 0.5
        history.append(obj.sum())
    return LinearClassifier(classes, W, b, mean, scale, counts / n, np.array(history))


def accuracy(predictions, labels) -> tuple[float, float]:
    """(instance accuracy, class-averaged accuracy = mean per-class recall)."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(y) == 0:
        raise ContractError("accuracy of an empty set is undefined")
    if p.shape != y.shape:
        raise ContractError("predictions and labels must align")
    correct = p == y
    recalls = [correct[y == c].mean() for c in np.unique(y)]
    return float(correct.mean()), float(np.mean(recalls))


def classify(features, labels, train_mask, C: float = 1.0) -> tuple[float, float]:
    """Fit on the rows in ``train_mask`` and score the rest."""
    train_mask = np.asarray(train_mask, bool)
    clf = train_linear_classifier(np.asarray(features)[train_mask], np.asarray(labels)[train_mask], C)
    return accuracy(clf.predict(np.asarray(features)[~train_mask]), np.asarray(labels)[~train_mask])


# ---------------------------------------------------------------- retrieval

@dataclass
class RankedList:
    query_id: object
    ids: np.ndarray  # gallery ids, nearest first
    distances: np.ndarray
    relevant: np.ndarray  # bool per ranked item
    query_label: object = None


def distances(query, gallery, metric: str = "cosine") -> np.ndarray:
    q = np.asarray(query, np.float64)
    G = np.asarray(gallery, np.float64)
    if metric == "euclidean":
        return np.sqrt(((G - q) ** 2).sum(axis=1))
    if metric == "cosine":
        qn = np.linalg.norm(q)
        if qn == 0:
            raise ContractError("cosine distance is undefined for a zero query vector")
        gn = np.linalg.norm(G, axis=1)
        sim = np.divide(G @ q, gn * qn, out=np.zeros(len(G)), where=gn > 0)
        return 1.0 - sim
    raise ValueError(f"unknown metric {metric!r}")


def rank_gallery(query_feat, gallery_feats, metric: str = "cosine", gallery_ids=None, gallery_labels=None,
                 query_label=None, query_id=None) -> RankedList:
    """Sort the gallery by ascending distance; equal distances keep gallery-id order."""
    G = np.asarray(gallery_feats, np.float64)
    if G.ndim != 2 or len(G) == 0:
        raise ContractError("gallery must be a non-empty (n, d) matrix")
    ids = np.arange(len(G)) if gallery_ids is None else np.asarray(gallery_ids)
    dist = distances(query_feat, G, metric)
    order = np.lexsort((ids, dist))
    rel = np.zeros(len(G), bool) if gallery_labels is None else np.asarray(gallery_labels)[order] == query_label
    return RankedList(query_id, ids[order], dist[order], rel, query_label)


def rank_all(features, labels, ids=None, metric: str = "cosine") -> list[RankedList]:
    """Each shape queries the rest of the set."""
    F = np.asarray(features, np.float64)
    labels = np.asarray(labels)
    ids = np.arange(len(F)) if ids is None else np.asarray(ids)
    out = []
    for q in range(len(F)):
        keep = np.arange(len(F)) != q
        out.append(rank_gallery(F[q], F[keep], metric, ids[keep], labels[keep], labels[q], ids[q]))
    return out


def average_precision(relevant) -> float:
    rel = np.asarray(relevant, bool)
    if not rel.any():
        raise ContractError("average precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


def ndcg(relevant) -> float:
    """Binary-gain NDCG over the full ranking with a log2(rank + 1) discount."""
    rel = np.asarray(relevant, np.float64)
    disc = 1.0 / np.log2(np.arange(2, len(rel) + 2))
    ideal = (np.sort(rel)[::-1] * disc).sum()
    if ideal == 0:
        raise ContractError("NDCG needs at least one relevant item")
    return float((rel * disc).sum() / ideal)


def pr_points(relevant) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) after each rank."""
    rel = np.asarray(relevant, bool)
    hits = np.cumsum(rel)
    return hits / max(rel.sum(), 1), hits / np.arange(1, len(rel) + 1)


@dataclass
class RetrievalReport:
    mAP: float
    ndcg: float
    micro: dict  # precision, recall, f1, mAP, ndcg
    macro: dict
    pr_recall: np.ndarray = field(repr=False)
    pr_precision: np.ndarray = field(repr=False)
    excluded: list = field(default_factory=list)  # query ids with no relevant item
    per_query_ap: np.ndarray = field(default=None, repr=False)


def retrieval_metrics(lists: Sequence[RankedList]) -> RetrievalReport:
    """Aggregate ranking quality over queries.

    Micro figures pool counts over all queries, macro figures average per
    class first. P/R/F1 use a per-query cutoff equal to the number of
    relevant gallery items. Queries with no relevant item are excluded and
    listed in ``excluded``.
    """
    used = [r for r in lists if np.asarray(r.relevant).any()]
    excluded = [r.query_id for r in lists if not np.asarray(r.relevant).any()]
    if not used:
        raise ContractError("no query has a relevant gallery item")
    aps, ndcgs, tps, cut, labels, per_p, per_r, per_f = [], [], [], [], [], [], [], []
    for r in used:
        rel = np.asarray(r.relevant, bool)
        n_rel = int(rel.sum())
        tp = int(rel[:n_rel].sum())
        aps.append(average_precision(rel))
        ndcgs.append(ndcg(rel))
        tps.append(tp)
        cut.append(n_rel)
        labels.append(r.query_label)
        p = rc = tp / n_rel
        per_p.append(p)
        per_r.append(rc)
        per_f.append(0.0 if p + rc == 0 else 2 * p * rc / (p + rc))
    aps, ndcgs = np.array(aps), np.array(ndcgs)
    tp_sum, cut_sum = float(sum(tps)), float(sum(cut))
    micro_p = tp_sum / cut_sum
    micro_r = tp_sum / cut_sum
    micro = {"precision": micro_p, "recall": micro_r,
             "f1": 0.0 if micro_p + micro_r == 0 else 2 * micro_p * micro_r / (micro_p + micro_r),
             "mAP": float(aps.mean()), "ndcg": float(ndcgs.mean())}
    lab = np.array(labels, dtype=object)
    groups = [lab == c for c in sorted(set(labels), key=str)]
    per = {"precision": np.array(per_p), "recall": np.array(per_r), "f1": np.array(per_f), "mAP": aps, "ndcg": ndcgs}
    macro = {k: float(np.mean([v[g].mean() for g in groups])) for k, v in per.items()}
    # mean PR curve over queries, truncated to the shortest gallery
    length = min(len(r.relevant) for r in used)
    curves = [pr_points(r.relevant) for r in used]
    rec = np.mean([c[0][:length] for c in curves], axis=0)
    prec = np.mean([c[1][:length] for c in curves], axis=0)
    return RetrievalReport(float(aps.mean()), float(ndcgs.mean()), micro, macro, rec, prec, excluded, aps)


# ---------------------------------------------------------------- feature algebra

def feature_algebra(memory, a: int, b: int, c: int, k: int, metric: str = "cosine", ids=None) -> list:
    """The k shapes nearest to F_a - F_b + F_c, never returning a, b or c."""
    F = np.asarray(memory, np.float64)
    n = len(F)
    for v in (a, b, c):
        if not 0 <= v < n:
            raise ValueError(f"shape index {v} out of range for {n} shapes")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    keep = np.setdiff1d(np.arange(n), [a, b, c])
    if k < 0 or k > len(keep):
        raise ValueError(f"k={k} but only {len(keep)} shapes remain after excluding the operands")
    if k == 0:
        return []
    r = rank_gallery(F[a] - F[b] + F[c], F[keep], metric, ids[keep])
    return list(r.ids[:k])


# ---------------------------------------------------------------- aggregation comparison

AGGREGATION_COLUMNS = ("MaxP_zeroF", "MeanP_zeroF", "MaxP_trainF", "MeanP_trainF", "Ours")


def compare_aggregation(params, memory, views, labels, train_mask, hp, zero_params=None,
                        allow_untrained: bool = False) -> dict:
    """Accuracy of memory rows against max/mean pooled encoder states.

    Pooled variants run the encoder over all V sections with the trained rows
    (``trainF``) or with all-zero memory (``zeroF``); ``zero_params`` is the
    network trained with zero frozen memory, defaulting to ``params``.
    Returns ``{column: (instance_acc, class_acc)}`` in ``AGGREGATION_COLUMNS`` order.
    """
    from .model import pooled_features

    for p in (params, zero_params):
        if p is not None and p.steps == 0 and not allow_untrained:
            raise ContractError("aggregation comparison needs a trained model")
    F = np.asarray(memory.F.data if hasattr(memory, "F") else memory)
    zp = params if zero_params is None else zero_params
    zero = pooled_features(zp, None, views, hp)
    train = pooled_features(params, F, views, hp)
    feats = {"MaxP_zeroF": zero["max"], "MeanP_zeroF": zero["mean"], "MaxP_trainF": train["max"],
             "MeanP_trainF": train["mean"], "Ours": F}
    return {col: classify(feats[col], labels, train_mask) for col in AGGREGATION_COLUMNS}


# ---------------------------------------------------------------- CSV

def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else str(float(v))
    return v
