"""CTR metrics (AUC, accuracy), top-K ranking metrics, and tail RMSE."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import TEST, TRAIN, DatasetBundle
from .errors import DataError
from .model import MkrModel


@dataclass
class ScoredPair:
    user_id: int
    item_id: int
    label: int
    score: float


def pairs_to_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    return labels, scores


def auc(labels, scores) -> float:
    """Probability a random positive outscores a random negative, ties half.

    Rank-sum form: (sum of positive ranks - P(P+1)/2) / (P * N).
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(labels, scores, threshold: float = 0.5) -> float:
    """Fraction of rows where (score >= threshold) matches the label."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) == 0:
        raise DataError("accuracy of an empty set is undefined")
    predicted = (scores >= threshold).astype(np.int64)
    return float((predicted == labels).mean())


@dataclass
class MetricReport:
    auc: float
    acc: float
    precision_at: dict[int, float] = field(default_factory=dict)
    recall_at: dict[int, float] = field(default_factory=dict)
    kge_rmse: float | None = None

    def to_json(self) -> str:
        return json.dumps({
            "auc": self.auc,
            "acc": self.acc,
            "precision_at": {str(k): v for k, v in sorted(self.precision_at.items())},
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "kge_rmse": self.kge_rmse,
        }, indent=2, sort_keys=True)

    def to_csv_rows(self) -> list[tuple[str, str, float]]:
        rows = [("auc", "", self.auc), ("acc", "", self.acc)]
        rows += [("precision", str(k), v) for k, v in sorted(self.precision_at.items())]
        rows += [("recall", str(k), v) for k, v in sorted(self.recall_at.items())]
        if self.kge_rmse is not None:
            rows.append(("kge_rmse", "", self.kge_rmse))
        return rows


def evaluate_ctr(model: MkrModel, bundle: DatasetBundle, split: int) -> tuple[float, float]:
    rows = bundle.interaction_indices(split)
    if len(rows) == 0:
        raise DataError("split holds no interactions")
    scores = model.rs_forward_eval(bundle.users[rows], bundle.items[rows])
    labels = bundle.labels[rows]
    return auc(labels, scores), accuracy(labels, scores)


def top_k(model: MkrModel, bundle: DatasetBundle, ks) -> tuple[dict[int, float], dict[int, float]]:
    """Macro-averaged precision/recall at each K over test users.

    Candidates per user are all items outside the user's training positives;
    score ties break toward the smaller item id. Users without a test
    positive are skipped.
    """
    ks = sorted(int(k) for k in ks)
    if not ks:
        return {}, {}
    train_rows = bundle.interaction_indices(TRAIN)
    test_rows = bundle.interaction_indices(TEST)
    train_pos: dict[int, set[int]] = {}
    for r in train_rows:
        if bundle.labels[r] == 1:
            train_pos.setdefault(int(bundle.users[r]), set()).add(int(bundle.items[r]))
    test_pos: dict[int, set[int]] = {}
    for r in test_rows:
        if bundle.labels[r] == 1:
            test_pos.setdefault(int(bundle.users[r]), set()).add(int(bundle.items[r]))
    if not test_pos:
        raise DataError("no user has a positive test interaction")

    user_reprs = model.user_representations()
    item_reprs = model.item_representations()
    n_items = bundle.n_items
    precision = {k: 0.0 for k in ks}
    recall = {k: 0.0 for k in ks}
    for user in sorted(test_pos):
        exclude = train_pos.get(user, set())
        candidates = np.array(
            [i for i in range(n_items) if i not in exclude], dtype=np.int64)
        scores = model.score_pairs(
            np.repeat(user_reprs[user][None, :], len(candidates), axis=0),
            item_reprs[candidates])
        # stable ascending sort on (-score, item_id): ties go to smaller id
        order = np.lexsort((candidates, -scores))
        ranked = candidates[order]
        positives = test_pos[user]
        for k in ks:
            hits = sum(1 for i in ranked[:k] if int(i) in positives)
            precision[k] += hits / k
            recall[k] += hits / len(positives)
    n_users = len(test_pos)
    return ({k: v / n_users for k, v in precision.items()},
            {k: v / n_users for k, v in recall.items()})


def kge_rmse(model: MkrModel, bundle: DatasetBundle, split: int) -> float:
    """Root mean squared error between predicted and stored tail vectors."""
    rows = bundle.triple_indices(split)
    if len(rows) == 0:
        raise DataError("split holds no triples")
    t_hat = model.predict_tail_eval(bundle.heads[rows], bundle.relations[rows])
    t_true = model.entity_emb.data[bundle.tails[rows]]
    return float(np.sqrt(np.mean((t_hat - t_true) ** 2)))


def metric_report(model: MkrModel, bundle: DatasetBundle, ks=()) -> MetricReport:
    """All test-split metrics in one report."""
    auc_value, acc_value = evaluate_ctr(model, bundle, TEST)
    precision, recall = top_k(model, bundle, ks) if ks else ({}, {})
    rmse = kge_rmse(model, bundle, TEST) if len(bundle.triple_indices(TEST)) else None
    return MetricReport(auc=auc_value, acc=acc_value,
                        precision_at=precision, recall_at=recall, kge_rmse=rmse)
