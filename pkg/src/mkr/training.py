"""Joint loss, negative sampling, Adam, and the alternating task schedule.

One epoch = ``rs_passes`` full passes over the recommender training
positives (each positive paired with a freshly sampled unwatched negative),
followed by one full pass over the training triples (each true triple paired
with a tail-corrupted one). Both phases add the same L2 term and share one
optimizer.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import ComputationRecord, ParameterStore, Tensor, backward
from .data import TRAIN, VALIDATION, DatasetBundle
from .errors import ContractError, TrainingDivergedError
from .model import HyperParams, MkrModel


@dataclass
class RsBatch:
    """Interaction rows with one sampled entity per item occurrence."""

    users: np.ndarray
    items: np.ndarray
    entities: np.ndarray
    labels: np.ndarray


@dataclass
class KgBatch:
    """True triples plus tail-corrupted twins sharing (head, relation)."""

    heads: np.ndarray
    relations: np.ndarray
    head_items: np.ndarray      # sampled associated item per head, -1 if none
    tails: np.ndarray
    corrupt_tails: np.ndarray


def rs_loss(batch: RsBatch, model: MkrModel) -> Tensor:
    """Mean binary cross-entropy over the batch, probabilities clamped."""
    if len(batch.users) == 0:
        raise ContractError("recommender batch is empty")
    probs = model.rs_forward(batch.users, batch.items, batch.entities)
    p = ad.clip(probs, 1e-12, 1.0 - 1e-12)
    y = batch.labels.astype(np.float64)
    ll = ad.add(ad.mul(ad.constant(y), ad.log(p)),
                ad.mul(ad.constant(1.0 - y), ad.log(ad.sub(1.0, p))))
    return ad.neg(ll.mean())


def kg_loss(batch: KgBatch, model: MkrModel, kg_weight: float) -> Tensor:
    """-weight * (mean true-triple score - mean corrupted-triple score).

    Means rather than sums keep the weight batch-size independent.
    """
    if len(batch.heads) == 0 or len(batch.corrupt_tails) == 0:
        raise ContractError("kg batch needs both true and corrupted triples")
    t_hat = model.predict_tail(batch.heads, batch.relations, batch.head_items)
    true_scores = model.triple_scores(t_hat, batch.tails)
    corrupt_scores = model.triple_scores(t_hat, batch.corrupt_tails)
    return ad.scale(ad.sub(corrupt_scores.mean(), true_scores.mean()), kg_weight)


def reg_loss(model: MkrModel) -> Tensor:
    """l2_weight times the squared L2 norm of weights and embeddings (no biases)."""
    if model.hp.l2_weight == 0.0 or not model.store.regularized_names:
        return ad.constant(0.0)
    total: Tensor | None = None
    for name in model.store.regularized_names:
        p = model.store[name]
        sq = ad.mul(p, p).sum()
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, model.hp.l2_weight)


# ---------------------------------------------------------------------------
# negative sampling


def sample_rs_negatives(user_id: int, count: int, bundle: DatasetBundle,
                        rng: np.random.Generator,
                        positive_sets: list[set[int]] | None = None) -> np.ndarray:
    """``count`` distinct items the user has no positive interaction with.

    Uniform over the eligible items. Returns fewer when the user has
    interacted with nearly everything (with a warning when none are left).
    """
    positives = positive_sets[user_id] if positive_sets is not None \
        else bundle.user_positive_sets()[user_id]
    eligible = bundle.n_items - len(positives)
    if eligible <= 0:
        warnings.warn(f"user {user_id} interacted with every item; skipping")
        return np.empty(0, dtype=np.int64)
    count = min(count, eligible)
    if bundle.n_items <= 4096 or count * 4 >= eligible:
        pool = np.setdiff1d(np.arange(bundle.n_items, dtype=np.int64),
                            np.fromiter(positives, dtype=np.int64, count=len(positives)))
        return rng.choice(pool, size=count, replace=False)
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < count:
        draw = rng.integers(0, bundle.n_items, size=2 * (count - len(chosen)))
        for item in draw.tolist():
            if item not in positives and item not in seen:
                seen.add(item)
                chosen.append(item)
                if len(chosen) == count:
                    break
    return np.array(chosen, dtype=np.int64)


def sample_kg_negatives(triple: tuple[int, int, int], bundle: DatasetBundle,
                        rng: np.random.Generator,
                        triple_set: set[tuple[int, int, int]] | None = None) -> tuple[int, int, int]:
    """Corrupt the tail uniformly, rejecting tails that form a true triple.

    After 100 rejections, falls back to the smallest absent tail id; if every
    tail is true the relation is degenerate and that is an error.
    """
    head, relation, _ = triple
    triples = triple_set if triple_set is not None else bundle.triple_set()
    for _ in range(100):
        candidate = int(rng.integers(0, bundle.n_entities))
        if (head, relation, candidate) not in triples:
            return head, relation, candidate
    for candidate in range(bundle.n_entities):
        if (head, relation, candidate) not in triples:
            return head, relation, candidate
    raise ContractError(
        f"every tail is a true triple for head {head}, relation {relation}")


class _SetSampler:
    """Vectorized uniform draws from ragged id sets (one draw per query row)."""

    def __init__(self, sets: list[np.ndarray]):
        self.counts = np.array([len(s) for s in sets], dtype=np.int64)
        self.offsets = np.zeros(len(sets), dtype=np.int64)
        if len(sets):
            np.cumsum(self.counts[:-1], out=self.offsets[1:])
        self.flat = np.concatenate([s for s in sets if len(s)]) \
            if self.counts.sum() else np.empty(0, dtype=np.int64)

    def sample(self, ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One uniform member per id; -1 where the set is empty."""
        counts = self.counts[ids]
        if not len(self.flat):
            return np.full(len(ids), -1, dtype=np.int64)
        picks = np.floor(rng.random(len(ids)) * np.maximum(counts, 1)).astype(np.int64)
        # rows with empty sets may index anywhere valid; they are masked below
        idx = np.minimum(self.offsets[ids] + np.minimum(picks, np.maximum(counts - 1, 0)),
                         len(self.flat) - 1)
        return np.where(counts > 0, self.flat[idx], -1)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; one shared instance serves both tasks."""

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore) -> None:
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for name, param in store.items():
            g = store.grad(name)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(param.data)
                self._v[name] = np.zeros_like(param.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: MkrModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    optimizer_steps: int = 0
    # KG-side snapshot: parameters at the epoch with the lowest validation
    # tail RMSE, kept separately because the returned model is selected by
    # validation AUC and the two optima rarely coincide.
    best_val_rmse: float = float("nan")
    kge_state: dict[str, np.ndarray] | None = None

    def kge_model(self) -> MkrModel:
        """The best-validation-RMSE checkpoint as a usable model."""
        if self.kge_state is None:
            raise ContractError("no validation triples were available during training")
        self.model.store.load_state_dict(self.kge_state)
        return self.model


def _check_finite(loss: Tensor, epoch: int, step: int, what: str) -> None:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(epoch, step, f"{what} loss is {value}")


def rs_steps_per_pass(n_positives: int, batch_size: int) -> int:
    return int(np.ceil(2 * n_positives / batch_size))


def kg_steps_per_pass(n_triples: int, batch_size: int) -> int:
    return int(np.ceil(2 * n_triples / batch_size))


def train(bundle: DatasetBundle, hp: HyperParams, seed: int) -> TrainResult:
    """Run the alternating schedule; return the best-validation checkpoint.

    Logs one dict per epoch: {epoch, rs_loss, kg_loss, val_auc, val_acc,
    seconds}. Selection is by validation AUC (validation tail RMSE when only
    the KG task trains). Stops early after ``hp.patience`` epochs without
    improvement.
    """
    hp.validate()
    seeds = np.random.SeedSequence(seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    rng = np.random.default_rng(seeds[1])

    model = MkrModel(bundle.n_users, bundle.n_items, bundle.n_entities,
                     bundle.n_relations, hp,
                     seed=int(init_rng.integers(2 ** 31)),
                     alignment=bundle.alignment)
    optimizer = Adam(hp.learning_rate)

    train_rows = bundle.interaction_indices(TRAIN)
    train_pos = train_rows[bundle.labels[train_rows] == 1]
    pos_users = bundle.users[train_pos]
    pos_items = bundle.items[train_pos]
    train_triples = bundle.triple_indices(TRAIN)
    val_rows = bundle.interaction_indices(VALIDATION)
    val_triples = bundle.triple_indices(VALIDATION)

    positive_sets = bundle.user_positive_sets()
    triple_set = bundle.triple_set()
    entity_sampler = _SetSampler(bundle.alignment.item_entities)
    item_sampler = _SetSampler(bundle.alignment.entity_items)

    pos_per_batch = max(1, hp.batch_size_rs // 2)
    triples_per_batch = max(1, hp.batch_size_kg // 2)

    run_rs = hp.tasks in ("joint", "rs_only")
    run_kg = hp.tasks in ("joint", "kge_only")
    if run_rs and len(train_pos) == 0:
        raise ContractError("no positive training interactions")
    if run_kg and len(train_triples) == 0:
        raise ContractError("no training triples")

    result = TrainResult(model=model)
    best_metric = -np.inf
    best_state: dict[str, np.ndarray] | None = None
    best_rmse = np.inf
    stale = 0

    for epoch in range(1, hp.epochs + 1):
        t_start = time.perf_counter()
        rs_epoch_losses: list[float] = []
        kg_epoch_losses: list[float] = []
        step = 0

        if run_rs:
            for _ in range(hp.rs_passes):
                order = rng.permutation(len(train_pos))
                for lo in range(0, len(order), pos_per_batch):
                    chunk = order[lo:lo + pos_per_batch]
                    users = pos_users[chunk]
                    items = pos_items[chunk]
                    neg_user_parts: list[np.ndarray] = []
                    neg_item_parts: list[np.ndarray] = []
                    for u, c in zip(*np.unique(users, return_counts=True)):
                        negs = sample_rs_negatives(int(u), int(c), bundle, rng, positive_sets)
                        neg_item_parts.append(negs)
                        neg_user_parts.append(np.full(len(negs), u, dtype=np.int64))
                    neg_users = np.concatenate(neg_user_parts)
                    neg_items = np.concatenate(neg_item_parts)
                    batch_users = np.concatenate([users, neg_users])
                    batch_items = np.concatenate([items, neg_items])
                    labels = np.concatenate([np.ones(len(users), dtype=np.int64),
                                             np.zeros(len(neg_items), dtype=np.int64)])
                    entities = entity_sampler.sample(batch_items, rng)
                    batch = RsBatch(batch_users, batch_items, entities, labels)
                    step += 1
                    with ComputationRecord():
                        loss = ad.add(rs_loss(batch, model), reg_loss(model))
                        _check_finite(loss, epoch, step, "recommender")
                        backward(loss, model.store)
                    optimizer.step(model.store)
                    rs_epoch_losses.append(loss.item())

        if run_kg:
            order = rng.permutation(len(train_triples))
            for lo in range(0, len(order), triples_per_batch):
                rows = train_triples[order[lo:lo + triples_per_batch]]
                heads = bundle.heads[rows]
                relations = bundle.relations[rows]
                tails = bundle.tails[rows]
                corrupt = np.array([
                    sample_kg_negatives((int(h), int(r), int(t)), bundle, rng, triple_set)[2]
                    for h, r, t in zip(heads, relations, tails)
                ], dtype=np.int64)
                head_items = item_sampler.sample(heads, rng)
                batch = KgBatch(heads, relations, head_items, tails, corrupt)
                step += 1
                with ComputationRecord():
                    loss = ad.add(kg_loss(batch, model, hp.kg_weight), reg_loss(model))
                    _check_finite(loss, epoch, step, "kg")
                    backward(loss, model.store)
                optimizer.step(model.store)
                kg_epoch_losses.append(loss.item())

        val_scores = model.rs_forward_eval(bundle.users[val_rows], bundle.items[val_rows])
        val_labels = bundle.labels[val_rows]
        val_auc = evaluation.auc(val_labels, val_scores)
        val_acc = evaluation.accuracy(val_labels, val_scores)
        val_rmse = evaluation.kge_rmse(model, bundle, VALIDATION) \
            if len(val_triples) else np.inf
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            result.best_val_rmse = float(val_rmse)
            result.kge_state = model.store.state_dict()
        metric = -val_rmse if hp.tasks == "kge_only" else val_auc
        seconds = time.perf_counter() - t_start
        result.log.append({
            "epoch": epoch,
            "rs_loss": float(np.mean(rs_epoch_losses)) if rs_epoch_losses else 0.0,
            "kg_loss": float(np.mean(kg_epoch_losses)) if kg_epoch_losses else 0.0,
            "val_auc": float(val_auc),
            "val_acc": float(val_acc),
            "seconds": float(seconds),
        })

        if metric > best_metric:
            best_metric = metric
            best_state = model.store.state_dict()
            result.best_epoch = epoch
            result.best_val_auc = float(val_auc)
            stale = 0
        else:
            stale += 1
            if stale >= hp.patience:
                break

    if best_state is not None:
        model.store.load_state_dict(best_state)
    result.optimizer_steps = optimizer.steps
    return result
