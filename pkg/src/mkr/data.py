"""Dataset ingestion, implicit-feedback transform, splits, synthetic data.

File formats (UTF-8 TSV, lines starting with ``#`` ignored):

  interactions  user_id <TAB> item_id <TAB> rating   (raw)
                user_id <TAB> item_id <TAB> label    (processed, label in {0,1})
  kg            head <TAB> relation <TAB> tail       (string ids allowed)
  alignment     item_id <TAB> entity_id              (multiple rows per item)

A processed bundle directory holds the three processed files in dense-id
space, one split-assignment TSV per table, and a remap table per id
namespace so raw ids stay recoverable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataError

TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "validation", "test")

_FILES = {
    "interactions": "interactions.tsv",
    "kg": "kg.tsv",
    "alignment": "alignment.tsv",
    "interaction_splits": "interaction_splits.tsv",
    "triple_splits": "triple_splits.tsv",
}
_REMAP_FILES = {
    "user": "users.tsv",
    "item": "items.tsv",
    "entity": "entities.tsv",
    "relation": "relations.tsv",
}


def read_tsv(path: str, columns: int) -> list[list[str]]:
    """Read a TSV file, skipping blank and ``#`` comment lines."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != columns:
                raise DataError(f"{path}:{lineno}: expected {columns} columns, got {len(parts)}")
            rows.append(parts)
    return rows


@dataclass
class Alignment:
    """Item -> entity sets S(v) and the inverse entity -> item sets S(h)."""

    item_entities: list[np.ndarray]
    entity_items: list[np.ndarray]

    @staticmethod
    def from_pairs(n_items: int, n_entities: int, pairs) -> "Alignment":
        item_sets: list[set[int]] = [set() for _ in range(n_items)]
        entity_sets: list[set[int]] = [set() for _ in range(n_entities)]
        for item, entity in pairs:
            item_sets[item].add(entity)
            entity_sets[entity].add(item)
        return Alignment(
            [np.array(sorted(s), dtype=np.int64) for s in item_sets],
            [np.array(sorted(s), dtype=np.int64) for s in entity_sets],
        )

    def pairs(self):
        for item, ents in enumerate(self.item_entities):
            for entity in ents:
                yield item, int(entity)


@dataclass
class DatasetBundle:
    """Aligned interactions, KG triples, alignment maps and split labels."""

    n_users: int
    n_items: int
    n_entities: int
    n_relations: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    alignment: Alignment
    interaction_split: np.ndarray
    triple_split: np.ndarray
    # dense id -> raw id, one list per namespace
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    entity_ids: list[str] = field(default_factory=list)
    relation_ids: list[str] = field(default_factory=list)

    def interaction_indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.interaction_split == split)

    def triple_indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.triple_split == split)

    def triple_set(self) -> set[tuple[int, int, int]]:
        return set(zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist()))

    def user_positive_sets(self) -> list[set[int]]:
        """Per-user set of positively labeled items (all splits)."""
        out: list[set[int]] = [set() for _ in range(self.n_users)]
        for u, i in zip(self.users[self.labels == 1].tolist(),
                        self.items[self.labels == 1].tolist()):
            out[u].add(i)
        return out

    def validate(self) -> None:
        if len(self.users) != len(self.items) or len(self.users) != len(self.labels):
            raise DataError("interaction columns have inconsistent lengths")
        if len(self.interaction_split) != len(self.users):
            raise DataError("interaction split assignment length mismatch")
        if len(self.triple_split) != len(self.heads):
            raise DataError("triple split assignment length mismatch")
        for arr, bound, what in (
            (self.users, self.n_users, "user"),
            (self.items, self.n_items, "item"),
            (self.heads, self.n_entities, "head"),
            (self.tails, self.n_entities, "tail"),
            (self.relations, self.n_relations, "relation"),
        ):
            if len(arr) and (arr.min() < 0 or arr.max() >= bound):
                raise DataError(f"{what} ids out of range [0, {bound})")
        for item in np.unique(self.items):
            if len(self.alignment.item_entities[item]) == 0:
                raise DataError(f"item {item} appears in interactions but has no aligned entity")

    # -- persistence ---------------------------------------------------

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)

        def write(name, header, rows):
            with open(os.path.join(directory, name), "w", encoding="utf-8") as fh:
                fh.write(f"# {header}\n")
                for row in rows:
                    fh.write("\t".join(str(x) for x in row) + "\n")

        write(_FILES["interactions"], "user_id\titem_id\tlabel",
              zip(self.users.tolist(), self.items.tolist(), self.labels.tolist()))
        write(_FILES["kg"], "head_id\trelation_id\ttail_id",
              zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist()))
        write(_FILES["alignment"], "item_id\tentity_id", self.alignment.pairs())
        write(_FILES["interaction_splits"], "index\tsplit",
              ((i, SPLIT_NAMES[s]) for i, s in enumerate(self.interaction_split.tolist())))
        write(_FILES["triple_splits"], "index\tsplit",
              ((i, SPLIT_NAMES[s]) for i, s in enumerate(self.triple_split.tolist())))
        for key, raw_ids, count in (
            ("user", self.user_ids, self.n_users),
            ("item", self.item_ids, self.n_items),
            ("entity", self.entity_ids, self.n_entities),
            ("relation", self.relation_ids, self.n_relations),
        ):
            ids = raw_ids if raw_ids else [str(i) for i in range(count)]
            write(_REMAP_FILES[key], "raw_id\tdense_id",
                  ((raw, dense) for dense, raw in enumerate(ids)))

    @staticmethod
    def load(directory: str) -> "DatasetBundle":
        def path(name):
            return os.path.join(directory, name)

        inter = read_tsv(path(_FILES["interactions"]), 3)
        kg = read_tsv(path(_FILES["kg"]), 3)
        align = read_tsv(path(_FILES["alignment"]), 2)
        remaps = {}
        for key, fname in _REMAP_FILES.items():
            rows = read_tsv(path(fname), 2)
            ids = [""] * len(rows)
            for raw, dense in rows:
                ids[int(dense)] = raw
            remaps[key] = ids

        users = np.array([int(r[0]) for r in inter], dtype=np.int64)
        items = np.array([int(r[1]) for r in inter], dtype=np.int64)
        labels = np.array([int(r[2]) for r in inter], dtype=np.int64)
        heads = np.array([int(r[0]) for r in kg], dtype=np.int64)
        relations = np.array([int(r[1]) for r in kg], dtype=np.int64)
        tails = np.array([int(r[2]) for r in kg], dtype=np.int64)
        n_items = len(remaps["item"])
        n_entities = len(remaps["entity"])
        alignment = Alignment.from_pairs(
            n_items, n_entities, [(int(a), int(b)) for a, b in align])

        def load_split(name, expected):
            rows = read_tsv(path(_FILES[name]), 2)
            if len(rows) != expected:
                raise DataError(f"{name} has {len(rows)} rows, expected {expected}")
            out = np.empty(expected, dtype=np.int8)
            for idx, split_name in rows:
                out[int(idx)] = SPLIT_NAMES.index(split_name)
            return out

        bundle = DatasetBundle(
            n_users=len(remaps["user"]),
            n_items=n_items,
            n_entities=n_entities,
            n_relations=len(remaps["relation"]),
            users=users, items=items, labels=labels,
            heads=heads, relations=relations, tails=tails,
            alignment=alignment,
            interaction_split=load_split("interaction_splits", len(users)),
            triple_split=load_split("triple_splits", len(heads)),
            user_ids=remaps["user"], item_ids=remaps["item"],
            entity_ids=remaps["entity"], relation_ids=remaps["relation"],
        )
        bundle.validate()
        return bundle


# ---------------------------------------------------------------------------
# preprocessing operations


def to_implicit(users: np.ndarray, items: np.ndarray, ratings: np.ndarray,
                n_items: int, threshold: float | None,
                seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Threshold explicit ratings to positives and pair each user's positives
    with an equal-sized uniform sample of items the user never rated.

    Without a threshold every rated pair is positive. Returns the labeled
    (users, items, labels) arrays, positives first per user.
    """
    rng = np.random.default_rng(seed)
    out_u: list[int] = []
    out_i: list[int] = []
    out_l: list[int] = []
    any_positive = False
    order = np.argsort(users, kind="stable")
    bounds = np.searchsorted(users[order], np.arange(users.max() + 2) if len(users) else [])
    all_items = np.arange(n_items, dtype=np.int64)
    for user in np.unique(users):
        rows = order[bounds[user]:bounds[user + 1]]
        rated = items[rows]
        if threshold is None:
            positives = np.unique(rated)
        else:
            positives = np.unique(rated[ratings[rows] >= threshold])
        if len(positives) == 0:
            continue
        any_positive = True
        unwatched = np.setdiff1d(all_items, np.unique(rated), assume_unique=True)
        count = min(len(positives), len(unwatched))
        negatives = rng.choice(unwatched, size=count, replace=False)
        out_u.extend([user] * (len(positives) + count))
        out_i.extend(positives.tolist())
        out_i.extend(negatives.tolist())
        out_l.extend([1] * len(positives))
        out_l.extend([0] * count)
    if not any_positive:
        raise DataError("threshold removed every positive interaction")
    return (np.array(out_u, dtype=np.int64),
            np.array(out_i, dtype=np.int64),
            np.array(out_l, dtype=np.int64))


def filter_aligned(users: list[str], items: list[str], values: list[float],
                   aligned_items: set[str]):
    """Drop interactions whose item has no aligned entity."""
    keep = [k for k, item in enumerate(items) if item in aligned_items]
    if not keep:
        raise DataError("no interaction references an aligned item")
    return ([users[k] for k in keep], [items[k] for k in keep],
            [values[k] for k in keep])


def split_assignments(n: int, rng: np.random.Generator,
                      ratios=(0.6, 0.2, 0.2)) -> np.ndarray:
    """Random 6:2:2 assignment, largest-remainder so counts stay within 1 of exact."""
    if n < 5:
        raise DataError(f"cannot split {n} records 6:2:2; need at least 5")
    exact = [n * r for r in ratios]
    counts = [int(x) for x in exact]
    remainders = [x - c for x, c in zip(exact, counts)]
    for _ in range(n - sum(counts)):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1.0
    assignment = np.repeat(np.arange(len(ratios), dtype=np.int8), counts)
    rng.shuffle(assignment)
    return assignment


def split(bundle: DatasetBundle, seed: int) -> DatasetBundle:
    """Reassign both split columns with a fresh seeded 6:2:2 draw."""
    rng = np.random.default_rng(seed)
    return replace(
        bundle,
        interaction_split=split_assignments(len(bundle.users), rng),
        triple_split=split_assignments(len(bundle.heads), rng),
    )


def subsample_training(bundle: DatasetBundle, ratio: float, seed: int) -> DatasetBundle:
    """Keep a uniform ``ratio`` of training interactions; eval splits untouched.

    Nested under a shared seed: the kept set for a smaller ratio is a subset
    of the kept set for a larger one.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"training ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return bundle
    train_idx = bundle.interaction_indices(TRAIN)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_idx))
    kept = max(1, int(round(ratio * len(train_idx))))
    dropped = train_idx[order[kept:]]
    keep_mask = np.ones(len(bundle.users), dtype=bool)
    keep_mask[dropped] = False
    return replace(
        bundle,
        users=bundle.users[keep_mask],
        items=bundle.items[keep_mask],
        labels=bundle.labels[keep_mask],
        interaction_split=bundle.interaction_split[keep_mask],
    )


def subsample_kg_training(bundle: DatasetBundle, ratio: float, seed: int) -> DatasetBundle:
    """Keep a uniform ``ratio`` of training triples; eval triples untouched."""
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"kg ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return bundle
    train_idx = bundle.triple_indices(TRAIN)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_idx))
    kept = max(1, int(round(ratio * len(train_idx))))
    dropped = train_idx[order[kept:]]
    keep_mask = np.ones(len(bundle.heads), dtype=bool)
    keep_mask[dropped] = False
    return replace(
        bundle,
        heads=bundle.heads[keep_mask],
        relations=bundle.relations[keep_mask],
        tails=bundle.tails[keep_mask],
        triple_split=bundle.triple_split[keep_mask],
    )


def preprocess(interactions_path: str, kg_path: str, alignment_path: str,
               threshold: float | None, seed: int) -> DatasetBundle:
    """Raw TSVs -> processed bundle.

    Filtering to aligned items happens before the implicit transform so the
    sampled negatives stay within the retained catalog and each user's
    positive/negative counts stay balanced.
    """
    inter_rows = read_tsv(interactions_path, 3)
    kg_rows = read_tsv(kg_path, 3)
    align_rows = read_tsv(alignment_path, 2)
    if not align_rows:
        raise DataError(f"alignment file {alignment_path} is empty")

    try:
        raw_users = [r[0] for r in inter_rows]
        raw_items = [r[1] for r in inter_rows]
        ratings = [float(r[2]) for r in inter_rows]
    except ValueError as exc:
        raise DataError(f"bad rating value in {interactions_path}: {exc}") from exc

    aligned_items = {r[0] for r in align_rows}
    raw_users, raw_items, ratings = filter_aligned(raw_users, raw_items, ratings, aligned_items)

    item_ids = sorted(set(raw_items))
    user_ids = sorted(set(raw_users))
    item_map = {raw: k for k, raw in enumerate(item_ids)}
    user_map = {raw: k for k, raw in enumerate(user_ids)}

    entity_raw = sorted({r[1] for r in align_rows} | {r[0] for r in kg_rows} | {r[2] for r in kg_rows})
    relation_raw = sorted({r[1] for r in kg_rows})
    entity_map = {raw: k for k, raw in enumerate(entity_raw)}
    relation_map = {raw: k for k, raw in enumerate(relation_raw)}

    users = np.array([user_map[u] for u in raw_users], dtype=np.int64)
    items = np.array([item_map[i] for i in raw_items], dtype=np.int64)
    ratings_arr = np.array(ratings, dtype=np.float64)

    users, items, labels = to_implicit(users, items, ratings_arr,
                                       len(item_ids), threshold, seed)

    seen = set()
    triples = []
    for h, r, t in kg_rows:
        key = (entity_map[h], relation_map[r], entity_map[t])
        if key not in seen:
            seen.add(key)
            triples.append(key)
    if not triples:
        raise DataError(f"kg file {kg_path} holds no triples")
    heads = np.array([t[0] for t in triples], dtype=np.int64)
    relations = np.array([t[1] for t in triples], dtype=np.int64)
    tails = np.array([t[2] for t in triples], dtype=np.int64)

    pairs = [(item_map[i], entity_map[e]) for i, e in align_rows if i in item_map]
    alignment = Alignment.from_pairs(len(item_ids), len(entity_raw), pairs)

    rng = np.random.default_rng(seed + 1)
    bundle = DatasetBundle(
        n_users=len(user_ids), n_items=len(item_ids),
        n_entities=len(entity_raw), n_relations=len(relation_raw),
        users=users, items=items, labels=labels,
        heads=heads, relations=relations, tails=tails,
        alignment=alignment,
        interaction_split=split_assignments(len(users), rng),
        triple_split=split_assignments(len(heads), rng),
        user_ids=user_ids, item_ids=item_ids,
        entity_ids=entity_raw, relation_ids=relation_raw,
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(n_users: int, n_items: int, n_entities: int,
                       n_relations: int, rho: float, seed: int, *,
                       latent_dim: int = 8, pos_per_user: int = 12,
                       triples_per_entity: int = 8,
                       affinity_sharpness: float = 3.0,
                       kg_sharpness: float = 6.0,
                       rho_concentration: float = 3.0,
                       magnitude_spread: float = 0.8,
                       return_latents: bool = False):
    """Planted-factor dataset with a KG whose geometry mirrors the items'.

    Users, items and entities get latent vectors; each item i is aligned
    one-to-one with an entity whose latent is rho_i times the item's plus
    sqrt(1 - rho_i^2) noise, where rho_i ~ Beta with mean ``rho`` (real KGs
    are not uniformly reliable; the spread makes per-item alignment quality
    something a model can exploit). rho = 1 and rho = 0 degenerate to
    exactly shared and fully independent latents.

    Engagement affinity is u . (c_i * item latent) with a lognormal
    per-item magnitude c_i: the KG sees an item's content direction, not
    how popular it is, so recovering c_i is interaction-side work. Each
    user's positives are drawn without replacement, softmax-weighted by
    affinity (sigmoid weighting saturates and spreads the mass too
    uniformly to be learnable at CTR scale); triples connect entities that
    are close under a per-relation random rotation.

    ``return_latents=True`` additionally returns the planted vectors, which
    only tests and diagnostics should rely on.
    """
    if min(n_users, n_items, n_entities, n_relations) < 1:
        raise ContractError("all entity counts must be positive")
    if n_entities < n_items:
        raise ContractError("need at least one entity per item for 1-to-1 alignment")
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must be in [0, 1], got {rho}")
    rng = np.random.default_rng(seed)
    k = latent_dim

    user_lat = rng.normal(size=(n_users, k))
    item_lat = rng.normal(size=(n_items, k))
    entity_lat = rng.normal(size=(n_entities, k))
    if rho in (0.0, 1.0):
        rho_i = np.full(n_items, rho)
    else:
        rho_i = rng.beta(rho_concentration * rho,
                         rho_concentration * (1.0 - rho), size=n_items)
    mix = rho_i[:, None]
    entity_lat[:n_items] = mix * item_lat + np.sqrt(1.0 - mix ** 2) * entity_lat[:n_items]
    item_scale = rng.lognormal(mean=0.0, sigma=magnitude_spread, size=n_items)
    scaled_item_lat = item_lat * item_scale[:, None]

    # interactions: per user, pos_per_user distinct items drawn softmax-
    # weighted by affinity; negatives uniform over the rest
    users_out: list[int] = []
    items_out: list[int] = []
    labels_out: list[int] = []
    pos_count = min(pos_per_user, n_items // 2) or 1
    scale = affinity_sharpness / np.sqrt(k)
    for u in range(n_users):
        affinity = user_lat[u] @ scaled_item_lat.T * scale
        p = np.exp(affinity - affinity.max())
        p /= p.sum()
        positives = rng.choice(n_items, size=pos_count, replace=False, p=p)
        rest = np.setdiff1d(np.arange(n_items), positives, assume_unique=False)
        negatives = rng.choice(rest, size=pos_count, replace=False)
        users_out.extend([u] * (2 * pos_count))
        items_out.extend(positives.tolist())
        items_out.extend(negatives.tolist())
        labels_out.extend([1] * pos_count)
        labels_out.extend([0] * pos_count)

    # triples: head h under relation r points to tails near Q_r z_h
    rotations = []
    for _ in range(n_relations):
        q, _ = np.linalg.qr(rng.normal(size=(k, k)))
        rotations.append(q)
    triple_set: set[tuple[int, int, int]] = set()
    norm_entity = entity_lat / np.linalg.norm(entity_lat, axis=1, keepdims=True)
    for h in range(n_entities):
        for _ in range(triples_per_entity):
            r = int(rng.integers(n_relations))
            target = rotations[r] @ norm_entity[h]
            logits = kg_sharpness * (norm_entity @ target)
            logits[h] = -np.inf
            p = np.exp(logits - logits.max())
            p /= p.sum()
            t = int(rng.choice(n_entities, p=p))
            triple_set.add((h, r, t))
    triples = sorted(triple_set)
    heads = np.array([t[0] for t in triples], dtype=np.int64)
    relations = np.array([t[1] for t in triples], dtype=np.int64)
    tails = np.array([t[2] for t in triples], dtype=np.int64)

    alignment = Alignment.from_pairs(
        n_items, n_entities, [(j, j) for j in range(n_items)])

    bundle = DatasetBundle(
        n_users=n_users, n_items=n_items,
        n_entities=n_entities, n_relations=n_relations,
        users=np.array(users_out, dtype=np.int64),
        items=np.array(items_out, dtype=np.int64),
        labels=np.array(labels_out, dtype=np.int64),
        heads=heads, relations=relations, tails=tails,
        alignment=alignment,
        interaction_split=split_assignments(len(users_out), rng),
        triple_split=split_assignments(len(heads), rng),
    )
    bundle.validate()
    if return_latents:
        return bundle, {"user": user_lat, "item": item_lat, "entity": entity_lat,
                        "item_scale": item_scale}
    return bundle
