"""The full two-tower network and its checkpoint format.

The recommendation tower maps (user, item) to a click probability; the
KG tower maps (head, relation) to a predicted tail vector scored against
the tail's embedding. The item/entity pathway of both towers runs through
the same stack of shared feature-interaction layers, which is the only
place the two tasks exchange parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import units as un
from .autodiff import ParameterStore, Tensor
from .data import Alignment
from .errors import ContractError, DataError

VARIANTS = ("full", "dcn", "stitch")
RS_HEADS = ("inner_product", "mlp")
TASK_MODES = ("joint", "rs_only", "kge_only")

_MAGIC = b"MKRCKPT1"


@dataclass
class HyperParams:
    """Everything that shapes the network and its training schedule."""

    dim: int = 8                      # embedding / hidden width
    low_layers: int = 1               # shared-layer depth (towers' low levels)
    high_layers: int = 1              # tail-prediction MLP depth
    rs_passes: int = 3                # recommender passes per KG pass, per epoch
    kg_weight: float = 0.5            # weight of the KG task loss
    l2_weight: float = 1e-6           # L2 penalty on weights and embeddings
    rs_mlp_layers: int = 1            # depth of the optional MLP score head
    batch_size_rs: int = 4096
    batch_size_kg: int = 4096
    learning_rate: float = 0.01
    epochs: int = 50
    patience: int = 5                 # early-stopping patience, in epochs
    variant: str = "full"             # full | dcn | stitch
    rs_head: str = "inner_product"    # inner_product | mlp
    tasks: str = "joint"              # joint | rs_only | kge_only
    use_cross_unit: bool = True       # False: private dense towers, no sharing

    def validate(self) -> None:
        if self.low_layers < 1 or self.high_layers < 1:
            raise ContractError("layer counts must be >= 1")
        if self.dim < 1 or self.rs_passes < 1 or self.rs_mlp_layers < 1:
            raise ContractError("dim, rs_passes and rs_mlp_layers must be >= 1")
        if self.kg_weight < 0 or self.l2_weight < 0:
            raise ContractError("loss weights must be non-negative")
        if self.batch_size_rs < 2 or self.batch_size_kg < 2:
            raise ContractError("batch sizes must be >= 2")
        if self.learning_rate <= 0 or self.epochs < 1 or self.patience < 1:
            raise ContractError("learning_rate, epochs and patience must be positive")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.rs_head not in RS_HEADS:
            raise ContractError(f"rs_head must be one of {RS_HEADS}, got {self.rs_head!r}")
        if self.tasks not in TASK_MODES:
            raise ContractError(f"tasks must be one of {TASK_MODES}, got {self.tasks!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "HyperParams":
        known = {f.name for f in fields(HyperParams)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return HyperParams(**d)


def _ids(x) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=np.int64))
    if arr.ndim != 1:
        raise ContractError(f"id arrays must be 1-D, got shape {arr.shape}")
    return arr


class MkrModel:
    """Embedding tables plus both towers over one ParameterStore."""

    def __init__(self, n_users: int, n_items: int, n_entities: int,
                 n_relations: int, hp: HyperParams, seed: int,
                 alignment: Alignment | None = None):
        hp.validate()
        self.hp = hp
        self.n_users = n_users
        self.n_items = n_items
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.store = ParameterStore()
        self._alignment: Alignment | None = None
        self._aligned_items: np.ndarray | None = None

        rng = np.random.default_rng(seed)
        d = hp.dim
        bound = 1.0 / np.sqrt(d)

        def table(name, rows):
            return self.store.register(
                f"embeddings.{name}", rng.uniform(-bound, bound, size=(rows, d)),
                regularized=True)

        self.user_emb = table("user", n_users)
        self.item_emb = table("item", n_items)
        self.entity_emb = table("entity", n_entities)
        self.relation_emb = table("relation", n_relations)

        L = hp.low_layers
        self.user_mlp = [un.DenseLayer(self.store, f"user_mlp.{l}", d, d, "relu", rng)
                         for l in range(L)]
        self.relation_mlp = [un.DenseLayer(self.store, f"relation_mlp.{l}", d, d, "relu", rng)
                             for l in range(L)]
        # pathway for KG heads that have no aligned item
        self.entity_mlp = [un.DenseLayer(self.store, f"entity_mlp.{l}", d, d, "relu", rng)
                           for l in range(L)]

        self.shared_units: list = []
        self.item_mlp: list[un.DenseLayer] = []
        if hp.use_cross_unit:
            unit_cls = {"full": un.CrossCompressUnit, "dcn": un.DcnLayer,
                        "stitch": un.StitchUnit}[hp.variant]
            self.shared_units = [unit_cls(self.store, f"shared.{l}", d, rng)
                                 for l in range(L)]
        else:
            self.item_mlp = [un.DenseLayer(self.store, f"item_mlp.{l}", d, d, "relu", rng)
                             for l in range(L)]

        # tail predictor: concat(head, relation) -> d, last layer linear
        self.kge_head: list[un.DenseLayer] = []
        for k in range(hp.high_layers):
            d_in = 2 * d if k == 0 else d
            activation = "identity" if k == hp.high_layers - 1 else "relu"
            self.kge_head.append(
                un.DenseLayer(self.store, f"kge_head.{k}", d_in, d, activation, rng))

        self.rs_mlp: list[un.DenseLayer] = []
        if hp.rs_head == "mlp":
            for k in range(hp.rs_mlp_layers):
                d_in = 2 * d if k == 0 else d
                d_out = 1 if k == hp.rs_mlp_layers - 1 else d
                activation = "identity" if k == hp.rs_mlp_layers - 1 else "relu"
                self.rs_mlp.append(
                    un.DenseLayer(self.store, f"rs_mlp.{k}", d_in, d_out, activation, rng))

        if alignment is not None:
            self.attach_alignment(alignment)

    # -- alignment -----------------------------------------------------

    def attach_alignment(self, alignment: Alignment) -> None:
        if len(alignment.item_entities) != self.n_items:
            raise DataError(
                f"alignment covers {len(alignment.item_entities)} items, model has {self.n_items}")
        if len(alignment.entity_items) != self.n_entities:
            raise DataError(
                f"alignment covers {len(alignment.entity_items)} entities, model has {self.n_entities}")
        self._alignment = alignment
        self._aligned_items = np.array(
            [len(s) > 0 for s in alignment.item_entities], dtype=bool)

    @property
    def alignment(self) -> Alignment:
        if self._alignment is None:
            raise ContractError("model has no attached item/entity alignment")
        return self._alignment

    def _require_aligned(self, item_ids: np.ndarray) -> None:
        if self._aligned_items is None:
            raise ContractError("model has no attached item/entity alignment")
        bad = ~self._aligned_items[item_ids]
        if bad.any():
            offender = int(item_ids[np.argmax(bad)])
            raise ContractError(f"item {offender} has no associated entity")

    # -- towers ----------------------------------------------------------

    def _chain(self, layers, x: Tensor) -> Tensor:
        for layer in layers:
            x = layer(x)
        return x

    def _shared_stack(self, v: Tensor, e: Tensor) -> tuple[Tensor, Tensor]:
        """Run the L shared layers; DCN layers anchor on this pass's inputs."""
        if self.hp.variant == "dcn":
            for layer in self.shared_units:
                layer.capture_anchors(v, e)
        out_v, out_e = v, e
        for layer in self.shared_units:
            out_v, out_e = layer.apply(out_v, out_e)
        return out_v, out_e

    def user_tower(self, user_ids) -> Tensor:
        u = ad.gather_rows(self.user_emb, _ids(user_ids))
        return self._chain(self.user_mlp, u)

    def item_tower(self, item_ids, entity_ids) -> Tensor:
        """Item-side output of the shared stack, one sampled entity per row."""
        item_ids = _ids(item_ids)
        v = ad.gather_rows(self.item_emb, item_ids)
        if not self.hp.use_cross_unit:
            return self._chain(self.item_mlp, v)
        self._require_aligned(item_ids)
        e = ad.gather_rows(self.entity_emb, _ids(entity_ids))
        v_out, _ = self._shared_stack(v, e)
        return v_out

    def _score_head(self, u: Tensor, v: Tensor) -> Tensor:
        if self.hp.rs_head == "inner_product":
            return ad.mul(u, v).sum(axis=1)
        x = ad.concat([u, v], axis=1)
        return self._chain(self.rs_mlp, x).reshape((-1,))

    def rs_forward(self, user_ids, item_ids, entity_ids) -> Tensor:
        """Click probability for each row, using one sampled entity per item."""
        u = self.user_tower(user_ids)
        v = self.item_tower(item_ids, entity_ids)
        return ad.sigmoid(self._score_head(u, v))

    def head_tower(self, head_ids, item_ids) -> Tensor:
        """Entity-side output of the shared stack for KG heads.

        ``item_ids`` holds one sampled associated item per head, or -1 for
        heads with no aligned item, which take the private dense pathway.
        Mixed batches blend the two pathways by a 0/1 row mask so the whole
        batch stays vectorized.
        """
        head_ids = _ids(head_ids)
        item_ids = _ids(item_ids)
        h = ad.gather_rows(self.entity_emb, head_ids)
        has_item = item_ids >= 0
        if not self.hp.use_cross_unit or not has_item.any():
            return self._chain(self.entity_mlp, h)
        safe_items = np.where(has_item, item_ids, 0)
        v = ad.gather_rows(self.item_emb, safe_items)
        _, h_shared = self._shared_stack(v, h)
        if has_item.all():
            return h_shared
        h_private = self._chain(self.entity_mlp, h)
        mask = ad.constant(has_item.astype(np.float64)[:, None])
        inv = ad.constant((~has_item).astype(np.float64)[:, None])
        return ad.add(ad.mul(mask, h_shared), ad.mul(inv, h_private))

    def predict_tail(self, head_ids, relation_ids, item_ids) -> Tensor:
        h = self.head_tower(head_ids, item_ids)
        r = self._chain(self.relation_mlp,
                        ad.gather_rows(self.relation_emb, _ids(relation_ids)))
        return self._chain(self.kge_head, ad.concat([h, r], axis=1))

    def triple_scores(self, t_hat: Tensor, tail_ids) -> Tensor:
        """sigmoid(t . t_hat) against the tails' embedding rows."""
        t = ad.gather_rows(self.entity_emb, _ids(tail_ids))
        return ad.sigmoid(ad.mul(t, t_hat).sum(axis=1))

    def kge_forward(self, head_ids, relation_ids, item_ids, tail_ids) -> tuple[Tensor, Tensor]:
        t_hat = self.predict_tail(head_ids, relation_ids, item_ids)
        return t_hat, self.triple_scores(t_hat, tail_ids)

    # -- deterministic evaluation ---------------------------------------

    def user_representations(self) -> np.ndarray:
        out = self.user_tower(np.arange(self.n_users, dtype=np.int64))
        return out.data

    def item_representations(self) -> np.ndarray:
        """Per item, the shared-stack output averaged over all its entities."""
        if not self.hp.use_cross_unit:
            ids = np.arange(self.n_items, dtype=np.int64)
            return self._chain(self.item_mlp, ad.gather_rows(self.item_emb, ids)).data
        sets = self.alignment.item_entities
        flat_items = np.concatenate(
            [np.full(len(s), i, dtype=np.int64) for i, s in enumerate(sets) if len(s)]
        ) if any(len(s) for s in sets) else np.empty(0, dtype=np.int64)
        flat_entities = np.concatenate([s for s in sets if len(s)]) \
            if any(len(s) for s in sets) else np.empty(0, dtype=np.int64)
        reprs = np.zeros((self.n_items, self.hp.dim))
        if len(flat_items):
            out = self.item_tower(flat_items, flat_entities).data
            np.add.at(reprs, flat_items, out)
            counts = np.bincount(flat_items, minlength=self.n_items)[:, None]
            reprs /= np.maximum(counts, 1)
        return reprs

    def head_representations(self) -> np.ndarray:
        """Per entity, the head pathway averaged over its associated items."""
        sets = self.alignment.entity_items
        ids = np.arange(self.n_entities, dtype=np.int64)
        if not self.hp.use_cross_unit:
            return self._chain(self.entity_mlp, ad.gather_rows(self.entity_emb, ids)).data
        reprs = self._chain(self.entity_mlp, ad.gather_rows(self.entity_emb, ids)).data.copy()
        aligned = [h for h, s in enumerate(sets) if len(s)]
        if aligned:
            flat_heads = np.concatenate(
                [np.full(len(sets[h]), h, dtype=np.int64) for h in aligned])
            flat_items = np.concatenate([sets[h] for h in aligned])
            out = self.head_tower(flat_heads, flat_items).data
            acc = np.zeros((self.n_entities, self.hp.dim))
            np.add.at(acc, flat_heads, out)
            counts = np.bincount(flat_heads, minlength=self.n_entities)[:, None]
            mask = counts[:, 0] > 0
            reprs[mask] = acc[mask] / counts[mask]
        return reprs

    def score_pairs(self, u_repr: np.ndarray, v_repr: np.ndarray) -> np.ndarray:
        """Probability head over precomputed representation rows."""
        if self.hp.rs_head == "inner_product":
            logits = np.einsum("bi,bi->b", u_repr, v_repr)
            return ad.sigmoid(ad.constant(logits)).data
        x = ad.constant(np.concatenate([u_repr, v_repr], axis=1))
        return ad.sigmoid(self._chain(self.rs_mlp, x).reshape((-1,))).data

    def rs_forward_eval(self, user_ids, item_ids) -> np.ndarray:
        """Deterministic probabilities: item vectors averaged over S(item)."""
        user_ids = _ids(user_ids)
        item_ids = _ids(item_ids)
        self._require_aligned(item_ids)
        u = self.user_representations()[user_ids]
        v = self.item_representations()[item_ids]
        return self.score_pairs(u, v)

    def predict_tail_eval(self, head_ids, relation_ids) -> np.ndarray:
        """Deterministic tail prediction: head vectors averaged over S(head)."""
        head_ids = _ids(head_ids)
        relation_ids = _ids(relation_ids)
        h = ad.constant(self.head_representations()[head_ids])
        r = self._chain(self.relation_mlp,
                        ad.gather_rows(self.relation_emb, relation_ids))
        return self._chain(self.kge_head, ad.concat([h, r], axis=1)).data

    # -- checkpointing ---------------------------------------------------

    def save(self, path: str) -> None:
        params = [(name, p.data) for name, p in self.store.items()]
        header = {
            "format_version": 1,
            "hyperparams": self.hp.to_dict(),
            "counts": {
                "n_users": self.n_users, "n_items": self.n_items,
                "n_entities": self.n_entities, "n_relations": self.n_relations,
            },
            "params": [{"name": n, "shape": list(a.shape)} for n, a in params],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, arr in params:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @staticmethod
    def load(path: str, alignment: Alignment | None = None) -> "MkrModel":
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise DataError(f"{path} is not a model checkpoint (bad magic {magic!r})")
            (header_len,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            if header.get("format_version") != 1:
                raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
            hp = HyperParams.from_dict(header["hyperparams"])
            c = header["counts"]
            model = MkrModel(c["n_users"], c["n_items"], c["n_entities"],
                             c["n_relations"], hp, seed=0, alignment=alignment)
            for spec in header["params"]:
                shape = tuple(spec["shape"])
                n = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
                if spec["name"] not in model.store:
                    raise DataError(f"checkpoint parameter {spec['name']!r} not in model")
                target = model.store[spec["name"]]
                if target.data.shape != shape:
                    raise DataError(
                        f"checkpoint shape {shape} != model shape {target.data.shape} "
                        f"for {spec['name']!r}")
                target.data[...] = arr
        return model
