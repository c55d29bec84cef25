"""Feature-interaction layers: the cross&compress unit and its variants.

The full unit forms the rank-1 cross matrix C = v e^T between an item
feature vector and an entity feature vector, then compresses C and C^T back
to d-vectors through four weight vectors. The DCN-style layer and the
scalar-stitch layer are the two restricted variants used for ablations.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParameterStore, Tensor
from .errors import ContractError, DimensionError

ACTIVATIONS = ("relu", "sigmoid", "identity")


def glorot_uniform(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def vector_uniform(rng: np.random.Generator, d: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, size=d)


def _apply_activation(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return ad.relu(x)
    if activation == "sigmoid":
        return ad.sigmoid(x)
    if activation == "identity":
        return x
    raise ContractError(f"unknown activation {activation!r}")


class DenseLayer:
    """Fully connected layer y = act(W x + b), applied row-wise to (B, d_in)."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 activation: str, rng: np.random.Generator):
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.activation = activation
        self.W = store.register(f"{name}.W", glorot_uniform(rng, d_out, d_in),
                                regularized=True)
        self.b = store.register(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.add(ad.matmul(x, ad.transpose(self.W)), self.b)
        return _apply_activation(y, self.activation)


class CrossCompressUnit:
    """Per-layer weights of the full cross&compress unit (all d-vectors)."""

    def __init__(self, store: ParameterStore, name: str, dim: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.w_vv = store.register(f"{name}.w_vv", vector_uniform(rng, dim), regularized=True)
        self.w_ev = store.register(f"{name}.w_ev", vector_uniform(rng, dim), regularized=True)
        self.w_ve = store.register(f"{name}.w_ve", vector_uniform(rng, dim), regularized=True)
        self.w_ee = store.register(f"{name}.w_ee", vector_uniform(rng, dim), regularized=True)
        self.b_v = store.register(f"{name}.b_v", np.zeros(dim))
        self.b_e = store.register(f"{name}.b_e", np.zeros(dim))

    def apply(self, v: Tensor, e: Tensor) -> tuple[Tensor, Tensor]:
        return cross_compress_apply(v, e, self)


def cross(v: Tensor, e: Tensor) -> Tensor:
    """Cross feature matrix C = v e^T with C[i, j] = v[i] * e[j]."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    e = e if isinstance(e, Tensor) else Tensor(e)
    if v.ndim != 1 or e.ndim != 1 or v.shape != e.shape:
        raise DimensionError(f"cross expects two equal-length vectors, got {v.shape} and {e.shape}")
    d = v.shape[0]
    return ad.matmul(v.reshape((d, 1)), e.reshape((1, d)))


def compress(c: Tensor, unit: CrossCompressUnit) -> tuple[Tensor, Tensor]:
    """Project the cross matrix back to feature space along rows and columns.

    v_next = C w_vv + C^T w_ev + b_v
    e_next = C w_ve + C^T w_ee + b_e
    """
    d = unit.dim
    if c.shape != (d, d):
        raise DimensionError(f"compress expects a {(d, d)} matrix, got {c.shape}")
    ct = ad.transpose(c)

    def proj(m: Tensor, w: Tensor) -> Tensor:
        return ad.matmul(m, w.reshape((d, 1))).reshape((d,))

    v_next = ad.add(ad.add(proj(c, unit.w_vv), proj(ct, unit.w_ev)), unit.b_v)
    e_next = ad.add(ad.add(proj(c, unit.w_ve), proj(ct, unit.w_ee)), unit.b_e)
    return v_next, e_next


def cross_compress_apply(v: Tensor, e: Tensor, unit: CrossCompressUnit) -> tuple[Tensor, Tensor]:
    """Fused cross-then-compress for a single pair (d,) or a batch (B, d).

    Algebraically identical to compress(cross(v, e)) but runs through the
    factored kernel, so the d x d matrix is never materialized.
    """
    v = v if isinstance(v, Tensor) else Tensor(v)
    e = e if isinstance(e, Tensor) else Tensor(e)
    if v.shape != e.shape:
        raise DimensionError(f"cross&compress needs matching shapes, got {v.shape} and {e.shape}")
    single = v.ndim == 1
    if single:
        d = v.shape[0]
        v2, e2 = v.reshape((1, d)), e.reshape((1, d))
    elif v.ndim == 2:
        v2, e2 = v, e
    else:
        raise DimensionError(f"cross&compress expects 1-D or 2-D inputs, got {v.shape}")
    if v2.shape[1] != unit.dim:
        raise DimensionError(f"unit dimension {unit.dim} != feature dimension {v2.shape[1]}")

    w = (unit.w_vv, unit.w_ev, unit.w_ve, unit.w_ee)
    v_data = np.ascontiguousarray(v2.data)
    e_data = np.ascontiguousarray(e2.data)
    vo, eo = kernels.cross_compress_forward(
        v_data, e_data, *(t.data for t in w), unit.b_v.data, unit.b_e.data)
    v_out, e_out = Tensor(vo), Tensor(eo)

    def bwd(g_v, g_e):
        grads = kernels.cross_compress_backward(
            v_data, e_data, *(t.data for t in w),
            np.ascontiguousarray(g_v), np.ascontiguousarray(g_e))
        d_v, d_e, d_wvv, d_wev, d_wve, d_wee, d_bv, d_be = grads
        return (
            None if v2._const else d_v,
            None if e2._const else d_e,
            d_wvv, d_wev, d_wve, d_wee, d_bv, d_be,
        )

    ad.record_op((v_out, e_out), (v2, e2, *w, unit.b_v, unit.b_e), bwd)
    if single:
        return v_out.reshape((-1,)), e_out.reshape((-1,))
    return v_out, e_out


class DcnLayer:
    """Residual crossing layer; anchors are the layer-0 inputs of the pass.

    v_next = e_anchor (v . w_ev) + v + b_v
    e_next = v_anchor (e . w_ve) + e + b_e
    """

    def __init__(self, store: ParameterStore, name: str, dim: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.w_ev = store.register(f"{name}.w_ev", vector_uniform(rng, dim), regularized=True)
        self.w_ve = store.register(f"{name}.w_ve", vector_uniform(rng, dim), regularized=True)
        self.b_v = store.register(f"{name}.b_v", np.zeros(dim))
        self.b_e = store.register(f"{name}.b_e", np.zeros(dim))
        self.anchor_v: Tensor | None = None
        self.anchor_e: Tensor | None = None

    def capture_anchors(self, v0: Tensor, e0: Tensor) -> None:
        self.anchor_v = v0
        self.anchor_e = e0

    def apply(self, v: Tensor, e: Tensor) -> tuple[Tensor, Tensor]:
        return dcn_apply(v, e, self)


def _rowwise_scale(direction: Tensor, x: Tensor, w: Tensor) -> Tensor:
    # direction * (x . w), batched over leading axis when present
    s = ad.mul(x, w).sum(axis=-1, keepdims=True)
    return ad.mul(direction, s)


def dcn_apply(v: Tensor, e: Tensor, layer: DcnLayer) -> tuple[Tensor, Tensor]:
    if layer.anchor_v is None or layer.anchor_e is None:
        raise ContractError("DCN layer applied before its anchors were captured")
    v_next = ad.add(ad.add(_rowwise_scale(layer.anchor_e, v, layer.w_ev), v), layer.b_v)
    e_next = ad.add(ad.add(_rowwise_scale(layer.anchor_v, e, layer.w_ve), e), layer.b_e)
    return v_next, e_next


class StitchUnit:
    """Four trainable scalars mixing the two pathways blockwise.

    [v_next; e_next] = [[a_aa, a_ab], [a_ba, a_bb]] [v; e]
    Initialized leaning to the identity so both tasks start mostly private.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.a_aa = store.register(f"{name}.a_aa", 0.9, regularized=True)
        self.a_ab = store.register(f"{name}.a_ab", 0.1, regularized=True)
        self.a_ba = store.register(f"{name}.a_ba", 0.1, regularized=True)
        self.a_bb = store.register(f"{name}.a_bb", 0.9, regularized=True)

    def apply(self, v: Tensor, e: Tensor) -> tuple[Tensor, Tensor]:
        return stitch_apply(v, e, self)


def stitch_apply(v: Tensor, e: Tensor, unit: StitchUnit) -> tuple[Tensor, Tensor]:
    if v.shape != e.shape:
        raise DimensionError(f"stitch needs matching shapes, got {v.shape} and {e.shape}")
    v_next = ad.add(ad.mul(unit.a_aa, v), ad.mul(unit.a_ab, e))
    e_next = ad.add(ad.mul(unit.a_ba, v), ad.mul(unit.a_bb, e))
    return v_next, e_next
