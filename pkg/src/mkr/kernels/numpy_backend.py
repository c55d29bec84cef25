"""Pure-numpy implementations of the hot training kernels.

Reference semantics for the compiled core in ``_core.pyx``; selected at
import time when the extension is unavailable or MKR_PURE_PYTHON is set.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def cross_compress_forward(v, e, w_vv, w_ev, w_ve, w_ee, b_v, b_e):
    """One feature-sharing layer over a batch.

    v, e: (B, d). Weight and bias vectors: (d,).
    Returns (v_out, e_out), both (B, d), computed in the factored form

        v_out = v * (e . w_vv) + e * (v . w_ev) + b_v
        e_out = v * (e . w_ve) + e * (v . w_ee) + b_e

    which is the rank-1 outer product v e^T compressed along rows and
    columns without materializing the d x d matrix.
    """
    s_vv = e @ w_vv
    s_ev = v @ w_ev
    s_ve = e @ w_ve
    s_ee = v @ w_ee
    v_out = v * s_vv[:, None] + e * s_ev[:, None] + b_v
    e_out = v * s_ve[:, None] + e * s_ee[:, None] + b_e
    return v_out, e_out


def cross_compress_backward(v, e, w_vv, w_ev, w_ve, w_ee, g_v, g_e):
    """Adjoint of :func:`cross_compress_forward`.

    g_v, g_e: upstream gradients for v_out / e_out, shape (B, d).
    Returns (d_v, d_e, d_wvv, d_wev, d_wve, d_wee, d_bv, d_be).
    """
    s_vv = e @ w_vv
    s_ev = v @ w_ev
    s_ve = e @ w_ve
    s_ee = v @ w_ee
    gv_dot_v = np.einsum("bi,bi->b", g_v, v)
    gv_dot_e = np.einsum("bi,bi->b", g_v, e)
    ge_dot_v = np.einsum("bi,bi->b", g_e, v)
    ge_dot_e = np.einsum("bi,bi->b", g_e, e)

    d_v = g_v * s_vv[:, None] + gv_dot_e[:, None] * w_ev \
        + g_e * s_ve[:, None] + ge_dot_e[:, None] * w_ee
    d_e = g_v * s_ev[:, None] + gv_dot_v[:, None] * w_vv \
        + g_e * s_ee[:, None] + ge_dot_v[:, None] * w_ve

    d_wvv = gv_dot_v @ e
    d_wev = gv_dot_e @ v
    d_wve = ge_dot_v @ e
    d_wee = ge_dot_e @ v
    d_bv = g_v.sum(axis=0)
    d_be = g_e.sum(axis=0)
    return d_v, d_e, d_wvv, d_wev, d_wve, d_wee, d_bv, d_be


def scatter_add_rows(out, indices, grad):
    """out[indices[i]] += grad[i] for every row i (duplicate indices accumulate)."""
    np.add.at(out, indices, grad)
