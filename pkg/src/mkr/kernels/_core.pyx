# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused feature-sharing layer and embedding scatter.

Same contracts as kernels/numpy_backend.py; one pass over the batch instead
of a chain of vectorized temporaries.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "cython"


def cross_compress_forward(double[:, ::1] v, double[:, ::1] e,
                           double[::1] w_vv, double[::1] w_ev,
                           double[::1] w_ve, double[::1] w_ee,
                           double[::1] b_v, double[::1] b_e):
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t d = v.shape[1]
    v_out_arr = np.empty((n, d), dtype=np.float64)
    e_out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] v_out = v_out_arr
    cdef double[:, ::1] e_out = e_out_arr
    cdef Py_ssize_t i, j
    cdef double s_vv, s_ev, s_ve, s_ee, vij, eij
    with nogil:
        for i in range(n):
            s_vv = 0.0
            s_ev = 0.0
            s_ve = 0.0
            s_ee = 0.0
            for j in range(d):
                vij = v[i, j]
                eij = e[i, j]
                s_vv += eij * w_vv[j]
                s_ev += vij * w_ev[j]
                s_ve += eij * w_ve[j]
                s_ee += vij * w_ee[j]
            for j in range(d):
                vij = v[i, j]
                eij = e[i, j]
                v_out[i, j] = vij * s_vv + eij * s_ev + b_v[j]
                e_out[i, j] = vij * s_ve + eij * s_ee + b_e[j]
    return v_out_arr, e_out_arr


def cross_compress_backward(double[:, ::1] v, double[:, ::1] e,
                            double[::1] w_vv, double[::1] w_ev,
                            double[::1] w_ve, double[::1] w_ee,
                            double[:, ::1] g_v, double[:, ::1] g_e):
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t d = v.shape[1]
    d_v_arr = np.empty((n, d), dtype=np.float64)
    d_e_arr = np.empty((n, d), dtype=np.float64)
    d_wvv_arr = np.zeros(d, dtype=np.float64)
    d_wev_arr = np.zeros(d, dtype=np.float64)
    d_wve_arr = np.zeros(d, dtype=np.float64)
    d_wee_arr = np.zeros(d, dtype=np.float64)
    d_bv_arr = np.zeros(d, dtype=np.float64)
    d_be_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] d_v = d_v_arr
    cdef double[:, ::1] d_e = d_e_arr
    cdef double[::1] d_wvv = d_wvv_arr
    cdef double[::1] d_wev = d_wev_arr
    cdef double[::1] d_wve = d_wve_arr
    cdef double[::1] d_wee = d_wee_arr
    cdef double[::1] d_bv = d_bv_arr
    cdef double[::1] d_be = d_be_arr
    cdef Py_ssize_t i, j
    cdef double s_vv, s_ev, s_ve, s_ee
    cdef double gv_v, gv_e, ge_v, ge_e, vij, eij, gvj, gej
    with nogil:
        for i in range(n):
            s_vv = 0.0
            s_ev = 0.0
            s_ve = 0.0
            s_ee = 0.0
            gv_v = 0.0
            gv_e = 0.0
            ge_v = 0.0
            ge_e = 0.0
            for j in range(d):
                vij = v[i, j]
                eij = e[i, j]
                gvj = g_v[i, j]
                gej = g_e[i, j]
                s_vv += eij * w_vv[j]
                s_ev += vij * w_ev[j]
                s_ve += eij * w_ve[j]
                s_ee += vij * w_ee[j]
                gv_v += gvj * vij
                gv_e += gvj * eij
                ge_v += gej * vij
                ge_e += gej * eij
            for j in range(d):
                vij = v[i, j]
                eij = e[i, j]
                gvj = g_v[i, j]
                gej = g_e[i, j]
                d_v[i, j] = gvj * s_vv + gv_e * w_ev[j] + gej * s_ve + ge_e * w_ee[j]
                d_e[i, j] = gvj * s_ev + gv_v * w_vv[j] + gej * s_ee + ge_v * w_ve[j]
                d_wvv[j] += gv_v * eij
                d_wev[j] += gv_e * vij
                d_wve[j] += ge_v * eij
                d_wee[j] += ge_e * vij
                d_bv[j] += gvj
                d_be[j] += gej
    return (d_v_arr, d_e_arr, d_wvv_arr, d_wev_arr, d_wve_arr, d_wee_arr,
            d_bv_arr, d_be_arr)


def scatter_add_rows(double[:, ::1] out, long long[::1] indices,
                     double[:, ::1] grad):
    cdef Py_ssize_t n = indices.shape[0]
    cdef Py_ssize_t d = out.shape[1]
    cdef Py_ssize_t i, j
    cdef long long row
    with nogil:
        for i in range(n):
            row = indices[i]
            for j in range(d):
                out[row, j] += grad[i, j]
