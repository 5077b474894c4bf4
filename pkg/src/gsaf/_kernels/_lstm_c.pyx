# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence kernels.

Same contract as ``_lstm_py``: packed-sequence single-direction LSTM over
the valid prefix of each batch row, gate layout [input, forget, cell,
output] along the 4h axis, padded positions untouched.
"""

from libc.math cimport exp as c_exp, tanh as c_tanh

import numpy as np


cdef inline double _sig(double a) noexcept nogil:
    cdef double e
    if a >= 0.0:
        return 1.0 / (1.0 + c_exp(-a))
    e = c_exp(a)
    return e / (1.0 + e)


def lstm_seq_forward(object xp_in, object wh_in, object bias_in, object lens_in, bint reverse):
    cdef double[:, :, ::1] xp = np.ascontiguousarray(xp_in, dtype=np.float64)
    cdef double[:, ::1] wh = np.ascontiguousarray(wh_in, dtype=np.float64)
    cdef double[::1] bias = np.ascontiguousarray(bias_in, dtype=np.float64)
    cdef Py_ssize_t[::1] lens = np.ascontiguousarray(lens_in, dtype=np.intp)

    cdef Py_ssize_t B = xp.shape[0]
    cdef Py_ssize_t fourh = xp.shape[1]
    cdef Py_ssize_t n = xp.shape[2]
    cdef Py_ssize_t h = fourh // 4

    hs_arr = np.zeros((B, h, n))
    gates_arr = np.zeros((B, fourh, n))
    cs_arr = np.zeros((B, h, n))
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] gates = gates_arr
    cdef double[:, :, ::1] cs = cs_arr

    scratch = np.zeros((4, max(h, fourh)))
    cdef double[:, ::1] sc = scratch
    # sc[0] = h_prev, sc[1] = c_prev, sc[2] = preactivations

    cdef Py_ssize_t b, s, t, L, gi, j
    cdef double acc, iv, fv, gv, ov, cc, hh

    for b in range(B):
        L = lens[b]
        for j in range(h):
            sc[0, j] = 0.0
            sc[1, j] = 0.0
        for s in range(L):
            t = L - 1 - s if reverse else s
            for gi in range(fourh):
                acc = xp[b, gi, t] + bias[gi]
                for j in range(h):
                    acc += wh[gi, j] * sc[0, j]
                sc[2, gi] = acc
            for j in range(h):
                iv = _sig(sc[2, j])
                fv = _sig(sc[2, h + j])
                gv = c_tanh(sc[2, 2 * h + j])
                ov = _sig(sc[2, 3 * h + j])
                cc = fv * sc[1, j] + iv * gv
                hh = ov * c_tanh(cc)
                gates[b, j, t] = iv
                gates[b, h + j, t] = fv
                gates[b, 2 * h + j, t] = gv
                gates[b, 3 * h + j, t] = ov
                cs[b, j, t] = cc
                hs[b, j, t] = hh
                sc[1, j] = cc
                sc[0, j] = hh
    return hs_arr, gates_arr, cs_arr


def lstm_seq_backward(object dh_in, object wh_in, object hs_in, object gates_in,
                      object cs_in, object lens_in, bint reverse):
    cdef double[:, :, ::1] dh_out = np.ascontiguousarray(dh_in, dtype=np.float64)
    cdef double[:, ::1] wh = np.ascontiguousarray(wh_in, dtype=np.float64)
    cdef double[:, :, ::1] hs = np.ascontiguousarray(hs_in, dtype=np.float64)
    cdef double[:, :, ::1] gates = np.ascontiguousarray(gates_in, dtype=np.float64)
    cdef double[:, :, ::1] cs = np.ascontiguousarray(cs_in, dtype=np.float64)
    cdef Py_ssize_t[::1] lens = np.ascontiguousarray(lens_in, dtype=np.intp)

    cdef Py_ssize_t B = dh_out.shape[0]
    cdef Py_ssize_t h = dh_out.shape[1]
    cdef Py_ssize_t n = dh_out.shape[2]
    cdef Py_ssize_t fourh = 4 * h

    dxp_arr = np.zeros((B, fourh, n))
    dwh_arr = np.zeros((fourh, h))
    db_arr = np.zeros(fourh)
    cdef double[:, :, ::1] dxp = dxp_arr
    cdef double[:, ::1] dwh = dwh_arr
    cdef double[::1] db = db_arr

    scratch = np.zeros((3, max(h, fourh)))
    cdef double[:, ::1] sc = scratch
    # sc[0] = dh carry, sc[1] = dc carry, sc[2] = gate preact grads

    cdef Py_ssize_t b, s, t, tp, gi, j, L
    cdef double iv, fv, gv, ov, tc, dh, do, dc, cprev, hprev, di, df, dg, v, acc

    for b in range(B):
        L = lens[b]
        for j in range(h):
            sc[0, j] = 0.0
            sc[1, j] = 0.0
        for s in range(L - 1, -1, -1):
            t = L - 1 - s if reverse else s
            tp = L - s if reverse else s - 1
            for j in range(h):
                iv = gates[b, j, t]
                fv = gates[b, h + j, t]
                gv = gates[b, 2 * h + j, t]
                ov = gates[b, 3 * h + j, t]
                tc = c_tanh(cs[b, j, t])
                dh = dh_out[b, j, t] + sc[0, j]
                do = dh * tc
                dc = sc[1, j] + dh * ov * (1.0 - tc * tc)
                cprev = cs[b, j, tp] if s > 0 else 0.0
                di = dc * gv
                df = dc * cprev
                dg = dc * iv
                sc[1, j] = dc * fv
                sc[2, j] = di * iv * (1.0 - iv)
                sc[2, h + j] = df * fv * (1.0 - fv)
                sc[2, 2 * h + j] = dg * (1.0 - gv * gv)
                sc[2, 3 * h + j] = do * ov * (1.0 - ov)
            for gi in range(fourh):
                v = sc[2, gi]
                dxp[b, gi, t] = v
                db[gi] += v
                if s > 0:
                    for j in range(h):
                        dwh[gi, j] += v * hs[b, j, tp]
            for j in range(h):
                acc = 0.0
                for gi in range(fourh):
                    acc += wh[gi, j] * sc[2, gi]
                sc[0, j] = acc
    return dxp_arr, dwh_arr, db_arr
