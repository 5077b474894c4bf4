"""Pure-numpy twin of the compiled LSTM recurrence kernels.

Semantics are identical to ``_lstm_c``: a packed-sequence LSTM that only
consumes the valid prefix of each batch row. Timesteps at or beyond a row's
length are never read and their outputs stay exactly zero, which is what
gives the model its bit-exact pad invariance.

Gate layout along the 4h axis is [input, forget, cell, output].
"""

import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_seq_forward(xp, wh, bias, lens, reverse):
    """Run one LSTM direction over a batch of padded sequences.

    xp:   (B, 4h, n) input projections (wx @ x), already including no bias
    wh:   (4h, h) recurrent weights
    bias: (4h,)
    lens: (B,) valid lengths; row b only consumes timesteps < lens[b]
    reverse: process each row's valid prefix back to front

    Returns (hs, gates, cs): hidden states, post-activation gates and cell
    states, all (B, ·, n) indexed by *time*, zero at padded positions.
    """
    B, fourh, n = xp.shape
    h = fourh // 4
    hs = np.zeros((B, h, n))
    gates = np.zeros((B, fourh, n))
    cs = np.zeros((B, h, n))
    if B == 0:
        return hs, gates, cs
    h_prev = np.zeros((B, h))
    c_prev = np.zeros((B, h))
    wh_t = wh.T
    max_len = int(lens.max(initial=0))
    for s in range(max_len):
        act = np.flatnonzero(lens > s)
        t = (lens[act] - 1 - s) if reverse else np.full(act.size, s, dtype=np.intp)
        a = xp[act, :, t] + bias + h_prev[act] @ wh_t
        a[:, :h] = _sigmoid(a[:, :h])
        a[:, h : 2 * h] = _sigmoid(a[:, h : 2 * h])
        a[:, 2 * h : 3 * h] = np.tanh(a[:, 2 * h : 3 * h])
        a[:, 3 * h :] = _sigmoid(a[:, 3 * h :])
        c = a[:, h : 2 * h] * c_prev[act] + a[:, :h] * a[:, 2 * h : 3 * h]
        hid = a[:, 3 * h :] * np.tanh(c)
        gates[act, :, t] = a
        cs[act, :, t] = c
        hs[act, :, t] = hid
        c_prev[act] = c
        h_prev[act] = hid
    return hs, gates, cs


def lstm_seq_backward(dh_out, wh, hs, gates, cs, lens, reverse):
    """Backpropagate through ``lstm_seq_forward``.

    dh_out: (B, h, n) upstream gradient w.r.t. hs. Entries at padded
    positions are ignored (those outputs are constant zero).

    Returns (dxp, dwh, db).
    """
    B, h, n = dh_out.shape
    fourh = 4 * h
    dxp = np.zeros((B, fourh, n))
    dwh = np.zeros_like(wh)
    db = np.zeros(fourh)
    if B == 0:
        return dxp, dwh, db
    dh_carry = np.zeros((B, h))
    dc_carry = np.zeros((B, h))
    max_len = int(lens.max(initial=0))
    for s in range(max_len - 1, -1, -1):
        act = np.flatnonzero(lens > s)
        t = (lens[act] - 1 - s) if reverse else np.full(act.size, s, dtype=np.intp)
        g = gates[act, :, t]
        i = g[:, :h]
        f = g[:, h : 2 * h]
        cand = g[:, 2 * h : 3 * h]
        o = g[:, 3 * h :]
        tc = np.tanh(cs[act, :, t])
        dh = dh_out[act, :, t] + dh_carry[act]
        do = dh * tc
        dc = dc_carry[act] + dh * o * (1.0 - tc * tc)
        if s > 0:
            tp = (lens[act] - s) if reverse else np.full(act.size, s - 1, dtype=np.intp)
            c_prev = cs[act, :, tp]
            h_prev = hs[act, :, tp]
        else:
            c_prev = np.zeros((act.size, h))
            h_prev = np.zeros((act.size, h))
        da = np.concatenate(
            [
                dc * cand * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - cand * cand),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dc_carry[act] = dc * f
        dxp[act, :, t] = da
        db += da.sum(axis=0)
        dwh += da.T @ h_prev
        dh_carry[act] = da @ wh
    return dxp, dwh, db
