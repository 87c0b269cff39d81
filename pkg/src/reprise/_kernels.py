"""Compiled loops for the two recurrent cells and the inference cycles.

Weight layouts (row-vector convention, ``a = x @ W``), shared by both cells
so that one code path can dispatch on ``is_lstm``:

``w_in``  (G, i, h)  G = 4 for LSTM (block input, input, forget, output
                     gate), G = 1 for RNN
``w_rec`` (G, h, h)
``peep``  (3, h)     LSTM cell -> input, forget, output gate; (0, h) for RNN
``w_out`` (h, o)

RNN traces carry empty ``gates`` (T, 0, h) and ``cells`` (T, 0) arrays.

Closed-loop unrolls feed ``sensor_{k+1} = sensor_k + y_k`` into the first
``o`` input slots; their backward pass takes ``d_out`` with respect to the
predicted positions and differentiates through the fed-back inputs; their
sensor-slot input gradients are total derivatives (through the network and
through the direct ``position = sensor + delta`` path).
"""

import numpy as np
from numba import njit

# No nnan/ninf: divergence must still surface as NaN.
_FM = {"reassoc", "nsz", "contract", "arcp"}


@njit(cache=True, inline="always", fastmath=_FM)
def _sigmoid(a):
    if a >= 0.0:
        return 1.0 / (1.0 + np.exp(-a))
    e = np.exp(a)
    return e / (1.0 + e)


@njit(cache=True, fastmath=_FM)
def lstm_forward(w_in, w_rec, peep, w_out, h0, c0, x, closed_loop):
    n_steps, n_in = x.shape
    n_hid = h0.shape[0]
    n_out = w_out.shape[1]
    gates = np.zeros((n_steps, 4, n_hid))
    cells = np.zeros((n_steps, n_hid))
    hidden = np.zeros((n_steps, n_hid))
    y = np.zeros((n_steps, n_out))
    a = np.zeros((4, n_hid))
    h_prev = h0.copy()
    c_prev = c0.copy()
    for t in range(n_steps):
        if closed_loop and t > 0:
            for q in range(n_out):
                x[t, q] = x[t - 1, q] + y[t - 1, q]
        a[:, :] = 0.0
        for k in range(n_in):
            xk = x[t, k]
            for g in range(4):
                for j in range(n_hid):
                    a[g, j] += xk * w_in[g, k, j]
        for k in range(n_hid):
            hk = h_prev[k]
            for g in range(4):
                for j in range(n_hid):
                    a[g, j] += hk * w_rec[g, k, j]
        for j in range(n_hid):
            z = np.tanh(a[0, j])
            ig = _sigmoid(a[1, j] + peep[0, j] * c_prev[j])
            fg = _sigmoid(a[2, j] + peep[1, j] * c_prev[j])
            c = fg * c_prev[j] + ig * z
            og = _sigmoid(a[3, j] + peep[2, j] * c)
            gates[t, 0, j] = z
            gates[t, 1, j] = ig
            gates[t, 2, j] = fg
            gates[t, 3, j] = og
            cells[t, j] = c
            hidden[t, j] = og * np.tanh(c)
        for q in range(n_out):
            acc = 0.0
            for j in range(n_hid):
                acc += hidden[t, j] * w_out[j, q]
            y[t, q] = acc
        for j in range(n_hid):
            h_prev[j] = hidden[t, j]
            c_prev[j] = cells[t, j]
    return gates, cells, hidden, y


@njit(cache=True, fastmath=_FM)
def lstm_backward(w_in, w_rec, peep, w_out, h0, c0, x, gates, cells, hidden,
                  d_out, closed_loop):
    n_steps, n_in = x.shape
    n_hid = h0.shape[0]
    n_out = w_out.shape[1]
    g_in = np.zeros_like(w_in)
    g_rec = np.zeros_like(w_rec)
    g_peep = np.zeros_like(peep)
    g_out = np.zeros_like(w_out)
    g_x = np.zeros((n_steps, n_in))
    dh_next = np.zeros(n_hid)
    dc_next = np.zeros(n_hid)
    da = np.zeros((4, n_hid))
    dy = np.zeros(n_out)
    carry = np.zeros(n_out)
    for t in range(n_steps - 1, -1, -1):
        for q in range(n_out):
            dy[q] = d_out[t, q]
            if closed_loop:
                dy[q] += carry[q]
        if t > 0:
            h_prev = hidden[t - 1]
            c_prev = cells[t - 1]
        else:
            h_prev = h0
            c_prev = c0
        for j in range(n_hid):
            dh = dh_next[j]
            for q in range(n_out):
                dh += dy[q] * w_out[j, q]
                g_out[j, q] += hidden[t, j] * dy[q]
            c = cells[t, j]
            tc = np.tanh(c)
            z = gates[t, 0, j]
            ig = gates[t, 1, j]
            fg = gates[t, 2, j]
            og = gates[t, 3, j]
            dao = dh * tc * og * (1.0 - og)
            dc = dc_next[j] + dh * og * (1.0 - tc * tc) + dao * peep[2, j]
            dai = dc * z * ig * (1.0 - ig)
            daf = dc * c_prev[j] * fg * (1.0 - fg)
            daz = dc * ig * (1.0 - z * z)
            da[0, j] = daz
            da[1, j] = dai
            da[2, j] = daf
            da[3, j] = dao
            g_peep[0, j] += dai * c_prev[j]
            g_peep[1, j] += daf * c_prev[j]
            g_peep[2, j] += dao * c
            dc_next[j] = dc * fg + dai * peep[0, j] + daf * peep[1, j]
        for k in range(n_in):
            xk = x[t, k]
            acc = 0.0
            for g in range(4):
                for j in range(n_hid):
                    g_in[g, k, j] += xk * da[g, j]
                    acc += w_in[g, k, j] * da[g, j]
            g_x[t, k] = acc
        for k in range(n_hid):
            hk = h_prev[k]
            acc = 0.0
            for g in range(4):
                for j in range(n_hid):
                    g_rec[g, k, j] += hk * da[g, j]
                    acc += w_rec[g, k, j] * da[g, j]
            dh_next[k] = acc
        if closed_loop:
            for q in range(n_out):
                g_x[t, q] += dy[q]
                carry[q] = g_x[t, q]
    return g_in, g_rec, g_peep, g_out, g_x, dh_next, dc_next


@njit(cache=True, fastmath=_FM)
def rnn_forward(w_in, w_rec, w_out, h0, x, closed_loop):
    n_steps, n_in = x.shape
    n_hid = h0.shape[0]
    n_out = w_out.shape[1]
    hidden = np.zeros((n_steps, n_hid))
    y = np.zeros((n_steps, n_out))
    a = np.zeros(n_hid)
    h_prev = h0.copy()
    for t in range(n_steps):
        if closed_loop and t > 0:
            for q in range(n_out):
                x[t, q] = x[t - 1, q] + y[t - 1, q]
        a[:] = 0.0
        for k in range(n_in):
            xk = x[t, k]
            for j in range(n_hid):
                a[j] += xk * w_in[k, j]
        for k in range(n_hid):
            hk = h_prev[k]
            for j in range(n_hid):
                a[j] += hk * w_rec[k, j]
        for j in range(n_hid):
            hidden[t, j] = np.tanh(a[j])
        for q in range(n_out):
            acc = 0.0
            for j in range(n_hid):
                acc += hidden[t, j] * w_out[j, q]
            y[t, q] = acc
        for j in range(n_hid):
            h_prev[j] = hidden[t, j]
    return hidden, y


@njit(cache=True, fastmath=_FM)
def rnn_backward(w_in, w_rec, w_out, h0, x, hidden, d_out, closed_loop):
    n_steps, n_in = x.shape
    n_hid = h0.shape[0]
    n_out = w_out.shape[1]
    g_in = np.zeros_like(w_in)
    g_rec = np.zeros_like(w_rec)
    g_out = np.zeros_like(w_out)
    g_x = np.zeros((n_steps, n_in))
    dh_next = np.zeros(n_hid)
    da = np.zeros(n_hid)
    dy = np.zeros(n_out)
    carry = np.zeros(n_out)
    for t in range(n_steps - 1, -1, -1):
        for q in range(n_out):
            dy[q] = d_out[t, q]
            if closed_loop:
                dy[q] += carry[q]
        if t > 0:
            h_prev = hidden[t - 1]
        else:
            h_prev = h0
        for j in range(n_hid):
            dh = dh_next[j]
            for q in range(n_out):
                dh += dy[q] * w_out[j, q]
                g_out[j, q] += hidden[t, j] * dy[q]
            hj = hidden[t, j]
            da[j] = dh * (1.0 - hj * hj)
        for k in range(n_in):
            xk = x[t, k]
            acc = 0.0
            for j in range(n_hid):
                g_in[k, j] += xk * da[j]
                acc += w_in[k, j] * da[j]
            g_x[t, k] = acc
        for k in range(n_hid):
            hk = h_prev[k]
            acc = 0.0
            for j in range(n_hid):
                g_rec[k, j] += hk * da[j]
                acc += w_rec[k, j] * da[j]
            dh_next[k] = acc
        if closed_loop:
            for q in range(n_out):
                g_x[t, q] += dy[q]
                carry[q] = g_x[t, q]
    return g_in, g_rec, g_out, g_x, dh_next


# -- uniform dispatch ----------------------------------------------------------

@njit(cache=True)
def forward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x, closed_loop):
    if is_lstm:
        return lstm_forward(w_in, w_rec, peep, w_out, h0, c0, x, closed_loop)
    hidden, y = rnn_forward(w_in[0], w_rec[0], w_out, h0, x, closed_loop)
    n = x.shape[0]
    return np.zeros((n, 0, h0.shape[0])), np.zeros((n, 0)), hidden, y


@njit(cache=True)
def backward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x, gates, cells, hidden,
             d_out, closed_loop):
    if is_lstm:
        return lstm_backward(w_in, w_rec, peep, w_out, h0, c0, x, gates, cells,
                             hidden, d_out, closed_loop)
    g_in, g_rec, g_out, g_x, g_h0 = rnn_backward(w_in[0], w_rec[0], w_out, h0, x,
                                                 hidden, d_out, closed_loop)
    n_in, n_hid = g_in.shape
    return (g_in.reshape((1, n_in, n_hid)), g_rec.reshape((1, n_hid, n_hid)),
            np.zeros_like(peep), g_out, g_x, g_h0, np.zeros(c0.shape[0]))


@njit(cache=True, fastmath=_FM)
def adam_update(values, grads, m, v, t, lr, beta1, beta2, eps):
    """In-place Adam step on flat views; ``t`` is the new step count."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k in range(values.size):
        g = grads[k]
        m[k] = beta1 * m[k] + (1.0 - beta1) * g
        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
        values[k] -= lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + eps)


# -- fused inference cycles ----------------------------------------------------

@njit(cache=True)
def retrospect(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x, target, c_lo, c_hi,
               context, n_cycles, eta_c, c_m, c_v, c_t, eta_s, s_m, s_v, s_t,
               beta1, beta2, eps):
    """``n_cycles`` of context/entry-state Adam on a teacher-forced window.

    ``context``/``h0``/``c0`` and the moment arrays are updated in place.
    Returns the new step counts and the refreshed hidden/cell sequences.
    """
    n_steps = x.shape[0]
    n_ctx = c_hi - c_lo
    n_hid = h0.shape[0]
    g_c = np.zeros(n_ctx)
    state = np.zeros(2 * n_hid if is_lstm else n_hid)
    g_state = np.zeros_like(state)
    for _ in range(n_cycles):
        for t in range(n_steps):
            for q in range(n_ctx):
                x[t, c_lo + q] = context[q]
        gates, cells, hidden, y = forward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x, False)
        d_out = y - target
        _, _, _, _, g_x, g_h0, g_c0 = backward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x,
                                               gates, cells, hidden, d_out, False)
        if eta_c > 0.0:
            for q in range(n_ctx):
                acc = 0.0
                for t in range(n_steps):
                    acc += g_x[t, c_lo + q]
                g_c[q] = acc
            c_t += 1
            adam_update(context, g_c, c_m, c_v, c_t, eta_c, beta1, beta2, eps)
            for q in range(n_ctx):
                context[q] = min(max(context[q], 0.0), 1.0)
        if eta_s > 0.0:
            for j in range(n_hid):
                state[j] = h0[j]
                g_state[j] = g_h0[j]
                if is_lstm:
                    state[n_hid + j] = c0[j]
                    g_state[n_hid + j] = g_c0[j]
            s_t += 1
            adam_update(state, g_state, s_m, s_v, s_t, eta_s, beta1, beta2, eps)
            for j in range(n_hid):
                h0[j] = min(max(state[j], -1.0), 1.0)
                if is_lstm:
                    c0[j] = state[n_hid + j]
    for t in range(n_steps):
        for q in range(n_ctx):
            x[t, c_lo + q] = context[q]
    gates, cells, hidden, y = forward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x, False)
    return c_t, s_t, hidden, cells


@njit(cache=True)
def prospect(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x, goal, m_lo, m_hi,
             n_cycles, eta_x, a_m, a_v, a_t, beta1, beta2, eps):
    """``n_cycles`` of Adam on the planned motor slots ``x[:, m_lo:m_hi]``.

    ``x`` holds the current observation in row 0's sensor slots, the plan,
    and the context; it is updated in place.  Returns the new step count.
    """
    n_steps, n_in = x.shape
    n_m = m_hi - m_lo
    n_out = w_out.shape[1]
    s0 = x[0, :n_out].copy()
    plan = np.zeros(n_steps * n_m)
    g_plan = np.zeros(n_steps * n_m)
    d_out = np.zeros((n_steps, n_out))
    for _ in range(n_cycles):
        x[0, :n_out] = s0
        gates, cells, hidden, y = forward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x, True)
        for t in range(n_steps):
            for q in range(n_out):
                d_out[t, q] = x[t, q] + y[t, q] - goal[t, q]
        _, _, _, _, g_x, _, _ = backward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, x,
                                         gates, cells, hidden, d_out, True)
        for t in range(n_steps):
            for q in range(n_m):
                plan[t * n_m + q] = x[t, m_lo + q]
                g_plan[t * n_m + q] = g_x[t, m_lo + q]
        a_t += 1
        adam_update(plan, g_plan, a_m, a_v, a_t, eta_x, beta1, beta2, eps)
        for t in range(n_steps):
            for q in range(n_m):
                x[t, m_lo + q] = min(max(plan[t * n_m + q], 0.0), 1.0)
    x[0, :n_out] = s0
    return a_t


@njit(cache=True)
def emergent_stream(is_lstm, w_in, w_rec, peep, w_out, x, target, hidden, cells,
                    first, since_reset, reset_every, c_lo, c_hi, context,
                    initial_context, R_c, r_c, eta_c, c_m, c_v, c_t,
                    eta_s, s_m, s_v, s_t, R_w, update_every, lr_w, w_m, w_v, w_t,
                    current_context, step0, beta1, beta2, eps, contexts):
    """Online context inference plus weight learning over rows ``first..``.

    Rows ``0..first-1`` of ``x``/``target`` are retained history (with the
    contexts they were processed with).  ``hidden[k]``/``cells[k]`` is the
    state entering row ``k``, so both have one row more than ``x``.  Every
    argument array is updated in place; the sensor and motor slots of ``x``
    and all of ``target`` must be filled in by the caller.  ``since_reset``
    counts processed rows since the last activity reset and ``step0`` is the
    global index of row ``first``.  Returns per-row losses and the updated
    counters ``(since_reset, c_t, s_t, w_t)``; ``contexts[k]`` receives the
    estimate after the inference that follows row ``first + k``.  With
    ``current_context`` the weight update replays its window with the current
    estimate in every context slot, otherwise with the recorded contexts.
    """
    n_rows, n_in = x.shape
    n_hid = hidden.shape[1]
    n_out = target.shape[1]
    n_ctx = c_hi - c_lo
    n_w = w_in.size + w_rec.size + peep.size + w_out.size
    flat = np.zeros(n_w)
    g_flat = np.zeros(n_w)
    losses = np.zeros(n_rows - first)
    h0 = np.zeros(n_hid)
    c0 = np.zeros(cells.shape[1])
    for row in range(first, n_rows):
        if since_reset == reset_every:
            since_reset = 0
        if since_reset == 0:
            hidden[row, :] = 0.0
            cells[row, :] = 0.0
            for q in range(n_ctx):
                context[q] = initial_context
            c_m[:] = 0.0
            c_v[:] = 0.0
            c_t = 0
            s_m[:] = 0.0
            s_v[:] = 0.0
            s_t = 0
        for q in range(n_ctx):
            x[row, c_lo + q] = context[q]
        h0[:] = hidden[row]
        c0[:] = cells[row]
        _, cl, hl, y = forward(is_lstm, w_in, w_rec, peep, w_out, h0, c0,
                               x[row:row + 1].copy(), False)
        loss = 0.0
        for q in range(n_out):
            r = y[0, q] - target[row, q]
            loss += 0.5 * r * r
        losses[row - first] = loss
        hidden[row + 1] = hl[0]
        if is_lstm:
            cells[row + 1] = cl[0]
        since_reset += 1

        if since_reset >= R_c and r_c > 0:
            lo = row - R_c + 1
            h0[:] = hidden[lo]
            c0[:] = cells[lo]
            xw = x[lo:row + 1].copy()
            c_t, s_t, hw, cw = retrospect(is_lstm, w_in, w_rec, peep, w_out, h0, c0, xw,
                                          target[lo:row + 1], c_lo, c_hi, context, r_c,
                                          eta_c, c_m, c_v, c_t, eta_s, s_m, s_v, s_t,
                                          beta1, beta2, eps)
            hidden[lo] = h0
            cells[lo] = c0
            for k in range(R_c):
                hidden[lo + 1 + k] = hw[k]
                if is_lstm:
                    cells[lo + 1 + k] = cw[k]
                for q in range(n_ctx):
                    x[lo + k, c_lo + q] = context[q]
        contexts[row - first] = context

        step = step0 + row - first + 1
        if lr_w > 0.0 and since_reset >= R_w and step % update_every == 0:
            lo = row - R_w + 1
            h0[:] = hidden[lo]
            c0[:] = cells[lo]
            xw = x[lo:row + 1].copy()
            if current_context:
                for k in range(R_w):
                    for q in range(n_ctx):
                        xw[k, c_lo + q] = context[q]
            gates, cw, hw, y = forward(is_lstm, w_in, w_rec, peep, w_out, h0, c0, xw, False)
            d_out = y - target[lo:row + 1]
            g_in, g_rec, g_peep, g_out, _, _, _ = backward(
                is_lstm, w_in, w_rec, peep, w_out, h0, c0, xw, gates, cw, hw, d_out, False)
            pack(flat, w_in, w_rec, peep, w_out)
            pack(g_flat, g_in, g_rec, g_peep, g_out)
            w_t += 1
            adam_update(flat, g_flat, w_m, w_v, w_t, lr_w, beta1, beta2, eps)
            unpack(flat, w_in, w_rec, peep, w_out)
    return losses, since_reset, c_t, s_t, w_t


@njit(cache=True)
def pack(flat, a, b, c, d):
    pos = _put(flat, a.ravel(), 0)
    pos = _put(flat, b.ravel(), pos)
    pos = _put(flat, c.ravel(), pos)
    _put(flat, d.ravel(), pos)


@njit(cache=True)
def _put(flat, src, pos):
    for k in range(src.size):
        flat[pos + k] = src[k]
    return pos + src.size


@njit(cache=True)
def unpack(flat, a, b, c, d):
    pos = _take(flat, a.reshape(a.size), 0)
    pos = _take(flat, b.reshape(b.size), pos)
    pos = _take(flat, c.reshape(c.size), pos)
    _take(flat, d.reshape(d.size), pos)


@njit(cache=True)
def _take(flat, dst, pos):
    for k in range(dst.size):
        dst[k] = flat[pos + k]
    return pos + dst.size
