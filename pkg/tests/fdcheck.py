"""Finite-difference gradients for the network's loss.

Five-point central stencil: truncation error O(EPS**4), so even gradient
components near 1e-6 are resolved well below the 1e-5 relative tolerance.
"""

import numpy as np

from reprise import netcore
from reprise.netcore import NetworkParams, NetworkState

EPS = 1e-3


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _loss(params, state, x, targets, closed):
    return netcore.trace_loss(netcore.unroll(params, state, x, closed_loop=closed), targets)


def _derivative(f, flat, k):
    vals = {}
    for step in (2, 1, -1, -2):
        v = flat.copy()
        v[k] += step * EPS
        vals[step] = f(v)
    # symmetric differences first: an input the loss ignores gives exactly 0
    return (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * EPS)


def fd_weights(params, state, x, targets, closed=False):
    flat = params.flat()
    f = lambda v: _loss(NetworkParams.from_flat(params.arch, v), state, x, targets, closed)
    return np.array([_derivative(f, flat, k) for k in range(flat.size)])


def fd_inputs(params, state, x, targets, closed=False):
    flat = x.ravel()
    f = lambda v: _loss(params, state, v.reshape(x.shape), targets, closed)
    return np.array([_derivative(f, flat, k) for k in range(flat.size)]).reshape(x.shape)


def fd_state(params, state, x, targets, closed=False):
    parts = [state.hidden] + ([state.cell] if state.cell is not None else [])
    flat = np.concatenate(parts)
    h = len(state.hidden)

    def f(v):
        return _loss(params, NetworkState(v[:h], v[h:] if state.cell is not None else None),
                     x, targets, closed)
    return np.array([_derivative(f, flat, k) for k in range(flat.size)])


def analytic(params, state, x, targets, closed=False):
    grads = netcore.bptt(netcore.unroll(params, state, x, closed_loop=closed), targets)
    s = grads.initial_state
    g_state = np.concatenate([s.hidden] + ([s.cell] if s.cell is not None else []))
    return grads.weights.flat(), grads.inputs, g_state
