"""Hot numeric kernels for DAG propagation and intervention scoring.

Every kernel exists twice: a loop version compiled by numba (``*_jit``) and a
vectorised numpy version (``*_np``). The public names dispatch to whichever
backend :mod:`passive_causal._accel` selected. Propagation accumulates in the
same order on both paths and matches exactly; Monte Carlo means reduce over
samples differently and agree to floating-point rounding.

Graph arrays use a fixed layout:

``order``    int64 (n,)   topological order
``par_idx``  int64 (n, 2) parent indices, ``-1`` for an unused slot
``par_w``    float64 (n, 2) matching edge weights (0 for unused slots)
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

MAX_PARENTS = 2


# ---------------------------------------------------------------- numpy path


def propagate_batch_np(order, par_idx, par_w, clamp_mask, clamp_val, eps, nonlinear, leak):
    batch, n = eps.shape
    out = np.zeros((batch, n))
    for node in order:
        acc = np.zeros(batch)
        for k in range(MAX_PARENTS):
            p = par_idx[node, k]
            if p >= 0:
                acc += par_w[node, k] * out[:, p]
        acc += eps[:, node]
        if nonlinear:
            acc = np.where(acc > 0.0, acc, leak * acc)
        out[:, node] = np.where(clamp_mask[:, node], clamp_val[:, node], acc)
    return out


def _candidate_clamps(n, magnitude):
    mask = np.zeros((2 * n, n), dtype=np.bool_)
    val = np.zeros((2 * n, n))
    for a in range(2 * n):
        mask[a, a // 2] = True
        val[a, a // 2] = magnitude if a % 2 == 0 else -magnitude
    return mask, val


def candidate_values_np(order, par_idx, par_w, allowed, magnitude, nonlinear, leak, goal):
    n = order.shape[0]
    mask, val = _candidate_clamps(n, magnitude)
    vals = propagate_batch_np(order, par_idx, par_w, mask, val, np.zeros((2 * n, n)), nonlinear, leak)
    out = vals[:, goal].copy()
    out[~np.repeat(allowed, 2)] = -np.inf
    return out


def mc_candidate_means_np(order, par_idx, par_w, allowed, magnitude, nonlinear, leak, goal, eps):
    n = order.shape[0]
    samples = eps.shape[0]
    out = np.full(2 * n, -np.inf)
    for a in range(2 * n):
        node = a // 2
        if not allowed[node]:
            continue
        mask = np.zeros((samples, n), dtype=np.bool_)
        mask[:, node] = True
        val = np.zeros((samples, n))
        val[:, node] = magnitude if a % 2 == 0 else -magnitude
        vals = propagate_batch_np(order, par_idx, par_w, mask, val, eps, nonlinear, leak)
        out[a] = vals[:, goal].sum() / samples
    return out


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _propagate_row(order, par_idx, par_w, clamp_node, clamp_value, eps_row, nonlinear, leak, out_row):
    for j in range(order.shape[0]):
        node = order[j]
        if node == clamp_node:
            out_row[node] = clamp_value
            continue
        acc = 0.0
        for k in range(MAX_PARENTS):
            p = par_idx[node, k]
            if p >= 0:
                acc += par_w[node, k] * out_row[p]
        acc += eps_row[node]
        if nonlinear and not acc > 0.0:
            acc = leak * acc
        out_row[node] = acc


@njit(cache=True)
def propagate_batch_jit(order, par_idx, par_w, clamp_mask, clamp_val, eps, nonlinear, leak):
    batch, n = eps.shape
    out = np.zeros((batch, n))
    for b in range(batch):
        for j in range(n):
            node = order[j]
            if clamp_mask[b, node]:
                out[b, node] = clamp_val[b, node]
                continue
            acc = 0.0
            for k in range(MAX_PARENTS):
                p = par_idx[node, k]
                if p >= 0:
                    acc += par_w[node, k] * out[b, p]
            acc += eps[b, node]
            if nonlinear and not acc > 0.0:
                acc = leak * acc
            out[b, node] = acc
    return out


@njit(cache=True)
def candidate_values_jit(order, par_idx, par_w, allowed, magnitude, nonlinear, leak, goal):
    n = order.shape[0]
    out = np.empty(2 * n)
    row = np.zeros(n)
    zeros = np.zeros(n)
    for a in range(2 * n):
        node = a // 2
        if not allowed[node]:
            out[a] = -np.inf
            continue
        value = magnitude if a % 2 == 0 else -magnitude
        _propagate_row(order, par_idx, par_w, node, value, zeros, nonlinear, leak, row)
        out[a] = row[goal]
    return out


@njit(cache=True)
def mc_candidate_means_jit(order, par_idx, par_w, allowed, magnitude, nonlinear, leak, goal, eps):
    n = order.shape[0]
    samples = eps.shape[0]
    out = np.empty(2 * n)
    row = np.zeros(n)
    for a in range(2 * n):
        node = a // 2
        if not allowed[node]:
            out[a] = -np.inf
            continue
        value = magnitude if a % 2 == 0 else -magnitude
        total = 0.0
        for s in range(samples):
            _propagate_row(order, par_idx, par_w, node, value, eps[s], nonlinear, leak, row)
            total += row[goal]
        out[a] = total / samples
    return out


# ---------------------------------------------------------------- dispatch

if USE_NUMBA:
    propagate_batch = propagate_batch_jit
    candidate_values = candidate_values_jit
    mc_candidate_means = mc_candidate_means_jit
else:
    propagate_batch = propagate_batch_np
    candidate_values = candidate_values_np
    mc_candidate_means = mc_candidate_means_np
