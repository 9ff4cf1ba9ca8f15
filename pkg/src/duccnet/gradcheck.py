"""Central finite-difference verification of the analytic gradients.

Runs the graph in 64-bit mode (call graph.astype(np.float64) first) so the
difference quotient is dominated by truncation error, not float noise. The
relative error uses a small guard in the denominator so near-zero gradients
are compared at an absolute scale instead of blowing up the ratio.
"""

import numpy as np

from .graph import backward, forward
from .optim import bce_loss


def rel_err(a, n, guard=1e-4):
    return abs(a - n) / max(abs(a), abs(n), guard)


def graph_loss(graph, batch, labels, rng_seed):
    out, tape = forward(graph, batch, mode="train", rng_seed=rng_seed)
    loss, _ = bce_loss(out, labels)
    return loss, out, tape


def analytic_param_grads(graph, batch, labels, rng_seed):
    out, tape = forward(graph, batch, mode="train", rng_seed=rng_seed)
    _, dpred = bce_loss(out, labels)
    return backward(graph, tape, dpred)


def numeric_param_grads(graph, batch, labels, rng_seed, h=1e-5, keys=None):
    """Central differences of the scalar loss for every parameter scalar.

    The same rng_seed goes into every forward so dropout masks are frozen
    across evaluations. BN moving statistics drift during the sweep but
    train-mode loss never reads them.
    """
    params = graph.parameters()
    keys = list(params) if keys is None else list(keys)
    grads = {}
    for key in keys:
        arr = params[key]
        g = np.zeros(arr.size, dtype=arr.dtype)
        for i in range(arr.size):
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            fp, _, _ = graph_loss(graph, batch, labels, rng_seed)
            arr[idx] = orig - h
            fm, _, _ = graph_loss(graph, batch, labels, rng_seed)
            arr[idx] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[key] = g.reshape(arr.shape)
    return grads


def gradcheck_graph(graph, batch, labels, rng_seed=0, h=1e-5, guard=1e-4, keys=None):
    """Compare analytic and numeric gradients; returns (max_err, per_key).

    per_key maps parameter name to its worst relative error.
    """
    analytic = analytic_param_grads(graph, batch, labels, rng_seed)
    numeric = numeric_param_grads(graph, batch, labels, rng_seed, h=h, keys=keys)
    per_key = {}
    for key, num in numeric.items():
        ana = analytic[key]
        worst = 0.0
        for a, n in zip(ana.ravel(), num.ravel()):
            worst = max(worst, rel_err(float(a), float(n), guard))
        per_key[key] = worst
    return max(per_key.values()), per_key
