"""Central finite-difference oracle, independent of the backward pass."""

import numpy as np

from magdrop_lab.nn import forward


def numeric_param_grads(model, states, x, y, hooks=None, eps=1e-5):
    grads = []
    for i in model.param_layer_indices():
        for arr in (states[i].weights, states[i].bias):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = forward(model, states, x, y, hooks)[1]
                flat[k] = orig - eps
                down = forward(model, states, x, y, hooks)[1]
                flat[k] = orig
                gflat[k] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def rel_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
