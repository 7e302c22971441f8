"""Independent reference implementations used only by the tests.

Each oracle takes a different route from the library code it checks: nested
loops instead of strided views, enumeration instead of projected descent,
lstsq instead of normal equations, and so on.
"""

from itertools import combinations
import math

import numpy as np

from xbprune.model_io import network_from_dict

WORKED_NET = {
    "crossbar": {"rows": 12, "cols": 4},
    "input": [2, 3],
    "layers": [
        {"name": "conv", "kind": "Conv", "P": 4, "Q": 4, "kernel": [2, 2],
         "stride": 1, "padding": 0, "K_in": 2, "K_out": 2},
    ],
}

# input group 0 feeds output FMs {0, 3}, group 1 feeds {1, 2}
COLUMN_MASKS = np.array([[1, 0, 0, 1], [0, 1, 1, 0]])
# top-right and bottom-left crossbars pruned
XBAR_MASKS = np.array([[1, 0], [0, 1]])


def worked_layer():
    return network_from_dict(WORKED_NET).layers[0]


def naive_conv(x, w, stride=1, padding=0):
    """Direct six-loop cross-correlation on NHWC input and [kh, kw, P, Q] weights."""
    n, h, wd, p = x.shape
    kh, kw, _, q = w.shape
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, p))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, ho, wo, q))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for c in range(p):
                    for dy in range(kh):
                        for dx in range(kw):
                            out[b, oy, ox] += xp[b, oy * stride + dy, ox * stride + dx, c] * w[dy, dx, c]
    return out


def best_subset(X, Y, r):
    """Exhaustive optimum of ||Y - alpha * X m||^2 over binary m with r ones (alpha fitted per mask)."""
    best, best_mask = np.inf, None
    for support in combinations(range(X.shape[1]), r):
        z = X[:, list(support)].sum(axis=1)
        zz = z @ z
        alpha = (z @ Y) / zz if zz > 0 else 1.0
        loss = float(np.sum((Y - alpha * z) ** 2))
        if loss < best:
            best = loss
            best_mask = np.zeros(X.shape[1], dtype=int)
            best_mask[list(support)] = 1
    return best, best_mask


def recount_crossbars(layer, masks, rows, cols, grain):
    """Count compute crossbars by enumerating columns, independent of the mapper's data structures."""
    masks = np.asarray(masks)
    w_out = layer.out_w
    k_out = layer.Q // masks.shape[1]
    pieces = None
    # width splits belong to the dense layout, so they use the layer's own K_out
    for n in range(1, w_out + 1):
        widest = -(-w_out // n)
        span = (widest - 1) * layer.stride + layer.kernel_w
        if layer.K_out * widest <= cols and layer.K_in * layer.kernel_h * span <= rows:
            pieces = [w_out // n + (1 if k < w_out % n else 0) for k in range(n)]
            break
    assert pieces is not None
    total = 0
    for width in pieces:
        for i in range(masks.shape[0]):
            if grain == "crossbar":
                total += int(masks[i].sum())
            else:
                total += math.ceil(int(masks[i].sum()) * k_out * width / cols)
    return total


def lstsq_repair(A, B):
    return np.linalg.lstsq(A, B, rcond=None)[0]
