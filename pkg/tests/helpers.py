"""Shared test oracles.

The finite-difference routine is the independent reference for every
analytic gradient in the package: it only ever calls a scalar-valued
function, never the tape.
"""

import numpy as np


def finite_difference(f, arrays, step=1e-5):
    """Central finite differences of the scalar ``f()`` w.r.t. each array.

    Arrays are perturbed in place one element at a time and restored, so
    ``f`` must read them afresh on every call.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f()
            flat[i] = orig - step
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(grad)
    return grads


def rel_error(analytic, reference, floor=1e-12):
    """Norm of the difference over the larger of the two norms."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(reference), floor)
    return np.linalg.norm(analytic - reference) / denom


def grads_close(analytic, reference, tol):
    """Relative agreement, counting a pair of numerically-zero gradients
    (e.g. a bias ahead of batchnorm) as agreeing."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if max(np.linalg.norm(analytic), np.linalg.norm(reference)) < 1e-10:
        return True
    return rel_error(analytic, reference) < tol


def pairwise_auc(scores, labels):
    """Brute-force AUC: correctly ordered positive/negative pairs, half
    credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))
