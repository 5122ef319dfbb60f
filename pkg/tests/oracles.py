"""Independent numerical oracles shared by the test suite.

Everything here is deliberately written against plain numpy arrays, not the
package's compute graph, so the two routes stay independent.
"""

import numpy as np


def fd_gradient(f, arr, step=1e-3):
    """Central finite-difference gradient of scalar f w.r.t. ``arr``.

    ``f`` must be a pure function of the current contents of ``arr``; it is
    re-evaluated with single entries perturbed in place.
    """
    flat = arr.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f())
        flat[i] = orig - step
        f_minus = float(f())
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(arr.shape)


def max_rel_err(analytic, numeric):
    """Max elementwise relative error between two gradients.

    Entries are floored at 10% of the gradient's max magnitude: central
    differences of an f32 forward pass carry absolute noise around
    eps32*|loss|/step, which swamps a per-entry relative comparison on
    components far below the gradient scale while real backward bugs
    (missing terms, transposes, wrong factors) perturb entries at the
    scale itself.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = 0.1 * (np.abs(numeric).max() + 1e-3)
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def dense_fisher_diag(per_sample_grads):
    """Diagonal of (1/N) * sum_n g_n g_n^T formed as an explicit dense matrix."""
    g = np.asarray(per_sample_grads, dtype=np.float64)
    n = g.shape[0]
    outer = np.zeros((g.shape[1], g.shape[1]), dtype=np.float64)
    for row in g:
        outer += np.outer(row, row)
    outer /= n
    return np.diag(outer).copy()


def dense_natural_score(g, fisher_diag, damping):
    """g^T F^{-1} g with F the damped diagonal matrix, via dense inversion."""
    g = np.asarray(g, dtype=np.float64)
    f = np.diag(np.asarray(fisher_diag, dtype=np.float64) + damping)
    return float(g @ np.linalg.inv(f) @ g)
