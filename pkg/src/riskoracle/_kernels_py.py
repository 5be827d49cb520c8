"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_kernels`` module; used when
the extension is not built or ``RISKORACLE_PURE_PYTHON=1`` is set.
"""

import numpy as np


def pairwise_js(p):
    """Symmetric m x m matrix of JS divergences between rows of ``p``.

    Rows must be strictly positive and sum to one.
    """
    p = np.ascontiguousarray(p, dtype=np.float64)
    ent = (p * np.log(p)).sum(axis=1)
    mid = 0.5 * (p[:, None, :] + p[None, :, :])
    cross = (mid * np.log(mid)).sum(axis=2)
    out = 0.5 * (ent[:, None] + ent[None, :]) - cross
    np.fill_diagonal(out, 0.0)
    return np.maximum(out, 0.0)


def pairwise_js_grad(p, g):
    """Gradient of sum(g * pairwise_js(p)) with respect to ``p``."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    gs = g + g.T
    np.fill_diagonal(gs, 0.0)
    # log(2 p_ik / (p_ik + p_jk)) for every (i, j, k)
    logratio = np.log(2.0 * p[:, None, :]) - np.log(p[:, None, :] + p[None, :, :])
    return 0.5 * np.einsum("ij,ijk->ik", gs, logratio)
