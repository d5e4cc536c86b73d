"""Pure-numpy kernel backend.

Mirrors the compiled core in ``_ckernels.pyx`` exactly: same functions,
same contracts, no input validation (the callers in ``microfusion.nn``
validate). Inputs are C-contiguous float64 arrays.
"""

import numpy as np

BACKEND = "python"


def softmax_vec(x):
    """Stable softmax of a 1-D vector (max is subtracted before exp)."""
    shifted = x - np.max(x)
    e = np.exp(shifted)
    return e / np.sum(e)


def softmax_rows(m):
    """Row-wise stable softmax of a 2-D array."""
    shifted = m - np.max(m, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def sdpa(q, k, v):
    """Fused scaled dot-product attention.

    Returns ``(output, weights)`` with ``weights = softmax(q k^T / sqrt(d_k))``
    row-wise and ``output = weights @ v``.
    """
    d_k = q.shape[1]
    scores = (q @ k.T) / np.sqrt(d_k)
    weights = softmax_rows(scores)
    return weights @ v, weights


def attention_pool(h, u):
    """Softmax-weighted pooling of token rows.

    ``scores = h @ u``, ``alpha = softmax(scores)``; returns
    ``(alpha @ h, alpha)``.
    """
    alpha = softmax_vec(h @ u)
    return alpha @ h, alpha
