"""Dense numerical substrate: softmax, linear maps, scaled dot-product
and multi-head attention, cross-entropy, and a finite-difference
gradient checker.

Every trainable operation comes as a ``*_forward`` / ``*_backward`` pair;
the forward returns ``(value, cache)`` and the backward consumes the
cache plus the upstream gradient. Gradients are hand-derived (there is no
autodiff tape) and validated against :func:`grad_check`.

All arithmetic is float64. Matrices are plain 2-D numpy arrays; rows are
tokens/queries, columns are feature dimensions.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidInputError, NumericalError, ShapeError
from .params import init_uniform

PROB_EPS = 1e-12  # clamp for log / cosine-norm guards


def as_matrix(a, name="matrix"):
    """Validate and return ``a`` as a finite float64 2-D array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return m


def as_vector(v, name="vector"):
    """Validate and return ``v`` as a finite float64 1-D array."""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {x.shape}")
    if x.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return x


# ---------------------------------------------------------------------------
# softmax

def softmax(v):
    """Stable softmax of a non-empty vector; entries sum to 1."""
    return kernels.softmax_vec(as_vector(v, "softmax input"))


def softmax_backward(alpha, d_alpha):
    """Gradient through ``alpha = softmax(z)``: returns d_z.

    d_z = alpha * (d_alpha - <d_alpha, alpha>).
    """
    return alpha * (d_alpha - np.dot(d_alpha, alpha))


def softmax_rows_backward(weights, d_weights):
    """Row-wise version of :func:`softmax_backward` for 2-D arrays."""
    inner = np.sum(d_weights * weights, axis=1, keepdims=True)
    return weights * (d_weights - inner)


# ---------------------------------------------------------------------------
# linear map

def linear(x, w, bias=None):
    """Row-vector linear map ``x @ w (+ bias)``.

    ``x`` has length w.rows; the result has length w.cols.
    """
    x = as_vector(x, "linear input")
    w = as_matrix(w, "linear weight")
    if x.shape[0] != w.shape[0]:
        raise ShapeError(f"linear: input length {x.shape[0]} != weight rows {w.shape[0]}")
    out = x @ w
    if bias is not None:
        b = as_vector(bias, "linear bias")
        if b.shape[0] != w.shape[1]:
            raise ShapeError(f"linear: bias length {b.shape[0]} != weight cols {w.shape[1]}")
        out = out + b
    return out


def linear_backward(x, w, d_out):
    """Gradients of ``x @ w + b``: returns (d_x, d_w, d_bias)."""
    return d_out @ w.T, np.outer(x, d_out), d_out.copy()


# ---------------------------------------------------------------------------
# scaled dot-product attention

def scaled_dot_attention(q, k, v):
    """Scaled dot-product attention over row sets.

    q: (nq, d_k), k: (m, d_k), v: (m, d_v). Returns
    ``(output, weights)`` where each weights row is a probability vector
    and ``output = weights @ v``; the scaling divisor is sqrt(d_k).
    """
    out, weights, _ = sdpa_forward(q, k, v)
    return out, weights


def sdpa_forward(q, k, v):
    """Like :func:`scaled_dot_attention` but also returns the cache."""
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention: Q cols {q.shape[1]} != K cols {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: K rows {k.shape[0]} != V rows {v.shape[0]}")
    if q.shape[1] < 1:
        raise ShapeError("attention: d_k must be >= 1")
    out, weights = kernels.sdpa(q, k, v)
    return out, weights, (q, k, v, weights)


def sdpa_backward(cache, d_out, d_weights=None):
    """Backward of scaled dot-product attention.

    ``d_weights`` is the optional upstream gradient on the returned
    weights (used when a caller consumes them directly). Returns
    (d_q, d_k, d_v).
    """
    q, k, v, weights = cache
    scale = 1.0 / np.sqrt(q.shape[1])
    d_v = weights.T @ d_out
    d_w = d_out @ v.T
    if d_weights is not None:
        d_w = d_w + d_weights
    d_scores = softmax_rows_backward(weights, d_w)
    d_q = d_scores @ k * scale
    d_k = d_scores.T @ q * scale
    return d_q, d_k, d_v


# ---------------------------------------------------------------------------
# multi-head attention

@dataclass
class MhaParams:
    """Per-head projections plus the output map.

    heads * head_dim must equal model_dim; w_q/w_k/w_v are lists of
    (model_dim, head_dim) matrices, w_o is (heads * head_dim, model_dim).
    """
    heads: int
    model_dim: int
    head_dim: int
    w_q: list = field(default_factory=list)
    w_k: list = field(default_factory=list)
    w_v: list = field(default_factory=list)
    w_o: np.ndarray = None

    def validate(self):
        if self.heads * self.head_dim != self.model_dim:
            raise ShapeError(
                f"heads*head_dim = {self.heads * self.head_dim} != model_dim {self.model_dim}")
        for name, mats in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if len(mats) != self.heads:
                raise ShapeError(f"{name} must have one matrix per head")
            for m in mats:
                if m.shape != (self.model_dim, self.head_dim):
                    raise ShapeError(
                        f"{name} shape {m.shape} != ({self.model_dim}, {self.head_dim})")
        if self.w_o.shape != (self.heads * self.head_dim, self.model_dim):
            raise ShapeError(
                f"w_o shape {self.w_o.shape} != "
                f"({self.heads * self.head_dim}, {self.model_dim})")


def mha_init(rng, heads, model_dim, head_dim):
    """Seeded MhaParams with uniform fan-in initialization."""
    params = MhaParams(
        heads=heads, model_dim=model_dim, head_dim=head_dim,
        w_q=[init_uniform(rng, model_dim, head_dim) for _ in range(heads)],
        w_k=[init_uniform(rng, model_dim, head_dim) for _ in range(heads)],
        w_v=[init_uniform(rng, model_dim, head_dim) for _ in range(heads)],
        w_o=init_uniform(rng, heads * head_dim, model_dim),
    )
    params.validate()
    return params


def mha_identity(model_dim):
    """Single-head params with identity projections; MHA then reduces to
    plain scaled dot-product attention."""
    eye = np.eye(model_dim)
    return MhaParams(heads=1, model_dim=model_dim, head_dim=model_dim,
                     w_q=[eye.copy()], w_k=[eye.copy()], w_v=[eye.copy()],
                     w_o=eye.copy())


def multi_head_attention(q, k, v, params):
    """Multi-head attention; output shape (q_rows, model_dim)."""
    out, _ = mha_forward(q, k, v, params)
    return out


def mha_forward(q, k, v, params):
    """Multi-head attention with cache.

    Each head projects (Q, K, V) with its own matrices, runs scaled
    dot-product attention, the head outputs are concatenated and mapped
    by w_o.
    """
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    params.validate()
    d = params.model_dim
    for name, m in (("Q", q), ("K", k), ("V", v)):
        if m.shape[1] != d:
            raise ShapeError(f"{name} cols {m.shape[1]} != model_dim {d}")
    head_caches = []
    head_outs = []
    for h in range(params.heads):
        qh = q @ params.w_q[h]
        kh = k @ params.w_k[h]
        vh = v @ params.w_v[h]
        out_h, _, cache_h = sdpa_forward(qh, kh, vh)
        head_outs.append(out_h)
        head_caches.append(cache_h)
    concat = np.concatenate(head_outs, axis=1)
    out = concat @ params.w_o
    return out, (q, k, v, params, head_caches, concat)


def mha_backward(cache, d_out):
    """Backward of :func:`mha_forward`.

    Returns (d_q, d_k, d_v, param_grads) where param_grads mirrors the
    MhaParams layout: dict with 'w_q'/'w_k'/'w_v' lists and 'w_o'.
    """
    q, k, v, params, head_caches, concat = cache
    d_concat = d_out @ params.w_o.T
    d_w_o = concat.T @ d_out
    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    grads = {"w_q": [], "w_k": [], "w_v": [], "w_o": d_w_o}
    hd = params.head_dim
    for h in range(params.heads):
        d_head = d_concat[:, h * hd:(h + 1) * hd]
        d_qh, d_kh, d_vh = sdpa_backward(head_caches[h], d_head)
        grads["w_q"].append(q.T @ d_qh)
        grads["w_k"].append(k.T @ d_kh)
        grads["w_v"].append(v.T @ d_vh)
        d_q += d_qh @ params.w_q[h].T
        d_k += d_kh @ params.w_k[h].T
        d_v += d_vh @ params.w_v[h].T
    return d_q, d_k, d_v, grads


def add_mha_grads(store, prefix, grads):
    """Accumulate :func:`mha_backward` grads into a GradStore."""
    for h, g in enumerate(grads["w_q"]):
        store.add(f"{prefix}.w_q.{h}", g)
    for h, g in enumerate(grads["w_k"]):
        store.add(f"{prefix}.w_k.{h}", g)
    for h, g in enumerate(grads["w_v"]):
        store.add(f"{prefix}.w_v.{h}", g)
    store.add(f"{prefix}.w_o", grads["w_o"])


# ---------------------------------------------------------------------------
# cross-entropy

def cross_entropy(p, label):
    """Negative log-likelihood ``-ln p[label]``.

    ``p[label]`` is clamped below at 1e-12 so a confident-wrong
    prediction yields a large finite loss instead of infinity.
    """
    p = as_vector(p, "probabilities")
    label = int(label)
    if not 0 <= label < p.shape[0]:
        raise InvalidInputError(f"label {label} out of range for {p.shape[0]} categories")
    return -np.log(max(p[label], PROB_EPS))


def softmax_cross_entropy(logits, label):
    """Fused softmax + cross-entropy.

    Returns ``(loss, probs, d_logits)`` with the standard gradient
    ``probs - one_hot(label)``.
    """
    probs = softmax(logits)
    loss = cross_entropy(probs, label)
    d_logits = probs.copy()
    d_logits[label] -= 1.0
    return loss, probs, d_logits


# ---------------------------------------------------------------------------
# finite-difference gradient oracle

def grad_check(f, x, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f(vec) -> (value, grad_vec)`` is a scalar function of a flat
    parameter vector. For every coordinate the analytic entry is compared
    with ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` using the
    relative error |a - n| / max(1, |a|, |n|).
    """
    if not 0.0 < eps <= 1e-2:
        raise InvalidInputError(f"eps must be in (0, 1e-2], got {eps}")
    x = np.asarray(x, dtype=np.float64)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != parameter shape {x.shape}")
    worst = 0.0
    for i in range(x.size):
        if not np.isfinite(analytic[i]):
            raise NumericalError(f"non-finite analytic gradient at coordinate {i}")
        bumped = x.copy()
        bumped[i] += eps
        up, _ = f(bumped)
        bumped[i] -= 2 * eps
        down, _ = f(bumped)
        numeric = (up - down) / (2 * eps)
        if not np.isfinite(numeric):
            raise NumericalError(f"non-finite numeric gradient at coordinate {i}")
        rel = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, rel)
    return worst
