"""Cross-modal alignment between the image vector and class text rows.

Each head projects the class text matrix T (c x d) to keys and values
and the image vector h_cls to a single query. The head's attention
weights over categories scale the matching value rows (a diagonal
application that keeps one row per category instead of collapsing to a
single attended vector), heads are concatenated and mapped by an output
matrix to O_text (c x d). Cosine similarity of each O_text row against
h_cls gives Sim; the argmax row selects the best-matching category and
its original text embedding.

Selection by argmax is not differentiable, so training uses a surrogate:
cross-entropy between softmax(Sim / tau) and the true category. The
backward pass here is hand-derived and covers the alignment parameters,
the image vector, and the text rows.

A collapsed variant (weights @ values per head, giving a single 1 x d
output row) is kept behind a flag for comparison; by linearity its one
row equals the column sum of the diagonal variant's rows.
"""

import dataclasses

import numpy as np

from . import nn
from .errors import DegenerateSimilarityError, ShapeError
from .params import init_uniform

NORM_EPS = 1e-12


@dataclasses.dataclass
class AlignParams:
    heads: int
    model_dim: int
    head_dim: int
    w_k: list
    w_v: list
    w_q: list
    w_o: np.ndarray

    def validate(self):
        if self.heads * self.head_dim != self.model_dim:
            raise ShapeError(
                f"heads ({self.heads}) * head_dim ({self.head_dim}) != "
                f"model_dim ({self.model_dim})")
        for name, mats in (("w_k", self.w_k), ("w_v", self.w_v), ("w_q", self.w_q)):
            if len(mats) != self.heads:
                raise ShapeError(f"{name} has {len(mats)} heads, expected {self.heads}")
            for m in mats:
                if m.shape != (self.model_dim, self.head_dim):
                    raise ShapeError(
                        f"{name} head shape {m.shape} != "
                        f"({self.model_dim}, {self.head_dim})")
        if self.w_o.shape != (self.heads * self.head_dim, self.model_dim):
            raise ShapeError(
                f"w_o shape {self.w_o.shape} != "
                f"({self.heads * self.head_dim}, {self.model_dim})")
        return self


def align_init(rng, heads, model_dim, head_dim):
    return AlignParams(
        heads=heads, model_dim=model_dim, head_dim=head_dim,
        w_k=[init_uniform(rng, model_dim, head_dim) for _ in range(heads)],
        w_v=[init_uniform(rng, model_dim, head_dim) for _ in range(heads)],
        w_q=[init_uniform(rng, model_dim, head_dim) for _ in range(heads)],
        w_o=init_uniform(rng, heads * head_dim, model_dim),
    ).validate()


@dataclasses.dataclass
class AlignmentResult:
    o_text: np.ndarray
    sim: np.ndarray
    i_star: int
    h_star_text: np.ndarray
    weights: np.ndarray

    def to_dict(self):
        """JSON-ready form for run reports."""
        return {
            "sim": self.sim.tolist(),
            "i_star": int(self.i_star),
            "weights": self.weights.tolist(),
            "o_text": self.o_text.tolist(),
        }


def cosine_similarities(o_text, h_cls):
    """Cosine of each O_text row against h_cls; guards zero norms."""
    h_norm = np.linalg.norm(h_cls)
    if h_norm < NORM_EPS:
        raise DegenerateSimilarityError("image vector has zero norm")
    row_norms = np.linalg.norm(o_text, axis=1)
    bad = np.nonzero(row_norms < NORM_EPS)[0]
    if bad.size:
        raise DegenerateSimilarityError(
            f"attended text row {int(bad[0])} has zero norm")
    return (o_text @ h_cls) / (row_norms * h_norm)


def _project(h_cls, text_rows, params):
    """Per-head K, V, q, attention weights, and the concatenated diagonal
    output; shared by both variants and by the backward pass."""
    ks, vs, qs, weights = [], [], [], []
    for h in range(params.heads):
        k = text_rows @ params.w_k[h]
        v = text_rows @ params.w_v[h]
        q = h_cls @ params.w_q[h]
        scores = (k @ q) / np.sqrt(params.head_dim)
        ks.append(k)
        vs.append(v)
        qs.append(q)
        weights.append(nn.softmax(scores))
    return ks, vs, qs, np.vstack(weights)


def align(h_cls, text, params, collapse=False):
    """Full alignment; returns an :class:`AlignmentResult`.

    With ``collapse`` each head contributes its attention-weighted value
    sum, so O_text has a single row and the selection degenerates to
    index 0; the variant exists to compare representations, not to pick
    categories.
    """
    params.validate()
    h_cls = nn.as_vector(h_cls, "h_cls")
    rows = nn.as_matrix(text.rows, "class text matrix")
    if rows.shape[1] != params.model_dim or h_cls.shape[0] != params.model_dim:
        raise ShapeError(
            f"model_dim {params.model_dim} inconsistent with text {rows.shape} "
            f"/ h_cls {h_cls.shape}")
    ks, vs, qs, weights = _project(h_cls, rows, params)
    if collapse:
        z = np.concatenate([weights[h] @ vs[h] for h in range(params.heads)])
        o_text = (z @ params.w_o)[None, :]
    else:
        z = np.concatenate([weights[h][:, None] * vs[h]
                            for h in range(params.heads)], axis=1)
        o_text = z @ params.w_o
    sim = cosine_similarities(o_text, h_cls)
    i_star = int(np.argmax(sim))
    return AlignmentResult(o_text=o_text, sim=sim, i_star=i_star,
                           h_star_text=rows[i_star].copy(), weights=weights)


# ---------------------------------------------------------------------------
# differentiable surrogate

def alignment_forward(h_cls, text_rows, params):
    """Diagonal-variant forward with cache for the backward pass."""
    ks, vs, qs, weights = _project(h_cls, text_rows, params)
    z = np.concatenate([weights[h][:, None] * vs[h]
                        for h in range(params.heads)], axis=1)
    o_text = z @ params.w_o
    sim = cosine_similarities(o_text, h_cls)
    cache = (h_cls, text_rows, params, ks, vs, qs, weights, z, o_text, sim)
    return sim, cache


def alignment_loss(h_cls, text, params, label, tau=1.0):
    """Surrogate loss CE(softmax(Sim / tau), label); returns (loss, probs, cache)."""
    rows = text.rows if hasattr(text, "rows") else text
    sim, cache = alignment_forward(h_cls, rows, params)
    loss, probs, d_logits = nn.softmax_cross_entropy(sim / tau, label)
    return loss, probs, (cache, d_logits, tau)


def alignment_loss_backward(loss_cache):
    """Gradients of the surrogate loss.

    Returns (d_h_cls, d_text_rows, grads) where grads holds per-head
    w_k / w_v / w_q lists and w_o, shaped like AlignParams.
    """
    cache, d_logits, tau = loss_cache
    d_sim = d_logits / tau
    return alignment_backward(cache, d_sim)


def alignment_backward(cache, d_sim):
    h_cls, rows, params, ks, vs, qs, weights, z, o_text, sim = cache
    scale = 1.0 / np.sqrt(params.head_dim)
    h_norm = np.linalg.norm(h_cls)
    row_norms = np.linalg.norm(o_text, axis=1)

    # cosine rows: d/dx (x.y / |x||y|) = y/(|x||y|) - sim * x/|x|^2
    d_o = (d_sim[:, None]
           * (h_cls[None, :] / (row_norms[:, None] * h_norm)
              - sim[:, None] * o_text / (row_norms[:, None] ** 2)))
    d_h = ((d_sim[:, None]
            * (o_text / (row_norms[:, None] * h_norm)
               - sim[:, None] * h_cls[None, :] / h_norm ** 2))
           .sum(axis=0))

    d_z = d_o @ params.w_o.T
    grads = {"w_k": [], "w_v": [], "w_q": [], "w_o": z.T @ d_o}
    d_rows = np.zeros_like(rows)
    dh = params.head_dim
    for h in range(params.heads):
        d_zh = d_z[:, h * dh:(h + 1) * dh]
        a = weights[h]
        d_v = a[:, None] * d_zh
        d_a = (d_zh * vs[h]).sum(axis=1)
        d_s = nn.softmax_backward(a, d_a)
        d_k = np.outer(d_s, qs[h]) * scale
        d_q = (ks[h].T @ d_s) * scale
        grads["w_k"].append(rows.T @ d_k)
        grads["w_v"].append(rows.T @ d_v)
        grads["w_q"].append(np.outer(h_cls, d_q))
        d_rows += d_k @ params.w_k[h].T + d_v @ params.w_v[h].T
        d_h += params.w_q[h] @ d_q
    return d_h, d_rows, grads


def add_align_grads(store, prefix, grads):
    """Accumulate an alignment grads dict under AlignParams paths."""
    dot = f"{prefix}." if prefix else ""
    for name in ("w_k", "w_v", "w_q"):
        for h, g in enumerate(grads[name]):
            store.add(f"{dot}{name}.{h}", g)
    store.add(f"{dot}w_o", grads["w_o"])
