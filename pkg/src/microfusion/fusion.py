"""Two-stage fusion head and output classifier.

Stage 1 attends the image vector over the selected text embedding,
stage 2 attends that result over the few-shot prediction embedding,
and a linear map plus softmax turns the fused vector into category
probabilities. Both stages are standard multi-head attention; with a
single-row key/value the softmax over one key is identically [1], so in
the faithful configuration the attention weights are constant and the
value/output projections carry all the learning. A token-set mode
widens stage 1's key/value to the full class text matrix, which makes
the stage-1 weights category-dependent.

The concatenation head (inputs joined and linearly mapped) is the
drop-in replacement used by the attention-free ablation.
"""

import dataclasses

import numpy as np

from . import nn
from .errors import ShapeError
from .params import init_uniform


@dataclasses.dataclass
class FusionParams:
    stage1: nn.MhaParams
    stage2: nn.MhaParams
    w_out: np.ndarray

    @property
    def model_dim(self):
        return self.stage1.model_dim

    def validate(self):
        self.stage1.validate()
        self.stage2.validate()
        if self.stage2.model_dim != self.stage1.model_dim:
            raise ShapeError("fusion stages disagree on model dim")
        if self.w_out.ndim != 2 or self.w_out.shape[0] != self.stage1.model_dim:
            raise ShapeError(
                f"w_out shape {self.w_out.shape} != ({self.stage1.model_dim}, c)")
        return self


def fusion_init(rng, heads, model_dim, head_dim, num_classes):
    return FusionParams(
        stage1=nn.mha_init(rng, heads, model_dim, head_dim),
        stage2=nn.mha_init(rng, heads, model_dim, head_dim),
        w_out=init_uniform(rng, model_dim, num_classes),
    ).validate()


@dataclasses.dataclass
class ConcatHeadParams:
    w_cat: np.ndarray

    def validate(self, model_dim=None):
        if self.w_cat.ndim != 2:
            raise ShapeError(f"w_cat must be 2-D, got shape {self.w_cat.shape}")
        if model_dim is not None and self.w_cat.shape[0] != 3 * model_dim:
            raise ShapeError(
                f"w_cat row count {self.w_cat.shape[0]} != 3 * {model_dim}")
        return self


def concat_head_init(rng, model_dim, num_classes):
    return ConcatHeadParams(w_cat=init_uniform(rng, 3 * model_dim, num_classes))


# ---------------------------------------------------------------------------
# forward

def fuse_forward(h_cls, h_star_text, h_icl, params, text_rows=None):
    """Two-stage fusion; returns (h_cross, cache).

    ``text_rows`` switches stage 1 to token-set mode: keys and values
    become the full class text matrix instead of the single selected row.
    """
    params.validate()
    d = params.model_dim
    for name, v in (("h_cls", h_cls), ("h_star_text", h_star_text),
                    ("h_icl", h_icl)):
        v = np.asarray(v)
        if v.shape != (d,):
            raise ShapeError(f"{name} shape {v.shape} != ({d},)")
    q1 = np.asarray(h_cls, dtype=np.float64)[None, :]
    if text_rows is None:
        kv1 = np.asarray(h_star_text, dtype=np.float64)[None, :]
    else:
        kv1 = nn.as_matrix(text_rows, "class text matrix")
        if kv1.shape[1] != d:
            raise ShapeError(f"text rows dim {kv1.shape[1]} != {d}")
    h_img_text, cache1 = nn.mha_forward(q1, kv1, kv1, params.stage1)
    kv2 = np.asarray(h_icl, dtype=np.float64)[None, :]
    h_cross, cache2 = nn.mha_forward(h_img_text, kv2, kv2, params.stage2)
    return h_cross[0], (cache1, cache2, text_rows is not None)


def fuse(h_cls, h_star_text, h_icl, params, text_rows=None):
    h_cross, _ = fuse_forward(h_cls, h_star_text, h_icl, params, text_rows)
    return h_cross


def stage_attention_weights(cache):
    """Per-stage, per-head attention weight rows (for structural checks)."""
    cache1, cache2, _ = cache
    out = []
    for stage_cache in (cache1, cache2):
        head_caches = stage_cache[4]
        out.append([hc[3].copy() for hc in head_caches])
    return out


def classify(h_cross, w_out):
    """Category probabilities softmax(h_cross @ w_out)."""
    logits = nn.linear(np.asarray(h_cross, dtype=np.float64), w_out)
    return nn.softmax(logits)


def fuse_concat(h_cls, h_star_text, h_icl, params):
    """Attention-free head: softmax over the concatenation's linear map."""
    params.validate()
    joined = np.concatenate([np.asarray(h_cls, dtype=np.float64),
                             np.asarray(h_star_text, dtype=np.float64),
                             np.asarray(h_icl, dtype=np.float64)])
    if joined.shape[0] != params.w_cat.shape[0]:
        raise ShapeError(
            f"concatenated length {joined.shape[0]} != w_cat rows "
            f"{params.w_cat.shape[0]}")
    return nn.softmax(joined @ params.w_cat)


def classify_loss(h_cross, w_out, label):
    """Cross-entropy of classify() against a label; returns (loss, probs, cache)."""
    h = np.asarray(h_cross, dtype=np.float64)
    logits = nn.linear(h, w_out)
    loss, probs, d_logits = nn.softmax_cross_entropy(logits, label)
    return loss, probs, (h, w_out, d_logits)


def classify_backward(cache):
    """Returns (d_h_cross, d_w_out) for a cached classify_loss."""
    h, w_out, d_logits = cache
    return w_out @ d_logits, np.outer(h, d_logits)


# ---------------------------------------------------------------------------
# backward

def fuse_backward(cache, d_h_cross, store=None, prefix=""):
    """Backward through both stages.

    Returns (d_h_cls, d_kv1, d_h_icl, grads) where d_kv1 is the gradient
    on the stage-1 key/value input: a single selected-text vector in
    faithful mode, the full text matrix in token-set mode. When a store
    is given, parameter gradients are also accumulated under
    ``{prefix}.stage1`` / ``{prefix}.stage2``.
    """
    cache1, cache2, token_set = cache
    d_q2, d_k2, d_v2, grads2 = nn.mha_backward(cache2, d_h_cross[None, :])
    d_q1, d_k1, d_v1, grads1 = nn.mha_backward(cache1, d_q2)
    d_h_cls = d_q1[0]
    d_kv1 = d_k1 + d_v1 if token_set else (d_k1 + d_v1)[0]
    d_h_icl = (d_k2 + d_v2)[0]
    grads = {"stage1": grads1, "stage2": grads2}
    if store is not None:
        dot = f"{prefix}." if prefix else ""
        nn.add_mha_grads(store, f"{dot}stage1", grads1)
        nn.add_mha_grads(store, f"{dot}stage2", grads2)
    return d_h_cls, d_kv1, d_h_icl, grads
