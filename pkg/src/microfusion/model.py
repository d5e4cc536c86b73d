"""The full cross-modal classifier: parameter tree, loss, checkpoints.

A model is one dataclass tree (encoder, text pooling query, alignment
projections, prediction lift, fusion stages, concat head) so the
optimizer and the checkpoint writer can walk it with
:func:`microfusion.params.iter_arrays` and address every block by a
dotted path.

Ablation modes cut one pathway each:

``no-llm``
    drops the knowledge-text branch: no class text matrix, no text
    alignment, no alignment loss; fusion runs its second stage only.
``no-lmm``
    drops the few-shot prediction branch: fusion runs its first stage
    only and the lift is untouched.
``no-mha``
    keeps all three embeddings but classifies their concatenation with
    a single linear map instead of the two attention stages.
"""

import dataclasses
import json
import struct

import numpy as np

from . import align as align_mod
from . import fusion as fusion_mod
from . import nn
from .encoder import EncoderParams, encoder_backward, encoder_forward, preprocess
from .encoder import encoder_init
from .errors import ConfigError, ParseError, ShapeError
from .fewshot import PredictionLift, lift_init
from .params import GradStore, init_uniform, iter_arrays, make_rng, set_array
from .text_embed import (
    HashEmbedder,
    TrainableEmbedder,
    build_class_text_matrix,
    class_text_backward,
    trainable_embedder_init,
)

ABLATIONS = ("full", "no-llm", "no-lmm", "no-mha")


@dataclasses.dataclass
class ModelConfig:
    """Architecture knobs; everything the parameter shapes depend on."""

    image_size: int = 32
    patch: int = 8
    channels: int = 1
    d: int = 64
    heads: int = 4
    d_h: int = 16
    depth: int = 2
    c: int = 10
    ablation: str = "full"
    alignment_weight: float = 0.5
    tau: float = 1.0
    token_set: bool = False
    embedder: str = "hash"

    def validate(self):
        if self.heads * self.d_h != self.d:
            raise ConfigError(
                f"heads ({self.heads}) * d_h ({self.d_h}) != d ({self.d})")
        if self.image_size % self.patch != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch "
                f"{self.patch}")
        if self.c < 2:
            raise ConfigError(f"c={self.c}; need at least 2 categories")
        if self.ablation not in ABLATIONS:
            raise ConfigError(
                f"ablation {self.ablation!r} not in {ABLATIONS}")
        if self.alignment_weight < 0:
            raise ConfigError("alignment weight must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.embedder not in ("hash", "trainable"):
            raise ConfigError(f"embedder {self.embedder!r} unknown")
        return self

    @property
    def uses_text(self):
        return self.ablation != "no-llm"

    @property
    def uses_icl(self):
        return self.ablation != "no-lmm"


@dataclasses.dataclass
class ModelParams:
    """Every trainable array, in checkpoint order."""

    encoder: EncoderParams
    pool_u: np.ndarray
    align: align_mod.AlignParams
    lift: PredictionLift
    fusion: fusion_mod.FusionParams
    concat: fusion_mod.ConcatHeadParams
    embedder: object  # HashEmbedder (no arrays) or TrainableEmbedder


def model_init(config, seed=0, transcripts=None, vocab=None):
    """Seeded parameter tree for a validated config.

    A trainable embedder takes its vocabulary from ``transcripts`` (all
    category texts) or, when restoring a checkpoint, from ``vocab``.
    """
    config.validate()
    rng = make_rng(seed, 101)
    encoder = encoder_init(rng, config.image_size, config.patch,
                           config.channels, config.d, config.heads,
                           config.d_h, depth=config.depth)
    pool_u = init_uniform(rng, config.d)
    align = align_mod.align_init(rng, config.heads, config.d, config.d_h)
    lift = lift_init(rng, config.c, config.d)
    fusion = fusion_mod.fusion_init(rng, config.heads, config.d, config.d_h,
                                    config.c)
    concat = fusion_mod.concat_head_init(rng, config.d, config.c)
    if config.embedder == "hash":
        # Fixed featurizer seed: the hash embedder carries no trainable
        # state, and a checkpoint restore must reproduce it exactly.
        embedder = HashEmbedder(config.d, seed=0)
    elif vocab is not None:
        table = init_uniform(rng, len(vocab) + 1, config.d)
        embedder = TrainableEmbedder(dim=config.d, vocab=list(vocab),
                                     table=table)
    elif transcripts is not None:
        texts = [t if isinstance(t, str) else t.text
                 for t in transcripts.values()]
        embedder = trainable_embedder_init(rng, texts, config.d)
    else:
        raise ConfigError(
            "trainable embedder needs transcripts or a vocabulary")
    return ModelParams(encoder=encoder, pool_u=pool_u, align=align,
                       lift=lift, fusion=fusion, concat=concat,
                       embedder=embedder)


def text_matrix(params, config, categories, transcripts, with_cache=False):
    """Class text matrix under the current pooling query.

    Rebuilt every optimization step because the pooled rows depend on
    trainable parameters (the pooling query, and the table when the
    embedder is trainable).
    """
    if not config.uses_text:
        raise ConfigError("text matrix requested in no-llm mode")
    return build_class_text_matrix(categories, transcripts, params.embedder,
                                   params.pool_u, with_cache=with_cache)


def icl_embedding(params, pred_label):
    """Lift row for a predicted category; the null row when absent."""
    if pred_label is None:
        return params.lift.null_row
    return params.lift.w_p[int(pred_label)]


# ---------------------------------------------------------------------------
# forward

@dataclasses.dataclass
class SampleForward:
    probs: np.ndarray
    h_cls: np.ndarray
    h_star_text: np.ndarray
    h_icl: np.ndarray
    h_cross: np.ndarray
    alignment: object  # AlignmentResult or None


def forward_sample(params, config, image, text, pred_label):
    """Category probabilities for one image; no caches kept."""
    x = preprocess(image, config.image_size, config.channels)
    tokens, _ = encoder_forward(x, params.encoder)
    h_cls = tokens[0]
    d = config.d

    alignment = None
    h_star = np.zeros(d)
    if config.uses_text:
        alignment = align_mod.align(h_cls, text, params.align)
        h_star = alignment.h_star_text
    h_icl = icl_embedding(params, pred_label) if config.uses_icl else np.zeros(d)

    mode = config.ablation
    if mode == "no-mha":
        probs = fusion_mod.fuse_concat(h_cls, h_star, h_icl, params.concat)
        h_cross = np.zeros(d)
    elif mode == "no-llm":
        kv = h_icl[None, :]
        h_rows, _ = nn.mha_forward(h_cls[None, :], kv, kv,
                                   params.fusion.stage2)
        h_cross = h_rows[0]
        probs = fusion_mod.classify(h_cross, params.fusion.w_out)
    elif mode == "no-lmm":
        kv = text.rows if config.token_set else h_star[None, :]
        h_rows, _ = nn.mha_forward(h_cls[None, :], kv, kv,
                                   params.fusion.stage1)
        h_cross = h_rows[0]
        probs = fusion_mod.classify(h_cross, params.fusion.w_out)
    else:
        rows = text.rows if config.token_set else None
        h_cross = fusion_mod.fuse(h_cls, h_star, h_icl, params.fusion,
                                  text_rows=rows)
        probs = fusion_mod.classify(h_cross, params.fusion.w_out)
    return SampleForward(probs=probs, h_cls=h_cls, h_star_text=h_star,
                         h_icl=h_icl, h_cross=h_cross, alignment=alignment)


# ---------------------------------------------------------------------------
# loss and gradients

@dataclasses.dataclass
class SampleLoss:
    total: float
    classification: float
    alignment: float
    probs: np.ndarray
    d_text_rows: np.ndarray  # gradient on the class text matrix, or None


def _lift_grad(store, params, pred_label, d_h_icl):
    if pred_label is None:
        store.add("lift.null_row", d_h_icl)
    else:
        d_w = np.zeros_like(params.lift.w_p)
        d_w[int(pred_label)] = d_h_icl
        store.add("lift.w_p", d_w)


def sample_loss(params, config, image, label, pred_label, text, store=None):
    """Loss for one labeled image; gradients accumulate into ``store``.

    ``text`` is the current ClassTextMatrix (ignored in no-llm mode).
    The returned ``d_text_rows`` must be pushed through
    :func:`microfusion.text_embed.class_text_backward` by the caller,
    once per batch, because the matrix is shared across samples.
    """
    x = preprocess(image, config.image_size, config.channels)
    tokens, enc_cache = encoder_forward(x, params.encoder)
    h_cls = tokens[0]
    d = config.d
    want_grads = store is not None

    d_rows = None
    h_star = np.zeros(d)
    i_star = None
    if config.uses_text:
        result = align_mod.align(h_cls, text, params.align)
        h_star = result.h_star_text
        i_star = result.i_star
        d_rows = np.zeros_like(text.rows)
    h_icl = icl_embedding(params, pred_label) if config.uses_icl else np.zeros(d)

    d_h_cls = np.zeros(d)
    mode = config.ablation
    if mode == "no-mha":
        joined = np.concatenate([h_cls, h_star, h_icl])
        logits = nn.linear(joined, params.concat.w_cat)
        cls_loss, probs, d_logits = nn.softmax_cross_entropy(logits, label)
        if want_grads:
            store.add("concat.w_cat", np.outer(joined, d_logits))
            d_joined = params.concat.w_cat @ d_logits
            d_h_cls += d_joined[:d]
            d_rows[i_star] += d_joined[d:2 * d]
            _lift_grad(store, params, pred_label, d_joined[2 * d:])
    elif mode == "no-llm":
        kv = h_icl[None, :]
        h_rows, cache2 = nn.mha_forward(h_cls[None, :], kv, kv,
                                        params.fusion.stage2)
        cls_loss, probs, cls_cache = fusion_mod.classify_loss(
            h_rows[0], params.fusion.w_out, label)
        if want_grads:
            d_h_cross, d_w_out = fusion_mod.classify_backward(cls_cache)
            store.add("fusion.w_out", d_w_out)
            d_q, d_k, d_v, grads2 = nn.mha_backward(cache2, d_h_cross[None, :])
            nn.add_mha_grads(store, "fusion.stage2", grads2)
            d_h_cls += d_q[0]
            _lift_grad(store, params, pred_label, (d_k + d_v)[0])
    elif mode == "no-lmm":
        kv = text.rows if config.token_set else h_star[None, :]
        h_rows, cache1 = nn.mha_forward(h_cls[None, :], kv, kv,
                                        params.fusion.stage1)
        cls_loss, probs, cls_cache = fusion_mod.classify_loss(
            h_rows[0], params.fusion.w_out, label)
        if want_grads:
            d_h_cross, d_w_out = fusion_mod.classify_backward(cls_cache)
            store.add("fusion.w_out", d_w_out)
            d_q, d_k, d_v, grads1 = nn.mha_backward(cache1, d_h_cross[None, :])
            nn.add_mha_grads(store, "fusion.stage1", grads1)
            d_h_cls += d_q[0]
            d_kv = d_k + d_v
            if config.token_set:
                d_rows += d_kv
            else:
                d_rows[i_star] += d_kv[0]
    else:
        rows = text.rows if config.token_set else None
        h_cross, fuse_cache = fusion_mod.fuse_forward(
            h_cls, h_star, h_icl, params.fusion, text_rows=rows)
        cls_loss, probs, cls_cache = fusion_mod.classify_loss(
            h_cross, params.fusion.w_out, label)
        if want_grads:
            d_h_cross, d_w_out = fusion_mod.classify_backward(cls_cache)
            store.add("fusion.w_out", d_w_out)
            d_q, d_kv, d_h_icl, _ = fusion_mod.fuse_backward(
                fuse_cache, d_h_cross, store, prefix="fusion")
            d_h_cls += d_q
            if config.token_set:
                d_rows += d_kv
            else:
                d_rows[i_star] += d_kv
            _lift_grad(store, params, pred_label, d_h_icl)

    al_loss = 0.0
    weight = config.alignment_weight
    if config.uses_text and weight > 0.0:
        al_loss, _, al_cache = align_mod.alignment_loss(
            h_cls, text, params.align, label, tau=config.tau)
        if want_grads:
            d_h, d_r, grads = align_mod.alignment_loss_backward(al_cache)
            d_h_cls += weight * d_h
            d_rows += weight * d_r
            scaled = {
                "w_k": [weight * g for g in grads["w_k"]],
                "w_v": [weight * g for g in grads["w_v"]],
                "w_q": [weight * g for g in grads["w_q"]],
                "w_o": weight * grads["w_o"],
            }
            align_mod.add_align_grads(store, "align", scaled)

    if want_grads:
        d_tokens = np.zeros_like(tokens)
        d_tokens[0] = d_h_cls
        encoder_backward(params.encoder, enc_cache, d_tokens, store,
                         prefix="encoder")

    total = cls_loss + weight * al_loss
    return SampleLoss(total=total, classification=cls_loss, alignment=al_loss,
                      probs=probs, d_text_rows=d_rows)


def batch_loss(params, config, batch, text=None, caches=None, grads=False):
    """Mean loss over (image, label, pred_label) triples.

    ``text`` is the current ClassTextMatrix and ``caches`` its forward
    caches (required with ``grads`` unless in no-llm mode). With
    ``grads`` a GradStore of mean gradients is returned, including the
    text-pipeline contribution. Returns (loss, store-or-None).
    """
    if not batch:
        raise ConfigError("empty batch")
    if config.uses_text and text is None:
        raise ConfigError("text matrix required outside no-llm mode")
    if grads and config.uses_text and caches is None:
        raise ConfigError("text caches required for gradients")
    store = GradStore() if grads else None
    total = 0.0
    d_rows = np.zeros_like(text.rows) if config.uses_text and grads else None
    for image, label, pred_label in batch:
        out = sample_loss(params, config, image, label, pred_label, text,
                          store=store)
        total += out.total
        if d_rows is not None:
            d_rows += out.d_text_rows
    n = len(batch)
    if grads:
        store.scale(1.0 / n)
        if d_rows is not None:
            class_text_backward(
                caches, params.pool_u, d_rows / n, store, "pool_u",
                embedder=params.embedder if config.embedder == "trainable"
                else None,
                table_path="embedder.table")
    return total / n, store


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MFCP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, header_extra=None):
    """Versioned binary container: magic, JSON header, raw float64 blocks.

    The header carries arbitrary JSON (config echo, vocabulary); blocks
    are written row-major in tree order, so a load is bitwise exact.
    """
    header = dict(header_extra or {})
    if isinstance(params.embedder, TrainableEmbedder):
        header["vocab"] = list(params.embedder.vocab)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        blocks = list(iter_arrays(params))
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns (header dict, {path: array}) without rebuilding a model."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic {magic!r}", line=1)
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {version} unsupported")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        blocks = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0]
                          for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(size * 8), dtype="<f8").copy()
            blocks[name] = data.reshape(shape)
    return header, blocks


def restore_params(config, blocks, vocab=None):
    """Fresh tree with every array replaced by its checkpoint block."""
    params = model_init(config, seed=0,
                        vocab=vocab if config.embedder == "trainable" else None)
    expected = {name for name, _ in iter_arrays(params)}
    stored = set(blocks)
    if expected != stored:
        missing = sorted(expected - stored)
        extra = sorted(stored - expected)
        raise ConfigError(
            f"checkpoint does not match the config: missing blocks "
            f"{missing}, unexpected blocks {extra}")
    for name, arr in iter_arrays(params):
        block = blocks[name]
        if block.shape != arr.shape:
            raise ShapeError(
                f"checkpoint block {name!r} has shape {block.shape}, "
                f"expected {arr.shape}")
        set_array(params, name, block.astype(np.float64, copy=True))
    return params
