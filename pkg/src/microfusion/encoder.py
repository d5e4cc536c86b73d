"""Patch-transformer image encoder.

An image is resized to a fixed square, normalized to [-1, 1], cut into
non-overlapping square patches, and linearly projected into model space.
A learnable class token is prepended (row 0) and learnable positional
embeddings are added. The token matrix then runs through a stack of
post-norm transformer blocks (self-attention, residual, layer norm,
two-layer GELU feed-forward of width 2d, residual, layer norm). The
image representation is the final class-token row.

Backward passes are hand-derived and accumulate into a
:class:`~microfusion.params.GradStore` keyed by parameter paths, so the
optimizer can consume them without an autodiff tape.
"""

import dataclasses

import numpy as np

from . import nn
from .errors import InvalidInputError, ShapeError
from .params import GradStore, init_uniform

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# preprocessing

def resize_bilinear(plane, out_h, out_w):
    """Bilinear resample of a 2-D plane using half-pixel sample centers.

    Output pixel (i, j) samples the source at
    ((i + 0.5) * in_h / out_h - 0.5, (j + 0.5) * in_w / out_w - 0.5),
    clamped to the valid range, then interpolates the four neighbors.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ShapeError(f"expected a 2-D plane, got shape {plane.shape}")
    in_h, in_w = plane.shape
    if in_h == 0 or in_w == 0:
        raise InvalidInputError("cannot resize an empty plane")
    if out_h <= 0 or out_w <= 0:
        raise InvalidInputError("target size must be positive")
    if (in_h, in_w) == (out_h, out_w):
        return plane.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return (plane[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
            + plane[np.ix_(y0, x1)] * (1 - wy) * wx
            + plane[np.ix_(y1, x0)] * wy * (1 - wx)
            + plane[np.ix_(y1, x1)] * wy * wx)


def preprocess(image, size, channels):
    """Resize to ``size`` x ``size`` x ``channels`` and map values to [-1, 1].

    Integer inputs are treated as 0..255, floats as already scaled to
    [0, 1]. Grayscale expands to multi-channel by replication; extra
    channels collapse to one by averaging. The affine normalization is
    fixed: x -> (x - 0.5) / 0.5.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected HxW or HxWxC image, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")

    c_in = arr.shape[2]
    if c_in != channels:
        if c_in == 1:
            arr = np.repeat(arr, channels, axis=2)
        elif channels == 1:
            arr = arr.mean(axis=2, keepdims=True)
        else:
            raise ShapeError(f"cannot convert {c_in} channels to {channels}")

    planes = [resize_bilinear(arr[:, :, c], size, size) for c in range(channels)]
    resized = np.stack(planes, axis=2)
    return (resized - 0.5) / 0.5


# ---------------------------------------------------------------------------
# patch extraction

def num_patches(image_size, patch):
    if patch <= 0 or image_size % patch != 0:
        raise InvalidInputError(
            f"patch size {patch} must divide image size {image_size}")
    return (image_size // patch) ** 2


def patchify(image, patch):
    """Cut an (S, S, C) image into row-major patches of shape (n, P*P*C).

    Patches are ordered by grid row then grid column; inside a patch the
    flattening order is row, column, channel.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"expected a square SxSxC image, got shape {arr.shape}")
    size, _, chans = arr.shape
    grid = size // patch
    if patch <= 0 or grid * patch != size:
        raise InvalidInputError(f"patch size {patch} must divide image size {size}")
    blocks = arr.reshape(grid, patch, grid, patch, chans)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(grid * grid, patch * patch * chans)


def unpatchify(patches, size, channels):
    """Inverse of :func:`patchify`; reassembles the (S, S, C) image."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ShapeError(f"expected a patch matrix, got shape {patches.shape}")
    n, vec = patches.shape
    grid = int(round(np.sqrt(n)))
    if grid * grid != n:
        raise InvalidInputError(f"{n} patches do not form a square grid")
    patch = size // grid
    if grid * patch != size or patch * patch * channels != vec:
        raise ShapeError(
            f"patch matrix {patches.shape} inconsistent with size {size}, "
            f"channels {channels}")
    blocks = patches.reshape(grid, grid, patch, patch, channels)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(size, size, channels)


# ---------------------------------------------------------------------------
# activations and normalization

def gelu(x):
    """Gaussian error linear unit, tanh approximation."""
    u = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * _GELU_A * x ** 2)


def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    """Row-wise layer norm; returns (output, cache)."""
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(cache, d_out):
    """Returns (d_x, d_gamma, d_beta) for a cached layer norm."""
    xhat, inv, gamma = cache
    d_gamma = (d_out * xhat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_xhat = d_out * gamma
    m1 = d_xhat.mean(axis=1, keepdims=True)
    m2 = (d_xhat * xhat).mean(axis=1, keepdims=True)
    return inv * (d_xhat - m1 - xhat * m2), d_gamma, d_beta


# ---------------------------------------------------------------------------
# parameters

@dataclasses.dataclass
class BlockParams:
    """One post-norm transformer block."""

    attn: nn.MhaParams
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclasses.dataclass
class EncoderParams:
    image_size: int
    patch: int
    channels: int
    model_dim: int
    w_embed: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    blocks: list

    @property
    def tokens(self):
        return num_patches(self.image_size, self.patch) + 1


def encoder_init(rng, image_size, patch, channels, model_dim, heads, head_dim,
                 depth=2):
    """Seeded encoder parameters; requires heads * head_dim == model_dim."""
    if heads * head_dim != model_dim:
        raise InvalidInputError(
            f"heads ({heads}) * head_dim ({head_dim}) must equal model_dim "
            f"({model_dim})")
    if depth < 1:
        raise InvalidInputError("depth must be at least 1")
    n = num_patches(image_size, patch)
    patch_vec = patch * patch * channels
    blocks = []
    for _ in range(depth):
        blocks.append(BlockParams(
            attn=nn.mha_init(rng, heads, model_dim, head_dim),
            ln1_gamma=np.ones(model_dim),
            ln1_beta=np.zeros(model_dim),
            w_ff1=init_uniform(rng, model_dim, 2 * model_dim),
            b_ff1=np.zeros(2 * model_dim),
            w_ff2=init_uniform(rng, 2 * model_dim, model_dim),
            b_ff2=np.zeros(model_dim),
            ln2_gamma=np.ones(model_dim),
            ln2_beta=np.zeros(model_dim),
        ))
    return EncoderParams(
        image_size=image_size,
        patch=patch,
        channels=channels,
        model_dim=model_dim,
        w_embed=init_uniform(rng, patch_vec, model_dim),
        cls_token=rng.normal(0.0, 0.02, size=model_dim),
        pos_embed=rng.normal(0.0, 0.02, size=(n + 1, model_dim)),
        blocks=blocks,
    )


# ---------------------------------------------------------------------------
# forward / backward

def encoder_forward(image, params):
    """Run the full encoder; returns (tokens_out, cache).

    ``tokens_out`` has shape (n + 1, d); row 0 is the class token.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    expected = (params.image_size, params.image_size, params.channels)
    if arr.shape != expected:
        raise ShapeError(f"image shape {arr.shape} != expected {expected}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")

    patches = patchify(arr, params.patch)
    x = np.vstack([params.cls_token, patches @ params.w_embed]) + params.pos_embed
    block_caches = []
    for bp in params.blocks:
        attn_out, mha_cache = nn.mha_forward(x, x, x, bp.attn)
        x1, ln1_cache = layer_norm_forward(x + attn_out, bp.ln1_gamma, bp.ln1_beta)
        z1 = x1 @ bp.w_ff1 + bp.b_ff1
        g = gelu(z1)
        x2, ln2_cache = layer_norm_forward(x1 + g @ bp.w_ff2 + bp.b_ff2,
                                           bp.ln2_gamma, bp.ln2_beta)
        block_caches.append((mha_cache, ln1_cache, x1, z1, g, ln2_cache))
        x = x2
    return x, (patches, block_caches)


def encode_image(image, params):
    """Image representation: the final class-token row, shape (d,)."""
    tokens, _ = encoder_forward(image, params)
    return tokens[0]


def encoder_backward(params, cache, d_tokens, store, prefix=""):
    """Backpropagate ``d_tokens`` (gradient w.r.t. the final token matrix)
    through the whole encoder, accumulating parameter gradients in ``store``.
    """
    patches, block_caches = cache
    dot = f"{prefix}." if prefix else ""
    d_x = np.asarray(d_tokens, dtype=np.float64)
    for i in reversed(range(len(params.blocks))):
        bp = params.blocks[i]
        mha_cache, ln1_cache, x1, z1, g, ln2_cache = block_caches[i]
        bdot = f"{dot}blocks.{i}."

        d_pre2, d_g2, d_b2 = layer_norm_backward(ln2_cache, d_x)
        store.add(f"{bdot}ln2_gamma", d_g2)
        store.add(f"{bdot}ln2_beta", d_b2)

        # pre2 = x1 + gelu(x1 @ w_ff1 + b_ff1) @ w_ff2 + b_ff2
        store.add(f"{bdot}w_ff2", g.T @ d_pre2)
        store.add(f"{bdot}b_ff2", d_pre2.sum(axis=0))
        d_z1 = (d_pre2 @ bp.w_ff2.T) * gelu_grad(z1)
        store.add(f"{bdot}w_ff1", x1.T @ d_z1)
        store.add(f"{bdot}b_ff1", d_z1.sum(axis=0))
        d_x1 = d_pre2 + d_z1 @ bp.w_ff1.T

        d_pre1, d_g1, d_b1 = layer_norm_backward(ln1_cache, d_x1)
        store.add(f"{bdot}ln1_gamma", d_g1)
        store.add(f"{bdot}ln1_beta", d_b1)

        # pre1 = x + attention(x, x, x); fold all three input paths back
        d_q, d_k, d_v, mha_grads = nn.mha_backward(mha_cache, d_pre1)
        nn.add_mha_grads(store, f"{bdot}attn", mha_grads)
        d_x = d_pre1 + d_q + d_k + d_v

    # x0 = vstack([cls, patches @ w_embed]) + pos_embed
    store.add(f"{dot}pos_embed", d_x)
    store.add(f"{dot}cls_token", d_x[0])
    store.add(f"{dot}w_embed", patches.T @ d_x[1:])
