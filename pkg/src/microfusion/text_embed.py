"""Token embedding of transcripts and attention pooling.

A transcript is tokenized (lowercase, alphanumeric runs), each token is
mapped to a d-vector by an embedder, and the token matrix is pooled
into one vector per category with softmax attention against a learned
query vector u: q_j = h_j . u, alpha = softmax(q), pooled = sum_j
alpha_j h_j. The per-category pooled vectors stacked in label order
form the class text matrix consumed by the cross-modal stage.

Two embedders: a seeded hash embedder (stateless, position-free) and a
trainable table over a corpus vocabulary with an unknown-token row.
"""

import dataclasses
import hashlib
import re

import numpy as np

from . import kernels, nn
from .errors import ConfigError, InvalidInputError, ShapeError
from .params import init_uniform

_TOKEN_RE = re.compile(r"[a-z0-9]+")
UNK = "<unk>"


def tokenize(text):
    """Lowercased alphanumeric tokens, in order of appearance."""
    if not isinstance(text, str):
        raise InvalidInputError("text must be a string")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise InvalidInputError("text has no tokens")
    return tokens


class HashEmbedder:
    """Deterministic per-token vectors derived from a seeded hash.

    The j-th coordinate of a token's vector is a uniform [-1, 1) value
    read off blake2b(seed, token, j), so identical tokens get identical
    rows regardless of position and no state is carried.
    """

    def __init__(self, dim, seed=0):
        if dim < 1:
            raise InvalidInputError("embedding dim must be >= 1")
        self.dim = dim
        self.seed = seed

    def token_vector(self, token):
        out = np.empty(self.dim)
        for j in range(self.dim):
            raw = f"{self.seed}\x1f{token}\x1f{j}".encode("utf-8")
            digest = hashlib.blake2b(raw, digest_size=8).digest()
            out[j] = int.from_bytes(digest, "big") / 2.0 ** 64 * 2.0 - 1.0
        return out

    def embed(self, tokens):
        """(m, d) matrix of token vectors; cache is None (nothing trains)."""
        if not tokens:
            raise InvalidInputError("token list is empty")
        unique = {}
        for t in tokens:
            if t not in unique:
                unique[t] = self.token_vector(t)
        return np.vstack([unique[t] for t in tokens]), None


@dataclasses.dataclass
class TrainableEmbedder:
    """Embedding table over a fixed vocabulary; last row is the unknown token."""

    dim: int
    vocab: list
    table: np.ndarray

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.vocab)}

    @property
    def unk_index(self):
        return len(self.vocab)

    def lookup(self, tokens):
        unk = self.unk_index
        return np.array([self._index.get(t, unk) for t in tokens], dtype=np.intp)

    def embed(self, tokens):
        """(m, d) matrix plus the index cache used by the backward pass."""
        if not tokens:
            raise InvalidInputError("token list is empty")
        idx = self.lookup(tokens)
        return self.table[idx], idx

    def backward(self, idx, d_matrix, store, path):
        """Scatter row gradients back into the table gradient."""
        d_table = np.zeros_like(self.table)
        np.add.at(d_table, idx, d_matrix)
        store.add(path, d_table)


def build_vocab(texts):
    """Sorted unique tokens over a corpus of texts."""
    seen = set()
    for text in texts:
        seen.update(tokenize(text))
    return sorted(seen)


def trainable_embedder_init(rng, texts, dim):
    vocab = build_vocab(texts)
    table = init_uniform(rng, len(vocab) + 1, dim)
    return TrainableEmbedder(dim=dim, vocab=vocab, table=table)


# ---------------------------------------------------------------------------
# attention pooling

def attention_pool(h_expl, u):
    """Pool token rows into one vector; returns (pooled, alpha).

    alpha is the softmax of per-token scores h_expl @ u and is returned
    so callers can inspect which tokens carried the weight.
    """
    h = nn.as_matrix(h_expl, "token matrix")
    u = nn.as_vector(u, "query vector")
    if h.shape[1] != u.shape[0]:
        raise ShapeError(f"token dim {h.shape[1]} != query dim {u.shape[0]}")
    pooled, alpha = kernels.attention_pool(h, u)
    return pooled, alpha


def attention_pool_backward(h, u, alpha, d_pooled):
    """Gradients of a scalar loss through attention_pool.

    Returns (d_h, d_u) given the upstream gradient on the pooled vector.
    """
    d_alpha = h @ d_pooled
    d_q = nn.softmax_backward(alpha, d_alpha)
    d_u = h.T @ d_q
    d_h = alpha[:, None] * d_pooled[None, :] + d_q[:, None] * u[None, :]
    return d_h, d_u


# ---------------------------------------------------------------------------
# per-category matrix

@dataclasses.dataclass
class ClassTextMatrix:
    """Per-category pooled text vectors, rows in fixed label order."""

    labels: list
    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.labels):
            raise ShapeError(
                f"rows shape {self.rows.shape} != ({len(self.labels)}, d)")

    @property
    def c(self):
        return self.rows.shape[0]

    @property
    def d(self):
        return self.rows.shape[1]


def build_class_text_matrix(categories, transcripts, embedder, u,
                            with_cache=False):
    """Pool each category's transcript; rows follow ``categories`` order.

    ``transcripts`` maps category name to a Transcript (or raw text).
    With ``with_cache`` the per-category forward intermediates are also
    returned for the training backward pass.
    """
    missing = [c for c in categories if c not in transcripts]
    if missing:
        raise ConfigError(f"missing transcripts for categories: {missing}")
    rows = []
    caches = []
    for name in categories:
        source = transcripts[name]
        text = source if isinstance(source, str) else source.text
        tokens = tokenize(text)
        h_expl, idx = embedder.embed(tokens)
        pooled, alpha = attention_pool(h_expl, u)
        rows.append(pooled)
        caches.append((h_expl, alpha, idx))
    matrix = ClassTextMatrix(labels=list(categories), rows=np.vstack(rows))
    return (matrix, caches) if with_cache else matrix


def class_text_backward(caches, u, d_rows, store, u_path, embedder=None,
                        table_path=None):
    """Backward through build_class_text_matrix.

    Accumulates the query-vector gradient under ``u_path`` and, when a
    trainable embedder is given, table gradients under ``table_path``.
    """
    d_u_total = np.zeros_like(u)
    for (h_expl, alpha, idx), d_row in zip(caches, d_rows):
        d_h, d_u = attention_pool_backward(h_expl, u, alpha, d_row)
        d_u_total += d_u
        if embedder is not None and idx is not None:
            embedder.backward(idx, d_h, store, table_path)
    store.add(u_path, d_u_total)
