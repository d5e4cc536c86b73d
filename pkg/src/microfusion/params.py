"""Parameter containers: seeded initialization, tree walking, packing.

Trainable parameters live in plain dataclasses holding float64 numpy
arrays (lists of arrays are allowed for per-head projections).
``iter_arrays`` walks such a tree in a deterministic order and yields
``(path, array)`` pairs; gradients are accumulated in a :class:`GradStore`
keyed by the same paths, which is what the optimizer and the checkpoint
container consume.
"""

import dataclasses

import numpy as np

from .errors import NumericalError, ShapeError


def make_rng(seed, *tags):
    """Deterministic generator for ``seed`` plus integer namespace tags."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


def init_uniform(rng, rows, cols=None):
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    fan_in is ``rows`` for matrices (inputs hit the rows) and the vector
    length for 1-D parameters.
    """
    fan_in = rows
    bound = 1.0 / np.sqrt(fan_in)
    shape = (rows,) if cols is None else (rows, cols)
    return rng.uniform(-bound, bound, size=shape)


def iter_arrays(obj, prefix=""):
    """Yield ``(path, ndarray)`` for every array in a parameter tree.

    Walks dataclass fields in declaration order and list elements by
    index, so the order is stable across runs.
    """
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for field in dataclasses.fields(obj):
            path = f"{prefix}.{field.name}" if prefix else field.name
            yield from iter_arrays(getattr(obj, field.name), path)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_arrays(item, f"{prefix}.{i}" if prefix else str(i))
    # scalars / strings / None carry no parameters


def set_array(obj, path, value):
    """Write ``value`` into the tree position addressed by ``path``."""
    parts = path.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
    last = parts[-1]
    if isinstance(obj, (list, tuple)):
        obj[int(last)] = value
    else:
        setattr(obj, last, value)


class GradStore:
    """Accumulates gradients keyed by parameter path."""

    def __init__(self):
        self._grads = {}

    def add(self, path, grad):
        grad = np.asarray(grad, dtype=np.float64)
        if path in self._grads:
            if self._grads[path].shape != grad.shape:
                raise ShapeError(
                    f"gradient shape {grad.shape} != {self._grads[path].shape} at {path!r}")
            self._grads[path] += grad
        else:
            self._grads[path] = grad.copy()

    def get(self, path):
        return self._grads[path]

    def items(self):
        return self._grads.items()

    def __contains__(self, path):
        return path in self._grads

    def scale(self, factor):
        for g in self._grads.values():
            g *= factor

    def check_finite(self):
        for path, g in self._grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter block {path!r}")


def pack(tree):
    """Flatten every array in a parameter tree into one float64 vector."""
    chunks = [arr.ravel() for _, arr in iter_arrays(tree)]
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)


def unpack_into(tree, vector):
    """Write a flat vector produced by :func:`pack` back into the tree."""
    offset = 0
    for path, arr in iter_arrays(tree):
        n = arr.size
        set_array(tree, path, np.asarray(vector[offset:offset + n],
                                         dtype=np.float64).reshape(arr.shape))
        offset += n
    if offset != len(vector):
        raise ShapeError(f"vector length {len(vector)} != tree size {offset}")


def pack_grads(tree, grads):
    """Flatten a GradStore in the same order as :func:`pack` on ``tree``.

    Parameters without a recorded gradient contribute zeros.
    """
    chunks = []
    for path, arr in iter_arrays(tree):
        chunks.append(grads.get(path).ravel() if path in grads else np.zeros(arr.size))
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)
