"""Hot numerical kernels with a compiled core and a numpy fallback.

The Cython extension ``_ckernels`` is preferred when it was built; the
pure-numpy twin ``_pykernels`` implements the identical contract and is
used otherwise. Set ``MICROFUSION_KERNELS=python`` (or ``cython``) to
force a backend; forcing ``cython`` when the extension is absent raises,
which is the right failure mode for benchmarks.

Both backends expose:

- ``softmax_vec(x)``           stable softmax of a 1-D float64 vector
- ``softmax_rows(m)``          row-wise softmax of a 2-D array
- ``sdpa(q, k, v)``            fused scaled dot-product attention
- ``attention_pool(h, u)``     softmax-weighted pooling with weights

Arrays handed to the compiled backend must be C-contiguous float64;
:func:`ascontig` converts. Validation lives in the callers.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_FORCED = os.environ.get("MICROFUSION_KERNELS", "").strip().lower()
if _FORCED == "python":
    _impl = _pykernels
elif _FORCED == "cython":
    if _ckernels is None:
        raise ImportError(
            "MICROFUSION_KERNELS=cython but the compiled extension is not built")
    _impl = _ckernels
elif _FORCED:
    raise ImportError(f"unknown MICROFUSION_KERNELS value {_FORCED!r}")
else:
    _impl = _ckernels if _ckernels is not None else _pykernels

BACKEND = _impl.BACKEND


def available_backends():
    """Names of the importable backend modules."""
    names = ["python"]
    if _ckernels is not None:
        names.append("cython")
    return names


def get_backend(name):
    """Backend module by name, for tests and benchmarks."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernel extension is not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def ascontig(a):
    """C-contiguous float64 view/copy of ``a``."""
    return np.ascontiguousarray(a, dtype=np.float64)


def softmax_vec(x):
    return _impl.softmax_vec(ascontig(x))


def softmax_rows(m):
    return _impl.softmax_rows(ascontig(m))


def sdpa(q, k, v):
    return _impl.sdpa(ascontig(q), ascontig(k), ascontig(v))


def attention_pool(h, u):
    return _impl.attention_pool(ascontig(h), ascontig(u))
