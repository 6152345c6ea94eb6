"""Kernel backend selection.

The compiled extension is used when it was built and ``SIDESUM_PURE_PYTHON`` is
unset; otherwise the pure-Python implementations are used.  ``BACKEND`` names
the active one.
"""

import os

import numpy as np

from . import _kernels_py as py

try:
    if os.environ.get("SIDESUM_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def _ids(seq) -> np.ndarray:
    return np.ascontiguousarray(seq, dtype=np.int64)


def lcs_length(a, b) -> int:
    if _compiled is None:
        return py.lcs_length(a, b)
    return int(_compiled.lcs_length(_ids(a), _ids(b)))


def ngram_overlap(a, b, n: int) -> tuple[int, int, int]:
    """Clipped n-gram overlap and the n-gram counts of ``a`` and ``b`` (integer sequences)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if _compiled is None or n > 2:
        return py.ngram_overlap(a, b, n)
    ia, ib = _ids(a), _ids(b)
    # the compiled kernel packs bigrams into one 64-bit key, so ids must fit in 31 bits
    if any(x.size and (x.min() < 0 or x.max() >= 2 ** 31) for x in (ia, ib)):
        return py.ngram_overlap(a, b, n)
    overlap, na, nb = _compiled.ngram_overlap(ia, ib, n)
    return int(overlap), int(na), int(nb)
