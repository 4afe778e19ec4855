"""Hot loops with a compiled backend and a numpy fallback.

The backend is picked at import time. Set ``MPL_SSL_PURE_PYTHON=1`` to force
the fallback. Both backends accumulate in the same order, so their outputs
are bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

BACKEND = "python"
_compiled = None

if os.environ.get("MPL_SSL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _compiled = None


def py_nearest_center(x: np.ndarray, centers: np.ndarray, chunk: int = 4096):
    """Index of the closest center per row; ties go to the lowest index."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for lo in range(0, n, chunk):
        xb = x[lo:lo + chunk]
        acc = np.zeros((xb.shape[0], centers.shape[0]))
        # accumulate dimension by dimension to match the compiled loop order
        for m in range(x.shape[1]):
            diff = xb[:, m:m + 1] - centers[None, :, m]
            acc += diff * diff
        idx = np.argmin(acc, axis=1)  # first minimum wins
        labels[lo:lo + chunk] = idx
        dists[lo:lo + chunk] = acc[np.arange(acc.shape[0]), idx]
    return labels, dists


def py_overlap_add(frames: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    out = np.zeros(out_len)
    width = frames.shape[1]
    for i in range(frames.shape[0]):
        out[i * hop:i * hop + width] += frames[i]
    return out


def nearest_center(x: np.ndarray, centers: np.ndarray):
    if _compiled is None:
        return py_nearest_center(x, centers)
    return _compiled.nearest_center(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(centers, dtype=np.float64),
    )


def overlap_add(frames: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    if _compiled is None:
        return py_overlap_add(frames, hop, out_len)
    return _compiled.overlap_add(np.ascontiguousarray(frames, dtype=np.float64), int(hop), int(out_len))

