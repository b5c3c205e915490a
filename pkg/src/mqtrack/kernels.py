"""Kernel dispatch: the compiled extension when importable, else pure Python.

Set ``MQTRACK_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from mqtrack import _kernels_py

if os.environ.get("MQTRACK_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from mqtrack import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"
IMPLEMENTATIONS = {"python": _kernels_py}
if BACKEND == "cython":
    IMPLEMENTATIONS["cython"] = _impl


def linear_assignment(cost, backend: str | None = None) -> list[tuple[int, int]]:
    """Globally minimal injective row->column assignment.

    Rectangular inputs are zero-padded to square; the result covers
    ``min(n_rows, n_cols)`` pairs sorted by row.  Ties resolve to the
    lexicographically smallest pair list.
    """
    impl = _impl if backend is None else IMPLEMENTATIONS[backend]
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n_r, n_c = c.shape
    if n_r == 0 or n_c == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n = max(n_r, n_c)
    padded = np.zeros((n, n))
    padded[:n_r, :n_c] = c
    rowcol = impl.solve_assignment(np.ascontiguousarray(padded))
    return [(i, int(rowcol[i])) for i in range(n_r) if rowcol[i] < n_c]


def iou_matrix(a, b, backend: str | None = None) -> np.ndarray:
    """Pairwise IoU of corner-format (x1, y1, x2, y2) boxes."""
    impl = _impl if backend is None else IMPLEMENTATIONS[backend]
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    return impl.iou_xyxy(a, b)
