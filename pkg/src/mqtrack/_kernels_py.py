"""Pure-Python kernels; same contracts as the compiled ``_kernels`` module."""
from __future__ import annotations

import math

import numpy as np


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Min-cost perfect matching on a square matrix.

    Returns ``rowcol`` with ``rowcol[i]`` the column of row ``i``.  Among
    optimal matchings the one with lexicographically smallest column
    sequence is returned.
    """
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    a = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    rowcol = [0] * n
    colrow = [0] * n
    for j in range(1, n + 1):
        rowcol[p[j] - 1] = j - 1
        colrow[j - 1] = p[j] - 1

    scale = max(1.0, max(abs(x) for r in a for x in r))
    tol = 1e-9 * scale
    tight = [[a[i][j] - u[i + 1] - v[j + 1] <= tol for j in range(n)] for i in range(n)]

    for i in range(n):
        target = rowcol[i]
        for j in range(target):
            if not tight[i][j]:
                continue
            r = colrow[j]
            if r < i:
                continue
            # alternating path from r to ``target`` through unfixed rows
            prev = {}
            seen = [False] * n
            seen[j] = True
            queue = [r]
            head = 0
            found = False
            while head < len(queue) and not found:
                rr = queue[head]
                head += 1
                trow = tight[rr]
                for c in range(n):
                    if seen[c] or not trow[c]:
                        continue
                    seen[c] = True
                    prev[c] = rr
                    if c == target:
                        found = True
                        break
                    owner = colrow[c]
                    if owner > i:
                        queue.append(owner)
            if not found:
                continue
            c = target
            while True:
                rr = prev[c]
                old = rowcol[rr]
                rowcol[rr] = c
                colrow[c] = rr
                if rr == r:
                    break
                c = old
            rowcol[i] = j
            colrow[j] = i
            break
    return np.asarray(rowcol, dtype=np.int64)


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) corner-format boxes."""
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        ax1, ay1, ax2, ay2 = a[i]
        area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
        for j in range(m):
            bx1, by1, bx2, by2 = b[j]
            iw = min(ax2, bx2) - max(ax1, bx1)
            ih = min(ay2, by2) - max(ay1, by1)
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0) - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out
