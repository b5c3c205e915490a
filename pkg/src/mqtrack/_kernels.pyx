# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels.  Mirrors ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs

cnp.import_array()


def solve_assignment(double[:, ::1] cost):
    cdef Py_ssize_t n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef Py_ssize_t[::1] p = np.zeros(n + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(n + 1, dtype=np.intp)
    cdef char[::1] used = np.zeros(n + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - ui0 - v[j]
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

    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] rowcol = out
    cdef Py_ssize_t[::1] colrow = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        rowcol[p[j] - 1] = j - 1
        colrow[j - 1] = p[j] - 1

    cdef double scale = 1.0
    for i in range(n):
        for j in range(n):
            if fabs(cost[i, j]) > scale:
                scale = fabs(cost[i, j])
    cdef double tol = 1e-9 * scale
    cdef char[:, ::1] tight = np.empty((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(n):
            tight[i, j] = (cost[i, j] - u[i + 1] - v[j + 1]) <= tol

    cdef Py_ssize_t[::1] prev = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] queue = np.empty(n, dtype=np.intp)
    cdef char[::1] seen = np.empty(n, dtype=np.int8)
    cdef Py_ssize_t target, r, rr, c, old, head, tail, owner
    cdef bint found
    for i in range(n):
        target = rowcol[i]
        for j in range(target):
            if not tight[i, j]:
                continue
            r = colrow[j]
            if r < i:
                continue
            for c in range(n):
                seen[c] = 0
            seen[j] = 1
            queue[0] = r
            head = 0
            tail = 1
            found = False
            while head < tail and not found:
                rr = queue[head]
                head += 1
                for c in range(n):
                    if seen[c] or not tight[rr, c]:
                        continue
                    seen[c] = 1
                    prev[c] = rr
                    if c == target:
                        found = True
                        break
                    owner = colrow[c]
                    if owner > i:
                        queue[tail] = owner
                        tail += 1
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
    return out


def iou_xyxy(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m))
    cdef double[:, ::1] o = out
    cdef double area_a, iw, ih, inter, union
    for i in range(n):
        area_a = max(a[i, 2] - a[i, 0], 0.0) * max(a[i, 3] - a[i, 1], 0.0)
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + max(b[j, 2] - b[j, 0], 0.0) * max(b[j, 3] - b[j, 1], 0.0) - inter
            if union > 0.0:
                o[i, j] = inter / union
    return out
