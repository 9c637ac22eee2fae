# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled box-overlap kernels: pairwise IoU matrix and greedy NMS suppression.

These are the evaluation hot loops (IoU matrices across ten COCO thresholds,
per-class suppression over thousands of candidates).  A pure-numpy fallback
with the same API lives in ``boxops_py``.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def iou_matrix(cnp.float64_t[:, :] a, cnp.float64_t[:, :] b):
    """Pairwise IoU of boxes a[n,4] vs b[m,4] in x1,y1,x2,y2 layout."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef cnp.float64_t[:, :] out = out_arr
    cdef Py_ssize_t i, j
    cdef double ax1, ay1, ax2, ay2, area_a
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter, union

    for i in range(n):
        ax1 = a[i, 0]; ay1 = a[i, 1]; ax2 = a[i, 2]; ay2 = a[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(m):
            ix1 = ax1 if ax1 > b[j, 0] else b[j, 0]
            iy1 = ay1 if ay1 > b[j, 1] else b[j, 1]
            ix2 = ax2 if ax2 < b[j, 2] else b[j, 2]
            iy2 = ay2 if ay2 < b[j, 3] else b[j, 3]
            iw = ix2 - ix1
            ih = iy2 - iy1
            if iw > 0 and ih > 0:
                inter = iw * ih
                union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
                if union > 0:
                    out[i, j] = inter / union
    return out_arr


def nms_suppress(cnp.float64_t[:, :] boxes, double iou_threshold):
    """Greedy suppression over score-ordered boxes[n,4]; returns kept row indices."""
    cdef Py_ssize_t n = boxes.shape[0]
    keep_arr = np.zeros(n, dtype=np.int64)
    alive_arr = np.ones(n, dtype=np.uint8)
    cdef cnp.int64_t[:] keep = keep_arr
    cdef cnp.uint8_t[:] alive = alive_arr
    cdef Py_ssize_t i, j, n_keep = 0
    cdef double x1, y1, x2, y2, area_i, ix1, iy1, ix2, iy2, iw, ih, inter, union

    for i in range(n):
        if not alive[i]:
            continue
        keep[n_keep] = i
        n_keep += 1
        x1 = boxes[i, 0]; y1 = boxes[i, 1]; x2 = boxes[i, 2]; y2 = boxes[i, 3]
        area_i = (x2 - x1) * (y2 - y1)
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            ix1 = x1 if x1 > boxes[j, 0] else boxes[j, 0]
            iy1 = y1 if y1 > boxes[j, 1] else boxes[j, 1]
            ix2 = x2 if x2 < boxes[j, 2] else boxes[j, 2]
            iy2 = y2 if y2 < boxes[j, 3] else boxes[j, 3]
            iw = ix2 - ix1
            ih = iy2 - iy1
            if iw > 0 and ih > 0:
                inter = iw * ih
                union = area_i + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
                if union > 0 and inter / union > iou_threshold:
                    alive[j] = 0
    return keep_arr[:n_keep].copy()
