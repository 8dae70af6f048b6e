# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bilinear sampling kernels.

Arithmetic mirrors ``_pykernels`` operation for operation so both backends
produce the same bits (built with -ffp-contract=off).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def bilinear_resize(const float[:, :, ::1] img, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t in_h = img.shape[0], in_w = img.shape[1], nc = img.shape[2]
    out = np.empty((out_h, out_w, nc), dtype=np.float32)
    cdef float[:, :, ::1] o = out
    cdef double sy = <double>in_h / <double>out_h
    cdef double sx = <double>in_w / <double>out_w
    cdef Py_ssize_t i, j, c, y0, y1, x0, x1
    cdef double fy, fx, wy, wx, top, bot
    for i in range(out_h):
        fy = (i + 0.5) * sy - 0.5
        if fy < 0.0:
            fy = 0.0
        if fy > in_h - 1:
            fy = in_h - 1
        y0 = <Py_ssize_t>floor(fy)
        y1 = y0 + 1 if y0 + 1 < in_h else in_h - 1
        wy = fy - y0
        for j in range(out_w):
            fx = (j + 0.5) * sx - 0.5
            if fx < 0.0:
                fx = 0.0
            if fx > in_w - 1:
                fx = in_w - 1
            x0 = <Py_ssize_t>floor(fx)
            x1 = x0 + 1 if x0 + 1 < in_w else in_w - 1
            wx = fx - x0
            for c in range(nc):
                top = (1.0 - wx) * img[y0, x0, c] + wx * img[y0, x1, c]
                bot = (1.0 - wx) * img[y1, x0, c] + wx * img[y1, x1, c]
                o[i, j, c] = <float>((1.0 - wy) * top + wy * bot)
    return out


def rotate_bilinear(const float[:, :, ::1] img, double cos_t, double sin_t, float fill):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], nc = img.shape[2]
    out = np.empty((h, w, nc), dtype=np.float32)
    cdef float[:, :, ::1] o = out
    cdef double cy = (h - 1) / 2.0
    cdef double cx = (w - 1) / 2.0
    cdef Py_ssize_t i, j, c, y0, y1, x0, x1
    cdef double dy, dx, fy, fx, wy, wx, top, bot
    for i in range(h):
        dy = i - cy
        for j in range(w):
            dx = j - cx
            fx = cos_t * dx - sin_t * dy + cx
            fy = sin_t * dx + cos_t * dy + cy
            if fx < 0.0 or fy < 0.0 or fx > w - 1 or fy > h - 1:
                for c in range(nc):
                    o[i, j, c] = fill
                continue
            y0 = <Py_ssize_t>floor(fy)
            x0 = <Py_ssize_t>floor(fx)
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            wy = fy - y0
            wx = fx - x0
            for c in range(nc):
                top = (1.0 - wx) * img[y0, x0, c] + wx * img[y0, x1, c]
                bot = (1.0 - wx) * img[y1, x0, c] + wx * img[y1, x1, c]
                o[i, j, c] = <float>((1.0 - wy) * top + wy * bot)
    return out
