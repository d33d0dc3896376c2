# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Must stay numerically identical to ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(xp, int k, int stride, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    if xp.dtype == np.float32:
        return _im2col[float](xp, k, stride, out_h, out_w)
    return _im2col[double](xp.astype(np.float64, copy=False), k, stride, out_h, out_w)


cdef _im2col(real[:, :, :, ::1] xp, int k, int stride, int out_h, int out_w):
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    cdef Py_ssize_t b, c, i, j, oh, ow, r, col
    dtype = np.float32 if real is float else np.float64
    out = np.empty((nb * out_h * out_w, nc * k * k), dtype=dtype)
    cdef real[:, ::1] o = out
    with nogil:
        for b in range(nb):
            for oh in range(out_h):
                for ow in range(out_w):
                    r = (b * out_h + oh) * out_w + ow
                    col = 0
                    for c in range(nc):
                        for i in range(k):
                            for j in range(k):
                                o[r, col] = xp[b, c, i + stride * oh, j + stride * ow]
                                col += 1
    return out


def col2im(rows, int channels, int k, int stride, int out_h, int out_w, int hp, int wp):
    rows = np.ascontiguousarray(rows)
    if rows.dtype == np.float32:
        return _col2im[float](rows, channels, k, stride, out_h, out_w, hp, wp)
    return _col2im[double](rows.astype(np.float64, copy=False), channels, k, stride, out_h, out_w, hp, wp)


cdef _col2im(real[:, ::1] rows, int channels, int k, int stride, int out_h, int out_w, int hp, int wp):
    cdef Py_ssize_t nb = rows.shape[0] // (out_h * out_w)
    cdef Py_ssize_t b, c, i, j, oh, ow, r, col
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, channels, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] xp = out
    # (i, j) outermost per element so accumulation order matches the numpy path
    with nogil:
        for b in range(nb):
            for c in range(channels):
                for i in range(k):
                    for j in range(k):
                        col = (c * k + i) * k + j
                        for oh in range(out_h):
                            r = (b * out_h + oh) * out_w
                            for ow in range(out_w):
                                xp[b, c, i + stride * oh, j + stride * ow] += rows[r + ow, col]
    return out


def raster_triangles(xy, inv_depth, colors, int height, int width, background):
    cdef double[:, :, ::1] v = np.ascontiguousarray(xy, dtype=np.float64)
    cdef double[:, ::1] iz = np.ascontiguousarray(inv_depth, dtype=np.float64)
    cdef double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64)
    image = np.empty((3, height, width), dtype=np.float64)
    image[:] = np.asarray(background, dtype=np.float64)[:, None, None]
    zbuf = np.zeros((height, width), dtype=np.float64)
    cdef double[:, :, ::1] img = image
    cdef double[:, ::1] zb = zbuf
    cdef Py_ssize_t t, nt = v.shape[0]
    cdef int xmin, xmax, ymin, ymax, x, y
    cdef double x0, y0, x1, y1, x2, y2, area, px, py, w0, w1, w2, z
    with nogil:
        for t in range(nt):
            x0 = v[t, 0, 0]; y0 = v[t, 0, 1]
            x1 = v[t, 1, 0]; y1 = v[t, 1, 1]
            x2 = v[t, 2, 0]; y2 = v[t, 2, 1]
            area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            if area == 0.0:
                continue
            xmin = <int>floor(min(x0, min(x1, x2)))
            xmax = <int>ceil(max(x0, max(x1, x2)))
            ymin = <int>floor(min(y0, min(y1, y2)))
            ymax = <int>ceil(max(y0, max(y1, y2)))
            if xmin < 0:
                xmin = 0
            if ymin < 0:
                ymin = 0
            if xmax > width - 1:
                xmax = width - 1
            if ymax > height - 1:
                ymax = height - 1
            for y in range(ymin, ymax + 1):
                py = y + 0.5
                for x in range(xmin, xmax + 1):
                    px = x + 0.5
                    w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
                    w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
                    w2 = ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) / area
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                    z = w0 * iz[t, 0] + w1 * iz[t, 1] + w2 * iz[t, 2]
                    if z > zb[y, x]:
                        zb[y, x] = z
                        img[0, y, x] = col[t, 0]
                        img[1, y, x] = col[t, 1]
                        img[2, y, x] = col[t, 2]
    return image, zbuf
