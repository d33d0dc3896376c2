"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation, including the order in
which floating point sums are accumulated, so both backends give bit-identical
results.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, k, stride, out_h, out_w):
    """Unfold a padded batch ``(B, C, Hp, Wp)`` into rows ``(B*out_h*out_w, C*k*k)``.

    Row index runs over ``(b, oh, ow)``, column index over ``(c, i, j)``.
    """
    xp = np.ascontiguousarray(xp)
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(b, out_h, out_w, c, k, k),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return win.reshape(b * out_h * out_w, c * k * k)


def col2im(rows, channels, k, stride, out_h, out_w, hp, wp):
    """Scatter-add ``im2col`` rows back onto a zeroed canvas ``(B, C, hp, wp)``."""
    b = rows.shape[0] // (out_h * out_w)
    cols = rows.reshape(b, out_h, out_w, channels, k, k)
    xp = np.zeros((b, channels, hp, wp), dtype=rows.dtype)
    for i in range(k):
        hi = i + stride * out_h
        for j in range(k):
            wj = j + stride * out_w
            xp[:, :, i:hi:stride, j:wj:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp


def raster_triangles(xy, inv_depth, colors, height, width, background):
    """Z-buffered flat fill of screen-space triangles.

    ``xy`` is ``(T, 3, 2)`` pixel coordinates, ``inv_depth`` is ``(T, 3)`` (larger
    is nearer), ``colors`` is ``(T, 3)`` RGB. Pixel centres sit at ``+0.5``.
    Returns ``(image (3, H, W), zbuf (H, W))``.
    """
    image = np.empty((3, height, width), dtype=np.float64)
    image[:] = np.asarray(background, dtype=np.float64)[:, None, None]
    zbuf = np.zeros((height, width), dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64)
    inv_depth = np.asarray(inv_depth, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    for t in range(xy.shape[0]):
        x0, y0 = xy[t, 0]
        x1, y1 = xy[t, 1]
        x2, y2 = xy[t, 2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2))), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2))), width - 1)
        ymin = max(int(np.floor(min(y0, y1, y2))), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2))), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        px = np.arange(xmin, xmax + 1, dtype=np.float64)[None, :] + 0.5
        py = np.arange(ymin, ymax + 1, dtype=np.float64)[:, None] + 0.5
        w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
        w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
        w2 = ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) / area
        iz = w0 * inv_depth[t, 0] + w1 * inv_depth[t, 1] + w2 * inv_depth[t, 2]
        zsub = zbuf[ymin:ymax + 1, xmin:xmax + 1]
        hit = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0) & (iz > zsub)
        if not hit.any():
            continue
        zsub[hit] = iz[hit]
        for ch in range(3):
            image[ch, ymin:ymax + 1, xmin:xmax + 1][hit] = colors[t, ch]
    return image, zbuf
