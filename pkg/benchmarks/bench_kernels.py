"""Time the compiled kernels against the numpy fallback.

Run ``python benchmarks/bench_kernels.py`` after building the extension
(``pip install -e . --no-build-isolation``). Prints one line per kernel with
the median time of each backend and the speed ratio, and checks that the
two backends agree bit for bit.
"""
import argparse
import timeit

import numpy as np

from vipgan import _kernels_py as py
from vipgan import renderer

try:
    from vipgan import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    xp = rng.normal(size=(32, 16, 36, 36)).astype(np.float32)  # padded 32x32 map, k5 s2 p2
    rows = py.im2col(xp, 5, 2, 16, 16).copy()
    mesh = renderer.make_primitive("torus", 0)
    cam = renderer.Camera()
    pos, right, up, fwd = renderer.camera_frame(cam)
    v = (mesh.vertices - pos) @ np.stack([right, up, fwd]).T
    tv = v[mesh.triangles]
    f = 0.5 * 64 / np.tan(np.radians(cam.fov) / 2)
    xy = np.stack([32 + f * tv[..., 0] / tv[..., 2], 32 - f * tv[..., 1] / tv[..., 2]], axis=-1)
    cols = rng.uniform(-1, 1, size=(len(tv), 3))
    return {
        "im2col 32x16x36x36 k5 s2": ("im2col", (xp, 5, 2, 16, 16)),
        "col2im 32x16x36x36 k5 s2": ("col2im", (rows, 16, 5, 2, 16, 16, 36, 36)),
        "raster torus 1024 tris 64px": ("raster_triangles", (xy, 1.0 / tv[..., 2], cols, 64, 64, (-1.0,) * 3)),
    }


def bench(fn, args, repeat):
    t = timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)
    return float(np.median(t))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=15)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for name, (fn, a) in cases(rng).items():
        tp = bench(getattr(py, fn), a, args.repeat)
        if cy is None:
            print(f"{name:32s} {tp * 1e3:10.3f} {'n/a':>10s} {'n/a':>8s}  (extension not built)")
            continue
        tc = bench(getattr(cy, fn), a, args.repeat)
        rp, rc = getattr(py, fn)(*a), getattr(cy, fn)(*a)
        same = all(np.array_equal(x, y) for x, y in zip(rp, rc)) if isinstance(rp, tuple) else np.array_equal(rp, rc)
        print(f"{name:32s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f}  {same}")


if __name__ == "__main__":
    main()
