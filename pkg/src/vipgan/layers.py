"""Network building blocks: GRU cell, view encoder, deconv generator head, discriminator.

Every forward accepts either a single example or a leading batch axis and
returns the matching layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

LEAK = 0.2
PROB_EPS = 1e-7


class ParamSet:
    """Mixin for dataclasses holding named parameter tensors."""

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for f in fields(self):
            val = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(val, Tensor):
                out.append((name, val))
            elif isinstance(val, ParamSet):
                out.extend(val.named_tensors(name + "."))
            elif isinstance(val, list) and val and isinstance(val[0], Tensor):
                out.extend((f"{name}.{i}", t) for i, t in enumerate(val))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def num_params(self) -> int:
        return int(np.sum([t.size for t in self.tensors()]))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag


def _init(rng, shape, precision, name):
    return T.randn_init(shape, rng, precision=precision, name=name)


def _batched(x: Tensor, ndim: int):
    """Add a leading batch axis to an unbatched input of rank ``ndim``."""
    if x.data.ndim == ndim:
        return T.reshape(x, (1,) + x.shape), True
    if x.data.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected rank {ndim} or {ndim + 1}, got shape {x.shape}")


# ---------------------------------------------------------------- linear

@dataclass
class LinearParams(ParamSet):
    W: Tensor  # (d_out, d_in)
    b: Tensor

    @classmethod
    def create(cls, d_in, d_out, rng, precision="single", name="linear"):
        return cls(_init(rng, (d_out, d_in), precision, f"{name}.W"), _init(rng, (d_out,), precision, f"{name}.b"))


def linear(p: LinearParams, x: Tensor) -> Tensor:
    xb, squeeze = _batched(x, 1)
    if xb.shape[1] != p.W.shape[1]:
        raise ShapeError(f"linear: input dim {xb.shape[1]} != {p.W.shape[1]}")
    y = T.add_bias(T.matmul(xb, T.transpose(p.W)), p.b)
    return T.reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------- GRU

@dataclass
class GruCellParams(ParamSet):
    d_in: int = field(metadata={"static": True})
    d_h: int = field(metadata={"static": True})
    W_z: Tensor = None
    W_r: Tensor = None
    W_h: Tensor = None
    U_z: Tensor = None
    U_r: Tensor = None
    U_h: Tensor = None
    b_z: Tensor = None
    b_r: Tensor = None
    b_h: Tensor = None

    @classmethod
    def create(cls, d_in, d_h, rng, precision="single", name="gru"):
        kw = {}
        for g in "zrh":
            kw[f"W_{g}"] = _init(rng, (d_h, d_in), precision, f"{name}.W_{g}")
        for g in "zrh":
            kw[f"U_{g}"] = _init(rng, (d_h, d_h), precision, f"{name}.U_{g}")
        for g in "zrh":
            kw[f"b_{g}"] = _init(rng, (d_h,), precision, f"{name}.b_{g}")
        return cls(d_in, d_h, **kw)


class _GruWeights:
    """Transposed gate weights, built once per sequence instead of per step."""

    def __init__(self, p: GruCellParams):
        self.p = p
        self.Wz, self.Wr, self.Wh = (T.transpose(w) for w in (p.W_z, p.W_r, p.W_h))
        self.Uz, self.Ur, self.Uh = (T.transpose(u) for u in (p.U_z, p.U_r, p.U_h))


def _gru_core(w: _GruWeights, x: Tensor, h: Tensor) -> Tensor:
    p = w.p
    z = T.sigmoid(T.add_bias(T.matmul(x, w.Wz) + T.matmul(h, w.Uz), p.b_z))
    r = T.sigmoid(T.add_bias(T.matmul(x, w.Wr) + T.matmul(h, w.Ur), p.b_r))
    h_cand = T.tanh(T.add_bias(T.matmul(x, w.Wh) + T.matmul(r * h, w.Uh), p.b_h))
    return h + z * (h_cand - h)


def gru_step(p: GruCellParams, x: Tensor, h: Tensor) -> Tensor:
    """One GRU update ``h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h)``."""
    xb, squeeze = _batched(x, 1)
    hb, _ = _batched(h, 1)
    if xb.shape[1] != p.d_in or hb.shape[1] != p.d_h or xb.shape[0] != hb.shape[0]:
        raise ShapeError(f"gru_step: got x {x.shape}, h {h.shape} for d_in={p.d_in}, d_h={p.d_h}")
    out = _gru_core(_GruWeights(p), xb, hb)
    return T.reshape(out, (p.d_h,)) if squeeze else out


def gru_run(p: GruCellParams, inputs: list[Tensor], h0: Tensor) -> list[Tensor]:
    """Run batched inputs ``(B, d_in)`` through the cell; returns every hidden state."""
    w = _GruWeights(p)
    states, h = [], h0
    for x in inputs:
        if x.shape[-1] != p.d_in:
            raise ShapeError(f"gru_run: input dim {x.shape[-1]} != {p.d_in}")
        h = _gru_core(w, x, h)
        states.append(h)
    return states


# ---------------------------------------------------------------- view encoder

ENC_K, ENC_STRIDE, ENC_PAD = 5, 2, 2


@dataclass
class ViewEncoderParams(ParamSet):
    resolution: int = field(metadata={"static": True})
    d_f: int = field(metadata={"static": True})
    kernels: list = None
    biases: list = None
    fc: LinearParams = None
    frozen: bool = False

    @classmethod
    def create(cls, resolution, d_f, channels, rng, precision="single"):
        kernels, biases = [], []
        c_in, size = 3, resolution
        for i, c in enumerate(channels):
            kernels.append(_init(rng, (c, c_in, ENC_K, ENC_K), precision, f"encoder.conv{i}.K"))
            biases.append(_init(rng, (c,), precision, f"encoder.conv{i}.b"))
            c_in, size = c, T.conv_out_size(size, ENC_K, ENC_STRIDE, ENC_PAD)
        fc = LinearParams.create(c_in * size * size, d_f, rng, precision, "encoder.fc")
        return cls(resolution, d_f, kernels, biases, fc)


def encode_view(p: ViewEncoderParams, img: Tensor) -> Tensor:
    """Images ``(3, H, W)`` or ``(B, 3, H, W)`` to features ``(d_f,)`` / ``(B, d_f)``."""
    xb, squeeze = _batched(img, 3)
    if xb.shape[1:] != (3, p.resolution, p.resolution):
        raise ShapeError(f"encode_view: expected 3x{p.resolution}x{p.resolution}, got {img.shape}")
    x = xb
    for k, b in zip(p.kernels, p.biases):
        x = T.leaky_relu(T.conv2d(x, k, b, stride=ENC_STRIDE, padding=ENC_PAD), LEAK)
    x = T.reshape(x, (x.shape[0], -1))
    y = T.tanh(linear(p.fc, x))  # bounded features keep the L_R targets on a fixed scale
    return T.reshape(y, (p.d_f,)) if squeeze else y


# ---------------------------------------------------------------- generator head U

GEN_K, GEN_STRIDE, GEN_PAD, GEN_OUT_PAD = 3, 2, 1, 1
SEED_SIZE = 4


@dataclass
class GeneratorHeadParams(ParamSet):
    c: int = field(metadata={"static": True})
    kernels: list = None
    biases: list = None

    @classmethod
    def create(cls, c, rng, precision="single"):
        outs = (c, c // 2, c // 4, 3)
        if min(outs) < 1:
            raise ValueError(f"generator width c={c} too small (need c >= 4)")
        kernels, biases = [], []
        c_in = c
        for i, c_out in enumerate(outs):
            kernels.append(_init(rng, (c_in, c_out, GEN_K, GEN_K), precision, f"U.deconv{i}.K"))
            biases.append(_init(rng, (c_out,), precision, f"U.deconv{i}.b"))
            c_in = c_out
        return cls(c, kernels, biases)

    @property
    def seed_length(self) -> int:
        return self.c * SEED_SIZE * SEED_SIZE

    @property
    def out_resolution(self) -> int:
        size = SEED_SIZE
        for _ in self.kernels:
            size = T.deconv_out_size(size, GEN_K, GEN_STRIDE, GEN_PAD, GEN_OUT_PAD)
        return size


def generate_center(p: GeneratorHeadParams, h: Tensor, return_maps: bool = False):
    """Reshape ``h`` into ``c`` maps of 4x4 and decode to a ``3 x 64 x 64`` image in [-1, 1]."""
    hb, squeeze = _batched(h, 1)
    if hb.shape[1] != p.seed_length:
        raise ShapeError(f"generate_center: vector length {hb.shape[1]} != c*16 = {p.seed_length}")
    x = T.reshape(hb, (hb.shape[0], p.c, SEED_SIZE, SEED_SIZE))
    maps = [x]
    last = len(p.kernels) - 1
    for i, (k, b) in enumerate(zip(p.kernels, p.biases)):
        x = T.deconv2d(x, k, b, stride=GEN_STRIDE, padding=GEN_PAD, output_padding=GEN_OUT_PAD)
        x = T.tanh(x) if i == last else T.leaky_relu(x, LEAK)
        maps.append(x)
    out = T.reshape(x, x.shape[1:]) if squeeze else x
    return (out, maps) if return_maps else out


# ---------------------------------------------------------------- discriminator D

DISC_K, DISC_STRIDE, DISC_PAD = 5, 2, 2
COND_K = 3


@dataclass
class DiscriminatorParams(ParamSet):
    resolution: int = field(metadata={"static": True})
    kernels: list = None
    biases: list = None
    fc: LinearParams = None
    cond_kernel: Tensor = None  # conditional variant only
    cond_bias: Tensor = None
    n_cond: int = 0
    d_cond: int = 0

    @classmethod
    def create(cls, resolution, channels, rng, precision="single", n_cond=0, d_cond=0):
        kernels, biases = [], []
        c_in, size = 3, resolution
        for i, c in enumerate(channels):
            kernels.append(_init(rng, (c, c_in, DISC_K, DISC_K), precision, f"D.conv{i}.K"))
            biases.append(_init(rng, (c,), precision, f"D.conv{i}.b"))
            c_in, size = c, T.conv_out_size(size, DISC_K, DISC_STRIDE, DISC_PAD)
        cond_kernel = cond_bias = None
        if n_cond:
            cond_kernel = _init(rng, (c_in, c_in + n_cond * d_cond, COND_K, COND_K), precision, "D.cond.K")
            cond_bias = _init(rng, (c_in,), precision, "D.cond.b")
        fc = LinearParams.create(c_in * size * size, 1, rng, precision, "D.fc")
        return cls(resolution, kernels, biases, fc, cond_kernel, cond_bias, n_cond, d_cond)

    @property
    def conditional(self) -> bool:
        return self.cond_kernel is not None

    @property
    def trunk_shape(self) -> tuple:
        size = self.resolution
        for _ in self.kernels:
            size = T.conv_out_size(size, DISC_K, DISC_STRIDE, DISC_PAD)
        return (self.kernels[-1].shape[0], size, size)


def discriminator_trunk(p: DiscriminatorParams, img: Tensor) -> Tensor:
    """Batched conv stack output before the fully connected layer."""
    if img.shape[1:] != (3, p.resolution, p.resolution):
        raise ShapeError(f"discriminate: expected 3x{p.resolution}x{p.resolution}, got {img.shape}")
    x = img
    for k, b in zip(p.kernels, p.biases):
        x = T.leaky_relu(T.conv2d(x, k, b, stride=DISC_STRIDE, padding=DISC_PAD), LEAK)
    return x


def _head(p: DiscriminatorParams, maps: Tensor) -> Tensor:
    logits = linear(p.fc, T.reshape(maps, (maps.shape[0], -1)))
    prob = T.clip(T.sigmoid(logits), PROB_EPS, 1 - PROB_EPS)
    return T.reshape(prob, (maps.shape[0],))


def discriminate(p: DiscriminatorParams, img: Tensor) -> Tensor:
    """Probability that each image is a real center view, clipped into (0, 1)."""
    xb, squeeze = _batched(img, 3)
    prob = _head(p, discriminator_trunk(p, xb))
    return T.reshape(prob, ()) if squeeze else prob


def conditional_discriminate(p: DiscriminatorParams, img: Tensor, neighbor_feats) -> Tensor:
    """Discriminator conditioned on neighbour features.

    ``neighbor_feats`` is a list of N tensors ``(d_f,)``/``(B, d_f)`` or one
    ``(B, N, d_f)`` tensor. They are tiled over the trunk's spatial grid,
    concatenated as channels, and passed through one extra conv layer.
    """
    if not p.conditional:
        raise ContractError("discriminator was built without a condition path")
    if neighbor_feats is None or (isinstance(neighbor_feats, (list, tuple)) and not neighbor_feats):
        raise ContractError("conditional_discriminate needs neighbour features")
    xb, squeeze = _batched(img, 3)
    nb = xb.shape[0]
    if isinstance(neighbor_feats, Tensor):
        cond = T.reshape(neighbor_feats, (nb, -1))
    else:
        cond = T.concat([T.reshape(f, (nb, -1)) for f in neighbor_feats], axis=1)
    if cond.shape[1] != p.n_cond * p.d_cond:
        raise ContractError(f"expected {p.n_cond} neighbour features of length {p.d_cond}, got {cond.shape[1]} values")
    trunk = discriminator_trunk(p, xb)
    tiled = T.broadcast_spatial(cond, trunk.shape[2], trunk.shape[3])
    x = T.concat([trunk, tiled], axis=1)
    x = T.leaky_relu(T.conv2d(x, p.cond_kernel, p.cond_bias, stride=1, padding=COND_K // 2), LEAK)
    prob = _head(p, x)
    return T.reshape(prob, ()) if squeeze else prob
