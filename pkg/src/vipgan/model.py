"""VIP-GAN assembly: sections, memory bank, losses and the adversarial training loop.

Shapes are indexed ``0..S-1`` and views ``0..V-1``. Image data is passed as
numpy arrays: ``views`` ``(S, V, 3, H, W)`` feeds the view encoder and
``targets`` ``(S, V, 3, R, R)`` holds the same views at generator resolution.
"""
from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A loss became non-finite during training."""


@dataclass
class HyperParams:
    alpha: float = 3.0
    beta: float = 0.05
    eps: float = 0.05
    lr: float = 5e-4
    lr_d: float = 2e-4
    optimizer: str = "adam"
    beta1: float = 0.5
    V: int = 12
    N: int = 4
    F_dim: int = 256
    d_f: int = 256
    d_h: int = 256
    resolution: int = 32
    gen_c: int = 16
    enc_channels: tuple = (8, 16)
    disc_channels: tuple = (8, 16, 32, 64)
    epochs: int = 30
    batch_size: int = 32
    cgan: bool = False
    bidirectional: bool = False
    use_center: bool = True
    freeze_encoder: bool = False
    unknown_iters: int = 50
    unknown_eps: float = 0.002
    precision: str = "single"

    def validate(self) -> "HyperParams":
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0 (got {self.alpha}, {self.beta})")
        _check_sections(self.V, self.N)
        if self.d_h != self.gen_c * L.SEED_SIZE * L.SEED_SIZE:
            raise ValueError(f"d_h={self.d_h} must equal gen_c*16={self.gen_c * 16}")
        for name in ("F_dim", "d_f", "d_h", "resolution", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.eps < 0 or self.lr < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be >= 0")
        return self

    def replace(self, **kw) -> "HyperParams":
        d = asdict(self)
        d.update(kw)
        return HyperParams(**d)

    @classmethod
    def paper(cls) -> "HyperParams":
        """Full-size geometry: 4096-d features, 224x224 encoder input, 64x64 centers."""
        return cls(F_dim=4096, d_f=4096, d_h=4096, resolution=224, gen_c=256,
                   enc_channels=(8, 16, 32, 64, 64), disc_channels=(64, 128, 256, 512))


# ---------------------------------------------------------------- sections

@dataclass(frozen=True)
class Section:
    center: int
    neighbors: tuple
    shape: int = -1

    def reversed(self) -> "Section":
        return Section(self.center, tuple(reversed(self.neighbors)), self.shape)


def _check_sections(V: int, N: int) -> None:
    if N % 2 or N < 2 or N >= V:
        raise ValueError(f"need an even N with 2 <= N < V (got N={N}, V={V})")


def build_sections(V: int, N: int, shape: int = -1) -> list[Section]:
    """One section per view: the N ring-nearest views, N/2 per side, left to right."""
    _check_sections(V, N)
    half = N // 2
    offsets = [o for o in range(-half, half + 1) if o != 0]
    return [Section(i, tuple((i + o) % V for o in offsets), shape) for i in range(V)]


# ---------------------------------------------------------------- parameters & memory

@dataclass
class VipGanParams(L.ParamSet):
    encoder: L.ViewEncoderParams
    E: L.GruCellParams
    R: L.GruCellParams
    U: L.GeneratorHeadParams
    D: L.DiscriminatorParams
    proj: L.LinearParams | None = None
    readout: L.LinearParams | None = None
    steps: int = 0
    opt_g: T.AdamState = field(default_factory=T.AdamState)
    opt_d: T.AdamState = field(default_factory=T.AdamState)

    def generator_named(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, t in self.named_tensors():
            if name.startswith("D."):
                continue
            if name.startswith("encoder.") and self.encoder.frozen:
                continue
            out.append((name, t))
        return out

    def discriminator_named(self) -> list[tuple[str, Tensor]]:
        return self.D.named_tensors("D.")

    def generator_tensors(self) -> list[Tensor]:
        return [t for _, t in self.generator_named()]

    def discriminator_tensors(self) -> list[Tensor]:
        return self.D.tensors()

    @property
    def dtype(self):
        return self.E.W_z.data.dtype


def build_params(hp: HyperParams, seed) -> VipGanParams:
    hp.validate()
    rng = np.random.default_rng(int(seed) % 2**64)
    prec = hp.precision
    enc = L.ViewEncoderParams.create(hp.resolution, hp.d_f, hp.enc_channels, rng, prec)
    E = L.GruCellParams.create(hp.d_f, hp.d_h, rng, prec, "E")
    R = L.GruCellParams.create(hp.d_f, hp.d_h, rng, prec, "R")
    U = L.GeneratorHeadParams.create(hp.gen_c, rng, prec)
    n_cond = hp.N if hp.cgan else 0
    D = L.DiscriminatorParams.create(U.out_resolution, hp.disc_channels, rng, prec, n_cond=n_cond, d_cond=hp.d_f)
    proj = L.LinearParams.create(hp.F_dim, hp.d_f, rng, prec, "proj") if hp.F_dim != hp.d_f else None
    readout = L.LinearParams.create(hp.d_h, hp.d_f, rng, prec, "readout") if hp.d_h != hp.d_f else None
    params = VipGanParams(enc, E, R, U, D, proj, readout)
    if hp.freeze_encoder:
        enc.frozen = True
        enc.set_requires_grad(False)
    return params


class MemoryBank:
    """Per-shape global feature rows ``F`` (S x F_dim) with per-row trainable flags."""

    def __init__(self, F: np.ndarray, trainable=None):
        F = np.asarray(F)
        if F.ndim != 2:
            raise ShapeError(f"memory must be a matrix, got {F.shape}")
        self.trainable = np.ones(F.shape[0], bool) if trainable is None else np.asarray(trainable, bool).copy()
        self.F = Tensor(F, requires_grad=bool(self.trainable.any()), name="memory")

    @classmethod
    def random(cls, n_shapes: int, F_dim: int, seed, precision: str = "single") -> "MemoryBank":
        return cls(T.randn_init((n_shapes, F_dim), seed, precision=precision).data)

    @classmethod
    def zeros(cls, n_shapes: int, F_dim: int, trainable: bool = False, precision: str = "single") -> "MemoryBank":
        F = np.zeros((n_shapes, F_dim), dtype=T._DTYPES[precision])
        return cls(F, np.full(n_shapes, trainable))

    def __len__(self):
        return self.F.shape[0]

    @property
    def dim(self) -> int:
        return self.F.shape[1]

    def rows(self, idx) -> Tensor:
        return T.take_rows(self.F, idx)

    def step(self, eps: float) -> None:
        """``F <- F - eps * dL/dF`` on trainable rows, then clear the gradient."""
        g = self.F.grad
        if g is not None and eps != 0:
            g = g * self.trainable[:, None]
            self.F.data -= self.F.data.dtype.type(eps) * g
        self.F.grad = None

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.F.data.copy(), self.trainable)


@contextlib.contextmanager
def frozen(tensors: Iterable[Tensor]):
    """Temporarily stop gradient tracking for ``tensors``."""
    tensors = list(tensors)
    prev = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, p in zip(tensors, prev):
            t.requires_grad = p


# ---------------------------------------------------------------- generator forward

def memory_input(params: VipGanParams, F_rows: Tensor) -> Tensor:
    return L.linear(params.proj, F_rows) if params.proj is not None else F_rows


def encode_neighbors(params: VipGanParams, images) -> Tensor:
    """``(B, N, 3, H, W)`` images to ``(B, N, d_f)`` features."""
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params.dtype))
    b, n = images.shape[:2]
    flat = T.reshape(images, (b * n,) + images.shape[2:])
    feats = L.encode_view(params.encoder, flat)
    return T.reshape(feats, (b, n, feats.shape[-1]))


def encoder_rnn(params: VipGanParams, F_rows: Tensor, feats: Tensor) -> Tensor:
    """Batched encoder E: step 0 sees F, steps 1..N the neighbour features in order."""
    b, n = feats.shape[:2]
    if F_rows.shape[0] != b:
        raise ShapeError(f"{F_rows.shape[0]} memory rows for {b} sections")
    m = memory_input(params, F_rows)
    h0 = Tensor(np.zeros((b, params.E.d_h), dtype=params.dtype))
    inputs = [m] + [T.getitem(feats, (slice(None), j)) for j in range(n)]
    return L.gru_run(params.E, inputs, h0)[-1]


def encoder_forward(params: VipGanParams, F_row: Tensor, neighbor_images, n_expected: int | None = None) -> Tensor:
    """Hidden state ``h_i`` for one section (``F_row`` 1-D, images ``(N, 3, H, W)``) or a batch."""
    imgs = np.asarray(neighbor_images.data if isinstance(neighbor_images, Tensor) else neighbor_images)
    single = F_row.data.ndim == 1
    if single:
        imgs = imgs[None]
        F_row = T.reshape(F_row, (1, -1))
    if n_expected is not None and imgs.shape[1] != n_expected:
        raise ContractError(f"expected {n_expected} neighbour images, got {imgs.shape[1]}")
    h = encoder_rnn(params, F_row, encode_neighbors(params, imgs))
    return T.reshape(h, (h.shape[1],)) if single else h


def decoder_forward(params: VipGanParams, F_rows: Tensor, h: Tensor, gt_feats) -> Tensor:
    """Decoder R with hidden state initialised to ``h``.

    Step 1 input is F and yields f'_1; step j >= 2 input is the ground-truth
    f_{j-1} (teacher forcing). Returns ``(B, N, d_f)`` (or ``(N, d_f)``).
    """
    gt = gt_feats if isinstance(gt_feats, Tensor) else Tensor(np.asarray(gt_feats, dtype=params.dtype))
    single = h.data.ndim == 1
    if single:
        F_rows, h = T.reshape(F_rows, (1, -1)), T.reshape(h, (1, -1))
        gt = T.reshape(gt, (1,) + gt.shape)
    b, n, d = gt.shape
    if d != params.R.d_in:
        raise ShapeError(f"decoder_forward: feature dim {d} != {params.R.d_in}")
    m = memory_input(params, F_rows)
    inputs = [m] + [T.getitem(gt, (slice(None), j)) for j in range(n - 1)]
    states = L.gru_run(params.R, inputs, h)
    if params.readout is not None:
        states = [L.linear(params.readout, s) for s in states]
    out = T.stack(states, axis=1)
    return T.reshape(out, out.shape[1:]) if single else out


@dataclass
class GeneratorOutput:
    h: Tensor
    center: Tensor
    feats: Tensor
    preds: Tensor
    targets: Tensor


def generator_forward(params: VipGanParams, F_rows: Tensor, neighbor_images, feats: Tensor | None = None) -> GeneratorOutput:
    """Full generator pass for a batch of sections.

    Neighbour features are targets for the decoder and enter it as teacher
    inputs as constants; the encoder is trained through E and U only.
    """
    if feats is None:
        feats = encode_neighbors(params, neighbor_images)
    h = encoder_rnn(params, F_rows, feats)
    center = L.generate_center(params.U, h)
    targets = Tensor(feats.data)
    preds = decoder_forward(params, F_rows, h, targets)
    return GeneratorOutput(h, center, feats, preds, targets)


# ---------------------------------------------------------------- losses

def _open_unit(x: Tensor, what: str) -> None:
    d = x.data
    if not np.all((d > 0) & (d < 1)):
        raise ContractError(f"{what} must lie strictly inside (0, 1)")


def loss_center(c_pred: Tensor, c_true) -> Tensor:
    """L_U: squared L2 distance between predicted and true center images."""
    c_true = T.as_tensor(c_true, c_pred)
    if c_pred.shape != c_true.shape:
        raise ShapeError(f"loss_center: {c_pred.shape} vs {c_true.shape}")
    return T.l2_loss(c_pred, c_true)


def loss_neighbors(pred_feats, true_feats) -> Tensor:
    """L_R: mean over the N neighbours of squared L2 feature error (summed over a batch)."""
    if isinstance(pred_feats, (list, tuple)):
        if not isinstance(true_feats, (list, tuple)) or len(pred_feats) != len(true_feats):
            raise ContractError("loss_neighbors needs equally many predicted and true features")
        pred_feats = T.stack(pred_feats, axis=-2)
        true_feats = T.stack([T.as_tensor(t, pred_feats) for t in true_feats], axis=-2)
    true_feats = T.as_tensor(true_feats, pred_feats)
    if pred_feats.shape != true_feats.shape:
        raise ContractError(f"loss_neighbors: {pred_feats.shape} vs {true_feats.shape}")
    n = pred_feats.shape[-2]
    return T.l2_loss(pred_feats, true_feats) * (1.0 / n)


def loss_discriminator(d_real, d_fake) -> Tensor:
    """-L_D = -(log D(c) + log(1 - D(c'))), summed over a batch; minimised by D."""
    d_real, d_fake = T.as_tensor(d_real), T.as_tensor(d_fake)
    _open_unit(d_real, "D(real)")
    _open_unit(d_fake, "D(fake)")
    return T.neg(T.sum(T.log(d_real)) + T.sum(T.log(1.0 - d_fake)))


def loss_adversarial(d_fake) -> Tensor:
    """L_D2U = log(1 - D(c')), summed over a batch; minimised by the generator."""
    d_fake = T.as_tensor(d_fake)
    _open_unit(d_fake, "D(fake)")
    return T.sum(T.log(1.0 - d_fake))


def loss_total(l_u, l_r, l_d2u, alpha: float, beta: float, center_weight: float = 1.0):
    """L = L_U + alpha * L_R + beta * L_D2U (``center_weight`` scales L_U for ablations)."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be >= 0 (got {alpha}, {beta})")
    return center_weight * l_u + alpha * l_r + beta * l_d2u


# ---------------------------------------------------------------- training

@dataclass
class StepStats:
    n: int
    l_u: float
    l_r: float
    l_d2u: float
    total: float
    l_d: float

    def per_section(self) -> dict:
        return {k: getattr(self, k) / self.n for k in ("l_u", "l_r", "l_d2u", "total", "l_d")}


@dataclass
class Batch:
    shapes: np.ndarray
    neighbors: np.ndarray
    centers: np.ndarray

    @classmethod
    def from_sections(cls, sections: Sequence[Section]) -> "Batch":
        if not sections:
            raise ContractError("empty section batch")
        return cls(np.array([s.shape for s in sections], np.intp),
                   np.array([s.neighbors for s in sections], np.intp),
                   np.array([s.center for s in sections], np.intp))

    def __len__(self):
        return len(self.shapes)

    def images(self, views: np.ndarray) -> np.ndarray:
        return views[self.shapes[:, None], self.neighbors]

    def center_images(self, targets: np.ndarray) -> np.ndarray:
        return targets[self.shapes, self.centers]


def _disc(params: VipGanParams, imgs: Tensor, cond: Tensor | None) -> Tensor:
    if params.D.conditional:
        return L.conditional_discriminate(params.D, imgs, cond)
    return L.discriminate(params.D, imgs)


def _finite(*vals: float) -> None:
    if not all(math.isfinite(v) for v in vals):
        raise NumericError(f"non-finite loss encountered: {vals}")


def _update(named: Sequence[tuple[str, Tensor]], lr: float, batch: int, state: T.AdamState, hp: HyperParams) -> None:
    named = [(n, t) for n, t in named if t.grad is not None]
    if hp.optimizer == "adam":
        T.adam_step(named, lr, state, hp.beta1)
    else:
        T.sgd_step([t for _, t in named], lr / batch)


def train_step(params: VipGanParams, memory: MemoryBank, sections: Sequence[Section], views: np.ndarray,
               targets: np.ndarray, hp: HyperParams) -> StepStats:
    """One adversarial update on a batch of sections.

    Phase 1 updates only D on -L_D. Phase 2 updates G's weights (rate ``lr`` on the batch-mean gradient) and the
    touched memory rows (rate ``eps`` on their own gradient) on L.
    """
    batch = Batch.from_sections(sections)
    stats = _train_batch(params, memory, batch, views, targets, hp)
    if hp.bidirectional:
        rev = Batch(batch.shapes, batch.neighbors[:, ::-1].copy(), batch.centers)
        r = _train_batch(params, memory, rev, views, targets, hp)
        stats = StepStats(stats.n + r.n, stats.l_u + r.l_u, stats.l_r + r.l_r, stats.l_d2u + r.l_d2u,
                          stats.total + r.total, stats.l_d + r.l_d)
    return stats


def _train_batch(params, memory, batch: Batch, views, targets, hp: HyperParams) -> StepStats:
    dtype = params.dtype
    b = len(batch)
    imgs = batch.images(views).astype(dtype, copy=False)
    real = batch.center_images(targets).astype(dtype, copy=False)
    g_tensors = params.generator_tensors()
    d_tensors = params.discriminator_tensors()

    # Phase 1 leaves G untouched, so one recorded generator pass serves both
    # phases; it is identical to recomputing G after the D update.
    g = generator_forward(params, memory.rows(batch.shapes), imgs)

    # phase 1: discriminator only, on real and (detached) fake centers in one pass
    both = Tensor(np.concatenate([real, g.center.data]))
    cond = None
    if params.D.conditional:
        cond = Tensor(np.concatenate([g.targets.data, g.targets.data]))
    with frozen(g_tensors + [memory.F]):
        probs = _disc(params, both, cond)
        loss_d = loss_discriminator(T.getitem(probs, slice(0, b)), T.getitem(probs, slice(b, 2 * b)))
        T.backward(loss_d)
    _update(params.discriminator_named(), hp.lr_d, b, params.opt_d, hp)

    # phase 2: generator and memory, D frozen
    with frozen(d_tensors):
        l_u = loss_center(g.center, Tensor(real))
        l_r = loss_neighbors(g.preds, g.targets)
        if hp.beta > 0:
            l_d2u = loss_adversarial(_disc(params, g.center, g.targets if params.D.conditional else None))
        else:
            l_d2u = Tensor(np.zeros((), dtype))
        total = loss_total(l_u, l_r, l_d2u, hp.alpha, hp.beta, 1.0 if hp.use_center else 0.0)
        _finite(total.item(), loss_d.item())
        T.backward(total)
    _update(params.generator_named(), hp.lr, b, params.opt_g, hp)
    memory.step(hp.eps)
    params.steps += 1
    return StepStats(b, l_u.item(), l_r.item(), l_d2u.item(), total.item(), loss_d.item())


@dataclass
class EpochRecord:
    epoch: int
    l_u: float
    l_r: float
    l_d2u: float
    total: float
    l_d: float


def all_sections(n_shapes: int, V: int, N: int) -> list[Section]:
    base = build_sections(V, N)
    return [Section(s.center, s.neighbors, shape) for shape in range(n_shapes) for s in base]


def epoch_order(n_sections: int, seed, epoch: int) -> np.ndarray:
    """Section permutation for one epoch; depends only on (seed, epoch) so runs can resume."""
    return np.random.default_rng([int(seed) % 2**64, epoch]).permutation(n_sections)


def fit_known_test(params: VipGanParams, memory: MemoryBank, views: np.ndarray, targets: np.ndarray,
                   hp: HyperParams, seed=0, start_epoch: int = 0,
                   on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Train on every shape's sections (train and test jointly); returns per-epoch mean losses."""
    n_shapes, V = views.shape[:2]
    if len(memory) != n_shapes:
        raise ContractError(f"memory has {len(memory)} rows for {n_shapes} shapes")
    if V != hp.V:
        raise ContractError(f"views have V={V}, config says V={hp.V}")
    sections = all_sections(n_shapes, hp.V, hp.N)
    history = []
    for epoch in range(start_epoch, hp.epochs):
        order = epoch_order(len(sections), seed, epoch)
        acc = np.zeros(5)
        count = 0
        for lo in range(0, len(order), hp.batch_size):
            chunk = [sections[i] for i in order[lo:lo + hp.batch_size]]
            st = train_step(params, memory, chunk, views, targets, hp)
            acc += (st.l_u, st.l_r, st.l_d2u, st.total, st.l_d)
            count += st.n
        rec = EpochRecord(epoch + 1, *(acc / count))
        log.info("epoch %d  L_U %.3f  L_R %.4f  L_D2U %.4f  L %.3f  -L_D %.4f", rec.epoch, rec.l_u, rec.l_r,
                 rec.l_d2u, rec.total, rec.l_d)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


# ---------------------------------------------------------------- unknown-test mode

@dataclass
class InferenceResult:
    memory: MemoryBank
    history: np.ndarray = field(repr=False)  # (iters + 1, S) per-shape L before each update


def _section_losses(g: GeneratorOutput, real: np.ndarray, d_fake: np.ndarray | None, hp: HyperParams) -> np.ndarray:
    c = g.center.data.astype(np.float64)
    lu = ((c - real) ** 2).sum(axis=(1, 2, 3))
    diff = g.preds.data.astype(np.float64) - g.targets.data
    lr = (diff ** 2).sum(axis=(1, 2)) / diff.shape[1]
    ld = np.log(np.maximum(1.0 - d_fake.astype(np.float64), T.LOG_CLAMP)) if d_fake is not None else 0.0
    return (1.0 if hp.use_center else 0.0) * lu + hp.alpha * lr + hp.beta * ld


def infer_unknown_test(params: VipGanParams, views: np.ndarray, targets: np.ndarray, hp: HyperParams,
                       seed=0, iters: int | None = None, eps: float | None = None,
                       chunk: int = 4) -> InferenceResult:
    """Learn memory rows for unseen shapes with every network weight frozen.

    Full-batch gradient descent over all V sections of each shape, with a
    per-row step that starts at ``eps`` and halves on any step that would not
    lower that row's loss. Every loss
    term is a sum over sections and a row only feeds its own sections, so the
    shapes are optimised ``chunk`` at a time to bound peak memory.
    """
    if params.steps == 0:
        raise ContractError("unknown-test mode needs pretrained parameters")
    iters = hp.unknown_iters if iters is None else iters
    eps = hp.unknown_eps if eps is None else eps
    n_shapes = views.shape[0]
    memory = MemoryBank.random(n_shapes, hp.F_dim, seed, hp.precision)
    history = np.zeros((iters + 1, n_shapes))
    with frozen(params.tensors()):
        for lo in range(0, n_shapes, max(1, chunk)):
            idx = np.arange(lo, min(lo + max(1, chunk), n_shapes))
            part = MemoryBank(memory.F.data[idx].copy())
            history[:, idx] = _infer_rows(params, part, views[idx], targets[idx], hp, iters, eps)
            memory.F.data[idx] = part.F.data
    return InferenceResult(memory, history)


def _infer_rows(params, memory: MemoryBank, views, targets, hp: HyperParams, iters: int, eps: float,
                max_halvings: int = 30) -> np.ndarray:
    """Gradient descent on each row with its own step, halved whenever a step fails to lower that row's loss."""
    n_shapes = views.shape[0]
    batch = Batch.from_sections(all_sections(n_shapes, hp.V, hp.N))
    dtype = params.dtype
    real = batch.center_images(targets).astype(dtype, copy=False)
    with T.no_grad():
        feats = encode_neighbors(params, batch.images(views).astype(dtype, copy=False))
    feats = Tensor(feats.data)
    real_t = Tensor(real)

    def evaluate(F: np.ndarray):
        rows = Tensor(F, requires_grad=True)
        g = generator_forward(params, T.take_rows(rows, batch.shapes), None, feats=feats)
        l_u = loss_center(g.center, real_t)
        l_r = loss_neighbors(g.preds, g.targets)
        d_fake = None
        l_d2u = Tensor(np.zeros((), dtype))
        if hp.beta > 0:
            d = _disc(params, g.center, g.targets if params.D.conditional else None)
            d_fake = d.data
            l_d2u = loss_adversarial(d)
        total = loss_total(l_u, l_r, l_d2u, hp.alpha, hp.beta, 1.0 if hp.use_center else 0.0)
        _finite(total.item())
        T.backward(total)
        per = np.bincount(batch.shapes, weights=_section_losses(g, real, d_fake, hp), minlength=n_shapes)
        return per, rows.grad

    F = memory.F.data.copy()
    cur, grad = evaluate(F)
    step = np.full(n_shapes, eps, dtype=F.dtype)
    history = np.zeros((iters + 1, n_shapes))
    history[0] = cur
    for it in range(1, iters + 1):
        pending = np.ones(n_shapes, bool)
        for _ in range(max_halvings):
            trial = np.where(pending[:, None], F - step[:, None] * grad, F)
            loss, g_trial = evaluate(trial)
            ok = pending & (loss < cur)
            F[ok], cur[ok], grad[ok] = trial[ok], loss[ok], g_trial[ok]
            pending &= ~ok
            if not pending.any():
                break
            step[pending] *= 0.5
        history[it] = cur
    memory.F.data[...] = F
    return history


# ---------------------------------------------------------------- pooling baseline

def pooled_features(params: VipGanParams, F: np.ndarray | None, views: np.ndarray, hp: HyperParams,
                    kinds: Sequence[str] = ("max", "mean"), chunk: int = 256) -> dict[str, np.ndarray]:
    """Pool the V encoder states h_i of each shape by max and/or mean.

    ``F`` gives one memory row per shape; ``None`` feeds all-zero memory.
    """
    for k in kinds:
        if k not in ("max", "mean"):
            raise ValueError(f"unknown pooling kind {k!r}")
    n_shapes = views.shape[0]
    dtype = params.dtype
    if F is None:
        F = np.zeros((n_shapes, hp.F_dim), dtype)
    batch = Batch.from_sections(all_sections(n_shapes, hp.V, hp.N))
    hs = np.empty((len(batch), params.E.d_h), dtype)
    with T.no_grad():
        for lo in range(0, len(batch), chunk):
            sl = slice(lo, lo + chunk)
            imgs = views[batch.shapes[sl, None], batch.neighbors[sl]].astype(dtype, copy=False)
            rows = Tensor(np.asarray(F, dtype)[batch.shapes[sl]])
            hs[sl] = encoder_rnn(params, rows, encode_neighbors(params, imgs)).data
    hs = hs.reshape(n_shapes, hp.V, -1)
    return {k: pool_states(hs, k) for k in kinds}


def pool_states(hs: np.ndarray, kind: str) -> np.ndarray:
    """Pool hidden states over the view axis (-2)."""
    if kind == "max":
        return hs.max(axis=-2)
    if kind == "mean":
        return hs.mean(axis=-2)
    raise ValueError(f"unknown pooling kind {kind!r}")


def pooled_feature(params: VipGanParams, memory_row, shape_views: np.ndarray, hp: HyperParams, kind: str = "max") -> np.ndarray:
    """Single-shape pooled feature; ``memory_row=None`` means all-zero memory."""
    F = None if memory_row is None else np.asarray(memory_row)[None]
    return pooled_features(params, F, np.asarray(shape_views)[None], hp, (kind,))[kind][0]
