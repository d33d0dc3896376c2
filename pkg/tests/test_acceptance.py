"""Acceptance gate: the twelve criteria at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed together in the
"acceptance criteria" section of the pytest summary. The expensive toy-set
training runs are shared through module fixtures.
"""
import contextlib
import itertools
import math
import time

import numpy as np
import pytest

import conftest
import test_renderer
from conftest import check_grads, dtensor
from vipgan import checkpoint as C
from vipgan import cli
from vipgan import dataset as D
from vipgan import evaluation as E
from vipgan import layers as L
from vipgan import model as M
from vipgan import renderer as R
from vipgan import tensor as T
from vipgan.tensor import Tensor

pytestmark = pytest.mark.slow

TITLES = {
    1: "gradient suite (finite differences, rel. error < 1e-4, < 1 min)",
    2: "architecture geometry at full size",
    3: "loss identities to machine precision",
    4: "toy descent: L_U(epoch 30) < 50% of L_U(epoch 1), all losses finite",
    5: "trainable memory ends with lower total loss than zero frozen memory",
    6: "memory rows: >= 80% test accuracy and >= +25 points over random memory",
    7: "memory rows >= max/mean pooling under both memory modes",
    8: "unknown-test: frozen networks, strictly decreasing loss, above-chance features",
    9: "metric oracles: brute-force AP/mAP and worked examples",
    10: "determinism, byte-identical checkpoints, resume equivalence",
    11: "renderer ring symmetry and two-triangle z-buffer",
    12: "ablation harness: nine-cell grid and L_U-only (0,0) cell",
}
SEED = 0


@pytest.fixture(scope="module", autouse=True)
def _register(request):
    selected = {int(item.name[6:8]) for item in request.session.items
                if item.module is request.module and item.name.startswith("test_c")}
    for n in sorted(selected):
        title = TITLES[n]
        conftest.ACCEPTANCE.setdefault(n, f"criterion {n:2d}  FAIL  {title}  (not completed)")
    yield


@contextlib.contextmanager
def criterion(n, detail=""):
    ok = False
    info = {"detail": detail}
    try:
        yield info
        ok = True
    finally:
        extra = f"  [{info['detail']}]" if info["detail"] else ""
        conftest.ACCEPTANCE[n] = f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {TITLES[n]}{extra}"


# ---------------------------------------------------------------- shared toy runs

@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    D.export_dataset(root, D.DatasetConfig(seed=SEED))
    return root


@pytest.fixture(scope="module")
def toy(toy_root):
    return D.load_dataset(toy_root)


@pytest.fixture(scope="module")
def hp():
    return M.HyperParams().validate()


def _fit(ds, hp, idx=None, zero=False):
    idx = np.arange(len(ds)) if idx is None else idx
    params = M.build_params(hp, SEED)
    memory = M.MemoryBank.zeros(len(idx), hp.F_dim) if zero else M.MemoryBank.random(len(idx), hp.F_dim, [SEED, 1])
    F0 = memory.F.data.copy()
    views = ds.views[idx]
    hist = M.fit_known_test(params, memory, views, D.resize_nearest(views, params.U.out_resolution), hp, seed=SEED)
    return params, memory, hist, F0


@pytest.fixture(scope="module")
def trainable_run(toy, hp):
    return _fit(toy, hp)


@pytest.fixture(scope="module")
def zero_run(toy, hp):
    return _fit(toy, hp, zero=True)


@pytest.fixture(scope="module")
def train_split_run(toy, hp):
    return _fit(toy, hp, idx=np.flatnonzero(toy.mask("train")))


# ---------------------------------------------------------------- 1

def test_c01_gradient_suite():
    with criterion(1) as info:
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        errs = {}
        a, b = dtensor(rng, 3, 4), dtensor(rng, 4, 2)
        errs["matmul"] = check_grads(lambda: T.sum(T.tanh(T.matmul(a, b))), [a, b])
        x, k, kb = dtensor(rng, 2, 3, 7, 7), dtensor(rng, 4, 3, 3, 3), dtensor(rng, 4)
        errs["conv2d"] = check_grads(lambda: T.sum(T.tanh(T.conv2d(x, k, kb, 2, 1))), [x, k, kb])
        y, dk, db = dtensor(rng, 2, 3, 4, 4), dtensor(rng, 3, 2, 3, 3), dtensor(rng, 2)
        errs["deconv2d"] = check_grads(lambda: T.sum(T.tanh(T.deconv2d(y, dk, db, 2, 1, 1))), [y, dk, db])
        p, q = dtensor(rng, 5), dtensor(rng, 5)
        pos = Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True, precision="double")
        w = Tensor(rng.normal(size=5), precision="double")
        for kind in ("sigmoid", "tanh", "leaky_relu"):
            errs[kind] = check_grads(lambda: T.sum(T.mul(T.pointwise(kind, p), w)), [p])
        errs["log"] = check_grads(lambda: T.sum(T.mul(T.pointwise("log", pos), w)), [pos])
        for kind in ("mul", "add", "sub"):
            errs[kind] = check_grads(lambda: T.sum(T.tanh(T.pointwise(kind, p, q))), [p, q])
        errs["l2_loss"] = check_grads(lambda: T.l2_loss(p, q), [p, q])
        g = L.GruCellParams.create(3, 4, np.random.default_rng(1), "double")
        for t in g.tensors():
            t.data = rng.normal(size=t.shape) * 0.5
        gx, gh = dtensor(rng, 3), dtensor(rng, 4)
        errs["gru_step"] = check_grads(lambda: T.sum(T.tanh(L.gru_step(g, gx, gh))), [g.W_z, g.U_h, g.b_r, gx, gh])
        enc = L.ViewEncoderParams.create(8, 4, (2,), np.random.default_rng(2), "double")
        U = L.GeneratorHeadParams.create(4, np.random.default_rng(3), "double")
        Dp = L.DiscriminatorParams.create(64, (2, 2, 2, 2), np.random.default_rng(4), "double")
        E_ = L.GruCellParams.create(4, 64, np.random.default_rng(5), "double")
        for t in enc.tensors() + U.tensors() + Dp.tensors() + E_.tensors():
            t.data = t.data * 20
        img = dtensor(rng, 3, 8, 8)

        def chain():
            f = L.encode_view(enc, img)
            h = L.gru_step(E_, f, Tensor(np.zeros(64), precision="double"))
            return T.log(L.discriminate(Dp, L.generate_center(U, h)))

        errs["encoder->U->D"] = check_grads(chain, [img, enc.fc.W, U.kernels[-1], Dp.fc.W])
        elapsed = time.perf_counter() - t0
        worst = max(errs, key=errs.get)
        info["detail"] = f"worst {worst} {errs[worst]:.1e}, {elapsed:.1f}s"
        assert all(e < 1e-4 for e in errs.values()), errs
        assert elapsed < 60


# ---------------------------------------------------------------- 2

def test_c02_architecture_geometry():
    with criterion(2) as info:
        t0 = time.perf_counter()
        U = L.GeneratorHeadParams.create(256, np.random.default_rng(0))
        Dp = L.DiscriminatorParams.create(64, (64, 128, 256, 512), np.random.default_rng(0))
        with T.no_grad():
            out, maps = L.generate_center(U, Tensor(np.zeros(4096, np.float32)), return_maps=True)
            trunk = L.discriminator_trunk(Dp, Tensor(np.zeros((1, 3, 64, 64), np.float32)))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{elapsed:.2f}s"
        assert U.seed_length == 4096 and len(U.kernels) == 4
        assert [m.shape[-1] for m in maps] == [4, 8, 16, 32, 64] and out.shape == (3, 64, 64)
        assert trunk.shape == (1, 512, 4, 4)
        assert elapsed < 1.0


# ---------------------------------------------------------------- 3

def test_c03_loss_identities():
    with criterion(3):
        rng = np.random.default_rng(0)
        for _ in range(20):
            u, r, d, u2, r2, d2 = rng.normal(size=6)
            al, be = rng.uniform(0, 5), rng.uniform(0, 1)
            f = lambda a, b, c: M.loss_total(Tensor(a, precision="double"), Tensor(b, precision="double"),
                                             Tensor(c, precision="double"), al, be).item()
            assert f(u, r, d) == u + al * r + be * d
            assert f(u + u2, r + r2, d + d2) == pytest.approx(f(u, r, d) + f(u2, r2, d2), rel=1e-14, abs=1e-14)
        half = Tensor(0.5, precision="double")
        assert M.loss_discriminator(half, half).item() == 2 * math.log(2)
        img = Tensor(rng.normal(size=(3, 8, 8)), precision="double")
        assert M.loss_center(img, img).item() == 0.0
        feats = Tensor(rng.normal(size=(4, 6)), precision="double")
        assert M.loss_neighbors(feats, feats).item() == 0.0
        probs = np.linspace(0.01, 0.99, 99)
        vals = [M.loss_adversarial(Tensor(p, precision="double")).item() for p in probs]
        assert np.all(np.diff(vals) < 0)


# ---------------------------------------------------------------- 4 5 6 7

def test_c04_toy_descent(trainable_run):
    with criterion(4) as info:
        _, _, hist, _ = trainable_run
        info["detail"] = f"L_U {hist[0].l_u:.1f} -> {hist[-1].l_u:.1f} over {len(hist)} epochs"
        assert len(hist) == 30
        assert all(np.isfinite([h.l_u, h.l_r, h.l_d2u, h.total, h.l_d]).all() for h in hist)
        assert hist[-1].l_u < 0.5 * hist[0].l_u


def test_c05_trainable_beats_zero_memory(trainable_run, zero_run):
    with criterion(5) as info:
        a, z = trainable_run[2][-1].total, zero_run[2][-1].total
        info["detail"] = f"final L {a:.1f} vs zero-F {z:.1f}"
        assert a < z


def test_c06_discriminability(toy, trainable_run):
    with criterion(6) as info:
        _, memory, _, F0 = trainable_run
        train = toy.mask("train")
        acc, _ = E.classify(memory.F.data, toy.labels, train)
        base, _ = E.classify(F0, toy.labels, train)
        info["detail"] = f"{acc:.3f} vs random memory {base:.3f}"
        assert acc >= 0.80
        assert acc - base >= 0.25


def test_c07_aggregation(toy, hp, trainable_run, zero_run):
    with criterion(7) as info:
        params, memory, _, _ = trainable_run
        table = E.compare_aggregation(params, memory, toy.views, toy.labels, toy.mask("train"), hp,
                                      zero_params=zero_run[0])
        info["detail"] = " ".join(f"{k} {v[0]:.3f}" for k, v in table.items())
        ours = table["Ours"]
        for col in E.AGGREGATION_COLUMNS[:-1]:
            assert ours[0] >= table[col][0] and ours[1] >= table[col][1], col


# ---------------------------------------------------------------- 8

def test_c08_unknown_test(toy, hp, train_split_run):
    with criterion(8) as info:
        params, memory, _, _ = train_split_run
        test_idx = np.flatnonzero(toy.mask("test"))
        views = toy.views[test_idx]
        snap = params.snapshot()
        res = M.infer_unknown_test(params, views, D.resize_nearest(views, params.U.out_resolution), hp,
                                   seed=[SEED, 2], iters=50)
        assert all(np.array_equal(snap[k], t.data) for k, t in params.named_tensors())
        steps = np.diff(res.history, axis=0)
        assert res.history.shape == (51, len(test_idx))
        assert np.all(steps < 0), f"{int((steps >= 0).sum())} non-decreasing steps"
        train = toy.mask("train")
        clf = E.train_linear_classifier(memory.F.data, toy.labels[train])
        acc, _ = E.accuracy(clf.predict(res.memory.F.data), toy.labels[test_idx])
        chance = 1 / len(toy.class_names)
        info["detail"] = f"held-out accuracy {acc:.3f} vs chance {chance:.3f}"
        assert acc > chance


# ---------------------------------------------------------------- 9

def test_c09_metric_oracles():
    with criterion(9):
        def brute(rel):
            hits = [sum(rel[: i + 1]) / (i + 1) for i in range(len(rel)) if rel[i]]
            return sum(hits) / len(hits)

        for n in range(1, 7):
            rankings = [r for r in itertools.product([False, True], repeat=n) if any(r)]
            for rel in rankings:
                assert E.average_precision(rel) == pytest.approx(brute(rel), rel=1e-15)
            lists = [E.RankedList(i, np.arange(n), np.zeros(n), np.array(r)) for i, r in enumerate(rankings)]
            assert E.retrieval_metrics(lists).mAP == pytest.approx(np.mean([brute(r) for r in rankings]), rel=1e-14)
        assert E.average_precision([1, 0, 1]) == pytest.approx(5 / 6, rel=1e-15)
        assert E.ndcg([0, 1]) == 1 / math.log2(3)


# ---------------------------------------------------------------- 10

def test_c10_determinism_and_persistence(toy, hp, trainable_run, tmp_path):
    with criterion(10):
        small = hp.replace(epochs=2)
        idx = np.arange(0, len(toy), 10)
        views = toy.views[idx]
        targets = D.resize_nearest(views, 64)

        def fresh():
            return M.build_params(small, SEED), M.MemoryBank.random(len(idx), small.F_dim, [SEED, 1])

        p1, m1 = fresh()
        M.fit_known_test(p1, m1, views, targets, small, seed=SEED)
        p2, m2 = fresh()
        M.fit_known_test(p2, m2, views, targets, small, seed=SEED)
        assert np.array_equal(m1.F.data, m2.F.data)
        # resume through a serialized checkpoint after epoch 1
        p3, m3 = fresh()
        M.fit_known_test(p3, m3, views, targets, small.replace(epochs=1), seed=SEED)
        blob = C.pack(p3, m3, small).to_bytes()
        _, p4, m4 = C.unpack(C.Checkpoint.from_bytes(blob))
        M.fit_known_test(p4, m4, views, targets, small, seed=SEED, start_epoch=1)
        assert np.array_equal(m1.F.data, m4.F.data)
        assert all(np.array_equal(a.data, b.data) for (_, a), (_, b) in zip(p1.named_tensors(), p4.named_tensors()))
        # byte-identical round trip of the full toy run
        params, memory, _, _ = trainable_run
        path = C.pack(params, memory, hp, {"seed": SEED}).save(tmp_path / "a.vipg")
        again = C.Checkpoint.load(path).save(tmp_path / "b.vipg")
        assert path.read_bytes() == again.read_bytes()


# ---------------------------------------------------------------- 11

def test_c11_renderer():
    with criterion(11) as info:
        worst = 0.0
        rig = R.CameraRig(V=12)
        for i, name in enumerate(R.CLASSES):
            mesh = R.make_primitive(name, 100 + i)
            orig = np.stack([v.image for v in R.render_sequence(mesh, rig, 32)])
            rot = np.stack([v.image for v in R.render_sequence(mesh.rotated(360.0 / rig.V), rig, 32)])
            worst = max(worst, float(np.abs(rot - np.roll(orig, -1, axis=0)).mean()))
        info["detail"] = f"worst mean per-pixel error {worst:.4f}"
        assert worst < 0.02
        # two overlapping triangles at depths 0.5 and 0.9, checked pixel by pixel in both draw orders
        for order in (("near", "far"), ("far", "near")):
            test_renderer.test_two_triangle_zbuffer(order)


# ---------------------------------------------------------------- 12

def test_c12_ablation(toy_root, tmp_path):
    with criterion(12) as info:
        out = tmp_path / "ablate"
        assert cli.main(["ablate", "--data", str(toy_root), "--out", str(out), "--epochs", "1", "--grid", "table1"]) == 0
        header, rows = E.read_csv(out / "ablation.csv")
        assert len(rows) == 9 and [r[0] for r in rows] == list(cli.TABLE1_GRID)

        # (0,0): one step changes the generator exactly as an L_U-only step does
        hp0 = M.HyperParams(V=6, N=2, F_dim=16, d_f=16, d_h=64, gen_c=4, resolution=16, enc_channels=(4,),
                            disc_channels=(2, 2, 2, 2), alpha=0.0, beta=0.0, precision="double")
        rng = np.random.default_rng(0)
        views = rng.uniform(-1, 1, size=(2, 6, 3, 16, 16))
        targets = D.resize_nearest(views, 64)
        secs = M.all_sections(2, 6, 2)[:5]
        pa, ma = M.build_params(hp0, 1), M.MemoryBank.random(2, 16, 2, "double")
        pb, mb = M.build_params(hp0, 1), ma.copy()
        before = pa.snapshot()
        M.train_step(pa, ma, secs, views, targets, hp0)
        batch = M.Batch.from_sections(secs)
        g = M.generator_forward(pb, mb.rows(batch.shapes), batch.images(views))
        T.backward(M.loss_center(g.center, Tensor(batch.center_images(targets))))
        M._update(pb.generator_named(), hp0.lr, len(secs), pb.opt_g, hp0)
        mb.step(hp0.eps)
        r_names = [n for n, _ in pa.named_tensors() if n.startswith("R.")]
        after = pa.snapshot()
        assert r_names and all(np.array_equal(before[n], after[n]) for n in r_names)
        for (n, a), (_, b) in zip(pa.generator_named(), pb.generator_named()):
            assert np.allclose(a.data - before[n], b.data - before[n], rtol=1e-10, atol=1e-14), n
        assert np.allclose(ma.F.data, mb.F.data, rtol=1e-10, atol=1e-14)
        info["detail"] = "9 rows; (0,0) step matches L_U-only step, R unchanged"
