import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from vipgan import checkpoint as C
from vipgan import cli
from vipgan import evaluation as E
from vipgan import model as M

TINY_CFG = """\
# tiny geometry so every command runs in seconds
V = 6
N = 2
resolution = 16
F_dim = 16
d_f = 16
d_h = 64
gen_c = 4
enc_channels = 4
disc_channels = 2, 2, 2, 2
batch_size = 12
epochs = 2
unknown_iters = 5
classes = cube, cone
instances_per_class = 4
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert run("gen-data", "--config", cfg, "--out", root / "data", "--seed", 3) == 0
    assert run("train", "--config", cfg, "--data", root / "data", "--out", root / "run") == 0
    return root, cfg


def test_gen_data_deterministic(env, tmp_path):
    root, cfg = env
    assert run("--config", cfg, "--seed", 3, "gen-data", "--out", tmp_path / "d") == 0
    for f in (root / "data").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "d" / f.relative_to(root / "data")).read_bytes()
    assert not (tmp_path / "d" / ".partial").exists() and not (tmp_path / "d" / ".lock").exists()


def test_gen_data_bad_class(env, tmp_path, capsys):
    _, cfg = env
    assert run("gen-data", "--config", cfg, "--set", "classes=cube,blob", "--out", tmp_path / "d") == 2
    assert "blob" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_default_dataset_config():
    from vipgan.config import RunConfig
    cfg = RunConfig()
    assert (len(cfg.classes), cfg.instances_per_class, cfg.hp.V, cfg.hp.resolution) == (6, 20, 12, 32)
    assert (cfg.hp.alpha, cfg.hp.beta, cfg.hp.N) == (3.0, 0.05, 4)


def test_train_outputs(env):
    root, _ = env
    header, rows = E.read_csv(root / "run" / "losses.csv")
    assert header == list(cli.LOSS_HEADER) and [r[0] for r in rows] == ["1", "2"]
    ck = C.Checkpoint.load(root / "run" / "checkpoint.vipg")
    assert ck.metadata["epoch"] == 2 and len(ck.metadata["ids"]) == 8


def test_resume_matches_uninterrupted(env, tmp_path):
    root, cfg = env
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path, "--epochs", 1) == 0
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path, "--resume") == 0
    a = C.Checkpoint.load(root / "run" / "checkpoint.vipg")
    b = C.Checkpoint.load(tmp_path / "checkpoint.vipg")
    assert np.array_equal(a.tensors["memory.F"], b.tensors["memory.F"])
    assert (root / "run" / "losses.csv").read_bytes() == (tmp_path / "losses.csv").read_bytes()


def test_same_seed_same_memory(env, tmp_path):
    root, cfg = env
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path) == 0
    a = (root / "run" / "checkpoint.vipg").read_bytes()
    assert a == (tmp_path / "checkpoint.vipg").read_bytes()


def test_freeze_memory_zero(env, tmp_path):
    root, cfg = env
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path, "--freeze-memory-zero") == 0
    ck = C.Checkpoint.load(tmp_path / "checkpoint.vipg")
    assert not ck.tensors["memory.F"].any() and not ck.tensors["memory.trainable"].any()


def test_features_classify_retrieve(env, tmp_path):
    root, cfg = env
    feats = tmp_path / "f.csv"
    assert run("features", "--config", cfg, "--checkpoint", root / "run" / "checkpoint.vipg", "--features", feats) == 0
    ids, classes, splits, X = cli.read_features(feats)
    assert sorted(ids) == sorted(set(ids)) and len(ids) == 8 and np.isfinite(X).all() and X.shape[1] == 16
    assert run("classify", "--features", feats, "--out", tmp_path) == 0
    header, rows = E.read_csv(tmp_path / "classify.csv")
    assert header[-2:] == ["instance_acc", "class_acc"] and len(rows) == 1
    assert run("retrieve", "--features", feats, "--out", tmp_path, "--split", "all") == 0
    header, rows = E.read_csv(tmp_path / "retrieval.csv")
    assert [r[0] for r in rows] == ["micro", "macro"] and "mAP" in header
    assert E.read_csv(tmp_path / "pr_curve.csv")[0] == ["recall", "precision"]
    a, b = ids[0], ids[1]
    assert run("algebra", "--features", feats, "--out", tmp_path, a, b, b, "-k", 2) == 0
    _, rows = E.read_csv(tmp_path / "algebra.csv")
    near = E.rank_gallery(X[0], np.delete(X, [0, 1], axis=0), "cosine", np.delete(np.array(ids), [0, 1])).ids[:2]
    assert [r[4] for r in rows] == list(near)
    assert run("algebra", "--features", feats, "--out", tmp_path, a, b, b, "-k", 99) == 2


def test_unknown_test_mode(env, tmp_path):
    root, cfg = env
    out = tmp_path / "u"
    assert run("train", "--config", cfg, "--data", root / "data", "--out", out, "--mode", "unknown-test") == 0
    ck_path = out / "checkpoint.vipg"
    before = ck_path.read_bytes()
    assert len(C.Checkpoint.from_bytes(before).metadata["ids"]) == 6
    assert run("features", "--config", cfg, "--out", out, "--data", root / "data") == 0
    assert ck_path.read_bytes() == before
    ids, _, splits, X = cli.read_features(out / "features.csv")
    assert len(ids) == 8 and splits.count("test") == 2 and np.isfinite(X).all()


def test_aggregate(env, tmp_path):
    root, cfg = env
    assert run("aggregate", "--config", cfg, "--data", root / "data", "--out", tmp_path,
               "--checkpoint", root / "run" / "checkpoint.vipg") == 0
    header, rows = E.read_csv(tmp_path / "aggregation.csv")
    assert header[1:] == list(E.AGGREGATION_COLUMNS) and len(rows) == 2


def test_ablate_rejects_odd_n_before_training(env, tmp_path):
    root, cfg = env
    assert run("ablate", "--config", cfg, "--data", root / "data", "--out", tmp_path, "--grid", "alpha=1;N=3") == 2
    assert not (tmp_path / "ablation.csv").exists()
    assert run("ablate", "--config", cfg, "--data", root / "data", "--out", tmp_path, "--grid", "alpha") == 2


def test_ablate_custom_grid(env, tmp_path):
    root, cfg = env
    assert run("ablate", "--config", cfg, "--data", root / "data", "--out", tmp_path, "--epochs", 1,
               "--grid", "alpha=3 beta=0.05;R-only;U-only") == 0
    header, rows = E.read_csv(tmp_path / "ablation.csv")
    assert [r[0] for r in rows] == ["alpha=3 beta=0.05", "R-only", "U-only"] and header[-3:-1] == ["instance_acc",
                                                                                                 "class_acc"]


def test_parse_cell_definitions():
    base = M.HyperParams()
    assert cli.parse_cell("R-only", base)[1].use_center is False
    d = cli.parse_cell("D-only", base)[1]
    assert (d.use_center, d.alpha) == (False, 0.0)
    u = cli.parse_cell("alpha=0 beta=0", base)[1]
    assert (u.alpha, u.beta) == (0.0, 0.0)
    assert "complex" in cli.parse_cell("(0,0)C", base)[2]
    assert len(cli.TABLE1_GRID) == 9


def test_report(env, tmp_path):
    root, cfg = env
    assert run("report", "--run", tmp_path) == 2
    assert run("report", "--config", cfg, "--run", root / "run", "--set", "report_sections=3") == 0
    pairs = sorted((root / "run" / "report").glob("*.ppm"))
    assert len(pairs) == 6
    assert (root / "run" / "summary.txt").read_text().count("losses.csv") == 1
    assert pairs[0].read_bytes().startswith(b"P6\n64 64\n255\n")


def test_exit_codes(env, tmp_path, monkeypatch):
    root, cfg = env
    assert run("train", "--config", cfg, "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 3
    bad = tmp_path / "bad.vipg"
    bad.write_bytes(b"VIPG\x07\0\0\0")
    assert run("features", "--config", cfg, "--checkpoint", bad) == 3
    assert run("train", "--config", cfg, "--set", "nonsense=1") == 2
    assert run("train", "--config", cfg, "--set", "alpha=-1", "--data", root / "data") == 2
    assert run("train", "--config", tmp_path / "missing.cfg") == 2
    assert run("frobnicate") == 2

    def boom(*a, **k):
        raise M.NumericError("loss became nan")

    monkeypatch.setattr(M, "train_step", boom)
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "n") == 4


def test_lock_prevents_second_owner(env, tmp_path):
    root, cfg = env
    (tmp_path / ".lock").write_text("123")
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "vipgan", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "train", "features", "classify", "retrieve", "ablate", "report"):
        assert cmd in r.stdout
