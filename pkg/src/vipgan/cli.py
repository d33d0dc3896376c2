"""Command-line front end.

Commands: gen-data, train, features, classify, retrieve, algebra, aggregate,
ablate, report. Global flags (``--config``, ``--seed``, ``--out``,
``--resume``, ``--set key=value``) may appear before or after the command.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import dataset as D
from . import evaluation as E
from . import model as M
from .config import ConfigError, RunConfig, load_config
from .tensor import ContractError

log = logging.getLogger("vipgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.vipg"
LOSS_CSV = "losses.csv"
FEATURES_CSV = "features.csv"
LOSS_HEADER = ("epoch", "L_U", "L_R", "L_D2U", "L", "neg_L_D")
TABLE1_GRID = ("alpha=1 beta=0.05", "alpha=3 beta=0.05", "alpha=5 beta=0.05", "alpha=3 beta=0.1",
               "alpha=3 beta=0.01", "alpha=3 beta=0", "alpha=0 beta=0.01", "alpha=0 beta=0", "(0,0)C")


class DataError(Exception):
    pass


# ---------------------------------------------------------------- plumbing

@contextlib.contextmanager
def dir_lock(directory: Path):
    """Exclusive ownership of an output directory for the life of one command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{directory} is locked by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _dataset_path(cfg: RunConfig, args) -> Path:
    path = getattr(args, "data", None) or cfg.data
    if not path:
        raise ConfigError("data: no dataset given (use --data or 'data = <dir>' in the config)")
    return Path(path)


def _load_data(cfg, args) -> D.ViewDataset:
    ds = D.load_dataset(_dataset_path(cfg, args))
    if ds.V != cfg.hp.V:
        raise ConfigError(f"V: dataset has V={ds.V} but config says V={cfg.hp.V}")
    if ds.resolution != cfg.hp.resolution:
        raise ConfigError(f"resolution: dataset is {ds.resolution}px but config says {cfg.hp.resolution}")
    return ds


def _checkpoint_path(cfg, args) -> Path:
    return Path(getattr(args, "checkpoint", None) or Path(cfg.out) / CHECKPOINT)


def _features_path(cfg, args) -> Path:
    return Path(getattr(args, "features", None) or Path(cfg.out) / FEATURES_CSV)


def read_features(path) -> tuple[list, list, list, np.ndarray]:
    """Parse a feature CSV into (ids, classes, splits, matrix)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    header, rows = E.read_csv(path)
    if header[:3] != ["shape_id", "class", "split"] or not rows:
        raise DataError(f"{path}: not a feature file")
    ids = [r[0] for r in rows]
    classes = [r[1] for r in rows]
    splits = [r[2] for r in rows]
    X = np.array([[float(v) for v in r[3:]] for r in rows])
    if not np.isfinite(X).all():
        raise DataError(f"{path}: non-finite feature values")
    return ids, classes, splits, X


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    root = Path(cfg.out)
    dcfg = D.DatasetConfig(tuple(cfg.classes), cfg.instances_per_class, cfg.split_fraction, cfg.hp.V,
                           cfg.hp.resolution, cfg.seed, cfg.elevation, cfg.distance, cfg.fov)
    try:
        dcfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    with dir_lock(root):
        marker = root / ".partial"
        marker.touch()
        manifest = D.export_dataset(root, dcfg)
        marker.unlink()
    print(f"wrote {len(manifest.records)} shapes to {root}")
    return EXIT_OK


def _train_state(cfg: RunConfig, ds: D.ViewDataset, args):
    """Fresh or resumed (params, memory, history, meta, start_epoch, shape indices)."""
    hp = cfg.hp
    out = Path(cfg.out)
    ckpt_path = out / CHECKPOINT
    if cfg.mode == "unknown-test":
        idx = np.flatnonzero(ds.mask("train"))
    else:
        idx = np.arange(len(ds))
    if args.resume and ckpt_path.exists():
        ck = C.Checkpoint.load(ckpt_path)
        hp_saved, params, memory = C.unpack(ck)
        meta = ck.metadata
        if meta.get("ids") != [ds.ids[i] for i in idx]:
            raise DataError(f"{ckpt_path} was trained on different shapes")
        cfg.hp = hp_saved.replace(epochs=hp.epochs)
        history = [M.EpochRecord(**h) for h in meta.get("history", [])]
        return params, memory, history, meta, int(meta.get("epoch", 0)), idx
    if args.resume:
        log.warning("no checkpoint at %s; starting fresh", ckpt_path)
    params = M.build_params(hp, cfg.seed)
    zero = getattr(args, "freeze_memory_zero", False)
    n = len(idx)
    memory = M.MemoryBank.zeros(n, hp.F_dim, False, hp.precision) if zero else \
        M.MemoryBank.random(n, hp.F_dim, [cfg.seed, 1], hp.precision)
    meta = {"ids": [ds.ids[i] for i in idx], "classes": [ds.class_names[ds.labels[i]] for i in idx],
            "splits": [str(ds.splits[i]) for i in idx], "seed": cfg.seed, "mode": cfg.mode,
            "zero_memory": bool(zero), "dataset": str(_dataset_path(cfg, args))}
    return params, memory, [], meta, 0, idx


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _load_data(cfg, args)
    out = Path(cfg.out)
    with dir_lock(out):
        params, memory, history, meta, start, idx = _train_state(cfg, ds, args)
        hp = cfg.hp
        views = ds.views[idx]
        targets = D.resize_nearest(views, params.U.out_resolution)

        def on_epoch(rec):
            history.append(rec)
            meta["epoch"] = rec.epoch
            meta["history"] = [vars(h) for h in history]
            C.pack(params, memory, hp, meta).save(out / CHECKPOINT)
            E.write_csv(out / LOSS_CSV, LOSS_HEADER,
                        [(h.epoch, h.l_u, h.l_r, h.l_d2u, h.total, h.l_d) for h in history])
            print(f"epoch {rec.epoch}/{hp.epochs}  L_U {rec.l_u:.3f}  L_R {rec.l_r:.4f}  L {rec.total:.3f}",
                  flush=True)

        if start >= hp.epochs:
            print(f"already trained for {start} epochs")
        M.fit_known_test(params, memory, views, targets, hp, seed=cfg.seed, start_epoch=start, on_epoch=on_epoch)
        if not (out / CHECKPOINT).exists():
            C.pack(params, memory, hp, meta).save(out / CHECKPOINT)
            E.write_csv(out / LOSS_CSV, LOSS_HEADER, [])
    return EXIT_OK


def cmd_features(cfg: RunConfig, args) -> int:
    ck = C.Checkpoint.load(_checkpoint_path(cfg, args))
    hp, params, memory = C.unpack(ck)
    meta = ck.metadata
    known = {sid: i for i, sid in enumerate(meta.get("ids", []))}
    rows = [(sid, meta["classes"][i], meta["splits"][i], memory.F.data[i]) for sid, i in known.items()]
    data = getattr(args, "data", None) or cfg.data
    if data:
        ds = D.load_dataset(data)
        new = [i for i, sid in enumerate(ds.ids) if sid not in known]
        if new:
            res = M.infer_unknown_test(params, ds.views[new], D.resize_nearest(ds.views[new], params.U.out_resolution),
                                       hp, seed=[cfg.seed, 2])
            rows += [(ds.ids[i], ds.class_names[ds.labels[i]], str(ds.splits[i]), res.memory.F.data[k])
                     for k, i in enumerate(new)]
    F = np.array([r[3] for r in rows])
    if not np.isfinite(F).all():
        raise M.NumericError("non-finite feature values")
    out = _features_path(cfg, args)
    out.parent.mkdir(parents=True, exist_ok=True)
    E.write_csv(out, ("shape_id", "class", "split") + tuple(f"f{j}" for j in range(F.shape[1])),
                [(r[0], r[1], r[2], *r[3]) for r in rows])
    print(f"wrote {len(rows)} feature rows to {out}")
    return EXIT_OK


def _split_xy(path):
    ids, classes, splits, X = read_features(path)
    y = np.array(classes)
    train = np.array([s == "train" for s in splits])
    if train.all() or not train.any():
        raise DataError(f"{path}: need both train and test rows")
    return ids, y, train, X


def cmd_classify(cfg: RunConfig, args) -> int:
    path = _features_path(cfg, args)
    _, y, train, X = _split_xy(path)
    clf = E.train_linear_classifier(X[train], y[train], cfg.svm_c)
    inst, cls = E.accuracy(clf.predict(X[~train]), y[~train])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_csv(out / "classify.csv", ("features", "n_train", "n_test", "instance_acc", "class_acc"),
                [(str(path), int(train.sum()), int((~train).sum()), inst, cls)])
    print(f"instance accuracy {inst:.4f}  class accuracy {cls:.4f}")
    return EXIT_OK


def cmd_retrieve(cfg: RunConfig, args) -> int:
    path = _features_path(cfg, args)
    ids, y, train, X = _split_xy(path)
    sel = ~train if args.split == "test" else np.ones(len(ids), bool)
    lists = E.rank_all(X[sel], y[sel], np.array(ids)[sel], cfg.metric)
    rep = E.retrieval_metrics(lists)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_csv(out / "retrieval.csv", ("averaging", "precision", "recall", "f1", "mAP", "ndcg"),
                [(name, d["precision"], d["recall"], d["f1"], d["mAP"], d["ndcg"])
                 for name, d in (("micro", rep.micro), ("macro", rep.macro))])
    E.write_csv(out / "pr_curve.csv", ("recall", "precision"), zip(rep.pr_recall, rep.pr_precision))
    if rep.excluded:
        print(f"excluded {len(rep.excluded)} queries without relevant items: {', '.join(map(str, rep.excluded))}")
    print(f"mAP {rep.mAP:.4f}  NDCG {rep.ndcg:.4f}")
    return EXIT_OK


def cmd_algebra(cfg: RunConfig, args) -> int:
    ids, classes, _, X = read_features(_features_path(cfg, args))
    pos = {sid: i for i, sid in enumerate(ids)}
    try:
        a, b, c = (pos[s] for s in (args.a, args.b, args.c))
    except KeyError as e:
        raise ConfigError(f"algebra: unknown shape id {e.args[0]!r}") from None
    try:
        hits = E.feature_algebra(X, a, b, c, args.k, cfg.metric, np.array(ids))
    except ValueError as e:
        raise ConfigError(f"k: {e}") from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_csv(out / "algebra.csv", ("a", "b", "c", "rank", "shape_id", "class"),
                [(args.a, args.b, args.c, r + 1, h, classes[pos[h]]) for r, h in enumerate(hits)])
    print(" ".join(hits))
    return EXIT_OK


def cmd_aggregate(cfg: RunConfig, args) -> int:
    ck = C.Checkpoint.load(_checkpoint_path(cfg, args))
    hp, params, memory = C.unpack(ck)
    zero_params = None
    if args.zero_checkpoint:
        zero_params = C.unpack(C.Checkpoint.load(args.zero_checkpoint))[1]
    ds = _load_data(cfg, args)
    pos = {sid: i for i, sid in enumerate(ds.ids)}
    try:
        idx = np.array([pos[s] for s in ck.metadata["ids"]])
    except KeyError as e:
        raise DataError(f"checkpoint shape {e.args[0]!r} is not in the dataset") from None
    labels = ds.labels[idx]
    train = ds.splits[idx] == "train"
    table = E.compare_aggregation(params, memory, ds.views[idx], labels, train, hp, zero_params)
    out = Path(cfg.out)
    E.write_csv(out / "aggregation.csv", ("metric",) + E.AGGREGATION_COLUMNS,
                [("instance_acc",) + tuple(table[c][0] for c in E.AGGREGATION_COLUMNS),
                 ("class_acc",) + tuple(table[c][1] for c in E.AGGREGATION_COLUMNS)])
    for c in E.AGGREGATION_COLUMNS:
        print(f"{c:14s} {table[c][0]:.4f} {table[c][1]:.4f}")
    return EXIT_OK


def parse_cell(cell: str, base: M.HyperParams) -> tuple[str, M.HyperParams, str]:
    """One grid cell: ``key=value`` overrides, or one of R-only, D-only, U-only, (0,0)C."""
    cell = cell.strip()
    note = ""
    if cell == "R-only":
        return cell, base.replace(use_center=False, beta=0.0), note
    if cell == "D-only":
        return cell, base.replace(use_center=False, alpha=0.0), note
    if cell == "U-only":
        return cell, base.replace(alpha=0.0, beta=0.0), note
    if cell == "(0,0)C":
        return cell, base.replace(alpha=0.0, beta=0.0), "complex generator not available; standard U used"
    probe = RunConfig(hp=base.replace())
    for tok in cell.replace(",", " ").split():
        if "=" not in tok:
            raise ConfigError(f"grid: malformed cell {cell!r}")
        k, v = tok.split("=", 1)
        probe.set(k.strip(), v)
    try:
        probe.hp.validate()
    except ValueError as e:
        raise ConfigError(f"grid cell {cell!r}: {e}") from None
    return cell, probe.hp, note


def read_grid(args) -> list[str]:
    if args.grid in (None, "table1"):
        return list(TABLE1_GRID)
    p = Path(args.grid)
    if p.exists():
        lines = [ln.split("#", 1)[0].strip() for ln in p.read_text(encoding="utf-8").splitlines()]
        cells = [ln for ln in lines if ln]
    else:
        cells = [c for c in args.grid.split(";") if c.strip()]
    if not cells:
        raise ConfigError("grid: no cells given")
    return cells


def cmd_ablate(cfg: RunConfig, args) -> int:
    cells = [parse_cell(c, cfg.hp) for c in read_grid(args)]  # validate all before training
    ds = _load_data(cfg, args)
    out = Path(cfg.out)
    train = ds.mask("train")
    rows = []
    with dir_lock(out):
        for name, hp, note in cells:
            if hp.V != ds.V:
                raise ConfigError(f"grid cell {name!r}: V={hp.V} needs a dataset rendered with that many views")
            params = M.build_params(hp, cfg.seed)
            memory = M.MemoryBank.random(len(ds), hp.F_dim, [cfg.seed, 1], hp.precision)
            targets = D.resize_nearest(ds.views, params.U.out_resolution)
            hist = M.fit_known_test(params, memory, ds.views, targets, hp, seed=cfg.seed)
            inst, cls = E.classify(memory.F.data, ds.labels, train, cfg.svm_c)
            last = hist[-1]
            rows.append((name, hp.alpha, hp.beta, hp.F_dim, hp.N, hp.V, hp.cgan, hp.bidirectional, hp.epochs,
                         last.l_u, last.l_r, last.total, inst, cls, note))
            print(f"{name:22s} instance {inst:.4f}  class {cls:.4f}", flush=True)
            E.write_csv(out / "ablation.csv", ("cell", "alpha", "beta", "F_dim", "N", "V", "cgan", "bidirectional",
                                               "epochs", "final_L_U", "final_L_R", "final_L", "instance_acc",
                                               "class_acc", "note"), rows)
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    run = Path(args.run or cfg.out)
    csvs = sorted(run.glob("*.csv")) if run.is_dir() else []
    ckpt = run / CHECKPOINT
    if not csvs and not ckpt.exists():
        raise ConfigError(f"report: {run} contains no run outputs")
    lines = [f"run directory: {run}"]
    if ckpt.exists():
        ck = C.Checkpoint.load(ckpt)
        hp, params, memory = C.unpack(ck)
        data = getattr(args, "data", None) or ck.metadata.get("dataset")
        lines.append(f"checkpoint: epoch {ck.metadata.get('epoch', 0)}, {params.steps} steps, {len(memory)} shapes")
        if data and Path(data).exists():
            ds = D.load_dataset(data)
            pos = {sid: i for i, sid in enumerate(ds.ids)}
            idx = np.array([pos[s] for s in ck.metadata["ids"] if s in pos])
            n = min(cfg.report_sections, len(idx) * hp.V)
            rng = np.random.default_rng([cfg.seed, 3])
            picks = rng.choice(len(idx) * hp.V, size=n, replace=False)
            img_dir = run / "report"
            img_dir.mkdir(exist_ok=True)
            base = M.build_sections(hp.V, hp.N)
            for p in picks:
                row, center = divmod(int(p), hp.V)
                sec = base[center]
                imgs = ds.views[idx[row]][list(sec.neighbors)][None]
                from .tensor import no_grad
                with no_grad():
                    g = M.generator_forward(params, memory.rows([row]), imgs.astype(params.dtype))
                truth = D.resize_nearest(ds.views[idx[row], center], params.U.out_resolution)
                stem = f"{ds.ids[idx[row]]}_view_{center:02d}"
                D.write_ppm(img_dir / f"{stem}_pred.ppm", g.center.data[0])
                D.write_ppm(img_dir / f"{stem}_true.ppm", truth)
            lines.append(f"wrote {n} predicted/true center pairs to {img_dir}")
    for path in csvs:
        header, rows = E.read_csv(path)
        lines.append(f"\n== {path.name} ({len(rows)} rows)")
        lines.append(",".join(header))
        shown = rows if len(rows) <= 12 else rows[:5] + [["..."]] + rows[-5:]
        lines += [",".join(_short(v) for v in r) for r in shown]
    (run / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def _short(v: str) -> str:
    try:
        return f"{float(v):.6g}"
    except ValueError:
        return v


# ---------------------------------------------------------------- argument parsing

COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "features": cmd_features, "classify": cmd_classify,
            "retrieve": cmd_retrieve, "algebra": cmd_algebra, "aggregate": cmd_aggregate, "ablate": cmd_ablate,
            "report": cmd_report}


def _global_flags(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="key = value config file")
    parser.add_argument("--seed", type=int, default=d, help="unsigned 64-bit seed")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--resume", action="store_true", default=d if suppress else False,
                        help="continue from the checkpoint in --out")
    parser.add_argument("--set", action="append", default=d, metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vipgan", description="View inter-prediction feature learning")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("gen-data", parents=[common], help="render the procedural dataset")
    p = sub.add_parser("train", parents=[common], help="train networks and memory")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=("known-test", "unknown-test"))
    p.add_argument("--freeze-memory-zero", action="store_true", help="all-zero, non-trainable memory baseline")
    p = sub.add_parser("features", parents=[common], help="dump memory rows (inferring unseen shapes)")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--features", help="output CSV (default <out>/features.csv)")
    p = sub.add_parser("classify", parents=[common], help="linear probe on a feature file")
    p.add_argument("--features")
    p = sub.add_parser("retrieve", parents=[common], help="retrieval metrics on a feature file")
    p.add_argument("--features")
    p.add_argument("--split", choices=("test", "all"), default="test")
    p = sub.add_parser("algebra", parents=[common], help="nearest shapes to F_a - F_b + F_c")
    p.add_argument("--features")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("c")
    p.add_argument("-k", type=int, default=5)
    p = sub.add_parser("aggregate", parents=[common], help="memory rows vs pooled encoder states")
    p.add_argument("--checkpoint")
    p.add_argument("--zero-checkpoint", help="run trained with --freeze-memory-zero")
    p.add_argument("--data")
    p = sub.add_parser("ablate", parents=[common], help="train and score a grid of settings")
    p.add_argument("--data")
    p.add_argument("--grid", help="'table1', a file with one cell per line, or cells separated by ';'")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("report", parents=[common], help="center predictions and CSV summary")
    p.add_argument("--run")
    p.add_argument("--data")
    return parser


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "epochs", None) is not None:
        cfg.hp.epochs = args.epochs
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DatasetError, DataError, C.CheckpointError, ContractError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (M.NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
