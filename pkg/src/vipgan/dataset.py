"""Multi-view datasets on disk: P6 images plus a tab-separated manifest.

Layout under the dataset root::

    manifest.tsv
    <split>/<class>/<shape_id>/view_00.ppm ... view_<V-1>.ppm

``manifest.tsv`` starts with ``config`` lines (``config<TAB>key<TAB>value``)
followed by one ``record`` line per shape::

    record<TAB>split<TAB>class<TAB>shape_id<TAB>path_0<TAB>...<TAB>path_{V-1}

Paths are relative to the root. Any external renderer that writes this
layout can feed the training pipeline.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .renderer import CLASSES, CameraRig, make_primitive, render_sequence

MANIFEST = "manifest.tsv"
SPLITS = ("train", "test")


class DatasetError(Exception):
    """A manifest or one of its images could not be loaded."""


# ---------------------------------------------------------------- P6 images

def to_uint8(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` in [-1, 1] to ``(H, W, 3)`` bytes, clamping out-of-range values."""
    v = np.clip((np.asarray(image, np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(v).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` bytes to ``(3, H, W)`` float32 with 0 -> -1 and 255 -> +1."""
    return (pixels.astype(np.float32).transpose(2, 0, 1) / np.float32(127.5) - np.float32(1.0))


def write_ppm(path, image: np.ndarray) -> None:
    px = to_uint8(image)
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file as ``(H, W, 3)`` uint8."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DatasetError(f"{path}: pixel data truncated")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class Record:
    split: str
    class_name: str
    shape_id: str
    paths: tuple


@dataclass
class Manifest:
    V: int
    resolution: int
    records: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write(self, root) -> Path:
        path = Path(root) / MANIFEST
        lines = [f"config\tV\t{self.V}", f"config\tresolution\t{self.resolution}"]
        lines += [f"config\t{k}\t{v}" for k, v in sorted(self.extra.items())]
        for r in self.records:
            lines.append("\t".join(("record", r.split, r.class_name, r.shape_id) + tuple(r.paths)))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        if not path.exists():
            raise DatasetError(f"manifest not found: {path}")
        config, records = {}, []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "config" and len(parts) == 3:
                config[parts[1]] = parts[2]
            elif parts[0] == "record" and len(parts) >= 5:
                records.append(Record(parts[1], parts[2], parts[3], tuple(parts[4:])))
            else:
                raise DatasetError(f"{path}:{lineno}: malformed manifest line")
        try:
            V, res = int(config.pop("V")), int(config.pop("resolution"))
        except (KeyError, ValueError):
            raise DatasetError(f"{path}: manifest must declare integer V and resolution") from None
        return cls(V, res, records, config)


# ---------------------------------------------------------------- export

@dataclass
class DatasetConfig:
    classes: tuple = CLASSES
    instances_per_class: int = 20
    split_fraction: float = 0.8
    V: int = 12
    resolution: int = 32
    seed: int = 0
    elevation: float = 30.0
    distance: float = 2.5
    fov: float = 40.0

    def validate(self) -> "DatasetConfig":
        bad = [c for c in self.classes if c not in CLASSES]
        if bad:
            raise ValueError(f"unknown class {bad[0]!r}; expected one of {', '.join(CLASSES)}")
        if self.instances_per_class < 2:
            raise ValueError("instances_per_class must be >= 2 so both splits are non-empty")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.V < 1 or self.resolution < 4:
            raise ValueError("V must be >= 1 and resolution >= 4")
        return self


def split_counts(n: int, fraction: float) -> int:
    """Number of training instances per class (at least one in each split)."""
    return int(min(max(round(n * fraction), 1), n - 1))


def export_dataset(root, cfg: DatasetConfig) -> Manifest:
    """Render every primitive instance and write images plus manifest under ``root``."""
    cfg.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise OSError(f"dataset directory is not writable: {root}")
    rig = CameraRig(cfg.V, cfg.elevation, cfg.distance, cfg.fov)
    manifest = Manifest(cfg.V, cfg.resolution, extra={"seed": str(cfg.seed)})
    for ci, cls in enumerate(cfg.classes):
        rng = np.random.default_rng([int(cfg.seed) % 2**64, ci])
        n_train = split_counts(cfg.instances_per_class, cfg.split_fraction)
        train_idx = set(rng.permutation(cfg.instances_per_class)[:n_train].tolist())
        for i in range(cfg.instances_per_class):
            split = "train" if i in train_idx else "test"
            shape_id = f"{cls}_{i:03d}"
            mesh = make_primitive(cls, int(rng.integers(2**63)))
            rel_dir = Path(split) / cls / shape_id
            (root / rel_dir).mkdir(parents=True, exist_ok=True)
            paths = []
            for view in render_sequence(mesh, rig, cfg.resolution, shape_id):
                rel = rel_dir / f"view_{view.view_index:02d}.ppm"
                write_ppm(root / rel, view.image)
                paths.append(rel.as_posix())
            manifest.records.append(Record(split, cls, shape_id, tuple(paths)))
    manifest.write(root)
    return manifest


# ---------------------------------------------------------------- load

@dataclass
class ViewDataset:
    root: Path
    ids: list
    class_names: list  # sorted unique class names; labels index into it
    labels: np.ndarray
    splits: np.ndarray
    views: np.ndarray = field(repr=False)  # (S, V, 3, H, W) float32 in [-1, 1]

    @property
    def V(self) -> int:
        return self.views.shape[1]

    @property
    def resolution(self) -> int:
        return self.views.shape[-1]

    def __len__(self):
        return len(self.ids)

    def mask(self, split: str) -> np.ndarray:
        return self.splits == split

    def subset(self, idx) -> "ViewDataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return ViewDataset(self.root, [self.ids[i] for i in idx], self.class_names, self.labels[idx],
                           self.splits[idx], self.views[idx])

    def targets(self, out_resolution: int) -> np.ndarray:
        """Views resampled (nearest) to the generator's output resolution."""
        return resize_nearest(self.views, out_resolution)


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images
    rows = ((np.arange(size) + 0.5) * h / size).astype(np.intp)
    cols = ((np.arange(size) + 0.5) * w / size).astype(np.intp)
    return np.ascontiguousarray(images[..., rows[:, None], cols[None, :]])


def load_dataset(manifest_path) -> ViewDataset:
    """Load every record's views; errors name the offending record and file."""
    manifest = Manifest.read(manifest_path)
    path = Path(manifest_path)
    root = path if path.is_dir() else path.parent
    seen = set()
    views = np.empty((len(manifest.records), manifest.V, 3, manifest.resolution, manifest.resolution), np.float32)
    for n, rec in enumerate(manifest.records):
        if rec.shape_id in seen:
            raise DatasetError(f"duplicate shape id {rec.shape_id!r}")
        seen.add(rec.shape_id)
        if rec.split not in SPLITS:
            raise DatasetError(f"record {rec.shape_id}: unknown split {rec.split!r}")
        if len(rec.paths) != manifest.V:
            raise DatasetError(f"record {rec.shape_id}: {len(rec.paths)} views listed, manifest says V={manifest.V}")
        for k, rel in enumerate(rec.paths):
            f = root / rel
            if not f.exists():
                raise DatasetError(f"record {rec.shape_id}: missing view file {f}")
            px = read_ppm(f)
            if px.shape[:2] != (manifest.resolution, manifest.resolution):
                raise DatasetError(f"record {rec.shape_id}: {f} is {px.shape[1]}x{px.shape[0]}, "
                                   f"expected {manifest.resolution}x{manifest.resolution}")
            views[n, k] = from_uint8(px)
    class_names = sorted({r.class_name for r in manifest.records})
    labels = np.array([class_names.index(r.class_name) for r in manifest.records], np.int64)
    splits = np.array([r.split for r in manifest.records])
    return ViewDataset(root, [r.shape_id for r in manifest.records], class_names, labels, splits, views)
