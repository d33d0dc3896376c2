"""Procedural primitives and a small z-buffered software rasterizer.

Views are rendered from a ring of cameras around the vertical axis. Camera
``k`` sits at azimuth ``360*k/V`` measured so that rotating a mesh by one
azimuth step about +y shifts its view sequence by one position: view ``k``
of the rotated mesh matches view ``k+1`` of the original.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend

CLASSES = ("cube", "sphere", "cylinder", "cone", "torus", "pyramid")
BACKGROUND = -1.0
AMBIENT = 0.25
NEAR = 0.05
DEFAULT_COLOR = (0.9, 0.9, 0.9)
# direction towards the light in camera coordinates (x right, y up, z forward)
LIGHT_DIR = np.array([-0.4, 0.6, -0.7]) / np.linalg.norm([-0.4, 0.6, -0.7])

SPHERE_RINGS, SPHERE_SEGMENTS = 16, 32
ROUND_SEGMENTS = 32
TORUS_MAJOR, TORUS_MINOR = 16, 32


@dataclass
class MeshShape:
    vertices: np.ndarray  # (n, 3)
    triangles: np.ndarray  # (t, 3) int
    class_name: str = ""
    seed: int = 0
    colors: np.ndarray | None = None  # optional per-face RGB in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def rotated(self, degrees: float) -> "MeshShape":
        """Copy rotated about +y (right-handed) by ``degrees``."""
        a = math.radians(degrees)
        c, s = math.cos(a), math.sin(a)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return MeshShape(self.vertices @ rot.T, self.triangles.copy(), self.class_name, self.seed,
                         None if self.colors is None else self.colors.copy())


@dataclass
class CameraRig:
    V: int = 12
    elevation: float = 30.0
    distance: float = 2.5
    fov: float = 40.0

    @property
    def azimuths(self) -> np.ndarray:
        return np.arange(self.V) * (360.0 / self.V)


@dataclass
class Camera:
    azimuth: float = 0.0
    elevation: float = 30.0
    distance: float = 2.5
    fov: float = 40.0


@dataclass
class RenderedView:
    image: np.ndarray = field(repr=False)  # (3, H, W) in [-1, 1]
    view_index: int = 0
    shape_id: str = ""


# ---------------------------------------------------------------- base meshes

def _cube():
    v = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    # vertex index = 4*x + 2*y + z
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return v, np.array(tris)


def _sphere(rings=SPHERE_RINGS, segs=SPHERE_SEGMENTS):
    verts = [(0.0, 0.5, 0.0)]
    for r in range(1, rings):
        phi = math.pi * r / rings
        for s in range(segs):
            th = 2 * math.pi * s / segs
            verts.append((0.5 * math.sin(phi) * math.cos(th), 0.5 * math.cos(phi), 0.5 * math.sin(phi) * math.sin(th)))
    verts.append((0.0, -0.5, 0.0))
    bottom = len(verts) - 1

    def idx(r, s):
        return 1 + (r - 1) * segs + s % segs

    tris = []
    for s in range(segs):
        tris.append((0, idx(1, s + 1), idx(1, s)))
        tris.append((bottom, idx(rings - 1, s), idx(rings - 1, s + 1)))
    for r in range(1, rings - 1):
        for s in range(segs):
            a, b, c, d = idx(r, s), idx(r, s + 1), idx(r + 1, s + 1), idx(r + 1, s)
            tris += [(a, b, c), (a, c, d)]
    return np.array(verts), np.array(tris)


def _ring(y, radius, segs):
    th = 2 * np.pi * np.arange(segs) / segs
    return np.stack([radius * np.cos(th), np.full(segs, y), radius * np.sin(th)], axis=1)


def _cylinder(segs=ROUND_SEGMENTS):
    v = np.vstack([_ring(0.5, 0.5, segs), _ring(-0.5, 0.5, segs), [[0, 0.5, 0], [0, -0.5, 0]]])
    top_c, bot_c = 2 * segs, 2 * segs + 1
    tris = []
    for s in range(segs):
        n = (s + 1) % segs
        tris += [(s, n, segs + n), (s, segs + n, segs + s)]
        tris += [(top_c, n, s), (bot_c, segs + s, segs + n)]
    return v, np.array(tris)


def _cone(segs=ROUND_SEGMENTS):
    v = np.vstack([_ring(-0.5, 0.5, segs), [[0, 0.5, 0], [0, -0.5, 0]]])
    apex, base_c = segs, segs + 1
    tris = []
    for s in range(segs):
        n = (s + 1) % segs
        tris += [(apex, n, s), (base_c, s, n)]
    return v, np.array(tris)


def _torus(major=TORUS_MAJOR, minor=TORUS_MINOR, R=0.35, r=0.15):
    verts = []
    for i in range(minor):
        u = 2 * math.pi * i / minor
        for j in range(major):
            w = 2 * math.pi * j / major
            verts.append(((R + r * math.cos(w)) * math.cos(u), r * math.sin(w), (R + r * math.cos(w)) * math.sin(u)))
    tris = []
    for i in range(minor):
        for j in range(major):
            a = i * major + j
            b = ((i + 1) % minor) * major + j
            c = ((i + 1) % minor) * major + (j + 1) % major
            d = i * major + (j + 1) % major
            tris += [(a, b, c), (a, c, d)]
    return np.array(verts), np.array(tris)


def _pyramid():
    v = np.array([[-0.5, -0.5, -0.5], [0.5, -0.5, -0.5], [0.5, -0.5, 0.5], [-0.5, -0.5, 0.5], [0.0, 0.5, 0.0]])
    tris = [(0, 1, 2), (0, 2, 3), (0, 4, 1), (1, 4, 2), (2, 4, 3), (3, 4, 0)]
    return v, np.array(tris)


_BUILDERS = {"cube": _cube, "sphere": _sphere, "cylinder": _cylinder, "cone": _cone, "torus": _torus,
             "pyramid": _pyramid}


def base_mesh(class_name: str) -> MeshShape:
    """Untransformed primitive with the fixed per-class tessellation."""
    if class_name not in _BUILDERS:
        raise ValueError(f"unknown primitive class {class_name!r}; expected one of {', '.join(CLASSES)}")
    v, t = _BUILDERS[class_name]()
    return MeshShape(v, t, class_name, 0)


def normalize_mesh(v: np.ndarray) -> np.ndarray:
    """Centre the bounding box at the origin and scale its largest side to 1."""
    lo, hi = v.min(axis=0), v.max(axis=0)
    return (v - (lo + hi) / 2) / (hi - lo).max()


def make_primitive(class_name: str, seed: int, noise: float = 0.01) -> MeshShape:
    """Seeded instance: per-axis scales in [0.6, 1.4], vertex noise, random yaw."""
    mesh = base_mesh(class_name)
    rng = np.random.default_rng([CLASSES.index(class_name), int(seed) % 2**64])
    scales = rng.uniform(0.6, 1.4, size=3)
    v = mesh.vertices * scales
    v = v + rng.normal(0.0, noise, size=v.shape)
    yaw = rng.uniform(0.0, 2 * math.pi)
    c, s = math.cos(yaw), math.sin(yaw)
    v = v @ np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]).T
    return MeshShape(normalize_mesh(v), mesh.triangles, class_name, int(seed))


# ---------------------------------------------------------------- rasterization

def camera_frame(cam: Camera):
    """Camera position and orthonormal (right, up, forward) basis."""
    if cam.distance <= 0:
        raise ValueError(f"camera distance must be positive, got {cam.distance}")
    if not 0 < cam.fov < 180:
        raise ValueError(f"field of view must be in (0, 180), got {cam.fov}")
    az, el = math.radians(cam.azimuth), math.radians(cam.elevation)
    pos = cam.distance * np.array([-math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
    fwd = -pos / np.linalg.norm(pos)
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("camera looks straight along the up axis")
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return pos, right, up, fwd


def rasterize(mesh: MeshShape, camera: Camera, resolution: int, shape_id: str = "", view_index: int = 0) -> RenderedView:
    """Perspective render with z-buffer, flat two-sided Lambert shading and ambient light."""
    pos, right, up, fwd = camera_frame(camera)
    basis = np.stack([right, up, fwd])
    cam_v = (mesh.vertices - pos) @ basis.T
    tris = mesh.triangles
    if len(tris) == 0:
        img = np.full((3, resolution, resolution), BACKGROUND, np.float32)
        return RenderedView(img, view_index, shape_id)
    tv = cam_v[tris]  # (t, 3, 3)
    keep = (tv[:, :, 2] > NEAR).all(axis=1)
    tv = tv[keep]
    colors = np.broadcast_to(DEFAULT_COLOR, (len(tris), 3)) if mesh.colors is None else np.asarray(mesh.colors)
    colors = colors[keep]

    normals = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    norm = np.linalg.norm(normals, axis=1)
    ok = norm > 0
    tv, colors, normals, norm = tv[ok], colors[ok], normals[ok], norm[ok]
    lambert = np.abs(normals @ LIGHT_DIR) / norm
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    rgb = 2.0 * np.clip(colors * shade[:, None], 0.0, 1.0) - 1.0

    focal = 0.5 * resolution / math.tan(math.radians(camera.fov) / 2)
    z = tv[:, :, 2]
    xy = np.empty(tv.shape[:2] + (2,))
    xy[:, :, 0] = 0.5 * resolution + focal * tv[:, :, 0] / z
    xy[:, :, 1] = 0.5 * resolution - focal * tv[:, :, 1] / z
    image, _ = _backend.raster_triangles(xy, 1.0 / z, rgb, resolution, resolution, (BACKGROUND,) * 3)
    return RenderedView(image.astype(np.float32), view_index, shape_id)


def render_sequence(mesh: MeshShape, rig: CameraRig, resolution: int, shape_id: str = "") -> list[RenderedView]:
    """One view per rig azimuth, in rig order."""
    if rig.V < 1:
        raise ValueError("rig needs at least one view")
    return [
        rasterize(mesh, Camera(az, rig.elevation, rig.distance, rig.fov), resolution, shape_id, k)
        for k, az in enumerate(rig.azimuths)
    ]
