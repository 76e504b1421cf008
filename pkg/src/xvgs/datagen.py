"""Synthetic aerial/ground datasets and dataset I/O.

A dataset directory holds ``manifest.jsonl`` (a header line followed by one
line per view), ``images/*.ppm`` and the ``teacher.xvgs`` checkpoint whose
renders are the ground truth.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .render import render
from .scene import (Camera, GaussianModel, RigidTransformError, View, ViewGroup, check_rigid,
                    logit, save_model)

MANIFEST = "manifest.jsonl"
TEACHER = "teacher.xvgs"
TEST_EVERY = 8
GROUP_NAMES = {0: "aerial", 1: "ground"}


class DatasetError(ValueError):
    pass


class MissingImageError(DatasetError, FileNotFoundError):
    pass


class ImageDimensionError(DatasetError):
    pass


class ManifestRigidError(DatasetError, RigidTransformError):
    pass


# -- PPM ---------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    data = quantize(image)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), offset = _ppm_tokens(data, 3)
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


# -- synthetic scene ---------------------------------------------------------

@dataclass
class RingSpec:
    radius: float
    height: float
    count: int
    target_height: float = 0.0

    def __post_init__(self):
        if self.count < 8:
            raise ValueError("a camera ring needs at least 8 views")
        if self.radius <= 0:
            raise ValueError("camera ring radius must be positive")


@dataclass
class SceneSpec:
    extent: float = 2.0
    ground_cells: int = 10
    clusters: int = 8
    boxes: int = 4
    palette: list = field(default_factory=lambda: [
        [0.85, 0.25, 0.2], [0.2, 0.55, 0.85], [0.95, 0.8, 0.25], [0.3, 0.7, 0.35],
        [0.65, 0.35, 0.75], [0.9, 0.55, 0.2], [0.9, 0.9, 0.9], [0.25, 0.25, 0.3]])
    aerial: RingSpec = field(default_factory=lambda: RingSpec(0.9, 2.4, 16, 0.0))
    ground: RingSpec = field(default_factory=lambda: RingSpec(1.45, 0.12, 16, 0.22))
    image_size: int = 64
    fov_degrees: float = 60.0
    background: list = field(default_factory=lambda: [0.55, 0.7, 0.9])
    voxel_size: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.aerial, dict):
            self.aerial = RingSpec(**self.aerial)
        if isinstance(self.ground, dict):
            self.ground = RingSpec(**self.ground)
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if min(self.clusters, self.ground_cells) < 1:
            raise ValueError("scene needs ground cells and clusters")

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        return cls(**json.loads(Path(path).read_text()))

    @property
    def bounds(self) -> tuple[list[float], list[float]]:
        h = self.extent / 2
        return [-h, -h, 0.0], [h, h, 0.6]


def _flat_quat(normal) -> np.ndarray:
    """Quaternion (wxyz) rotating +z onto ``normal``."""
    z = np.array([0.0, 0.0, 1.0])
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    axis = np.cross(z, n)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    angle = math.atan2(s, float(z @ n))
    axis /= s
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def build_teacher(spec: SceneSpec) -> GaussianModel:
    """Procedural scene: textured ground, colored clusters and box buildings."""
    rng = np.random.default_rng(spec.seed)
    palette = np.asarray(spec.palette, dtype=np.float64)
    half = spec.extent / 2
    pos, scl, rot, opa, col = [], [], [], [], []

    def add(p, s, q, a, c):
        pos.append(p)
        scl.append(np.log(s))
        rot.append(q)
        opa.append(logit(a))
        col.append(np.clip(c, 0.02, 0.98))

    flat = np.array([1.0, 0.0, 0.0, 0.0])
    n = spec.ground_cells
    cell = spec.extent / n
    for i in range(n):
        for j in range(n):
            base = np.array([0.45, 0.42, 0.36]) if (i + j) % 2 else np.array([0.55, 0.52, 0.42])
            add([-half + (i + 0.5) * cell, -half + (j + 0.5) * cell, 0.0],
                [0.6 * cell, 0.6 * cell, 0.01], flat, 0.95, base + rng.normal(0, 0.05, 3))

    for _ in range(spec.clusters):
        center = rng.uniform(-0.8 * half, 0.8 * half, 2)
        color = palette[rng.integers(len(palette))]
        for _ in range(6):
            xy = center + rng.normal(0, 0.06, 2)
            add([xy[0], xy[1], 0.015], rng.uniform(0.02, 0.05, 3) * [1, 1, 0.3],
                _random_quat(rng, 0.5), 0.9, color + rng.normal(0, 0.04, 3))

    for b in range(spec.boxes):
        angle = 2 * math.pi * (b + rng.uniform(0.2, 0.8)) / max(spec.boxes, 1)
        r = rng.uniform(0.25, 0.55) * half
        cx, cy = r * math.cos(angle), r * math.sin(angle)
        w, d = rng.uniform(0.16, 0.26, 2) * spec.extent / 2
        hgt = rng.uniform(0.25, 0.5)
        wall = palette[rng.integers(len(palette))]
        trim = palette[rng.integers(len(palette))]
        roof = palette[rng.integers(len(palette))] * 0.8
        k = 3
        for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1)):
            normal = np.zeros(3)
            normal[axis] = sign
            q = _flat_quat(normal)
            span = d if axis == 0 else w
            for u in range(k):
                for v in range(k):
                    off = (-span + (u + 0.5) * 2 * span / k)
                    p = np.array([cx, cy, (v + 0.5) * hgt / k])
                    p[axis] += sign * (w if axis == 0 else d)
                    p[1 - axis] += off
                    c = trim if (u + v) % 2 == 0 else wall
                    add(p, [span / k * 0.75, hgt / k * 0.7, 0.01], q, 0.97, c)
        for u in range(2):
            for v in range(2):
                add([cx - w / 2 + u * w, cy - d / 2 + v * d, hgt], [w * 0.6, d * 0.6, 0.01],
                    flat, 0.97, roof + rng.normal(0, 0.04, 3))
    return GaussianModel(pos, scl, rot, opa, col, spec.voxel_size).round_to_float32()


def _random_quat(rng, spread: float) -> np.ndarray:
    q = np.array([1.0, 0.0, 0.0, 0.0]) + rng.normal(0, spread, 4) * [0, 1, 1, 1]
    return q / np.linalg.norm(q)


def ring_cameras(ring: RingSpec, spec: SceneSpec, phase: float = 0.0) -> list[Camera]:
    size = spec.image_size
    f = (size / 2) / math.tan(math.radians(spec.fov_degrees) / 2)
    cams = []
    for i in range(ring.count):
        a = 2 * math.pi * i / ring.count + phase
        eye = [ring.radius * math.cos(a), ring.radius * math.sin(a), ring.height]
        target = [0.0, 0.0, ring.target_height]
        cams.append(Camera.look_at(eye, target, [0.0, 0.0, 1.0], f, f, size, size))
    return cams


def split_tag(index: int) -> str:
    return "test" if index % TEST_EVERY == 0 else "train"


def generate_synthetic(spec: SceneSpec, out_dir) -> Path:
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise DatasetError(f"dataset directory {out} is not writable")
    teacher = build_teacher(spec)
    save_model(teacher, out / TEACHER)
    lo, hi = spec.bounds
    lines = [json.dumps({"format": "xvgs-dataset", "version": 1, "bounds": [lo, hi],
                         "background": spec.background, "voxel_size": teacher.voxel_size,
                         "spec": asdict(spec)})]
    rings = ((0, spec.aerial, 0.0), (1, spec.ground, math.pi / spec.ground.count))
    for gid, ring, phase in rings:
        for i, cam in enumerate(ring_cameras(ring, spec, phase)):
            name = f"{GROUP_NAMES[gid]}_{i:03d}"
            rel = f"images/{name}.ppm"
            write_ppm(out / rel, render(teacher, cam, spec.background))
            lines.append(json.dumps({
                "image": rel, "name": name, "group": gid, "group_name": GROUP_NAMES[gid],
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height,
                "world_to_cam": cam.world_to_cam.reshape(-1).tolist(),
                "split": split_tag(i)}))
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out


@dataclass
class Dataset:
    groups: list[ViewGroup]
    bounds: tuple
    background: np.ndarray
    voxel_size: float
    root: Path

    def group(self, group_id: int) -> ViewGroup:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(f"dataset has no view group {group_id}")

    @property
    def views(self) -> list[View]:
        return [v for g in self.groups for v in g.views]


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DatasetError(f"no {MANIFEST} in {root}")
    lines = [ln for ln in manifest.read_text().splitlines() if ln.strip()]
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except (json.JSONDecodeError, IndexError) as e:
        raise DatasetError(f"malformed manifest {manifest}: {e}") from e
    if header.get("format") != "xvgs-dataset":
        raise DatasetError(f"{manifest}: missing dataset header line")
    groups: dict[int, ViewGroup] = {}
    for rec in records:
        img_path = root / rec["image"]
        if not img_path.exists():
            raise MissingImageError(f"missing image: {img_path}")
        image = read_ppm(img_path)
        if image.shape != (rec["height"], rec["width"], 3):
            raise ImageDimensionError(
                f"{img_path}: image is {image.shape[1]}x{image.shape[0]}, "
                f"manifest says {rec['width']}x{rec['height']}")
        T = np.asarray(rec["world_to_cam"], dtype=np.float64)
        if T.shape != (16,):
            raise DatasetError(f"{rec['image']}: world_to_cam needs 16 values")
        T = T.reshape(4, 4)
        R = T[:3, :3]
        try:
            check_rigid(R, tol=1e-4)
        except RigidTransformError as e:
            raise ManifestRigidError(f"{rec['image']}: {e}") from None
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            u, _, vt = np.linalg.svd(R)
            R = u @ vt
        cam = Camera(rec["fx"], rec["fy"], rec["cx"], rec["cy"], rec["width"], rec["height"],
                     R, T[:3, 3])
        gid = int(rec["group"])
        group = groups.setdefault(gid, ViewGroup(gid, [], rec.get("group_name", str(gid))))
        group.views.append(View(cam, image, rec["split"], rec.get("name", rec["image"])))
    lo, hi = header["bounds"]
    return Dataset([groups[g] for g in sorted(groups)], (lo, hi),
                   np.asarray(header.get("background", [0, 0, 0]), dtype=np.float64),
                   float(header.get("voxel_size", 0.05)), root)
