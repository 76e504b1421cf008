"""Scene primitives: Gaussians, cameras, view groups, voxel grids, checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

MAGIC = b"XVGS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQf")
_FIELDS_PER_GAUSSIAN = 14


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _f32(x: float) -> float:
    return float(np.float32(x))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in wxyz order (normalized first)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class Gaussian3D:
    position: tuple[float, float, float]
    log_scale: tuple[float, float, float]
    rotation: tuple[float, float, float, float]  # wxyz, unit norm
    opacity_logit: float
    color: tuple[float, float, float]

    def __post_init__(self):
        norm = math.sqrt(sum(c * c for c in self.rotation))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"rotation quaternion must be unit length, got norm {norm}")
        if not all(math.isfinite(math.exp(s)) for s in self.log_scale):
            raise ValueError("log_scale must give finite positive scales")

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def covariance_of(g: Gaussian3D) -> np.ndarray:
    """3x3 covariance R diag(s)^2 R^T of a primitive."""
    R = quat_to_rotmat(np.array(g.rotation))
    M = R * np.exp(np.array(g.log_scale))[None, :]
    cov = M @ M.T
    return 0.5 * (cov + cov.T)


class GaussianModel:
    """Ordered set of primitives stored as parallel float64 arrays.

    Row ``i`` of every array is primitive ``i``; indices are identities for the
    gradient accumulators, so every structural edit goes through
    :meth:`append` or :meth:`keep`.
    """

    def __init__(self, positions, log_scales, rotations, opacity_logits, colors,
                 voxel_size: float):
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.array(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(colors, dtype=np.float64).reshape(n, 3)
        if not voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        # checkpoints hold a float32 voxel size; keep the in-memory value identical
        self.voxel_size = _f32(voxel_size)

    @classmethod
    def empty(cls, voxel_size: float) -> "GaussianModel":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), voxel_size)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D], voxel_size: float) -> "GaussianModel":
        gs = list(gaussians)
        if not gs:
            return cls.empty(voxel_size)
        return cls([g.position for g in gs], [g.log_scale for g in gs],
                   [g.rotation for g in gs], [g.opacity_logit for g in gs],
                   [g.color for g in gs], voxel_size)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(tuple(self.positions[i]), tuple(self.log_scales[i]),
                          tuple(self.rotations[i]), float(self.opacity_logits[i]),
                          tuple(self.colors[i]))

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.positions, self.log_scales, self.rotations, self.opacity_logits,
                self.colors)

    def copy(self) -> "GaussianModel":
        return GaussianModel(*self.arrays(), self.voxel_size)

    def append(self, other: "GaussianModel", rows=None) -> None:
        """Append rows of ``other`` (all rows by default) in order."""
        sel = slice(None) if rows is None else np.asarray(rows, dtype=np.int64)
        self.positions = np.concatenate([self.positions, other.positions[sel]])
        self.log_scales = np.concatenate([self.log_scales, other.log_scales[sel]])
        self.rotations = np.concatenate([self.rotations, other.rotations[sel]])
        self.opacity_logits = np.concatenate([self.opacity_logits, other.opacity_logits[sel]])
        self.colors = np.concatenate([self.colors, other.colors[sel]])

    def keep(self, mask: np.ndarray) -> None:
        """Drop rows where ``mask`` is False; survivor order is preserved."""
        mask = np.asarray(mask, dtype=bool)
        self.positions = self.positions[mask]
        self.log_scales = self.log_scales[mask]
        self.rotations = self.rotations[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.colors = self.colors[mask]

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def round_to_float32(self) -> "GaussianModel":
        """Snap every field to float32 so the model survives a checkpoint bit-exactly."""
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors"):
            setattr(self, name, getattr(self, name).astype(np.float32).astype(np.float64))
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianModel):
            return NotImplemented
        return (self.voxel_size == other.voxel_size
                and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())))

    def __repr__(self) -> str:
        return f"GaussianModel(n={len(self)}, voxel_size={self.voxel_size:g})"


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world points into the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        check_rigid(self.rotation, tol=1e-6)

    @property
    def world_to_cam(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking toward ``target``; +z forward, +y down in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(fx, fy, (width - 1) / 2 if cx is None else cx,
                   (height - 1) / 2 if cy is None else cy,
                   width, height, R, -R @ eye)


class RigidTransformError(ValueError):
    pass


def check_rigid(R: np.ndarray, tol: float) -> None:
    err = np.abs(R @ R.T - np.eye(3)).max()
    det = np.linalg.det(R)
    if err > tol or abs(det - 1.0) > tol:
        raise RigidTransformError(
            f"rotation is not rigid (orthonormality error {err:.3g}, det {det:.6f})")


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # H x W x 3 in [0, 1]
    split: str = "train"
    name: str = ""


@dataclass
class ViewGroup:
    group_id: int
    views: list[View] = field(default_factory=list)
    name: str = ""

    def split_views(self, split: str) -> list[View]:
        return [v for v in self.views if v.split == split]

    @property
    def train(self) -> list[View]:
        return self.split_views("train")

    @property
    def test(self) -> list[View]:
        return self.split_views("test")


def voxel_key(p: Sequence[float], eps: float) -> tuple[int, int, int]:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"voxel_key of non-finite point {p}")
    k = np.floor(p / eps).astype(np.int64)
    return int(k[0]), int(k[1]), int(k[2])


def voxel_keys(points: np.ndarray, eps: float) -> np.ndarray:
    """Vectorized :func:`voxel_key`: (N, 3) int64 keys."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError("voxel_keys of non-finite points")
    return np.floor(points / eps).astype(np.int64)


def voxel_center(key, eps: float) -> np.ndarray:
    return (np.asarray(key, dtype=np.float64) + 0.5) * eps


@dataclass
class VoxelGrid:
    voxel_size: float
    keys: set = field(default_factory=set)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.keys

    def __len__(self) -> int:
        return len(self.keys)

    def add(self, key) -> None:
        self.keys.add(tuple(int(k) for k in key))

    def union(self, other: "VoxelGrid") -> "VoxelGrid":
        if other.voxel_size != self.voxel_size:
            raise ValueError("voxel sizes differ")
        return VoxelGrid(self.voxel_size, self.keys | other.keys)


def voxel_grid_of(m: GaussianModel) -> VoxelGrid:
    keys = voxel_keys(m.positions, m.voxel_size)
    return VoxelGrid(m.voxel_size, set(map(tuple, keys.tolist())))


def serialize_model(m: GaussianModel) -> bytes:
    body = np.concatenate([m.positions, m.log_scales, m.rotations,
                           m.opacity_logits[:, None], m.colors], axis=1)
    return (_HEADER.pack(MAGIC, FORMAT_VERSION, len(m), m.voxel_size)
            + body.astype("<f4").tobytes())


def deserialize_model(data: bytes) -> GaussianModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not an XVGS checkpoint (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError("checkpoint header is truncated")
    _, version, count, eps = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    need = _HEADER.size + count * _FIELDS_PER_GAUSSIAN * 4
    if len(data) < need:
        raise TruncatedCheckpointError(
            f"checkpoint truncated: {len(data)} bytes, {count} records need {need}")
    body = np.frombuffer(data, dtype="<f4", count=count * _FIELDS_PER_GAUSSIAN,
                         offset=_HEADER.size).astype(np.float64)
    body = body.reshape(count, _FIELDS_PER_GAUSSIAN)
    return GaussianModel(body[:, 0:3], body[:, 3:6], body[:, 6:10], body[:, 10],
                         body[:, 11:14], eps)


def save_model(m: GaussianModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_model(m))


def load_model(path) -> GaussianModel:
    with open(path, "rb") as f:
        return deserialize_model(f.read())
