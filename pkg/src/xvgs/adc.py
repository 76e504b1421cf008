"""Adaptive density control driven by per-view-group gradient statistics."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .render import RenderGradients
from .scene import GaussianModel, VoxelGrid, voxel_center, voxel_grid_of, voxel_keys, sigmoid

SPLIT_FACTOR = 1.6
# a primitive closer than this fraction of the voxel size to a voxel center anchors it
ANCHOR_TOL = 1e-4


class DensifyMode(str, enum.Enum):
    AVERAGE = "average"
    GROUP_MAX = "groupmax"


@dataclass
class DensifyPolicy:
    threshold: float = 2e-4
    mode: DensifyMode = DensifyMode.GROUP_MAX
    interval: int = 100
    prune_opacity: float = 0.005
    max_primitives: int = 200_000

    def __post_init__(self):
        self.mode = DensifyMode(self.mode)
        if not self.threshold > 0:
            raise ValueError("densify threshold must be positive")
        if self.interval < 1:
            raise ValueError("densify interval must be at least 1")
        if not 0 < self.prune_opacity < 1:
            raise ValueError("prune_opacity must lie in (0, 1)")


class GradientAccumulator:
    """Summed screen-space gradient norms and visibility counts per (primitive, group)."""

    def __init__(self, n: int, group_ids: Sequence[int]):
        self.group_ids = list(group_ids)
        if len(set(self.group_ids)) != len(self.group_ids):
            raise ValueError(f"duplicate group ids: {self.group_ids}")
        self._col = {g: j for j, g in enumerate(self.group_ids)}
        self.grad_sum = np.zeros((n, len(self.group_ids)))
        self.vis_count = np.zeros((n, len(self.group_ids)), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.grad_sum)

    def column(self, group_id: int) -> int:
        try:
            return self._col[group_id]
        except KeyError:
            raise KeyError(f"unknown view group {group_id}") from None

    def extend(self, k: int) -> None:
        self.grad_sum = np.concatenate([self.grad_sum, np.zeros((k, self.grad_sum.shape[1]))])
        self.vis_count = np.concatenate(
            [self.vis_count, np.zeros((k, self.vis_count.shape[1]), dtype=np.int64)])

    def keep(self, mask: np.ndarray) -> None:
        self.grad_sum = self.grad_sum[mask]
        self.vis_count = self.vis_count[mask]

    def averages(self) -> np.ndarray:
        """Per-group average gradient, NaN where the group never saw the primitive."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.vis_count > 0, self.grad_sum / self.vis_count, np.nan)


def accumulate(acc: GradientAccumulator, group_id: int, grads: RenderGradients,
               scale: float = 1.0) -> None:
    """Add one view's screen-space gradient norms, multiplied by ``scale``.

    Training passes the image diagonal in pixels as ``scale`` so the threshold is
    independent of resolution.
    """
    j = acc.column(group_id)
    if len(grads.visible) != len(acc):
        raise ValueError(f"gradients for {len(grads.visible)} primitives, "
                         f"accumulator holds {len(acc)}")
    vis = grads.visible
    acc.grad_sum[vis, j] += scale * grads.screen_grad_norm[vis]
    acc.vis_count[vis, j] += 1


def reset(acc: GradientAccumulator) -> None:
    acc.grad_sum[:] = 0.0
    acc.vis_count[:] = 0


def selection_scores(acc: GradientAccumulator, mode: DensifyMode) -> np.ndarray:
    """Score compared against the threshold; NaN for primitives never seen."""
    if DensifyMode(mode) is DensifyMode.AVERAGE:
        total = acc.vis_count.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, acc.grad_sum.sum(axis=1) / total, np.nan)
    avg = acc.averages()
    seen = np.any(acc.vis_count > 0, axis=1)
    out = np.full(len(acc), np.nan)
    out[seen] = np.nanmax(avg[seen], axis=1)
    return out


def select_densify(acc: GradientAccumulator, policy: DensifyPolicy) -> np.ndarray:
    """Indices whose score strictly exceeds the threshold, ascending."""
    score = selection_scores(acc, policy.mode)
    with np.errstate(invalid="ignore"):
        return np.flatnonzero(score > policy.threshold)


def densify(m: GaussianModel, selected, grid: VoxelGrid, policy: DensifyPolicy,
            acc: GradientAccumulator | None = None) -> int:
    """Deploy a shrunken clone at the voxel center of each selected primitive.

    A voxel center already hosting a primitive gets nothing, so a pass adds at
    most one primitive per voxel. ``grid`` is updated in place and ``acc`` (if
    given) grows by zero rows for the new primitives.
    """
    if grid.voxel_size != m.voxel_size or grid.keys != voxel_grid_of(m).keys:
        raise ValueError("voxel grid is stale: it does not match the model")
    selected = np.unique(np.asarray(selected, dtype=np.int64))
    room = policy.max_primitives - len(m)
    if len(selected) == 0 or room <= 0:
        return 0
    eps = m.voxel_size
    keys = voxel_keys(m.positions, eps)
    centers = (keys + 0.5) * eps
    anchored = np.linalg.norm(m.positions - centers, axis=1) < ANCHOR_TOL * eps
    occupied = set(map(tuple, keys[anchored].tolist()))

    rows, new_pos = [], []
    for i in selected:
        key = tuple(keys[i].tolist())
        if key in occupied:
            continue
        occupied.add(key)
        rows.append(i)
        new_pos.append(voxel_center(key, eps))
        if len(rows) >= room:
            break
    if not rows:
        return 0
    clones = GaussianModel(np.array(new_pos), m.log_scales[rows] - np.log(SPLIT_FACTOR),
                           m.rotations[rows], m.opacity_logits[rows], m.colors[rows], eps)
    m.append(clones)
    for k in voxel_keys(clones.positions, eps).tolist():
        grid.add(k)
    if acc is not None:
        acc.extend(len(rows))
    return len(rows)


def prune_mask(m: GaussianModel, policy: DensifyPolicy) -> np.ndarray:
    """Survivor mask: opacity at or above the pruning floor."""
    return sigmoid(m.opacity_logits) >= policy.prune_opacity


def prune(m: GaussianModel, acc: GradientAccumulator | None, policy: DensifyPolicy) -> int:
    keep = prune_mask(m, policy)
    removed = int(len(keep) - keep.sum())
    if removed:
        m.keep(keep)
        if acc is not None:
            acc.keep(keep)
    return removed


@dataclass
class DensifyRecord:
    iteration: int
    mode: str
    candidates: int
    added: int
    pruned: int
    group_max_avg: dict[int, float] = field(default_factory=dict)

    def to_line(self) -> str:
        groups = ",".join(f"{g}:{v:.6g}" for g, v in sorted(self.group_max_avg.items()))
        return "\t".join([str(self.iteration), self.mode, str(self.candidates),
                          str(self.added), str(self.pruned), groups])

    @classmethod
    def from_line(cls, line: str) -> "DensifyRecord":
        it, mode, cand, added, pruned, groups = line.rstrip("\n").split("\t")
        gm = {}
        for item in filter(None, groups.split(",")):
            g, v = item.split(":")
            gm[int(g)] = float(v)
        return cls(int(it), mode, int(cand), int(added), int(pruned), gm)


def group_max_average(acc: GradientAccumulator) -> dict[int, float]:
    """Largest per-group average gradient over all primitives, per group."""
    avg = acc.averages()
    out = {}
    for j, g in enumerate(acc.group_ids):
        col = avg[:, j]
        col = col[~np.isnan(col)]
        out[g] = float(col.max()) if len(col) else 0.0
    return out
