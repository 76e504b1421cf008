"""Stages of the cross-view reconstruction pipeline.

branch training per view group -> point cloud from the distant-view branch ->
cross-view training (per-group densification + hinge against branch renders)
-> supplementation with branch-unique primitives -> fine-tuning -> evaluation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import adc
from .adc import DensifyMode, DensifyPolicy, DensifyRecord, GradientAccumulator
from .datagen import quantize
from .losses import LossWeights, image_loss_and_grad, psnr, ssim, volume_reg, volume_reg_grad
from .optim import Adam, exp_decay
from .render import Rendering, render
from .scene import GaussianModel, View, ViewGroup, logit, voxel_grid_of, voxel_keys

log = logging.getLogger(__name__)

# stage tags mixed into the seed so each stage draws an independent view sequence
_BRANCH, _CROSS, _FINETUNE, _RANDOM_INIT = 1, 2, 3, 4


@dataclass
class LearningRates:
    position_init: float = 2e-3
    position_final: float = 2e-5
    log_scale: float = 1e-2
    rotation: float = 5e-3
    opacity: float = 5e-2
    color: float = 1e-2


@dataclass
class PipelineConfig:
    branch_iters: int = 3000
    cross_iters: int = 3000
    finetune_iters: int = 2000
    downsample_ratio: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    policy: DensifyPolicy = field(default_factory=DensifyPolicy)
    voxel_size: float = 0.05
    lr: LearningRates = field(default_factory=LearningRates)
    seed: int = 0
    distant_group: int = 0
    background: Optional[list] = None
    random_init_points: int = 200
    densify_from: int = 200
    densify_until: float = 0.6
    finetune_densify: bool = False
    regularization_distance: str = "l1"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.policy, dict):
            self.policy = DensifyPolicy(**self.policy)
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if min(self.branch_iters, self.cross_iters, self.finetune_iters) < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.downsample_ratio < 1:
            raise ValueError("downsample_ratio must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"]["mode"] = self.policy.mode.value
        return d

    def bg(self, fallback=None) -> np.ndarray:
        if self.background is not None:
            return np.asarray(self.background, dtype=np.float64)
        return np.zeros(3) if fallback is None else np.asarray(fallback, dtype=np.float64)


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    densify: list = field(default_factory=list)
    group_ids: list = field(default_factory=list)

    def densify_lines(self) -> list[str]:
        return [r.to_line() for r in self.densify]


def _rng(cfg: PipelineConfig, *tags: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed & (2**64 - 1), *tags])


def random_pointcloud(bounds, n: int, cfg: PipelineConfig) -> PointCloud:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    rng = _rng(cfg, _RANDOM_INIT)
    return PointCloud(rng.uniform(lo, hi, (n, 3)), rng.uniform(0.2, 0.8, (n, 3)))


def init_cross(pc: PointCloud, cfg: PipelineConfig) -> GaussianModel:
    """One isotropic Gaussian per point, sized by the mean distance to 3 nearest neighbours."""
    n = len(pc)
    if n == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(pc.points).query(pc.points, k=k)
        mean_nn = dist[:, 1:].mean(axis=1)
    else:
        mean_nn = np.full(1, cfg.voxel_size)
    log_s = np.log(np.maximum(mean_nn, 1e-7))
    colors = pc.colors if pc.colors is not None else np.full((n, 3), 0.5)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianModel(pc.points, np.repeat(log_s[:, None], 3, axis=1), rot,
                         np.full(n, logit(0.1)), colors, cfg.voxel_size)


def downsample_to_pointcloud(m: GaussianModel, ratio: int) -> PointCloud:
    """Keep every ``ratio``-th primitive after ordering by (voxel key, index)."""
    if ratio < 1:
        raise ValueError("downsample ratio must be at least 1")
    if len(m) == 0:
        raise ValueError("cannot downsample an empty model")
    keys = voxel_keys(m.positions, m.voxel_size)
    order = np.lexsort((np.arange(len(m)), keys[:, 2], keys[:, 1], keys[:, 0]))
    kept = order[::ratio]
    return PointCloud(m.positions[kept].copy(), np.clip(m.colors[kept], 0.0, 1.0))


def _train_views(groups: Sequence[ViewGroup]) -> list[tuple[int, View]]:
    return [(g.group_id, v) for g in groups for v in g.train]


class Trainer:
    """Single-threaded optimization loop shared by every training stage."""

    def __init__(self, model: GaussianModel, cfg: PipelineConfig, group_ids: Sequence[int],
                 background):
        self.model = model
        self.cfg = cfg
        self.bg = np.asarray(background, dtype=np.float64)
        self.acc = GradientAccumulator(len(model), group_ids)
        lr = cfg.lr
        self.opt = Adam(model, {"positions": lr.position_init, "log_scales": lr.log_scale,
                                "rotations": lr.rotation, "opacity_logits": lr.opacity,
                                "colors": lr.color})
        self.log = TrainLog(group_ids=list(group_ids))

    def run(self, views: list[tuple[int, View]], iters: int, rng: np.random.Generator, *,
            policy: Optional[DensifyPolicy], lambda_reg: float = 0.0,
            refs: Optional[dict] = None) -> GaussianModel:
        cfg, m = self.cfg, self.model
        w = LossWeights(cfg.weights.lambda_ssim, cfg.weights.lambda_vol, lambda_reg)
        stop = int(cfg.densify_until * iters)
        for it in range(iters):
            if len(m) == 0:
                log.warning("model has no primitives left; stopping at iteration %d", it)
                break
            k = int(rng.integers(len(views)))
            gid, view = views[k]
            self.opt.lrs["positions"] = exp_decay(cfg.lr.position_init, cfg.lr.position_final,
                                                  it, iters)
            r = Rendering(m, view.camera, self.bg)
            ref = refs[k] if (refs is not None and lambda_reg > 0) else None
            loss, dimg = image_loss_and_grad(r.image, view.image, w, ref,
                                             cfg.regularization_distance)
            grads = r.backward(m, dimg)
            vol_grad = volume_reg_grad(m)
            loss += w.lambda_vol * float(vol_grad[:, 0].sum())
            self.log.losses.append(loss)
            cam = view.camera
            adc.accumulate(self.acc, gid, grads, math.hypot(cam.width, cam.height))
            self.opt.step(m, {"positions": grads.position,
                              "log_scales": grads.log_scale + w.lambda_vol * vol_grad,
                              "rotations": grads.rotation,
                              "opacity_logits": grads.opacity_logit,
                              "colors": grads.color})
            m.normalize_rotations()
            np.clip(m.colors, 0.0, 1.0, out=m.colors)
            step = it + 1
            if (policy is not None and step % policy.interval == 0
                    and cfg.densify_from <= step <= stop):
                self._densify_step(step, policy)
        m.normalize_rotations()
        return m.round_to_float32()

    def _densify_step(self, step: int, policy: DensifyPolicy) -> None:
        m = self.model
        selected = adc.select_densify(self.acc, policy)
        gmax = adc.group_max_average(self.acc)
        grid = voxel_grid_of(m)
        added = adc.densify(m, selected, grid, policy, self.acc)
        self.opt.extend(added)
        keep = adc.prune_mask(m, policy)
        pruned = int(len(keep) - keep.sum())
        if pruned:
            m.keep(keep)
            self.acc.keep(keep)
            self.opt.keep(keep)
        adc.reset(self.acc)
        self.log.densify.append(DensifyRecord(step, policy.mode.value, len(selected), added,
                                              pruned, gmax))


def _with_mode(policy: DensifyPolicy, mode) -> DensifyPolicy:
    return DensifyPolicy(policy.threshold, DensifyMode(mode), policy.interval,
                         policy.prune_opacity, policy.max_primitives)


def train_branch(group: ViewGroup, init: PointCloud, cfg: PipelineConfig,
                 background=None) -> tuple[GaussianModel, TrainLog]:
    """Train a sub-model on one view group from ``init``."""
    views = _train_views([group])
    if not views:
        raise ValueError(f"view group {group.group_id} has no training views")
    model = init_cross(init, cfg)
    trainer = Trainer(model, cfg, [group.group_id], cfg.bg(background))
    trainer.run(views, cfg.branch_iters, _rng(cfg, _BRANCH, group.group_id),
                policy=_with_mode(cfg.policy, DensifyMode.AVERAGE))
    return model, trainer.log


def pseudo_labels(views: list[tuple[int, View]], branches: dict, background) -> dict:
    """Branch renders of every training view, keyed by position in ``views``."""
    return {k: render(branches[gid], v.camera, background) for k, (gid, v) in enumerate(views)}


def train_cross(init: GaussianModel, groups: Sequence[ViewGroup],
                branches: Optional[dict], cfg: PipelineConfig, background=None,
                mode=None, lambda_reg: Optional[float] = None) -> tuple[GaussianModel, TrainLog]:
    """Cross-view training over all groups; ``branches`` maps group id to its sub-model.

    ``mode`` and ``lambda_reg`` default to the config; ablations override them.
    """
    lam = cfg.weights.lambda_reg if lambda_reg is None else lambda_reg
    views = _train_views(groups)
    if not views:
        raise ValueError("no training views")
    bg = cfg.bg(background)
    refs = None
    if lam > 0:
        if branches is None:
            raise ValueError("hinge regularization needs trained branches")
        missing = [g.group_id for g in groups if g.group_id not in branches]
        if missing:
            raise ValueError(f"no trained branch for view group(s) {missing}")
        refs = pseudo_labels(views, branches, bg)
    model = init.copy()
    policy = cfg.policy if mode is None else _with_mode(cfg.policy, mode)
    trainer = Trainer(model, cfg, [g.group_id for g in groups], bg)
    trainer.run(views, cfg.cross_iters, _rng(cfg, _CROSS), policy=policy, lambda_reg=lam,
                refs=refs)
    return model, trainer.log


@dataclass
class SupplementReport:
    rows: list = field(default_factory=list)  # (branch index, total, unique, common)
    cross_before: int = 0
    cross_after: int = 0

    def to_lines(self) -> list[str]:
        out = ["branch\ttotal\tunique\tcommon"]
        out += ["\t".join(map(str, r)) for r in self.rows]
        out.append(f"cross\t{self.cross_before}\t{self.cross_after - self.cross_before}\t-")
        return out


def supplement(cross: GaussianModel, branches: Sequence[GaussianModel]
               ) -> tuple[GaussianModel, SupplementReport]:
    """Append branch primitives whose voxels the cross-view model does not occupy."""
    for b in branches:
        if b.voxel_size != cross.voxel_size:
            raise ValueError(f"voxel size mismatch: cross {cross.voxel_size}, "
                             f"branch {b.voxel_size}")
    out = cross.copy()
    grid = voxel_grid_of(cross)
    report = SupplementReport(cross_before=len(cross))
    for bi, b in enumerate(branches):
        keys = voxel_keys(b.positions, b.voxel_size)
        unique = np.array([tuple(k) not in grid.keys for k in keys.tolist()], dtype=bool)
        rows = np.flatnonzero(unique)
        out.append(b, rows)
        for k in keys[rows].tolist():
            grid.add(k)
        report.rows.append((bi, len(b), len(rows), len(b) - len(rows)))
    report.cross_after = len(out)
    return out, report


def finetune(m: GaussianModel, groups: Sequence[ViewGroup], cfg: PipelineConfig,
             background=None) -> tuple[GaussianModel, TrainLog]:
    """Joint re-optimization with the reconstruction loss only."""
    model = m.copy()
    views = _train_views(groups)
    trainer = Trainer(model, cfg, [g.group_id for g in groups], cfg.bg(background))
    if cfg.finetune_iters == 0:
        return model, trainer.log
    policy = cfg.policy if cfg.finetune_densify else None
    trainer.run(views, cfg.finetune_iters, _rng(cfg, _FINETUNE), policy=policy, lambda_reg=0.0)
    return model, trainer.log


def train_loss(m: GaussianModel, groups: Sequence[ViewGroup], cfg: PipelineConfig,
               background=None) -> float:
    """Mean reconstruction loss over all training views."""
    bg = cfg.bg(background)
    w = cfg.weights
    vals = [image_loss_and_grad(render(m, v.camera, bg), v.image,
                                LossWeights(w.lambda_ssim, w.lambda_vol, 0.0))[0]
            for _, v in _train_views(groups)]
    return float(np.mean(vals)) + w.lambda_vol * volume_reg(m)


@dataclass
class MetricsRecord:
    image: str
    group: int
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    records: list

    def group_means(self) -> dict[int, tuple[float, float, int]]:
        """group -> (mean PSNR over finite frames, mean SSIM, frame count)."""
        out = {}
        for g in sorted({r.group for r in self.records}):
            out[g] = _means([r for r in self.records if r.group == g])
        return out

    def overall(self) -> tuple[float, float, int]:
        return _means(self.records)

    @property
    def mean_psnr(self) -> float:
        return self.overall()[0]

    def to_lines(self) -> list[str]:
        lines = ["image\tgroup\tpsnr\tssim"]
        lines += [f"{r.image}\t{r.group}\t{_fmt(r.psnr)}\t{r.ssim:.6f}" for r in self.records]
        for g, (p, s, n) in self.group_means().items():
            lines.append(f"mean:group{g}\t{g}\t{_fmt(p)}\t{s:.6f}")
        p, s, n = self.overall()
        lines.append(f"mean:all\t-\t{_fmt(p)}\t{s:.6f}")
        return lines

    @classmethod
    def from_lines(cls, lines) -> "MetricsReport":
        recs = []
        for ln in list(lines)[1:]:
            name, g, p, s = ln.rstrip("\n").split("\t")
            if name.startswith("mean:"):
                continue
            recs.append(MetricsRecord(name, int(g), float(p), float(s)))
        return cls(recs)


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.6f}"


def _means(recs) -> tuple[float, float, int]:
    """Mean PSNR skips identical (+inf) frames; all-identical gives +inf."""
    finite = [r.psnr for r in recs if math.isfinite(r.psnr)]
    p = float(np.mean(finite)) if finite else math.inf
    return p, float(np.mean([r.ssim for r in recs])), len(recs)


def evaluate(m: GaussianModel, groups: Sequence[ViewGroup], background=None,
             split: str = "test") -> MetricsReport:
    """PSNR/SSIM of 8-bit-quantized renders on every view of ``split``."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    recs = []
    for g in groups:
        for v in g.split_views(split):
            pred = quantize(render(m, v.camera, bg)) / 255.0
            recs.append(MetricsRecord(v.name, g.group_id, psnr(pred, v.image),
                                      ssim(pred, v.image)))
    if not recs:
        raise ValueError(f"no views in split {split!r}")
    return MetricsReport(recs)


@dataclass
class OverlapRow:
    a: int
    b: int
    common: int
    unique: int
    common_voxels: int
    unique_voxels: int


def overlap_report(models: Sequence[GaussianModel]) -> list[OverlapRow]:
    if len({m.voxel_size for m in models}) > 1:
        raise ValueError("models use different voxel sizes")
    grids = [voxel_grid_of(m) for m in models]
    keys = [voxel_keys(m.positions, m.voxel_size).tolist() for m in models]
    rows = []
    for i, a in enumerate(models):
        for j in range(len(models)):
            if i == j:
                continue
            common = sum(tuple(k) in grids[j].keys for k in keys[i])
            cv = len(grids[i].keys & grids[j].keys)
            rows.append(OverlapRow(i, j, common, len(a) - common, cv, len(grids[i]) - cv))
    return rows
