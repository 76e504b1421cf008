"""Paired comparison of the full pipeline, the joint baseline and single-component ablations.

Every variant trains ``cross_iters + finetune_iters`` steps on the joint view set
(a densifying stage followed by a consolidation stage), so variants differ only
in initialization, densification criterion, hinge weight and supplementation.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adc import DensifyMode
from .datagen import Dataset, load_dataset
from .pipeline import (MetricsReport, PipelineConfig, TrainLog, downsample_to_pointcloud,
                       evaluate, finetune, init_cross, random_pointcloud, supplement,
                       train_branch, train_cross)
from .scene import GaussianModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    distant_init: bool
    mode: DensifyMode
    hinge: bool
    supplement: bool

    @property
    def needs_branches(self) -> bool:
        return self.distant_init or self.hinge or self.supplement


VARIANTS = {
    "baseline": Variant("baseline", False, DensifyMode.AVERAGE, False, False),
    "init": Variant("init", True, DensifyMode.AVERAGE, False, False),
    "reg": Variant("reg", False, DensifyMode.GROUP_MAX, True, False),
    "supp": Variant("supp", False, DensifyMode.AVERAGE, False, True),
    "full": Variant("full", True, DensifyMode.GROUP_MAX, True, True),
}


@dataclass
class VariantResult:
    variant: str
    seed: int
    report: MetricsReport
    primitives: int
    densified: int
    seconds: float
    model: Optional[GaussianModel] = None
    logs: list = field(default_factory=list)
    branch_seconds: float = 0.0

    @property
    def mean_psnr(self) -> float:
        return self.report.mean_psnr

    def group_psnr(self) -> dict[int, float]:
        return {g: v[0] for g, v in self.report.group_means().items()}


def run_branches(ds: Dataset, cfg: PipelineConfig) -> dict[int, GaussianModel]:
    pc = random_pointcloud(ds.bounds, cfg.random_init_points, cfg)
    return {g.group_id: train_branch(g, pc, cfg, ds.background)[0] for g in ds.groups}


def run_variant(ds: Dataset, cfg: PipelineConfig, variant: Variant,
                branches: Optional[dict] = None, keep_model: bool = False) -> VariantResult:
    t0 = time.perf_counter()
    if variant.needs_branches and branches is None:
        raise ValueError(f"variant {variant.name} needs trained branches")
    if variant.distant_init:
        init = init_cross(downsample_to_pointcloud(branches[cfg.distant_group],
                                                   cfg.downsample_ratio), cfg)
    else:
        init = init_cross(random_pointcloud(ds.bounds, cfg.random_init_points, cfg), cfg)
    lam = cfg.weights.lambda_reg if variant.hinge else 0.0
    model, cross_log = train_cross(init, ds.groups, branches, cfg, ds.background,
                                   mode=variant.mode, lambda_reg=lam)
    densified = sum(r.added for r in cross_log.densify)
    if variant.supplement:
        model, _ = supplement(model, [branches[g.group_id] for g in ds.groups])
    model, ft_log = finetune(model, ds.groups, cfg, ds.background)
    report = evaluate(model, ds.groups, ds.background)
    return VariantResult(variant.name, cfg.seed, report, len(model), densified,
                         time.perf_counter() - t0, model if keep_model else None,
                         [cross_log, ft_log])


def _branch_job(args):
    root, cfg = args
    t0 = time.perf_counter()
    branches = run_branches(load_dataset(root), cfg)
    return cfg.seed, branches, time.perf_counter() - t0


def _variant_job(args):
    root, cfg, name, branches = args
    return run_variant(load_dataset(root), cfg, VARIANTS[name], branches)


def run_experiment(dataset_root, cfg: PipelineConfig, seeds: Sequence[int],
                   variants: Sequence[str] = tuple(VARIANTS), workers: Optional[int] = None
                   ) -> list[VariantResult]:
    """Run ``variants`` for each seed; jobs fan out over a process pool.

    Results are returned in (seed, variant) order regardless of completion
    order, and each job is a pure function of its inputs.
    """
    workers = workers or os.cpu_count() or 1
    root = str(dataset_root)
    cfgs = {s: replace(cfg, seed=s) for s in seeds}
    need = any(VARIANTS[v].needs_branches for v in variants)
    branches = {s: None for s in seeds}
    branch_secs = {s: 0.0 for s in seeds}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        if need:
            for s, b, secs in pool.map(_branch_job, [(root, cfgs[s]) for s in seeds]):
                branches[s], branch_secs[s] = b, secs
        jobs = [(root, cfgs[s], v, branches[s] if VARIANTS[v].needs_branches else None)
                for s in seeds for v in variants]
        results = list(pool.map(_variant_job, jobs))
    for r in results:
        r.branch_seconds = branch_secs[r.seed]
    return results


def projected_wall_time(results: Sequence[VariantResult], workers: int) -> float:
    """Wall time of the same jobs on ``workers`` processes, from measured job durations.

    Greedy list scheduling in submission order, branch jobs first (the variant
    jobs wait for them), which is how the process pool dispatches them.
    """
    def schedule(durations, start):
        free = [start] * workers
        for d in durations:
            i = int(np.argmin(free))
            free[i] += d
        return max(free) if durations else start

    branch = {r.seed: r.branch_seconds for r in results}
    t = schedule([branch[s] for s in sorted(branch) if branch[s] > 0], 0.0)
    return schedule([r.seconds for r in results], t)


def summarize(results: Sequence[VariantResult]) -> dict[str, dict]:
    """Per-variant mean PSNR over seeds plus per-seed and per-group values."""
    out: dict[str, dict] = {}
    for r in results:
        d = out.setdefault(r.variant, {"seeds": {}, "groups": {}})
        d["seeds"][r.seed] = r.mean_psnr
        d["groups"][r.seed] = r.group_psnr()
    for d in out.values():
        d["mean"] = float(np.mean(list(d["seeds"].values())))
    return out


def results_table(results: Sequence[VariantResult]) -> list[str]:
    lines = ["variant\tseed\tpsnr\tssim\tpsnr_group0\tpsnr_group1\tprimitives\tdensified\tseconds"]
    for r in results:
        p, s, _ = r.report.overall()
        gm = r.report.group_means()
        gp = [f"{gm[g][0]:.4f}" if g in gm else "-" for g in (0, 1)]
        lines.append(f"{r.variant}\t{r.seed}\t{p:.4f}\t{s:.4f}\t{gp[0]}\t{gp[1]}\t"
                     f"{r.primitives}\t{r.densified}\t{r.seconds:.1f}")
    return lines
