"""Command-line entry point: ``xvgs <command> ...``.

Every command exits 0 on success and 1 with a single ``xvgs: error: ...`` line
on failure. Reports are tab-separated text; commands that write a report also
write a PNG figure next to it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .datagen import SceneSpec, generate_synthetic, load_dataset, write_ppm
from .experiment import VARIANTS, results_table, run_experiment, summarize
from .pipeline import (PipelineConfig, downsample_to_pointcloud, evaluate, finetune, init_cross,
                       overlap_report, random_pointcloud, supplement, train_branch, train_cross)
from .render import render
from .scene import Camera, load_model, save_model

log = logging.getLogger("xvgs")

# keys a config file may carry besides the PipelineConfig fields
_RUN_KEYS = ("dataset", "output_dir")


class CLIError(Exception):
    pass


def load_config(path, seed=None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as e:
            raise CLIError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise CLIError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise CLIError(f"config {path} must hold a JSON object")
        for k in _RUN_KEYS:
            d.pop(k, None)
        cfg = PipelineConfig.from_dict(d)
    return cfg if seed is None else replace(cfg, seed=seed)


def _write_lines(path, lines) -> None:
    Path(path).write_text("\n".join(lines) + "\n")


def _camera_from_record(rec: dict) -> Camera:
    T = np.asarray(rec["world_to_cam"], dtype=np.float64).reshape(4, 4)
    return Camera(rec["fx"], rec["fy"], rec["cx"], rec["cy"], int(rec["width"]),
                  int(rec["height"]), T[:3, :3], T[:3, 3])


def _resolve_camera(spec: str, dataset) -> Camera:
    if spec.lstrip("-").isdigit():
        if dataset is None:
            raise CLIError("a camera index needs --dataset")
        views = load_dataset(dataset).views
        i = int(spec)
        if not 0 <= i < len(views):
            raise CLIError(f"camera index {i} out of range (dataset has {len(views)} views)")
        return views[i].camera
    try:
        rec = json.loads(Path(spec).read_text())
    except OSError as e:
        raise CLIError(f"cannot read pose file {spec}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"pose file {spec} is not valid JSON: {e}") from None
    try:
        return _camera_from_record(rec)
    except KeyError as e:
        raise CLIError(f"pose file {spec} lacks field {e}") from None


# -- commands ------------------------------------------------------------------

def cmd_gen(a):
    spec = SceneSpec.from_file(a.spec) if a.spec != "-" else SceneSpec()
    if a.seed is not None:
        spec = replace(spec, seed=a.seed)
    out = generate_synthetic(spec, a.out)
    ds = load_dataset(out)
    print(f"wrote {len(ds.views)} views in {len(ds.groups)} groups to {out}")


def cmd_train_branch(a):
    ds = load_dataset(a.dataset)
    cfg = load_config(a.config, a.seed)
    group = ds.group(a.group)
    pc = random_pointcloud(ds.bounds, cfg.random_init_points, cfg)
    model, tlog = train_branch(group, pc, cfg, ds.background)
    save_model(model, a.out)
    _write_densify_log(a.out, tlog)
    print(f"branch {a.group}: {len(model)} primitives -> {a.out}")


def _write_densify_log(out, tlog) -> None:
    if not tlog.densify:
        return
    path = Path(str(out) + ".densify.tsv")
    _write_lines(path, ["iteration\tmode\tcandidates\tadded\tpruned\tgroup_max_avg"]
                 + tlog.densify_lines())
    plotting.plot_densify(tlog.densify, plotting.figure_path(path))


def cmd_train_cross(a):
    ds = load_dataset(a.dataset)
    cfg = load_config(a.config, a.seed)
    if len(a.branches) != len(ds.groups):
        raise CLIError(f"got {len(a.branches)} branch checkpoints for {len(ds.groups)} "
                       "view groups (pass one per group, in group order)")
    branches = {g.group_id: load_model(p) for g, p in zip(ds.groups, a.branches)}
    if cfg.distant_group not in branches:
        raise CLIError(f"distant_group {cfg.distant_group} is not a view group of the dataset")
    init = init_cross(downsample_to_pointcloud(branches[cfg.distant_group],
                                               cfg.downsample_ratio), cfg)
    model, tlog = train_cross(init, ds.groups, branches, cfg, ds.background)
    save_model(model, a.out)
    _write_densify_log(a.out, tlog)
    print(f"cross: {len(init)} -> {len(model)} primitives -> {a.out}")


def cmd_supplement(a):
    cross = load_model(a.cross)
    branches = [load_model(p) for p in a.branches]
    model, rep = supplement(cross, branches)
    save_model(model, a.out)
    lines = rep.to_lines()
    if a.report:
        _write_lines(a.report, lines)
    print("\n".join(lines))


def cmd_finetune(a):
    ds = load_dataset(a.dataset)
    cfg = load_config(a.config, a.seed)
    model, _ = finetune(load_model(a.model), ds.groups, cfg, ds.background)
    save_model(model, a.out)
    print(f"fine-tuned {len(model)} primitives -> {a.out}")


def cmd_render(a):
    m = load_model(a.model)
    cam = _resolve_camera(a.camera, a.dataset)
    if a.background is not None:
        bg = a.background
    elif a.dataset is not None:
        bg = load_dataset(a.dataset).background
    else:
        bg = (0.0, 0.0, 0.0)
    write_ppm(a.out, render(m, cam, bg))
    print(f"rendered {cam.width}x{cam.height} -> {a.out}")


def cmd_eval(a):
    ds = load_dataset(a.dataset)
    rep = evaluate(load_model(a.model), ds.groups, ds.background, split=a.split)
    lines = rep.to_lines()
    _write_lines(a.report, lines)
    plotting.plot_group_psnr(rep, plotting.figure_path(a.report))
    print("\n".join(ln for ln in lines if ln.startswith("mean:")))


def cmd_report(a):
    rows = overlap_report([load_model(p) for p in a.models])
    lines = ["a\tb\tcommon\tunique\tcommon_voxels\tunique_voxels"]
    lines += [f"{r.a}\t{r.b}\t{r.common}\t{r.unique}\t{r.common_voxels}\t{r.unique_voxels}"
              for r in rows]
    if a.out:
        _write_lines(a.out, lines)
        plotting.plot_overlap(rows, plotting.figure_path(a.out))
    print("\n".join(lines))


def cmd_experiment(a):
    cfg = load_config(a.config)
    variants = a.variants or list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise CLIError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
    res = run_experiment(a.dataset, cfg, a.seeds, variants, workers=a.workers)
    lines = results_table(res)
    _write_lines(a.out, lines)
    plotting.plot_variants(summarize(res), plotting.figure_path(a.out))
    print("\n".join(lines))


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="xvgs", description="Cross-view Gaussian splatting: data generation, the "
        "training stages, rendering and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def cfg_args(sp):
        sp.add_argument("config", help="JSON config with PipelineConfig fields")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("gen", help="generate the synthetic aerial/ground dataset")
    sp.add_argument("spec", help="JSON SceneSpec file, or '-' for the default scene")
    sp.add_argument("out", help="output dataset directory")
    sp.add_argument("--seed", type=int, help="override the scene seed")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train-branch", help="train a sub-model on one view group")
    sp.add_argument("dataset")
    sp.add_argument("group", type=int, help="view group id")
    cfg_args(sp)
    sp.add_argument("out", help="output checkpoint")
    sp.set_defaults(func=cmd_train_branch)

    sp = sub.add_parser("train-cross", help="cross-view training initialized from the "
                        "distant-view branch")
    sp.add_argument("dataset")
    cfg_args(sp)
    sp.add_argument("branches", nargs="+", metavar="branch",
                    help="branch checkpoints, one per view group in group order")
    sp.add_argument("out", help="output checkpoint")
    sp.set_defaults(func=cmd_train_cross)

    sp = sub.add_parser("supplement", help="add branch primitives from voxels the "
                        "cross-view model leaves empty")
    sp.add_argument("cross")
    sp.add_argument("branches", nargs="+", metavar="branch")
    sp.add_argument("out", help="output checkpoint")
    sp.add_argument("--report", help="also write the supplement table here")
    sp.set_defaults(func=cmd_supplement)

    sp = sub.add_parser("finetune", help="joint fine-tuning with the reconstruction loss")
    sp.add_argument("dataset")
    cfg_args(sp)
    sp.add_argument("model")
    sp.add_argument("out", help="output checkpoint")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("render", help="render a checkpoint to a PPM image")
    sp.add_argument("model")
    sp.add_argument("camera", help="view index into --dataset, or a JSON pose file with "
                    "fx, fy, cx, cy, width, height, world_to_cam (16 values, row-major)")
    sp.add_argument("out", help="output .ppm")
    sp.add_argument("--dataset", help="dataset for camera indices and background")
    sp.add_argument("--background", type=float, nargs=3, metavar=("R", "G", "B"))
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR/SSIM on the test views; writes TSV + PNG")
    sp.add_argument("dataset")
    sp.add_argument("model")
    sp.add_argument("report", help="output TSV; the figure goes next to it as .png")
    sp.add_argument("--split", default="test", choices=["test", "train"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="pairwise voxel overlap between checkpoints")
    sp.add_argument("models", nargs="+", metavar="model")
    sp.add_argument("--out", help="write the table (and a .png figure) here")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("experiment", help="baseline / ablations / full pipeline over seeds")
    sp.add_argument("dataset")
    sp.add_argument("out", help="output TSV; the figure goes next to it as .png")
    sp.add_argument("--config", help="JSON config with PipelineConfig fields "
                    "(defaults when omitted)")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--variants", nargs="+", help=f"subset of {list(VARIANTS)}")
    sp.add_argument("--workers", type=int, help="process count (default: all cores)")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        a.func(a)
    except (CLIError, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"xvgs: error: {msg}".splitlines()[0], file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
