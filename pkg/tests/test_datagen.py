import json
import math

import numpy as np
import pytest

from conftest import small_spec
from xvgs.datagen import (MANIFEST, TEACHER, DatasetError, ImageDimensionError,
                          ManifestRigidError, MissingImageError, SceneSpec, generate_synthetic,
                          load_dataset, read_ppm, write_ppm)
from xvgs.pipeline import evaluate
from xvgs.scene import load_model


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(DatasetError):
        read_ppm(tmp_path / "a.ppm")


def test_default_layout(tmp_path):
    root = generate_synthetic(SceneSpec(), tmp_path)
    ds = load_dataset(root)
    assert len(ds.views) == 32
    for g in ds.groups:
        assert len(g.views) == 16 and len(g.test) == 2
    assert all(v.image.shape == (64, 64, 3) for v in ds.views)


def test_byte_identical_regeneration(tmp_path):
    a = generate_synthetic(small_spec(), tmp_path / "a")
    b = generate_synthetic(small_spec(), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_teacher_reproduces_test_views(small_dataset):
    teacher = load_model(small_dataset.root / TEACHER)
    rep = evaluate(teacher, small_dataset.groups, small_dataset.background)
    assert all(math.isinf(r.psnr) for r in rep.records)


def test_groups_see_different_content(small_dataset):
    aerial, ground = small_dataset.groups
    assert aerial.group_id == 0 and ground.group_id == 1
    za = [v.camera.center[2] for v in aerial.views]
    zg = [v.camera.center[2] for v in ground.views]
    assert min(za) > max(zg)


def _copy(root, tmp_path):
    import shutil
    dst = tmp_path / "copy"
    shutil.copytree(root, dst)
    return dst


def _rewrite(path, fn):
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    fn(rec)
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")


def test_missing_image_names_path(small_dataset_root, tmp_path):
    root = _copy(small_dataset_root, tmp_path)
    victim = root / "images" / "aerial_003.ppm"
    victim.unlink()
    with pytest.raises(MissingImageError, match="aerial_003.ppm"):
        load_dataset(root)


def test_non_rigid_pose_rejected(small_dataset_root, tmp_path):
    root = _copy(small_dataset_root, tmp_path)

    def scale(rec):
        for j in range(3):
            rec["world_to_cam"][j] *= 1.01

    _rewrite(root / MANIFEST, scale)
    with pytest.raises(ManifestRigidError):
        load_dataset(root)


def test_dimension_mismatch_rejected(small_dataset_root, tmp_path):
    root = _copy(small_dataset_root, tmp_path)

    def widen(rec):
        rec["width"] += 1

    _rewrite(root / MANIFEST, widen)
    with pytest.raises(ImageDimensionError):
        load_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_spec_validation():
    with pytest.raises(ValueError):
        small_spec(image_size=16)
