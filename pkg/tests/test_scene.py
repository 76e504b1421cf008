import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xvgs.scene import (BadMagicError, Camera, Gaussian3D, GaussianModel,
                        TruncatedCheckpointError, VersionMismatchError, covariance_of,
                        deserialize_model, serialize_model, voxel_grid_of, voxel_key)


def gaussian(rotation=(1.0, 0.0, 0.0, 0.0), log_scale=(0.0, 0.0, 0.0), position=(0, 0, 0)):
    return Gaussian3D(tuple(map(float, position)), tuple(log_scale), tuple(rotation), 0.0,
                      (0.5, 0.5, 0.5))


def random_model(rng, n, eps=0.1):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    m = GaussianModel(rng.uniform(-1, 1, (n, 3)), rng.uniform(-3, 0, (n, 3)), q,
                      rng.normal(size=n), rng.uniform(0, 1, (n, 3)), eps)
    return m.round_to_float32()


class TestCovariance:
    def test_identity(self):
        np.testing.assert_array_equal(covariance_of(gaussian()), np.eye(3))

    def test_axis_aligned_scaling(self):
        cov = covariance_of(gaussian(log_scale=(math.log(2), 0, 0)))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_z_rotation_swaps_axes(self):
        # R diag(4,1,1) R^T with R = 90 degrees about z, multiplied out by hand
        c = math.cos(math.pi / 4)
        cov = covariance_of(gaussian(rotation=(c, 0, 0, c), log_scale=(math.log(2), 0, 0)))
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
        lambda q: np.linalg.norm(q) > 1e-2),
        st.lists(st.floats(-4, 2), min_size=3, max_size=3))
    def test_spd_with_scale_eigenvalues(self, q, log_scale):
        q = np.asarray(q) / np.linalg.norm(q)
        cov = covariance_of(gaussian(rotation=tuple(q), log_scale=tuple(log_scale)))
        assert np.abs(cov - cov.T).max() <= 1e-9
        eig = np.sort(np.linalg.eigvalsh(cov))
        assert eig[0] > 0
        np.testing.assert_allclose(eig, np.sort(np.exp(2 * np.asarray(log_scale))),
                                   rtol=1e-9, atol=1e-9)

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(ValueError):
            gaussian(rotation=(2.0, 0.0, 0.0, 0.0))


class TestVoxelKey:
    @pytest.mark.parametrize("p, key", [
        ((0.05, 0.05, 0.05), (0, 0, 0)),
        ((-0.05, 0.0, 0.19), (-1, 0, 1)),
        ((0.1, 0.1, 0.1), (1, 1, 1)),
    ])
    def test_examples(self, p, key):
        assert voxel_key(p, 0.1) == key

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            voxel_key((0.0, math.nan, 0.0), 0.1)

    @given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=3), st.integers(0, 2))
    def test_unit_translation_shifts_one_component(self, cell, axis):
        # points at cell centers on a dyadic grid so p + eps is exact
        eps = 0.125
        p = (np.asarray(cell) + 0.5) * eps
        q = p.copy()
        q[axis] += eps
        k0, k1 = np.asarray(voxel_key(p, eps)), np.asarray(voxel_key(q, eps))
        expect = np.zeros(3, dtype=int)
        expect[axis] = 1
        np.testing.assert_array_equal(k1 - k0, expect)


class TestVoxelGrid:
    def test_dedup_same_cell(self):
        m = GaussianModel.from_gaussians([gaussian(position=(0.01, 0.01, 0.01)),
                                          gaussian(position=(0.02, 0.03, 0.04))], 0.1)
        assert len(voxel_grid_of(m)) == 1

    def test_three_cells(self):
        m = GaussianModel.from_gaussians(
            [gaussian(position=(x, 0, 0)) for x in (0.05, 0.15, 0.25)], 0.1)
        assert voxel_grid_of(m).keys == {(0, 0, 0), (1, 0, 0), (2, 0, 0)}

    def test_empty_model_empty_grid(self):
        assert len(voxel_grid_of(GaussianModel.empty(0.1))) == 0

    def test_matches_brute_force_image(self):
        rng = np.random.default_rng(3)
        m = random_model(rng, 50)
        brute = {voxel_key(g.position, m.voxel_size) for g in m.gaussians}
        assert voxel_grid_of(m).keys == brute

    def test_key_count_nonincreasing_in_voxel_size(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pts = rng.uniform(0, 1, (rng.integers(1, 200), 3))
            counts = []
            for eps in (0.1, 0.2, 0.4, 0.8, 1.6, 10.0):
                # nested dyadic grids: every coarse cell is a union of fine cells
                m = GaussianModel(pts, np.zeros_like(pts), np.tile([1.0, 0, 0, 0], (len(pts), 1)),
                                  np.zeros(len(pts)), np.zeros_like(pts), eps)
                counts.append(len(voxel_grid_of(m)))
            assert counts == sorted(counts, reverse=True)
            assert counts[0] <= len(pts)


class TestSerialization:
    def test_empty_round_trip(self):
        m = GaussianModel.empty(0.1)
        out = deserialize_model(serialize_model(m))
        assert len(out) == 0 and out == m

    def test_random_round_trip_bit_exact(self):
        m = random_model(np.random.default_rng(0), 1000, eps=0.037)
        out = deserialize_model(serialize_model(m))
        assert out == m
        assert out.voxel_size == m.voxel_size

    def test_layout(self):
        m = random_model(np.random.default_rng(1), 3)
        data = serialize_model(m)
        assert data[:4] == b"XVGS"
        assert len(data) == 4 + 4 + 8 + 4 + 3 * 14 * 4
        rec = np.frombuffer(data, "<f4", offset=20)[:14]
        np.testing.assert_array_equal(rec[:3], m.positions[0].astype(np.float32))
        np.testing.assert_array_equal(rec[6:10], m.rotations[0].astype(np.float32))

    def test_truncated_stream(self):
        data = serialize_model(random_model(np.random.default_rng(2), 10))
        with pytest.raises(TruncatedCheckpointError):
            deserialize_model(data[:-30])
        with pytest.raises(TruncatedCheckpointError):
            deserialize_model(data[:10])

    def test_bad_magic(self):
        data = serialize_model(GaussianModel.empty(0.1))
        with pytest.raises(BadMagicError):
            deserialize_model(b"PLY!" + data[4:])

    def test_version_mismatch(self):
        data = bytearray(serialize_model(GaussianModel.empty(0.1)))
        data[4] = 99
        with pytest.raises(VersionMismatchError):
            deserialize_model(bytes(data))


class TestCamera:
    def test_rejects_non_rigid_rotation(self):
        with pytest.raises(ValueError):
            Camera(10, 10, 5, 5, 10, 10, np.diag([1.0, 1.0, 1.1]), np.zeros(3))

    def test_look_at_points_forward(self):
        cam = Camera.look_at([0, 0, 5], [0, 0, 0], [0, 1, 0], 10, 10, 11, 11)
        p_cam = cam.rotation @ np.zeros(3) + cam.translation
        np.testing.assert_allclose(p_cam, [0, 0, 5], atol=1e-12)
        np.testing.assert_allclose(cam.center, [0, 0, 5], atol=1e-12)
