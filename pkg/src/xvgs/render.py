"""Differentiable Gaussian splatting: EWA projection, depth-sorted compositing, backward pass.

Pixel ``(x, y)`` samples the image plane at integer coordinates, so a camera with
``cx = cy = 32`` maps the optical axis onto pixel (32, 32).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy.special import expit

from .scene import Camera, Gaussian3D, GaussianModel, quat_to_rotmat

NEAR_PLANE = 0.01
LOWPASS = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
TILE = 8


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float
    source_index: int


@dataclass
class RenderGradients:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    screen_grad_norm: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RenderGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n), np.zeros(n, dtype=bool))


class _Projection:
    """Per-Gaussian screen-space quantities, kept for the backward pass."""

    def __init__(self, m: GaussianModel, cam: Camera):
        n = len(m)
        W = cam.rotation
        self.p_cam = m.positions @ W.T + cam.translation
        X, Y, Z = self.p_cam[:, 0], self.p_cam[:, 1], self.p_cam[:, 2]
        front = Z > NEAR_PLANE
        Zs = np.where(front, Z, 1.0)

        self.qnorm = np.linalg.norm(m.rotations, axis=1)
        self.R = quat_to_rotmat(m.rotations)
        self.scales = np.exp(m.log_scales)
        self.M = self.R * self.scales[:, None, :]
        self.Sigma = self.M @ self.M.transpose(0, 2, 1)

        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = cam.fx / Zs
        J[:, 0, 2] = -cam.fx * X / Zs**2
        J[:, 1, 1] = cam.fy / Zs
        J[:, 1, 2] = -cam.fy * Y / Zs**2
        self.J = J
        self.T = J @ W
        cov = self.T @ self.Sigma @ self.T.transpose(0, 2, 1)
        cov[:, 0, 0] += LOWPASS
        cov[:, 1, 1] += LOWPASS
        self.cov2d = cov
        a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
        self.det = a * c - b * b
        self.conic = np.stack([c / self.det, -b / self.det, a / self.det], axis=1)
        self.mean2d = np.stack([cam.fx * X / Zs + cam.cx, cam.fy * Y / Zs + cam.cy], axis=1)
        self.depth = Z
        self.alpha = expit(m.opacity_logits)
        self.color = np.clip(m.colors, 0.0, 1.0)

        # 3-sigma footprint test against the image rectangle
        lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        r3 = 3.0 * np.sqrt(lam_max)
        u, v = self.mean2d[:, 0], self.mean2d[:, 1]
        onscreen = ((u + r3 >= -0.5) & (u - r3 <= cam.width - 0.5)
                    & (v + r3 >= -0.5) & (v - r3 <= cam.height - 0.5))
        self.kept = front & onscreen
        # half-extents of the region where alpha' >= ALPHA_MIN is possible
        with np.errstate(divide="ignore"):
            Q = 2.0 * np.log(np.maximum(255.0 * self.alpha, 1e-300))
        Q = np.where(Q > 0, Q, 0.0)
        # cheap reject before exp(); the margin leaves the exact alpha test in charge
        self.qcut = Q + 1e-6
        self.extent = np.stack([np.sqrt(Q * a), np.sqrt(Q * c)], axis=1) + 1e-3
        self.contributes = self.kept & (255.0 * self.alpha >= 1.0)
        idx = np.flatnonzero(self.contributes)
        self.order = idx[np.argsort(self.depth[idx], kind="stable")]


def project(g: Gaussian3D, cam: Camera, index: int = 0) -> Optional[Splat2D]:
    """Project one primitive; ``None`` when it is culled."""
    proj = _Projection(GaussianModel.from_gaussians([g], 1.0), cam)
    if not proj.kept[0]:
        return None
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]), proj.color[0],
                   float(proj.alpha[0]), index)


@numba.njit(cache=True)
def _bin_tiles(order, mean2d, extent, width, height, tile):
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    counts = np.zeros(tx * ty + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(int(np.floor((mean2d[g, 0] - extent[g, 0]) / tile)), 0)
        x1 = min(int(np.floor((mean2d[g, 0] + extent[g, 0]) / tile)), tx - 1)
        y0 = max(int(np.floor((mean2d[g, 1] - extent[g, 1]) / tile)), 0)
        y1 = min(int(np.floor((mean2d[g, 1] + extent[g, 1]) / tile)), ty - 1)
        for j in range(y0, y1 + 1):
            for i in range(x0, x1 + 1):
                counts[j * tx + i + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(int(np.floor((mean2d[g, 0] - extent[g, 0]) / tile)), 0)
        x1 = min(int(np.floor((mean2d[g, 0] + extent[g, 0]) / tile)), tx - 1)
        y0 = max(int(np.floor((mean2d[g, 1] - extent[g, 1]) / tile)), 0)
        y1 = min(int(np.floor((mean2d[g, 1] + extent[g, 1]) / tile)), ty - 1)
        for j in range(y0, y1 + 1):
            for i in range(x0, x1 + 1):
                t = j * tx + i
                entries[fill[t]] = g
                fill[t] += 1
    return offsets, entries


@numba.njit(cache=True)
def _raster_forward(offsets, entries, mean2d, conic, alpha, qcut, color, bg, width, height, tile):
    tx = (width + tile - 1) // tile
    image = np.empty((height, width, 3))
    t_final = np.empty((height, width))
    n_last = np.zeros((height, width), dtype=np.int64)
    visible = np.zeros(alpha.shape[0], dtype=np.bool_)
    for y in range(height):
        for x in range(width):
            t = (y // tile) * tx + x // tile
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            last = 0
            for k in range(offsets[t], offsets[t + 1]):
                g = entries[k]
                dx = x - mean2d[g, 0]
                dy = y - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q > qcut[g]:
                    continue
                a = alpha[g] * np.exp(-0.5 * q)
                if a < ALPHA_MIN:
                    continue
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                w = a * T
                c0 += color[g, 0] * w
                c1 += color[g, 1] * w
                c2 += color[g, 2] * w
                T *= 1.0 - a
                last = k - offsets[t] + 1
                visible[g] = True
            image[y, x, 0] = min(max(c0 + bg[0] * T, 0.0), 1.0)
            image[y, x, 1] = min(max(c1 + bg[1] * T, 0.0), 1.0)
            image[y, x, 2] = min(max(c2 + bg[2] * T, 0.0), 1.0)
            t_final[y, x] = T
            n_last[y, x] = last
    return image, t_final, n_last, visible


@numba.njit(cache=True)
def _raster_backward(offsets, entries, mean2d, conic, alpha, qcut, color, bg, width, height,
                     tile, t_final, n_last, dimg):
    n = alpha.shape[0]
    tx = (width + tile - 1) // tile
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    g_color = np.zeros((n, 3))
    for y in range(height):
        for x in range(width):
            t = (y // tile) * tx + x // tile
            d0 = dimg[y, x, 0]
            d1 = dimg[y, x, 1]
            d2 = dimg[y, x, 2]
            T = t_final[y, x]
            r0 = bg[0] * T
            r1 = bg[1] * T
            r2 = bg[2] * T
            start = offsets[t]
            for k in range(start + n_last[y, x] - 1, start - 1, -1):
                g = entries[k]
                dx = x - mean2d[g, 0]
                dy = y - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q > qcut[g]:
                    continue
                G = np.exp(-0.5 * q)
                a = alpha[g] * G
                if a < ALPHA_MIN:
                    continue
                clamped = a > ALPHA_MAX
                if clamped:
                    a = ALPHA_MAX
                Ti = T / (1.0 - a)
                w = a * Ti
                g_color[g, 0] += d0 * w
                g_color[g, 1] += d1 * w
                g_color[g, 2] += d2 * w
                inv = 1.0 / (1.0 - a)
                dl_da = (d0 * (color[g, 0] * Ti - r0 * inv)
                         + d1 * (color[g, 1] * Ti - r1 * inv)
                         + d2 * (color[g, 2] * Ti - r2 * inv))
                r0 += color[g, 0] * w
                r1 += color[g, 1] * w
                r2 += color[g, 2] * w
                T = Ti
                if clamped:
                    continue
                g_alpha[g] += dl_da * G
                dl_dq = -0.5 * G * alpha[g] * dl_da
                g_mean[g, 0] += dl_dq * -2.0 * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mean[g, 1] += dl_dq * -2.0 * (conic[g, 1] * dx + conic[g, 2] * dy)
                g_conic[g, 0] += dl_dq * dx * dx
                g_conic[g, 1] += dl_dq * 2.0 * dx * dy
                g_conic[g, 2] += dl_dq * dy * dy
    return g_mean, g_conic, g_alpha, g_color


class Rendering:
    """Forward result plus the state needed by :func:`render_backward`."""

    def __init__(self, m: GaussianModel, cam: Camera, background=(0.0, 0.0, 0.0)):
        self.camera = cam
        self.background = np.asarray(background, dtype=np.float64).reshape(3)
        self.proj = p = _Projection(m, cam)
        self.offsets, self.entries = _bin_tiles(p.order, p.mean2d, p.extent,
                                                cam.width, cam.height, TILE)
        self.image, self.t_final, self.n_last, self.visible = _raster_forward(
            self.offsets, self.entries, p.mean2d, p.conic, p.alpha, p.qcut, p.color,
            self.background, cam.width, cam.height, TILE)

    def backward(self, m: GaussianModel, dL_dimage: np.ndarray) -> RenderGradients:
        cam, p = self.camera, self.proj
        dL_dimage = np.asarray(dL_dimage, dtype=np.float64)
        if dL_dimage.shape != (cam.height, cam.width, 3):
            raise ValueError(f"image gradient has shape {dL_dimage.shape}, "
                             f"camera renders {(cam.height, cam.width, 3)}")
        g_mean, g_conic, g_alpha, g_color = _raster_backward(
            self.offsets, self.entries, p.mean2d, p.conic, p.alpha, p.qcut, p.color,
            self.background, cam.width, cam.height, TILE, self.t_final, self.n_last,
            np.ascontiguousarray(dL_dimage))
        return _chain_to_parameters(m, cam, p, g_mean, g_conic, g_alpha, g_color, self.visible)


def _chain_to_parameters(m, cam, p, g_mean, g_conic, g_alpha, g_color, visible):
    n = len(m)
    out = RenderGradients.zeros(n)
    out.visible = visible.copy()
    if not visible.any():
        return out
    vis = visible

    # conic -> 2D covariance
    cov = p.cov2d[vis]
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    D2 = p.det[vis] ** 2
    gx, gxy, gy = g_conic[vis, 0], g_conic[vis, 1], g_conic[vis, 2]
    g_a = (-c * c * gx + b * c * gxy - b * b * gy) / D2
    g_b = (2 * b * c * gx - (a * c + b * b) * gxy + 2 * a * b * gy) / D2
    g_c = (-b * b * gx + a * b * gxy - a * a * gy) / D2

    # 2D covariance -> Sigma and T = J W
    T = p.T[vis]
    Sigma = p.Sigma[vis]
    T0, T1 = T[:, 0, :], T[:, 1, :]
    g_Sigma = (g_a[:, None, None] * T0[:, :, None] * T0[:, None, :]
               + g_b[:, None, None] * T0[:, :, None] * T1[:, None, :]
               + g_c[:, None, None] * T1[:, :, None] * T1[:, None, :])
    ST0 = np.einsum("nij,nj->ni", Sigma, T0)
    ST1 = np.einsum("nij,nj->ni", Sigma, T1)
    g_T = np.stack([2 * g_a[:, None] * ST0 + g_b[:, None] * ST1,
                    g_b[:, None] * ST0 + 2 * g_c[:, None] * ST1], axis=1)
    g_J = g_T @ cam.rotation.T

    # Sigma = M M^T, M = R diag(s)
    M = p.M[vis]
    g_M = (g_Sigma + g_Sigma.transpose(0, 2, 1)) @ M
    R = p.R[vis]
    s = p.scales[vis]
    out.log_scale[vis] = np.einsum("nik,nik->nk", R, g_M) * s
    g_R = g_M * s[:, None, :]
    out.rotation[vis] = _rotmat_vjp(m.rotations[vis], p.qnorm[vis], g_R)

    # camera-frame position via mean2d and J
    X, Y, Z = p.p_cam[vis, 0], p.p_cam[vis, 1], p.p_cam[vis, 2]
    fx, fy = cam.fx, cam.fy
    gu, gv = g_mean[vis, 0], g_mean[vis, 1]
    gpx = gu * fx / Z - g_J[:, 0, 2] * fx / Z**2
    gpy = gv * fy / Z - g_J[:, 1, 2] * fy / Z**2
    gpz = (-gu * fx * X / Z**2 - gv * fy * Y / Z**2
           - g_J[:, 0, 0] * fx / Z**2 + g_J[:, 0, 2] * 2 * fx * X / Z**3
           - g_J[:, 1, 1] * fy / Z**2 + g_J[:, 1, 2] * 2 * fy * Y / Z**3)
    out.position[vis] = np.stack([gpx, gpy, gpz], axis=1) @ cam.rotation

    al = p.alpha[vis]
    out.opacity_logit[vis] = g_alpha[vis] * al * (1.0 - al)
    inside = (m.colors[vis] >= 0.0) & (m.colors[vis] <= 1.0)
    out.color[vis] = np.where(inside, g_color[vis], 0.0)
    out.screen_grad_norm[vis] = np.hypot(gu, gv)
    return out


def _rotmat_vjp(q_raw, qnorm, g_R):
    """Pull a rotation-matrix gradient back to the raw (unnormalized) wxyz quaternion."""
    q = q_raw / qnorm[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = g_R
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
              - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    # d(q/|q|)/dq = (I - n n^T) / |q|
    return (gq - q * np.sum(gq * q, axis=1, keepdims=True)) / qnorm[:, None]


def render(m: GaussianModel, cam: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Render ``m`` from ``cam``; returns an (H, W, 3) float image in [0, 1]."""
    return Rendering(m, cam, background).image


def render_backward(m: GaussianModel, cam: Camera, dL_dimage: np.ndarray,
                    background=(0.0, 0.0, 0.0)) -> RenderGradients:
    return Rendering(m, cam, background).backward(m, dL_dimage)
