"""Image losses, quality metrics and the training objectives.

Every loss that participates in training has a ``*_grad`` companion returning
the gradient with respect to the first image argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .scene import GaussianModel

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_vol: float = 0.01
    lambda_reg: float = 1.0

    def __post_init__(self):
        if min(self.lambda_ssim, self.lambda_vol, self.lambda_reg) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1_loss(a: np.ndarray, b: np.ndarray) -> float:
    _check_same(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sign(a - b) / a.size


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _check_same(a, b)
    return float(np.mean((a - b) ** 2))


def mse_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * (a - b) / a.size


# distance used by the hinge regularizer: name -> (value, gradient w.r.t. first arg)
DISTANCES = {"l1": (l1_loss, l1_grad), "l2": (mse, mse_grad)}


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for unit-range images; identical images give ``inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gaussian_taps(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_TAPS = _gaussian_taps()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the two leading axes."""
    r = len(_TAPS) // 2
    y = correlate1d(x, _TAPS, axis=0, mode="constant")[r:-r]
    return correlate1d(y, _TAPS, axis=1, mode="constant")[:, r:-r]


def _filter_valid_adjoint(g: np.ndarray) -> np.ndarray:
    # the taps are symmetric, so the adjoint is a zero-padded correlation
    r = len(_TAPS) // 2
    pad = ((r, r), (r, r)) + ((0, 0),) * (g.ndim - 2)
    y = correlate1d(np.pad(g, pad), _TAPS, axis=0, mode="constant")
    return correlate1d(y, _TAPS, axis=1, mode="constant")


def _ssim_terms(a, b):
    _check_same(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
                         f"got {a.shape[1]}x{a.shape[0]}")
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a**2
    var_b = _filter_valid(b * b) - mu_b**2
    cov = _filter_valid(a * b) - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * cov + C2
    B1 = mu_a**2 + mu_b**2 + C1
    B2 = var_a + var_b + C2
    return mu_a, mu_b, A1, A2, B1, B2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all valid 11x11 windows and channels (unit dynamic range)."""
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    return float(np.mean((A1 * A2) / (B1 * B2)))


def ssim_and_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """:func:`ssim` and its gradient with respect to ``a``."""
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    smap = (A1 * A2) / (B1 * B2)
    s = smap / A1.size
    g_mu = s * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2)
    g_aa = -s / B2
    g_ab = 2 * s / A2
    grad = (_filter_valid_adjoint(g_mu) + 2 * a * _filter_valid_adjoint(g_aa)
            + b * _filter_valid_adjoint(g_ab))
    return float(np.mean(smap)), grad


def ssim_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ssim_and_grad(a, b)[1]


def volume_reg(m: GaussianModel) -> float:
    """Sum over primitives of the product of the three axis scales."""
    return float(np.sum(np.exp(m.log_scales.sum(axis=1))))


def volume_reg_grad(m: GaussianModel) -> np.ndarray:
    """Gradient with respect to ``m.log_scales``."""
    vol = np.exp(m.log_scales.sum(axis=1))
    return np.repeat(vol[:, None], 3, axis=1)


def reconstruction_loss(pred, gt, m: GaussianModel, w: LossWeights) -> float:
    return (l1_loss(pred, gt) + w.lambda_ssim * (1.0 - ssim(pred, gt))
            + w.lambda_vol * volume_reg(m))


def regularization_loss(pred, ref, gt, distance: str = "l1") -> float:
    """Hinge on how much further ``pred`` is from ``gt`` than the reference ``ref``."""
    _check_same(pred, ref)
    _check_same(pred, gt)
    d = DISTANCES[distance][0]
    return max(0.0, d(pred, gt) - d(ref, gt))


def regularization_grad(pred, ref, gt, distance: str = "l1") -> np.ndarray:
    """Subgradient of the hinge with respect to ``pred``; zero when inactive."""
    if regularization_loss(pred, ref, gt, distance) > 0.0:
        return DISTANCES[distance][1](pred, gt)
    return np.zeros_like(pred)


def total_loss(pred, ref, gt, m: GaussianModel, w: LossWeights, distance: str = "l1") -> float:
    return (w.lambda_reg * regularization_loss(pred, ref, gt, distance)
            + reconstruction_loss(pred, gt, m, w))


def image_loss_and_grad(pred, gt, w: LossWeights, ref=None, distance: str = "l1"):
    """Image-dependent part of the objective and its gradient w.r.t. ``pred``.

    The volume term depends only on the model and is handled by the caller.
    With ``ref`` given, the weighted hinge term is included.
    """
    loss = l1_loss(pred, gt)
    grad = l1_grad(pred, gt)
    if w.lambda_ssim:
        s, s_grad = ssim_and_grad(pred, gt)
        loss += w.lambda_ssim * (1.0 - s)
        grad = grad - w.lambda_ssim * s_grad
    if ref is not None and w.lambda_reg:
        hinge = regularization_loss(pred, ref, gt, distance)
        loss += w.lambda_reg * hinge
        if hinge > 0.0:
            grad = grad + w.lambda_reg * DISTANCES[distance][1](pred, gt)
    return loss, grad
