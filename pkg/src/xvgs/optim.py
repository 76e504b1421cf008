"""Adam over the parameter arrays of a GaussianModel, with row-wise resizing."""

from __future__ import annotations

import numpy as np

from .scene import GaussianModel

PARAMS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")


class Adam:
    def __init__(self, model: GaussianModel, lrs: dict[str, float], betas=(0.9, 0.999),
                 eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(getattr(model, k)) for k in PARAMS}
        self.v = {k: np.zeros_like(getattr(model, k)) for k in PARAMS}

    def step(self, model: GaussianModel, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1 - self.beta1**self.t
        bc2 = 1 - self.beta2**self.t
        for k in PARAMS:
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p = getattr(model, k)
            p -= self.lrs[k] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def extend(self, k: int) -> None:
        for d in (self.m, self.v):
            for name, arr in d.items():
                d[name] = np.concatenate([arr, np.zeros((k,) + arr.shape[1:])])

    def keep(self, mask: np.ndarray) -> None:
        for d in (self.m, self.v):
            for name in d:
                d[name] = d[name][mask]


def exp_decay(lr_init: float, lr_final: float, step: int, total: int) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``total`` steps."""
    if total <= 0:
        return lr_init
    t = min(max(step / total, 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))
