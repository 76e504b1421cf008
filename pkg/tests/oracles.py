"""Independent reference implementations used as test oracles.

The dense renderer evaluates every (pixel, Gaussian) pair with plain numpy and
shares no code with the tiled kernels it checks.
"""

import numpy as np

from xvgs.scene import Camera, Gaussian3D, GaussianModel, covariance_of

PARAMS = [("positions", "position"), ("log_scales", "log_scale"), ("rotations", "rotation"),
          ("opacity_logits", "opacity_logit"), ("colors", "color")]


def dense_render(m: GaussianModel, cam: Camera, bg, active=None, order=None):
    """Brute-force splatting. Returns (image, active mask (H, W, N), depth order).

    With ``active`` given, the set of contributing (pixel, Gaussian) pairs is
    frozen to it instead of being re-derived from the 1/255 cutoff; with
    ``order`` given, compositing uses that index order instead of sorting by depth.
    """
    H, W, n = cam.height, cam.width, len(m)
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    alpha_maps = np.zeros((H, W, n))
    depth = np.full(n, np.inf)
    colors = np.clip(m.colors, 0, 1)
    for i in range(n):
        q = m.rotations[i] / np.linalg.norm(m.rotations[i])
        g = Gaussian3D(tuple(m.positions[i]), tuple(m.log_scales[i]), tuple(q),
                       float(m.opacity_logits[i]), tuple(m.colors[i]))
        R, t = cam.rotation, cam.translation
        X, Y, Z = R @ np.array(g.position) + t
        if Z <= 0.01:
            continue
        J = np.array([[cam.fx / Z, 0, -cam.fx * X / Z**2], [0, cam.fy / Z, -cam.fy * Y / Z**2]])
        cov = J @ R @ covariance_of(g) @ R.T @ J.T + 0.3 * np.eye(2)
        u, v = cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy
        r3 = 3 * np.sqrt(np.linalg.eigvalsh(cov).max())
        if u + r3 < -0.5 or u - r3 > W - 0.5 or v + r3 < -0.5 or v - r3 > H - 0.5:
            continue
        P = np.linalg.inv(cov)
        dx, dy = xs - u, ys - v
        q = P[0, 0] * dx * dx + 2 * P[0, 1] * dx * dy + P[1, 1] * dy * dy
        alpha_maps[:, :, i] = g.opacity * np.exp(-0.5 * q)
        depth[i] = Z
    if active is None:
        active = alpha_maps >= 1 / 255
    a = np.where(active, np.minimum(alpha_maps, 0.999), 0.0)
    if order is None:
        order = [i for _, i in sorted((d, i) for i, d in enumerate(depth) if np.isfinite(d))]
    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    for i in order:
        img += (a[:, :, i] * T)[:, :, None] * colors[i]
        T *= 1 - a[:, :, i]
    img += T[:, :, None] * np.asarray(bg, dtype=float)
    return np.clip(img, 0, 1), active, list(order)


def random_fd_scene(rng, n=10, size=16):
    """Random scene fully inside a 16x16 camera's view, opacities below the clamp."""
    Z = rng.uniform(2.0, 4.0, n)
    xy = rng.uniform(-0.22, 0.22, (n, 2)) * Z[:, None]
    pos = np.column_stack([xy, Z])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    m = GaussianModel(pos, rng.uniform(-2.6, -1.4, (n, 3)), q, rng.uniform(-2.0, 2.0, n),
                      rng.uniform(0.05, 0.95, (n, 3)), 0.1)
    cam = Camera(20.0, 20.0, (size - 1) / 2, (size - 1) / 2, size, size, np.eye(3), np.zeros(3))
    return m, cam, rng.uniform(0, 1, 3)


def central_differences(m, cam, bg, dL, h=1e-4):
    """Central differences of sum(dL * render) for every parameter.

    The active set and the depth order are frozen at the unperturbed state, so
    the difference quotient measures the smooth piece the analytic gradient
    describes. Also returns how many parameters had the active set or the
    depth order change within +-h (points where the renderer jumps).
    """
    _, active, order = dense_render(m, cam, bg)
    out, crossings = {}, 0
    for name, _ in PARAMS:
        arr = getattr(m, name)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            ip, ap, op = dense_render(m, cam, bg)
            arr[idx] = old - h
            im, am, om = dense_render(m, cam, bg)
            if not (np.array_equal(ap, active) and np.array_equal(am, active)
                    and op == order and om == order):
                crossings += 1
                im = dense_render(m, cam, bg, active, order)[0]
                arr[idx] = old + h
                ip = dense_render(m, cam, bg, active, order)[0]
            arr[idx] = old
            fd[idx] = ((ip - im) * dL).sum() / (2 * h)
        out[name] = fd
    return out, crossings


def max_rel_error(analytic, numeric, floor=1e-6, rel=1e-3):
    """Worst ratio of |a - f| to its allowed tolerance max(rel * max(|a|, |f|), floor)."""
    tol = np.maximum(rel * np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / tol).max()) if analytic.size else 0.0
