"""Finite-difference helpers shared by the gradient tests."""

from __future__ import annotations

import numpy as np
import torch

from trisplat.camera import orbit_pose
from trisplat.gaussians import RAW_FIELDS, GaussianCloud, logit


def random_scene(seed: int, count: int = 5, size: int = 32):
    """A few well-separated, mid-opacity Gaussians in front of an orbit camera."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-0.35, 0.35, size=(count, 3))
    q = rng.normal(size=(count, 4))
    cloud = GaussianCloud(
        positions=pos,
        raw_scales=np.log(rng.uniform(0.08, 0.2, size=(count, 3))),
        raw_rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        raw_opacities=logit(rng.uniform(0.3, 0.8, size=(count, 1))),
        colors=rng.normal(size=(count, 3)),
    )
    az, el = rng.uniform(-180, 180), rng.uniform(-40, 40)
    return cloud, orbit_pose(az, el, 2.0, size, size)


def with_field(cloud: GaussianCloud, name: str, value: np.ndarray) -> GaussianCloud:
    fields = cloud.fields()
    fields[name] = value
    return GaussianCloud(**fields, branch_id=cloud.branch_id)


def analytic(loss_fn, cloud: GaussianCloud) -> dict[str, np.ndarray]:
    params = {f: torch.tensor(getattr(cloud, f), requires_grad=True) for f in RAW_FIELDS}
    loss = loss_fn(cloud, params)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        f: (g.numpy() if g is not None else np.zeros_like(getattr(cloud, f)))
        for f, g in zip(RAW_FIELDS, grads)
    }


def central(loss_fn, cloud: GaussianCloud, h: float = 1e-6) -> dict[str, np.ndarray]:
    out = {}
    for f in RAW_FIELDS:
        base = getattr(cloud, f)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1, -1):
                v = base.copy()
                v[idx] += sign * h
                c = with_field(cloud, f, v)
                with torch.no_grad():
                    vals.append(float(loss_fn(c, None)))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out[f] = g
    return out


def max_relative_error(a: dict, b: dict) -> float:
    """max |a - b| / max(|a|, |b|, floor), floor = 1e-4 of the largest gradient entry."""
    scale = max(max(np.abs(v).max() for v in a.values()), 1e-12)
    worst = 0.0
    for f in a:
        denom = np.maximum(np.maximum(np.abs(a[f]), np.abs(b[f])), 1e-4 * scale)
        worst = max(worst, float((np.abs(a[f] - b[f]) / denom).max()))
    return worst
