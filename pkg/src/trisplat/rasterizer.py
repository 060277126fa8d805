"""Tile-based differentiable Gaussian splatting on the CPU.

Projection (activations, EWA covariance, perspective Jacobian) runs in torch
autograd; per-pixel blending runs in compiled kernels with a hand-written
reverse pass (see ``_composite``). Splat-to-tile binning, the depth sort and
the transmittance cut-off are decided once in the forward pass and replayed
verbatim by the backward pass. All image math is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera
from .errors import InvalidState
from ._composite import composite_backward, composite_forward
from .gaussians import RAW_FIELDS, GaussianCloud

TILE = 16
NEAR_PLANE = 0.2
COV2D_FLOOR = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
DEPTH_EPS = 1e-6

WHITE = (1.0, 1.0, 1.0)


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


@dataclass
class Projection:
    means2d: torch.Tensor  # (N, 2) pixels
    cov2d: torch.Tensor  # (N, 2, 2), floor included
    depths: torch.Tensor  # (N,) camera-frame z
    visible: torch.Tensor  # (N,) bool


def _project_tensors(positions, scales, rotations, camera: Camera, near: float = NEAR_PLANE) -> Projection:
    dtype = positions.dtype
    W = torch.as_tensor(camera.R, dtype=dtype)
    t = torch.as_tensor(camera.t, dtype=dtype)
    p = positions @ W.T + t
    x, y, z = p.unbind(-1)
    visible = z > near
    zs = torch.where(visible, z, torch.ones_like(z))
    fx, fy = camera.fx, camera.fy
    means2d = torch.stack([fx * x / zs + camera.cx, fy * y / zs + camera.cy], dim=-1)

    Rg = quaternion_to_rotation(rotations)
    M = Rg * scales[:, None, :]
    sigma = M @ M.transpose(1, 2)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([fx / zs, zero, -fx * x / zs**2], dim=-1),
            torch.stack([zero, fy / zs, -fy * y / zs**2], dim=-1),
        ],
        dim=1,
    )
    T = J @ W
    cov2d = T @ sigma @ T.transpose(1, 2)
    cov2d = cov2d + COV2D_FLOOR * torch.eye(2, dtype=dtype)
    return Projection(means2d=means2d, cov2d=cov2d, depths=z, visible=visible)


def project(cloud: GaussianCloud, camera: Camera, near: float = NEAR_PLANE) -> Projection:
    """Screen-space means, EWA 2D covariances, depths and near-plane culling."""
    with torch.no_grad():
        pos = torch.as_tensor(cloud.positions)
        scales = torch.exp(torch.as_tensor(cloud.raw_scales))
        rot = torch.as_tensor(cloud.raw_rotations)
        rot = rot / rot.norm(dim=-1, keepdim=True)
        return _project_tensors(pos, scales, rot, camera, near)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W)
    means2d: torch.Tensor  # (N, 2), grad retained when differentiable
    visible: np.ndarray
    order: list  # per-tile depth-sorted gaussian indices
    camera: Camera
    params: dict | None = None
    cloud_ref: object = None
    _consumed: bool = False

    def numpy(self) -> dict[str, np.ndarray]:
        return {
            "color": self.color.detach().numpy(),
            "alpha": self.alpha.detach().numpy(),
            "depth": self.depth.detach().numpy(),
        }


@dataclass
class ParamGradients:
    positions: np.ndarray
    raw_scales: np.ndarray
    raw_rotations: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray
    screen_grad_norm: np.ndarray  # (N,) |dL/d mean2d| in NDC units

    def fields(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in RAW_FIELDS}


def leaf_params(cloud: GaussianCloud, requires_grad: bool = True) -> dict[str, torch.Tensor]:
    return {
        f: torch.tensor(getattr(cloud, f)).requires_grad_(requires_grad) for f in RAW_FIELDS
    }


def _bin_tiles(means2d: np.ndarray, cov2d: np.ndarray, depths: np.ndarray, visible: np.ndarray, width, height):
    """Pairs (tile, gaussian) for every 3-sigma footprint, depth-sorted per tile."""
    tiles_x = math.ceil(width / TILE)
    tiles_y = math.ceil(height / TILE)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    radius = np.ceil(3.0 * np.sqrt(lam))
    mx, my = means2d[:, 0], means2d[:, 1]
    x0 = np.clip(np.floor((mx - radius) / TILE), 0, tiles_x).astype(np.int64)
    x1 = np.clip(np.floor((mx + radius) / TILE) + 1, 0, tiles_x).astype(np.int64)
    y0 = np.clip(np.floor((my - radius) / TILE), 0, tiles_y).astype(np.int64)
    y1 = np.clip(np.floor((my + radius) / TILE) + 1, 0, tiles_y).astype(np.int64)
    ok = visible & np.isfinite(radius) & (x1 > x0) & (y1 > y0)
    idx = np.nonzero(ok)[0]
    nx, ny = (x1 - x0)[idx], (y1 - y0)[idx]
    counts = nx * ny
    total = int(counts.sum())
    g = np.repeat(idx, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    rep_nx = np.repeat(nx, counts)
    tx = np.repeat(x0[idx], counts) + local % rep_nx
    ty = np.repeat(y0[idx], counts) + local // rep_nx
    tile = ty * tiles_x + tx
    order = np.lexsort((g, depths[g], tile))
    return tile[order], g[order], tiles_x, tiles_y


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conic, opac, rgb, depths, bins):
        args = [t.detach().numpy() for t in (means2d, conic, opac, rgb, depths)]
        acc_rgb, alpha, acc_depth, final_t, n_contrib = composite_forward(*args, *bins)
        ctx.args = args
        ctx.bins = bins
        ctx.state = (final_t, n_contrib)
        return torch.from_numpy(acc_rgb), torch.from_numpy(alpha), torch.from_numpy(acc_depth)

    @staticmethod
    def backward(ctx, g_rgb, g_alpha, g_depth):
        final_t, n_contrib = ctx.state
        grads = composite_backward(
            *ctx.args, *ctx.bins[:-1], final_t, n_contrib,
            np.ascontiguousarray(g_rgb.numpy()), np.ascontiguousarray(g_alpha.numpy()),
            np.ascontiguousarray(g_depth.numpy()),
        )
        return (*(torch.from_numpy(g) for g in grads), None)


def render(
    cloud: GaussianCloud,
    camera: Camera,
    background=WHITE,
    requires_grad: bool = False,
    params: dict[str, torch.Tensor] | None = None,
) -> RenderOutput:
    """Alpha-composite the cloud front-to-back into color, alpha and depth.

    Pass ``params`` (leaf tensors from :func:`leaf_params`) to build the
    image into an existing autograd graph, e.g. when several renders share
    one optimizer step.
    """
    if params is None:
        params = leaf_params(cloud, requires_grad)
    grad_on = any(p.requires_grad for p in params.values())
    H, W = camera.height, camera.width

    with torch.set_grad_enabled(grad_on):
        p = {k: v.double() for k, v in params.items()}
        scales = torch.exp(p["raw_scales"])
        rot = p["raw_rotations"]
        rot = rot / rot.norm(dim=-1, keepdim=True)
        opac = torch.sigmoid(p["raw_opacities"])[:, 0]
        rgb = torch.sigmoid(p["colors"])
        proj = _project_tensors(p["positions"], scales, rot, camera)
        means2d = proj.means2d
        if grad_on:
            means2d.retain_grad()

        cov = proj.cov2d
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        visible = (proj.visible & (det > 0)).detach().numpy()
        tile_ids, gauss_ids, tiles_x, tiles_y = _bin_tiles(
            means2d.detach().numpy(), cov.detach().numpy(), proj.depths.detach().numpy(), visible, W, H
        )
        n_tiles = tiles_x * tiles_y
        counts = np.bincount(tile_ids, minlength=n_tiles)
        tile_end = np.cumsum(counts)
        tile_start = tile_end - counts
        order = [gauss_ids[tile_start[t] : tile_end[t]] for t in range(n_tiles)]

        safe_det = torch.where(det > 0, det, torch.ones_like(det))
        conic = torch.stack([cov[:, 1, 1], -cov[:, 0, 1], cov[:, 0, 0]], dim=-1) / safe_det[:, None]
        bins = (gauss_ids, tile_start, tile_end, W, H, TILE, tiles_x, ALPHA_MAX, T_MIN)
        acc_rgb, alpha, acc_depth = _Composite.apply(
            means2d.contiguous(), conic.contiguous(), opac.contiguous(), rgb.contiguous(),
            proj.depths.contiguous(), bins,
        )
        bg = torch.as_tensor(background, dtype=torch.float64)
        color = acc_rgb + (1.0 - alpha)[..., None] * bg
        has = alpha > DEPTH_EPS
        depth = torch.where(has, acc_depth / torch.where(has, alpha, torch.ones_like(alpha)), torch.zeros_like(alpha))

    return RenderOutput(color, alpha, depth, means2d, visible, order, camera, params, cloud)


def render_backward(
    output: RenderOutput,
    cloud: GaussianCloud | None = None,
    grad_color=None,
    grad_alpha=None,
    grad_depth=None,
) -> ParamGradients:
    """Pull image-space gradients back to the raw Gaussian parameters."""
    if output.params is None or not output.params["positions"].requires_grad:
        raise InvalidState("render_backward needs a forward pass rendered with requires_grad=True")
    if cloud is not None and cloud is not output.cloud_ref:
        raise InvalidState("render_backward called with a cloud that did not produce this render")
    if output._consumed:
        raise InvalidState("this render's backward pass has already been consumed")
    outs, grads = [], []
    for tensor, g in ((output.color, grad_color), (output.alpha, grad_alpha), (output.depth, grad_depth)):
        if g is not None:
            outs.append(tensor)
            grads.append(torch.as_tensor(np.asarray(g), dtype=tensor.dtype))
    n = len(output.params["positions"])
    wrt = [output.params[f] for f in RAW_FIELDS] + [output.means2d]
    if outs and any(t.requires_grad for t in outs):
        got = torch.autograd.grad(outs, wrt, grads, allow_unused=True)
    else:
        got = [None] * len(wrt)
    output._consumed = True
    arrays = [
        (g.detach().numpy() if g is not None else np.zeros(tuple(p.shape), dtype=p.detach().numpy().dtype))
        for g, p in zip(got, wrt)
    ]
    return ParamGradients(
        *arrays[:5],
        screen_grad_norm=screen_gradient_norm(arrays[5], output.camera) if n else np.zeros(0),
    )


def screen_gradient_norm(grad_means2d: np.ndarray, camera: Camera) -> np.ndarray:
    """Gradient norm w.r.t. NDC coordinates (pixel gradient scaled by half the image size)."""
    g = np.asarray(grad_means2d, dtype=np.float64)
    return np.hypot(g[:, 0] * 0.5 * camera.width, g[:, 1] * 0.5 * camera.height)
