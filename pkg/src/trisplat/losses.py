"""Image-space objectives.

Every loss returns a scalar torch tensor; gradients reach the Gaussian
parameters through the autograd graph of the renders passed in (or through
:func:`trisplat.rasterizer.render_backward` for image-space gradients).
Squared-error terms are per-element means, not sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .camera import Camera
from .errors import InvalidArgument
from .rasterizer import RenderOutput

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PROJ_ALPHA_THRESHOLD = 0.5


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def image_l2(a, b, mask_weighting=None) -> torch.Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    if mask_weighting is not None:
        w = _t(mask_weighting)
        if w.dim() == sq.dim() - 1:
            w = w[..., None]
        sq = sq * w
    return sq.mean()


@lru_cache(maxsize=4)
def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b) -> torch.Tensor:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), zero padding.

    Accepts (H, W) or (H, W, C) images with values in [0, 1].
    """
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    H, W, C = a.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise InvalidArgument(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {H}x{W}")
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    g = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    # the window is separable: two 1-D passes equal the 11x11 zero-padded convolution
    wy = g.view(1, 1, -1, 1).expand(C, 1, SSIM_WINDOW, 1)
    wx = g.view(1, 1, 1, -1).expand(C, 1, 1, SSIM_WINDOW)
    pad = SSIM_WINDOW // 2

    def blur(z):
        return F.conv2d(F.conv2d(z, wy, padding=(pad, 0), groups=C), wx, padding=(0, pad), groups=C)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def d_ssim(a, b) -> torch.Tensor:
    return (1.0 - ssim(a, b)) / 2.0


def loss_front(render: RenderOutput, ref_image, ref_mask, lambda1: float, lambda2: float) -> torch.Tensor:
    return lambda1 * image_l2(render.color, ref_image) + lambda2 * image_l2(render.alpha, ref_mask)


def loss_other(
    render: RenderOutput, aug_image, aug_mask, lambda3: float, lambda4: float, lambda5: float
) -> torch.Tensor:
    loss = lambda3 * image_l2(render.color, aug_image) + lambda4 * image_l2(render.alpha, aug_mask)
    if lambda5:
        loss = loss + lambda5 * d_ssim(render.color, aug_image)
    return loss


def loss_co(render1: RenderOutput, render2: RenderOutput, lambda6: float, lambda7: float) -> torch.Tensor:
    """Agreement of two branches rendered at the same pseudo camera."""
    return lambda6 * image_l2(render1.color, render2.color) + lambda7 * image_l2(render1.alpha, render2.alpha)


# ---------------------------------------------------------------------------
# reprojection


def rotation_block(camera: Camera) -> np.ndarray:
    """World-to-camera rotation, i.e. the inverse of the camera pose's rotation block."""
    return camera.R


def warp_matrix(K, R1, R2) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    return K @ np.asarray(R2, dtype=np.float64) @ np.asarray(R1, dtype=np.float64).T @ np.linalg.inv(K)


def warp_pixel(u, K, R1, R2):
    """Rotation-only pixel transfer u' = K R2 R1^-1 K^-1 u.

    ``u`` is a homogeneous pixel (..., 3). Returns ``(u', in_front)`` with
    ``u'`` dehomogenized to (..., 2); ``in_front`` is False where the warped
    third coordinate is not positive (those entries of ``u'`` are NaN).
    """
    u = np.asarray(u, dtype=np.float64)
    h = u @ warp_matrix(K, R1, R2).T
    in_front = h[..., 2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.where(in_front[..., None], h[..., :2] / h[..., 2:3], np.nan)
    return uv, in_front


@dataclass
class ProjectionLoss:
    value: torch.Tensor
    valid_pixels: int
    empty: bool = False
    valid_mask: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class _Sampler:
    index: np.ndarray  # (P, 4) flat indices into view-2 pixels
    weight: np.ndarray  # (P, 4) bilinear weights
    source: np.ndarray  # (P,) flat indices into view-1 pixels
    inside: np.ndarray  # (P,) bool: all four taps inside view 2


def _bilinear_sampler(cam1: Camera, cam2: Camera) -> _Sampler:
    H, W = cam1.height, cam1.width
    j, i = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    u = np.stack([i, j, np.ones_like(i)], axis=-1).reshape(-1, 3)
    uv, front = warp_pixel(u, cam1.K, rotation_block(cam1), rotation_block(cam2))
    # continuous -> sample-grid coordinates (pixel centers at integers)
    gx = np.nan_to_num(uv[:, 0] - 0.5, nan=-10.0)
    gy = np.nan_to_num(uv[:, 1] - 0.5, nan=-10.0)
    x0, y0 = np.floor(gx), np.floor(gy)
    inside = front & (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= cam2.width - 1) & (y0 + 1 <= cam2.height - 1)
    fx, fy = gx - x0, gy - y0
    x0 = np.clip(x0, 0, cam2.width - 2).astype(np.int64)
    y0 = np.clip(y0, 0, cam2.height - 2).astype(np.int64)
    W2 = cam2.width
    index = np.stack([y0 * W2 + x0, y0 * W2 + x0 + 1, (y0 + 1) * W2 + x0, (y0 + 1) * W2 + x0 + 1], axis=1)
    weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return _Sampler(index, weight, np.arange(H * W), inside)


def loss_proj(
    depth_view1,
    depth_view2,
    cam1: Camera,
    cam2: Camera,
    valid_masks,
    mode: str = "cross",
) -> ProjectionLoss:
    """Depth consistency under the rotation-only pixel transfer from view 1 to view 2.

    ``mode="cross"`` compares D1(u) with D2(u') (bilinear). ``mode="literal"``
    compares D2(u) with D2(u') on view 2's own grid. ``valid_masks`` is a
    pair of (H, W) boolean foreground masks (alpha >= 0.5) for the two views;
    a pixel counts only if its source pixel and all four bilinear taps are
    foreground and inside the image.
    """
    if mode not in ("cross", "literal"):
        raise InvalidArgument(f"unknown reprojection mode {mode!r}")
    d1, d2 = _t(depth_view1), _t(depth_view2)
    m1, m2 = (np.asarray(m, dtype=bool) for m in valid_masks)
    if mode == "literal":
        d1, m1 = d2, m2
        cam1 = Camera(cam2.K, cam1.world_to_camera, cam2.width, cam2.height, cam2.fov_y)
    s = _bilinear_sampler(cam1, cam2)
    flat_m2 = m2.reshape(-1)
    valid = s.inside & m1.reshape(-1)[s.source] & flat_m2[s.index].all(axis=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return ProjectionLoss(d2.sum() * 0.0, 0, empty=True, valid_mask=valid.reshape(m1.shape))
    idx = torch.from_numpy(s.index[valid])
    wts = torch.from_numpy(s.weight[valid])
    sampled = (d2.reshape(-1)[idx] * wts).sum(dim=1)
    ref = d1.reshape(-1)[torch.from_numpy(s.source[valid])]
    value = ((ref - sampled) ** 2).mean()
    return ProjectionLoss(value, n_valid, valid_mask=valid.reshape(m1.shape))


@dataclass
class LossBreakdown:
    front: float = 0.0
    other: float = 0.0
    proj: float = 0.0
    co: float = 0.0
    sds_scale: float = 0.0
    total: float = 0.0
    weights: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "front": self.front,
            "other": self.other,
            "proj": self.proj,
            "co": self.co,
            "sds_scale": self.sds_scale,
            "total": self.total,
        }
