"""Prior ingestion (geometry / perception initializations) and the diffusion-prior interface.

Retrieval, novel-view synthesis and monocular depth run outside this package;
their outputs arrive as files. The diffusion prior is anything implementing
``predict_noise(PriorQuery) -> PriorResponse``: an in-process :class:`MockPrior`
for synthetic scenes or a :class:`RemotePrior` speaking the ``/denoise`` HTTP
protocol.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.spatial import cKDTree

from . import files
from .camera import Camera, orbit_pose
from .errors import IngestionError, InvalidArgument, PriorError, PriorProtocolError
from .gaussians import GaussianCloud, cloud_from_points
from .plyio import read_mesh

log = logging.getLogger(__name__)

OUTLIER_NEIGHBORS = 16
OUTLIER_FACTOR = 3.0
MASK_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# bundle


@dataclass
class AugmentedView:
    image: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)
    camera: Camera
    depth: np.ndarray | None = None


@dataclass
class PriorBundle:
    reference_image: np.ndarray
    reference_mask: np.ndarray
    augmented_views: list[AugmentedView]
    input_elevation: float = 0.0
    reference_depth: np.ndarray | None = None
    radius: float = 2.0
    fov_y: float = 49.1

    def __post_init__(self):
        if self.reference_image is None:
            raise IngestionError("prior bundle has no reference image")
        for i, v in enumerate(self.augmented_views):
            if v.camera is None:
                raise IngestionError(f"augmented view {i} has no camera")
        for m in [self.reference_mask] + [v.mask for v in self.augmented_views]:
            if m.min() < 0 or m.max() > 1:
                raise IngestionError("masks must lie in [0, 1]")

    @property
    def reference_camera(self) -> Camera:
        h, w = self.reference_mask.shape
        return orbit_pose(0.0, self.input_elevation, self.radius, w, h, self.fov_y)

    def depth_views(self) -> list[AugmentedView]:
        views = []
        if self.reference_depth is not None:
            views.append(AugmentedView(self.reference_image, self.reference_mask,
                                       self.reference_camera, self.reference_depth))
        views.extend(v for v in self.augmented_views if v.depth is not None)
        return views


# ---------------------------------------------------------------------------
# ingestion


def normalize_points(points: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Center the bounding box at the origin and scale the farthest point to ``radius``."""
    points = np.asarray(points, dtype=np.float64)
    center = 0.5 * (points.min(axis=0) + points.max(axis=0))
    centered = points - center
    extent = np.linalg.norm(centered, axis=1).max()
    if not extent > 1e-12:
        raise IngestionError("degenerate extent: all points coincide")
    return centered * (radius / extent)


def resample_points(
    points: np.ndarray, colors: np.ndarray | None, target_count: int, rng: np.random.Generator
):
    """Seeded uniform subsample, or jittered duplication when short of points."""
    n = len(points)
    if target_count == n:
        return points, colors
    if target_count < n:
        idx = np.sort(rng.choice(n, size=target_count, replace=False))
        return points[idx], None if colors is None else colors[idx]
    extra = rng.integers(0, n, size=target_count - n)
    spacing = 0.5 * (cKDTree(points).query(points, k=2)[0][:, 1].mean() if n > 1 else 1e-3)
    new = points[extra] + rng.normal(scale=spacing, size=(len(extra), 3))
    pts = np.concatenate([points, new])
    cols = None if colors is None else np.concatenate([colors, colors[extra]])
    return pts, cols


def load_geometry_prior(
    path, target_count: int, seed: int = 0, radius: float = 1.0, branch_id: int = 0
) -> GaussianCloud:
    """Initialize a branch from a retrieved shape (PLY/OBJ points or mesh vertices)."""
    try:
        mesh = read_mesh(path)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read geometry prior {path}: {exc}") from exc
    if len(mesh.vertices) == 0:
        raise IngestionError(f"geometry prior {path} has no points")
    pts = normalize_points(mesh.vertices, radius)
    rng = np.random.default_rng(seed)
    pts, cols = resample_points(pts, mesh.colors, target_count, rng)
    return cloud_from_points(pts, colors=cols, branch_id=branch_id)


def backproject_depth(image, depth, mask, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Lift masked pixels to world points: center + z * R^T K^-1 [u, v, 1]."""
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    sel = (mask >= MASK_THRESHOLD) & (depth > 0) & np.isfinite(depth)
    rows, cols = np.nonzero(sel)
    if len(rows) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    d_cam = np.stack(
        [(cols + 0.5 - camera.cx) / camera.fx, (rows + 0.5 - camera.cy) / camera.fy, np.ones(len(rows))],
        axis=1,
    )
    d_world = d_cam @ camera.R
    points = camera.center + depth[rows, cols][:, None] * d_world
    return points, image[rows, cols]


def remove_outliers(points: np.ndarray, k: int = OUTLIER_NEIGHBORS, factor: float = OUTLIER_FACTOR) -> np.ndarray:
    """Boolean keep-mask: mean distance to k nearest neighbors within ``factor`` x the median."""
    if len(points) <= k:
        return np.ones(len(points), dtype=bool)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    return mean_d <= factor * np.median(mean_d)


def build_perception_init(
    bundle: PriorBundle, target_count: int, seed: int = 0, branch_id: int = 1
) -> GaussianCloud:
    views = bundle.depth_views()
    if not views:
        raise IngestionError(
            "perception initialization needs depth maps: add a 'depth' file to the reference "
            "or to at least one augmented view in the manifest"
        )
    pts, cols = [], []
    for v in views:
        p, c = backproject_depth(v.image, v.depth, v.mask, v.camera)
        pts.append(p)
        cols.append(c)
    table = np.concatenate([np.concatenate(pts), np.concatenate(cols)], axis=1)
    if len(table) == 0:
        raise IngestionError("depth maps produced no foreground points (check masks)")
    # canonical order makes the result independent of view order and duplicates
    table = np.unique(table, axis=0)
    table = table[np.unique(table[:, :3], axis=0, return_index=True)[1]]
    table = table[remove_outliers(table[:, :3])]
    rng = np.random.default_rng(seed)
    if len(table) > target_count:
        table = table[np.sort(rng.choice(len(table), size=target_count, replace=False))]
    return cloud_from_points(table[:, :3], colors=table[:, 3:], branch_id=branch_id)


# ---------------------------------------------------------------------------
# diffusion prior interface


def scaled_linear_alphas_cumprod(num_steps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
    betas = np.linspace(beta_start**0.5, beta_end**0.5, num_steps) ** 2
    return np.cumprod(1.0 - betas)


def shared_noise(seed: int, shape) -> np.ndarray:
    """The epsilon shared by all branches for one query; float32 so both wire ends agree bit-exactly."""
    return np.random.default_rng(seed).standard_normal(tuple(shape), dtype=np.float32)


@dataclass(frozen=True)
class DeltaPose:
    d_azimuth: float
    d_elevation: float
    d_radius: float = 0.0

    @classmethod
    def between(cls, reference: Camera, camera: Camera) -> "DeltaPose":
        d_az = (camera.azimuth - reference.azimuth + 180.0) % 360.0 - 180.0
        return cls(d_az, camera.elevation - reference.elevation, camera.radius - reference.radius)


@dataclass
class PriorQuery:
    images: list[np.ndarray]  # clean renders, one per branch, (H, W, 3)
    condition: np.ndarray
    t: int
    delta_pose: DeltaPose
    seed: int
    alphas_cumprod: np.ndarray = field(default_factory=scaled_linear_alphas_cumprod, repr=False)
    noise: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) != 3:
            raise InvalidArgument(f"a co-SDS query needs three renders, got {len(self.images)}")
        shape = self.images[0].shape
        if any(im.shape != shape for im in self.images):
            raise InvalidArgument("all three renders must share one shape")
        if not 0 <= self.t < len(self.alphas_cumprod):
            raise InvalidArgument(f"timestep {self.t} outside [0, {len(self.alphas_cumprod)})")
        if self.noise is None:
            self.noise = shared_noise(self.seed, shape)

    @property
    def alpha_bar(self) -> float:
        return float(self.alphas_cumprod[self.t])

    def noised(self, image: np.ndarray) -> np.ndarray:
        ab = self.alpha_bar
        return np.sqrt(ab) * image + np.sqrt(1.0 - ab) * self.noise

    @property
    def noised_images(self) -> list[np.ndarray]:
        return [self.noised(im) for im in self.images]


@dataclass
class PriorResponse:
    noise_estimates: list[np.ndarray]
    latency: float = 0.0


class DiffusionPrior(Protocol):
    max_timestep: int

    def predict_noise(self, query: PriorQuery) -> PriorResponse: ...


class MockPrior:
    """Test double that knows the ground truth.

    For every branch: eps_hat = eps + kappa * (noised render - noised ground truth),
    both noised with the query's t and eps, so the SDS gradient pulls renders
    toward the ground-truth view at the query camera.
    """

    def __init__(
        self,
        ground_truth_renderer: Callable[[Camera], np.ndarray],
        reference_camera: Camera,
        kappa: float = 1.0,
        alphas_cumprod: np.ndarray | None = None,
    ):
        self.ground_truth_renderer = ground_truth_renderer
        self.reference_camera = reference_camera
        self.kappa = kappa
        self.alphas_cumprod = scaled_linear_alphas_cumprod() if alphas_cumprod is None else alphas_cumprod
        self.max_timestep = len(self.alphas_cumprod)

    def camera_for(self, delta: DeltaPose, shape) -> Camera:
        ref = self.reference_camera
        return orbit_pose(
            ref.azimuth + delta.d_azimuth, ref.elevation + delta.d_elevation,
            ref.radius + delta.d_radius, shape[1], shape[0], ref.fov_y,
        )

    def predict_noise(self, query: PriorQuery) -> PriorResponse:
        start = time.perf_counter()
        cam = self.camera_for(query.delta_pose, query.images[0].shape)
        gt = self.ground_truth_renderer(cam)
        if gt is None:
            raise PriorError(f"mock prior has no ground truth for camera {cam.to_json()}", retriable=False)
        gt_t = query.noised(np.asarray(gt, dtype=np.float64))
        est = [query.noise + self.kappa * (x_t - gt_t) for x_t in query.noised_images]
        return PriorResponse(est, time.perf_counter() - start)


def mock_prior(ground_truth_renderer, reference_camera: Camera, kappa: float = 1.0) -> MockPrior:
    return MockPrior(ground_truth_renderer, reference_camera, kappa)


def co_sds_gradient(
    prior: DiffusionPrior,
    renders: list[np.ndarray],
    condition: np.ndarray,
    t: int,
    delta_pose: DeltaPose,
    weight: float = 1.0,
    seed: int = 0,
    beta: float = 0.5,
    alphas_cumprod: np.ndarray | None = None,
) -> tuple[list[np.ndarray], PriorResponse]:
    """Image-space SDS gradients w(t) * (eps_hat_k - eps) for the three branches.

    Each branch's estimate is blended with the three-branch mean,
    ``(1 - beta) * eps_hat_k + beta * mean_j(eps_hat_j)``, so the denoising of
    one branch sees the renders of the other two.
    """
    images = [np.asarray(r, dtype=np.float64) for r in renders]
    kwargs = {} if alphas_cumprod is None else {"alphas_cumprod": alphas_cumprod}
    query = PriorQuery(images, np.asarray(condition, dtype=np.float64), int(t), delta_pose, int(seed), **kwargs)
    response = prior.predict_noise(query)
    est = [np.asarray(e, dtype=np.float64) for e in response.noise_estimates]
    if len(est) != 3 or any(e.shape != images[0].shape for e in est):
        raise PriorProtocolError(
            f"expected 3 noise estimates of shape {images[0].shape}, got {[e.shape for e in est]}"
        )
    mean = (est[0] + est[1] + est[2]) / 3.0
    eps = query.noise.astype(np.float64)
    grads = [weight * ((1.0 - beta) * e + beta * mean - eps) for e in est]
    return grads, response


# ---------------------------------------------------------------------------
# remote prior


class RemotePrior:
    """Client for ``POST {endpoint}/denoise``.

    The payload carries clean renders as PNG plus ``t`` and ``seed``; the
    server regenerates eps from the seed and noises the renders itself.
    Elevation in ``delta_pose`` is sent negated (the usual Zero123 convention).
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 3,
        client=None,
        max_timestep: int = 1000,
        backoff: float = 0.0,
    ):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.max_timestep = max_timestep
        self.backoff = backoff
        self._client = client if client is not None else httpx.Client(timeout=timeout)

    @staticmethod
    def payload(query: PriorQuery) -> dict:
        return {
            "images": [files.b64_png(im) for im in query.images],
            "condition": files.b64_png(query.condition),
            "t": int(query.t),
            "delta_pose": {
                "d_azimuth": float(query.delta_pose.d_azimuth),
                "d_elevation": -float(query.delta_pose.d_elevation),
                "d_radius": float(query.delta_pose.d_radius),
            },
            "seed": int(query.seed),
        }

    def predict_noise(self, query: PriorQuery) -> PriorResponse:
        import httpx

        body = self.payload(query)
        expected = tuple(query.images[0].shape)
        last_error: Exception | None = None
        start = time.perf_counter()
        for attempt in range(self.retries + 1):
            try:
                r = self._client.post(f"{self.endpoint}/denoise", json=body, timeout=self.timeout)
                if r.status_code >= 500:
                    raise PriorError(f"prior server error {r.status_code}")
                if r.status_code != 200:
                    raise PriorProtocolError(f"prior server rejected query: HTTP {r.status_code} {r.text[:200]}")
                return PriorResponse(self._parse(r.json(), expected), time.perf_counter() - start)
            except PriorProtocolError:
                raise
            except (httpx.HTTPError, PriorError, ValueError) as exc:
                last_error = exc
                log.warning("prior request failed (attempt %d/%d): %s", attempt + 1, self.retries + 1, exc)
                if self.backoff:
                    time.sleep(self.backoff * (2**attempt))
        raise PriorError(f"prior unreachable after {self.retries + 1} attempts: {last_error}")

    @staticmethod
    def _parse(data: dict, expected: tuple) -> list[np.ndarray]:
        try:
            raw = data["noise_estimates"]
        except (KeyError, TypeError):
            raise PriorProtocolError("response is missing 'noise_estimates'") from None
        if not isinstance(raw, list) or len(raw) != 3:
            raise PriorProtocolError(f"expected 3 noise estimates, got {len(raw) if isinstance(raw, list) else raw!r}")
        out = []
        for i, s in enumerate(raw):
            try:
                arr = files.decode_tensor(s)
            except (ValueError, TypeError) as exc:
                raise PriorProtocolError(f"noise estimate {i}: {exc}") from None
            if arr.shape != expected:
                raise PriorProtocolError(f"noise estimate {i}: expected shape {expected}, got {arr.shape}")
            out.append(arr)
        return out


def remote_prior_client(endpoint: str, **kwargs) -> RemotePrior:
    return RemotePrior(endpoint, **kwargs)
