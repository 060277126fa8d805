"""Reconstruction and view-synthesis metrics, density fields and mesh export."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument
from .gaussians import GaussianCloud, activate, quaternion_to_matrix
from .losses import ssim as _ssim
from .plyio import Mesh

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
CHAMFER_CONVENTION = "0.5*(mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2)"
DEFAULT_RESOLUTION = 128
DEFAULT_THRESHOLD = 1.0
DEFAULT_BOX = (-1.0, 1.0)
SURFACE_SAMPLES = 16384
SIGMA_CUTOFF = 3.0


# ---------------------------------------------------------------------------
# image metrics


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    return float(_ssim(a, b))


# ---------------------------------------------------------------------------
# point-set metrics


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise InvalidArgument("chamfer distance needs two nonempty point sets")
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    return 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))


# ---------------------------------------------------------------------------
# density field and occupancy


def density_field(cloud: GaussianCloud, points: np.ndarray) -> np.ndarray:
    """Sum of opacity-weighted Gaussian kernels, each truncated at 3 sigma (Mahalanobis)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(points))
    if len(cloud) == 0 or len(points) == 0:
        return out
    cloud = cloud.astype(np.float64)
    act = activate(cloud)
    centers = cloud.positions
    opacity = act.opacities[:, 0]
    R = quaternion_to_matrix(act.rotations)
    inv_s2 = 1.0 / act.scales**2
    reach = SIGMA_CUTOFF * act.scales.max(axis=1) * (1 + 1e-9)
    tree = cKDTree(points)
    for i, hits in enumerate(tree.query_ball_point(centers, reach)):
        if not hits:
            continue
        hits = np.asarray(hits)
        local = (points[hits] - centers[i]) @ R[i]
        m2 = (local**2 * inv_s2[i]).sum(axis=1)
        ok = m2 <= SIGMA_CUTOFF**2 * (1 + 1e-9)
        out[hits[ok]] += opacity[i] * np.exp(-0.5 * m2[ok])
    return out


@dataclass
class OccupancyGrid:
    occupied: np.ndarray  # (R, R, R) bool, indexed [x, y, z]
    box: tuple[float, float]
    threshold: float
    density: np.ndarray | None = None

    @property
    def resolution(self) -> int:
        return self.occupied.shape[0]

    @property
    def spacing(self) -> float:
        return (self.box[1] - self.box[0]) / self.resolution


def grid_points(resolution: int, box=DEFAULT_BOX) -> np.ndarray:
    """Voxel centers of a cubic grid, (R^3, 3) in [x, y, z] index order."""
    lo, hi = box
    c = lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def occupancy(
    cloud: GaussianCloud, resolution: int = DEFAULT_RESOLUTION, threshold: float = DEFAULT_THRESHOLD, box=DEFAULT_BOX
) -> OccupancyGrid:
    if len(cloud):
        act = activate(cloud.astype(np.float64))
        extent = np.abs(cloud.positions).max(axis=0) + SIGMA_CUTOFF * act.scales.max()
        if extent.max() > max(abs(box[0]), abs(box[1])):
            log.warning("cloud's 3-sigma extent %.3f exceeds the occupancy box %s", extent.max(), box)
    dens = density_field(cloud, grid_points(resolution, box)).reshape(resolution, resolution, resolution)
    return OccupancyGrid(dens >= threshold, tuple(box), threshold, dens)


def volume_iou(g1: OccupancyGrid, g2: OccupancyGrid) -> float:
    if g1.occupied.shape != g2.occupied.shape or tuple(g1.box) != tuple(g2.box):
        raise InvalidArgument("volume_iou needs grids with the same box and resolution")
    union = np.logical_or(g1.occupied, g2.occupied).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(g1.occupied, g2.occupied).sum() / union)


def mesh_occupancy(mesh: Mesh, resolution: int = DEFAULT_RESOLUTION, box=DEFAULT_BOX) -> OccupancyGrid:
    """Voxelize a closed triangle mesh by ray parity along +z through each (x, y) column."""
    lo, hi = box
    h = (hi - lo) / resolution
    c = lo + (np.arange(resolution) + 0.5) * h
    # rays sit a tiny irrational offset off the lattice so they never graze mesh edges
    cx = c + h * 1e-6 * np.sqrt(2.0)
    cy = c + h * 1e-6 * np.sqrt(3.0)
    hits: list[list[float]] = [[] for _ in range(resolution * resolution)]
    v = np.asarray(mesh.vertices, dtype=np.float64)
    for tri in v[np.asarray(mesh.faces, dtype=np.int64)]:
        a, b, d = tri
        det = (b[0] - a[0]) * (d[1] - a[1]) - (d[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-18:
            continue
        i0, i1 = np.searchsorted(cx, [tri[:, 0].min(), tri[:, 0].max()])
        j0, j1 = np.searchsorted(cy, [tri[:, 1].min(), tri[:, 1].max()])
        if i0 >= i1 or j0 >= j1:
            continue
        X, Y = np.meshgrid(cx[i0:i1], cy[j0:j1], indexing="ij")
        # barycentrics of the column centers in the triangle's xy projection
        l1 = ((X - a[0]) * (d[1] - a[1]) - (d[0] - a[0]) * (Y - a[1])) / det
        l2 = ((b[0] - a[0]) * (Y - a[1]) - (X - a[0]) * (b[1] - a[1])) / det
        inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 < 1)
        z = a[2] + l1 * (b[2] - a[2]) + l2 * (d[2] - a[2])
        for ii, jj in zip(*np.nonzero(inside)):
            hits[(i0 + ii) * resolution + (j0 + jj)].append(z[ii, jj])
    occ = np.zeros((resolution, resolution, resolution), dtype=bool)
    for col, zs in enumerate(hits):
        if len(zs) < 2:
            continue
        zs = np.sort(zs)
        # parity: count crossings below each voxel center
        occ[col // resolution, col % resolution] = np.searchsorted(zs, c) % 2 == 1
    return OccupancyGrid(occ, tuple(box), 0.5)


# ---------------------------------------------------------------------------
# meshes


def marching_cubes(field: np.ndarray, iso: float, spacing: float = 1.0, origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Iso-surface of a scalar field sampled on a regular [x, y, z] grid.

    Values above ``iso`` count as inside; triangles wind so normals point
    outward (down the field gradient). A field that never crosses ``iso``
    gives an empty mesh.
    """
    from skimage import measure

    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3:
        raise InvalidArgument(f"marching_cubes needs a 3-D field, got shape {field.shape}")
    if not (field.min() < iso < field.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), None)
    verts, faces, _, _ = measure.marching_cubes(field, level=iso, spacing=(spacing,) * 3, gradient_direction="descent")
    # skimage winds these faces inward for inside-high fields; flip to outward
    return Mesh(verts + np.asarray(origin, dtype=np.float64), faces[:, ::-1].astype(np.int64), None)


def cloud_mesh(cloud: GaussianCloud, resolution: int = DEFAULT_RESOLUTION, iso: float = DEFAULT_THRESHOLD,
               box=DEFAULT_BOX) -> Mesh:
    grid = occupancy(cloud, resolution, iso, box)
    h = grid.spacing
    return marching_cubes(grid.density, iso, h, (box[0] + 0.5 * h,) * 3)


def triangle_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_surface(mesh: Mesh, count: int = SURFACE_SAMPLES, seed: int = 0) -> np.ndarray:
    """Points uniform by area over the mesh surface."""
    if len(mesh.faces) == 0:
        raise InvalidArgument("cannot sample an empty mesh")
    areas = triangle_areas(mesh)
    if not areas.sum() > 0:
        raise InvalidArgument("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    p = mesh.vertices[mesh.faces[tri]]
    return p[:, 0] + u[:, None] * (p[:, 1] - p[:, 0]) + v[:, None] * (p[:, 2] - p[:, 0])


def shape_points(mesh: Mesh, count: int = SURFACE_SAMPLES, seed: int = 0) -> np.ndarray:
    """Surface samples for a mesh, or its vertices when it has no faces (a point set)."""
    if len(mesh.faces):
        return sample_surface(mesh, count, seed)
    return np.asarray(mesh.vertices, dtype=np.float64)


# ---------------------------------------------------------------------------
# reports


def image_report(renders: list[np.ndarray], references: list[np.ndarray]) -> dict:
    if len(renders) != len(references):
        raise InvalidArgument(f"{len(renders)} renders vs {len(references)} references")
    p = [psnr(a, b) for a, b in zip(renders, references)]
    s = [ssim(a, b) for a, b in zip(renders, references)]
    return {"psnr": float(np.mean(p)), "ssim": float(np.mean(s)), "psnr_per_view": p, "ssim_per_view": s}


def conventions(resolution: int = DEFAULT_RESOLUTION, threshold: float = DEFAULT_THRESHOLD, box=DEFAULT_BOX) -> dict:
    return {
        "chamfer": CHAMFER_CONVENTION,
        "psnr": f"10*log10(1/mse), capped at {PSNR_CAP} dB",
        "ssim": "11x11 gaussian window, sigma 1.5, zero padding, mean over pixels and channels",
        "occupancy": f"{resolution}^3 voxel centers over {list(box)}^3, density >= {threshold}",
        "surface_samples": SURFACE_SAMPLES,
    }
