"""Synthetic ground-truth scenes with known answers, for oracles and fixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import files
from .camera import Camera, orbit_pose
from .gaussians import GaussianCloud, cloud_from_points, logit, save_ply
from .plyio import write_point_ply
from .priors import AugmentedView, PriorBundle
from .rasterizer import WHITE, render

# held-out views sit between the training azimuths and off the training elevations
HELD_OUT_ELEVATION = 15.0
HELD_OUT_AZIMUTHS = (22.5, 112.5, 202.5, 292.5)


@dataclass
class SyntheticScene:
    ground_truth: GaussianCloud
    bundle: PriorBundle
    geometry_points: np.ndarray
    held_out: list[Camera]


def ground_truth_cloud(count: int = 200, radius: float = 0.5, seed: int = 0) -> GaussianCloud:
    """A solid blob of opaque, smoothly colored Gaussians inside a ball of ``radius``."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / 3.0)
    pts = d * r[:, None] * np.array([1.0, 0.8, 0.9])
    pts -= 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    colors = np.clip(0.5 + 0.45 * pts / radius, 0.05, 0.95)
    cloud = cloud_from_points(pts, colors=colors, dtype=np.float64)
    n = len(pts)
    cloud.raw_scales[:] = np.log(rng.uniform(0.06, 0.09, size=(n, 3)))
    q = rng.normal(size=(n, 4))
    cloud.raw_rotations[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    cloud.raw_opacities[:] = logit(rng.uniform(0.7, 0.95, size=(n, 1)))
    return cloud


def training_cameras(size: int, radius: float = 2.0, fov_y: float = 49.1) -> list[Camera]:
    """Eight augmented views: azimuths every 45 degrees, alternating elevations 20 and -10."""
    return [orbit_pose(45.0 * k, 20.0 if k % 2 else -10.0, radius, size, size, fov_y) for k in range(1, 9)]


def render_view(cloud: GaussianCloud, camera: Camera, background=WHITE) -> dict[str, np.ndarray]:
    return render(cloud, camera, background=background).numpy()


def make_scene(
    size: int = 128,
    count: int = 200,
    seed: int = 0,
    input_elevation: float = 0.0,
    radius: float = 2.0,
    fov_y: float = 49.1,
) -> SyntheticScene:
    gt = ground_truth_cloud(count, seed=seed)
    ref_cam = orbit_pose(0.0, input_elevation, radius, size, size, fov_y)
    ref = render_view(gt, ref_cam)
    views = []
    for cam in training_cameras(size, radius, fov_y):
        out = render_view(gt, cam)
        views.append(AugmentedView(out["color"], out["alpha"], cam, out["depth"]))
    bundle = PriorBundle(
        ref["color"], ref["alpha"], views, input_elevation, reference_depth=ref["depth"], radius=radius, fov_y=fov_y
    )
    held_out = [orbit_pose(az, HELD_OUT_ELEVATION, radius, size, size, fov_y) for az in HELD_OUT_AZIMUTHS]
    return SyntheticScene(gt, bundle, gt.positions.copy(), held_out)


def geometry_radius(points: np.ndarray) -> float:
    """Radius that makes the geometry prior's normalization an identity on ``points``."""
    centered = points - 0.5 * (points.min(axis=0) + points.max(axis=0))
    return float(np.linalg.norm(centered, axis=1).max())


def write_scene(scene: SyntheticScene, directory) -> Path:
    """Write a manifest plus every file it references; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    b = scene.bundle

    def view_record(name, image, mask, depth, camera):
        files.write_png(directory / f"{name}.png", image, mask)
        files.write_png(directory / f"{name}_mask.png", np.stack([mask] * 3, axis=-1))
        record = {"image": f"{name}.png", "mask": f"{name}_mask.png", "camera": camera.to_json()}
        if depth is not None:
            files.write_depth(directory / f"{name}.depth", depth)
            record["depth"] = f"{name}.depth"
        return record

    manifest = {
        "schema_version": 1,
        "reference": view_record("reference", b.reference_image, b.reference_mask, b.reference_depth,
                                 b.reference_camera),
        "views": [
            view_record(f"view{i:02d}", v.image, v.mask, v.depth, v.camera) for i, v in enumerate(b.augmented_views)
        ],
        "input_elevation": b.input_elevation,
        "geometry_prior": "geometry.ply",
        "ground_truth": "ground_truth.ply",
        "output_dir": "out",
    }
    write_point_ply(directory / "geometry.ply", scene.geometry_points)
    save_ply(scene.ground_truth.astype(np.float32), directory / "ground_truth.ply")
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path
