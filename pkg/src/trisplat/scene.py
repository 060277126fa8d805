"""Scene manifests: the JSON file tying a prior bundle's files together.

    {
      "schema_version": 1,
      "reference": {"image": "ref.png", "mask": "ref_mask.png", "depth": "ref.depth", "camera": {...}},
      "views": [{"image": ..., "mask": ..., "depth": ..., "camera": {...}}, ...],
      "input_elevation": 0.0,
      "geometry_prior": "shape.ply",
      "ground_truth": "gt.ply",        # optional, synthetic scenes / mock prior
      "output_dir": "out"
    }

Relative paths resolve against the manifest's directory. ``depth`` and
``mask`` are optional per view (a missing mask falls back to the image's
alpha channel).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import files
from .camera import Camera
from .errors import ManifestError
from .gaussians import GaussianCloud, load_ply
from .priors import AugmentedView, PriorBundle

SCHEMA_VERSION = 1


@dataclass
class SceneManifest:
    path: Path
    reference: dict
    views: list[dict]
    input_elevation: float
    geometry_prior: Path
    output_dir: Path
    ground_truth: Path | None = None

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.path.parent / p


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise ManifestError(f"{where}: missing field '{key}'")
    return record[key]


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")
    version = _require(data, "schema_version", "manifest")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"manifest schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    base = path.parent

    def check(rel, field_name):
        p = Path(rel) if Path(rel).is_absolute() else base / rel
        if not p.exists():
            raise ManifestError(f"{field_name}: file not found: {p}")
        return p

    reference = _require(data, "reference", "manifest")
    views = data.get("views", [])
    for where, rec in [("reference", reference)] + [(f"views[{i}]", v) for i, v in enumerate(views)]:
        check(_require(rec, "image", where), f"{where}.image")
        for key in ("mask", "depth"):
            if key in rec:
                check(rec[key], f"{where}.{key}")
        if where != "reference":
            _require(rec, "camera", where)
        if "camera" in rec:
            try:
                Camera.from_json(rec["camera"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{where}.camera: cannot parse camera record: {exc}") from exc
    geometry = check(_require(data, "geometry_prior", "manifest"), "geometry_prior")
    gt = check(data["ground_truth"], "ground_truth") if data.get("ground_truth") else None
    return SceneManifest(
        path=path,
        reference=reference,
        views=views,
        input_elevation=float(data.get("input_elevation", 0.0)),
        geometry_prior=geometry,
        output_dir=base / data.get("output_dir", "out"),
        ground_truth=gt,
    )


def _load_view(manifest: SceneManifest, rec: dict):
    image, alpha = files.read_png(manifest.resolve(rec["image"]))
    if "mask" in rec:
        mask = files.read_mask(manifest.resolve(rec["mask"]))
    elif alpha is not None:
        mask = alpha
    else:
        mask = np.ones(image.shape[:2])
    depth = files.read_depth(manifest.resolve(rec["depth"])) if "depth" in rec else None
    if mask.shape != image.shape[:2] or (depth is not None and depth.shape != image.shape[:2]):
        raise ManifestError(f"{rec['image']}: image, mask and depth sizes differ")
    return image, mask, depth


def load_bundle(manifest: SceneManifest) -> PriorBundle:
    image, mask, depth = _load_view(manifest, manifest.reference)
    ref_cam = manifest.reference.get("camera")
    radius = float(ref_cam["radius"]) if ref_cam else 2.0
    fov_y = float(ref_cam["fov_y"]) if ref_cam else 49.1
    views = []
    for rec in manifest.views:
        v_image, v_mask, v_depth = _load_view(manifest, rec)
        views.append(AugmentedView(v_image, v_mask, Camera.from_json(rec["camera"]), v_depth))
    return PriorBundle(image, mask, views, manifest.input_elevation, depth, radius=radius, fov_y=fov_y)


def load_ground_truth(manifest: SceneManifest) -> GaussianCloud | None:
    return load_ply(manifest.ground_truth) if manifest.ground_truth else None
