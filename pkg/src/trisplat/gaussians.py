"""Gaussian cloud container, parameter activations and PLY persistence.

Raw (pre-activation) parameters are what the optimizer sees; the activated
views are what the renderer consumes:

    scale    = exp(raw_scales)
    rotation = raw_rotations / |raw_rotations|      (w, x, y, z)
    opacity  = sigmoid(raw_opacities)
    color    = sigmoid(colors)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument, InvalidState, PlyParseError
from .plyio import read_ply_vertices, vertex_colors

INITIAL_OPACITY = 0.1
FALLBACK_SCALE = 0.01
_MIN_SCALE = 1e-4

RAW_FIELDS = ("positions", "raw_scales", "raw_rotations", "raw_opacities", "colors")
_FIELD_WIDTH = {"positions": 3, "raw_scales": 3, "raw_rotations": 4, "raw_opacities": 1, "colors": 3}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    positions: np.ndarray
    raw_scales: np.ndarray
    raw_rotations: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray
    branch_id: int = 0

    def __post_init__(self):
        n = len(self.positions)
        for name in RAW_FIELDS:
            arr = np.asarray(getattr(self, name))
            if arr.ndim == 1 and _FIELD_WIDTH[name] == 1:
                arr = arr[:, None]
            if arr.shape != (n, _FIELD_WIDTH[name]):
                raise InvalidArgument(
                    f"{name} has shape {arr.shape}, expected ({n}, {_FIELD_WIDTH[name]})"
                )
            setattr(self, name, arr)
        if self.branch_id not in (0, 1, 2):
            raise InvalidArgument(f"branch_id must be 0, 1 or 2, got {self.branch_id}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dtype(self):
        return self.positions.dtype

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in RAW_FIELDS), branch_id=self.branch_id)

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, f).astype(dtype) for f in RAW_FIELDS), branch_id=self.branch_id
        )

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f)[index] for f in RAW_FIELDS), branch_id=self.branch_id)

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f)).all() for f in RAW_FIELDS)

    def fields(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in RAW_FIELDS}


@dataclass(frozen=True)
class ActivatedGaussians:
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray = field(repr=False)


def activate(cloud: GaussianCloud) -> ActivatedGaussians:
    norms = np.linalg.norm(cloud.raw_rotations, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidState("zero-norm raw quaternion cannot be normalized")
    return ActivatedGaussians(
        scales=np.exp(cloud.raw_scales),
        rotations=cloud.raw_rotations / norms,
        opacities=sigmoid(cloud.raw_opacities),
        colors=sigmoid(cloud.colors),
    )


def deactivate(act: ActivatedGaussians, positions: np.ndarray, branch_id: int = 0) -> GaussianCloud:
    """Inverse of :func:`activate` (rotations come back unit-norm)."""
    return GaussianCloud(
        positions=positions,
        raw_scales=np.log(act.scales),
        raw_rotations=act.rotations,
        raw_opacities=logit(act.opacities),
        colors=logit(act.colors),
        branch_id=branch_id,
    )


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit wxyz quaternion(s) (..., 4) to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def covariance(scale, rotation, atol: float = 1e-6) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for an activated scale and unit quaternion."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if abs(np.linalg.norm(rotation) - 1.0) > atol:
        raise InvalidArgument("rotation quaternion must be unit norm; activate it first")
    if np.any(scale <= 0):
        raise InvalidArgument("scales must be strictly positive")
    m = quaternion_to_matrix(rotation) * scale[None, :]
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def mean_nearest_neighbor_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return FALLBACK_SCALE
    dist, _ = cKDTree(points).query(points, k=2)
    d = float(np.mean(dist[:, 1]))
    return max(d, _MIN_SCALE) if np.isfinite(d) else FALLBACK_SCALE


def cloud_from_points(
    points: np.ndarray,
    colors: np.ndarray | None = None,
    branch_id: int = 0,
    dtype=np.float32,
) -> GaussianCloud:
    """Default-initialize Gaussians at the given centers.

    Scales are isotropic at the mean nearest-neighbor distance so that
    neighboring splats overlap; opacity starts at ``INITIAL_OPACITY``;
    colors are mid-gray unless given (in [0, 1]).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    scale = mean_nearest_neighbor_distance(points)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    if colors is None:
        raw_colors = np.zeros((n, 3))
    else:
        raw_colors = logit(np.clip(np.asarray(colors, dtype=np.float64), 1e-3, 1 - 1e-3))
    return GaussianCloud(
        positions=points.astype(dtype),
        raw_scales=np.full((n, 3), np.log(scale), dtype=dtype),
        raw_rotations=rot.astype(dtype),
        raw_opacities=np.full((n, 1), logit(INITIAL_OPACITY), dtype=dtype),
        colors=raw_colors.astype(dtype),
        branch_id=branch_id,
    )


def new_random_sphere(count: int, radius: float, seed: int, branch_id: int = 2) -> GaussianCloud:
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    if not radius > 0:
        raise InvalidArgument(f"radius must be > 0, got {radius}")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / 3.0)
    return cloud_from_points(direction * r[:, None], branch_id=branch_id)


# ---------------------------------------------------------------------------
# PLY

_PLY_PROPS = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"f_dc_{i}" for i in range(3)]
)


def save_ply(cloud: GaussianCloud, path) -> None:
    data = np.concatenate([getattr(cloud, f).astype(np.float32) for f in RAW_FIELDS], axis=1)
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment branch_id {cloud.branch_id}",
        "comment activations scale=exp rot=normalize(wxyz) opacity=sigmoid f_dc=sigmoid(rgb)",
        f"element vertex {len(cloud)}",
        *(f"property float {p}" for p in _PLY_PROPS),
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_ply(path) -> GaussianCloud:
    cols, comments = read_ply_vertices(path)
    for axis in "xyz":
        if axis not in cols:
            raise PlyParseError(f"element 'vertex': missing property {axis!r}")
    branch_id = 0
    for c in comments:
        m = re.match(r"branch_id\s+(\d+)", c)
        if m:
            branch_id = int(m.group(1))
    positions = np.stack([cols[a] for a in "xyz"], axis=1)
    if all(p in cols for p in _PLY_PROPS):
        def stack(names):
            return np.stack([cols[n] for n in names], axis=1).astype(np.float32)

        return GaussianCloud(
            positions=positions.astype(np.float32),
            raw_scales=stack([f"scale_{i}" for i in range(3)]),
            raw_rotations=stack([f"rot_{i}" for i in range(4)]),
            raw_opacities=stack(["opacity"]),
            colors=stack([f"f_dc_{i}" for i in range(3)]),
            branch_id=branch_id,
        )
    return cloud_from_points(positions, colors=vertex_colors(cols), branch_id=branch_id)
