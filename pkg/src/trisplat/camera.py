"""Pinhole cameras on an orbit around the origin.

World frame is +y up with the object at the origin. Azimuth 0 puts the camera
on +z, so the reference image is the azimuth-0 view. Camera space follows the
OpenCV convention (x right, y down, z forward) and pixel ``(i, j)`` covers
``[i, i+1) x [j, j+1)``, so the image center is ``(W/2, H/2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

DEFAULT_RADIUS = 2.0
DEFAULT_FOV_Y = 49.1

PSEUDO_VIEW_ELEVATIONS = (-70.0, -50.0, -30.0, 0.0, 30.0, 60.0)
PSEUDO_VIEW_COUNTS = (7, 9, 9, 12, 9, 7)


def intrinsics_from_fov(fov_y: float, width: int, height: int) -> np.ndarray:
    if not 0 < fov_y < 180:
        raise InvalidArgument(f"fov_y must be in (0, 180) degrees, got {fov_y}")
    f = height / (2.0 * math.tan(math.radians(fov_y) / 2.0))
    return np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int
    fov_y: float
    azimuth: float = 0.0
    elevation: float = 0.0
    radius: float = DEFAULT_RADIUS
    _center: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        R = self.world_to_camera[:3, :3]
        object.__setattr__(self, "_center", -R.T @ self.world_to_camera[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return self._center

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def to_json(self) -> dict:
        return {
            "azimuth": float(self.azimuth),
            "elevation": float(self.elevation),
            "radius": float(self.radius),
            "fov_y": float(self.fov_y),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json(cls, record: dict) -> "Camera":
        try:
            return orbit_pose(
                float(record["azimuth"]),
                float(record["elevation"]),
                float(record.get("radius", DEFAULT_RADIUS)),
                int(record["width"]),
                int(record["height"]),
                float(record.get("fov_y", DEFAULT_FOV_Y)),
            )
        except KeyError as exc:
            raise InvalidArgument(f"camera record missing field {exc.args[0]!r}") from None

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel center, (H, W, 3)."""
        j, i = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        d_cam = np.stack([(i - self.cx) / self.fx, (j - self.cy) / self.fy, np.ones_like(i)], axis=-1)
        d_world = d_cam @ self.R  # R^T applied per row
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def orbit_center(azimuth: float, elevation: float, radius: float) -> np.ndarray:
    az, el = math.radians(azimuth), math.radians(elevation)
    return radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])


def look_at(center: np.ndarray, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    M = np.eye(4)
    M[:3, :3] = np.stack([right, down, forward])
    M[:3, 3] = -M[:3, :3] @ center
    return M


def orbit_pose(
    azimuth: float,
    elevation: float,
    radius: float = DEFAULT_RADIUS,
    width: int = 256,
    height: int = 256,
    fov_y: float = DEFAULT_FOV_Y,
) -> Camera:
    if not radius > 0:
        raise InvalidArgument(f"radius must be > 0, got {radius}")
    if abs(elevation) >= 90:
        raise InvalidArgument(f"|elevation| must be < 90 degrees, got {elevation}")
    center = orbit_center(azimuth, elevation, radius)
    return Camera(
        K=intrinsics_from_fov(fov_y, width, height),
        world_to_camera=look_at(center),
        width=width,
        height=height,
        fov_y=fov_y,
        azimuth=azimuth,
        elevation=elevation,
        radius=radius,
    )


def sds_elevation_range(input_elevation: float) -> tuple[float, float]:
    ele = float(np.clip(input_elevation, -80.0, 80.0))
    low = ele + max(min(-30.0, -30.0 - ele), -80.0 - ele)
    high = ele + min(max(30.0, 30.0 - ele), 80.0 - ele)
    return low, high


def sample_sds_pose(
    input_elevation: float,
    rng: np.random.Generator,
    radius: float = DEFAULT_RADIUS,
    width: int = 256,
    height: int = 256,
    fov_y: float = DEFAULT_FOV_Y,
) -> Camera:
    low, high = sds_elevation_range(input_elevation)
    azimuth = rng.uniform(-180.0, 180.0)
    elevation = rng.uniform(low, high)
    return orbit_pose(azimuth, elevation, radius, width, height, fov_y)


def pseudo_view_set(
    width: int = 256, height: int = 256, fov_y: float = DEFAULT_FOV_Y, radius: float = DEFAULT_RADIUS
) -> list[Camera]:
    cams = []
    for elevation, count in zip(PSEUDO_VIEW_ELEVATIONS, PSEUDO_VIEW_COUNTS):
        for k in range(count):
            cams.append(orbit_pose(360.0 * k / count, elevation, radius, width, height, fov_y))
    return cams


def evaluation_orbit(
    count: int = 16,
    elevation: float = 30.0,
    radius: float = DEFAULT_RADIUS,
    width: int = 256,
    height: int = 256,
    fov_y: float = DEFAULT_FOV_Y,
) -> list[Camera]:
    """Evenly spaced azimuths at a fixed elevation (the 16-view test protocol)."""
    return [orbit_pose(360.0 * k / count, elevation, radius, width, height, fov_y) for k in range(count)]
