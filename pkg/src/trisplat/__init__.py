"""Three-branch Gaussian splatting reconstruction from a single image.

Three Gaussian clouds, initialized from a retrieved shape, from back-projected
depth maps and from random noise, are optimized jointly against the input
view, prior-generated views, a diffusion prior and each other.
"""

from .camera import Camera, evaluation_orbit, orbit_pose, pseudo_view_set, sample_sds_pose, sds_elevation_range
from .config import TrainConfig, load_config
from .consistency import untrusted_mask
from .errors import (
    ConfigError,
    IngestionError,
    InvalidArgument,
    InvalidState,
    ManifestError,
    PlyParseError,
    PriorError,
    PriorProtocolError,
    TrisplatError,
)
from .evaluation import chamfer, density_field, marching_cubes, occupancy, psnr, ssim, volume_iou
from .gaussians import GaussianCloud, load_ply, new_random_sphere, save_ply
from .priors import MockPrior, PriorBundle, RemotePrior, co_sds_gradient
from .rasterizer import render, render_backward
from .trainer import BranchState, schedule_lambda, schedule_timestep, train

__version__ = "0.1.0"
