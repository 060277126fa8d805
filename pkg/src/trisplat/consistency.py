"""Cross-branch untrusted-region masking.

A Gaussian is untrusted when its nearest neighbor in *both* other branches
is farther than ``tau`` in squared Euclidean distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument
from .gaussians import GaussianCloud

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.05


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d * d).sum(axis=-1)


def nearest_neighbor(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest target index for every source point, ties to the lowest index.

    Returns ``(index, squared_distance)``. The KD-tree proposes candidates
    within a slightly inflated radius; the final choice recomputes squared
    distances directly so rounding cannot reorder near-ties.
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(target) == 0:
        raise InvalidArgument("nearest_neighbor: empty target set")
    if len(source) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    tree = cKDTree(target)
    d, idx = tree.query(source, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    best = _sq_dist(source, target[idx])
    radius = d * (1 + 1e-9) + 1e-12
    # only points with another target at (almost) the same distance need a closer look
    n_close = tree.query_ball_point(source, radius, return_length=True)
    for i in np.nonzero(n_close > 1)[0]:
        cand = np.asarray(sorted(tree.query_ball_point(source[i], radius[i])), dtype=np.int64)
        dist = _sq_dist(source[i], target[cand])
        j = int(np.argmin(dist))
        idx[i], best[i] = cand[j], dist[j]
    return idx, best


@dataclass
class UntrustedMask:
    flags: np.ndarray  # (N,) bool
    tau: float
    step: int
    distance: np.ndarray  # (N,) min over the two branches of squared NN distance

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def count(self) -> int:
        return int(self.flags.sum())


def untrusted_mask(
    branch: GaussianCloud, other_a: GaussianCloud, other_b: GaussianCloud, tau: float = DEFAULT_TAU, step: int = 0
) -> UntrustedMask:
    if not tau > 0:
        raise InvalidArgument(f"tau must be > 0, got {tau}")
    if min(len(branch), len(other_a), len(other_b)) == 0:
        raise InvalidArgument("untrusted_mask needs three nonempty clouds")
    x = branch.positions.astype(np.float64)
    _, da = nearest_neighbor(x, other_a.positions)
    _, db = nearest_neighbor(x, other_b.positions)
    return UntrustedMask(flags=(da > tau) & (db > tau), tau=tau, step=step, distance=np.minimum(da, db))


def keep_indices(mask: UntrustedMask, count: int) -> np.ndarray:
    """Indices surviving an untrusted prune; never empty."""
    if len(mask) != count:
        raise InvalidArgument(f"mask length {len(mask)} does not match cloud size {count}")
    keep = np.nonzero(~mask.flags)[0]
    if len(keep) == 0:
        survivor = int(np.argmin(mask.distance))
        log.warning("untrusted mask flags every Gaussian; keeping index %d", survivor)
        keep = np.array([survivor])
    return keep


def prune_untrusted(cloud: GaussianCloud, mask: UntrustedMask) -> GaussianCloud:
    return cloud.subset(keep_indices(mask, len(cloud)))


def branch_masks(
    clouds: list[GaussianCloud], tau: float = DEFAULT_TAU, step: int = 0
) -> list[UntrustedMask]:
    """Masks for all three branches, each computed against the other two."""
    return [untrusted_mask(clouds[i], clouds[(i + 1) % 3], clouds[(i + 2) % 3], tau, step) for i in range(3)]
