"""Two-stage, three-branch optimization loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rasterizer
from .camera import Camera, orbit_pose, pseudo_view_set, sample_sds_pose
from .config import TrainConfig, dump_config
from .consistency import branch_masks, keep_indices
from .errors import ConfigError, PriorError
from .gaussians import RAW_FIELDS, GaussianCloud, load_ply, new_random_sphere, quaternion_to_matrix, save_ply, sigmoid
from .losses import LossBreakdown, loss_co, loss_front, loss_other, loss_proj
from .priors import (
    DeltaPose,
    MockPrior,
    PriorBundle,
    RemotePrior,
    build_perception_init,
    co_sds_gradient,
    load_geometry_prior,
)

log = logging.getLogger(__name__)

BRANCH_KINDS = ("geometry", "perception", "noise")
GROUPS = {
    "positions": "position",
    "colors": "color",
    "raw_opacities": "opacity",
    "raw_scales": "scaling",
    "raw_rotations": "rotation",
}
# named RNG streams, one per consumer
STREAM_VIEW = 1
STREAM_CAMERA = 2
STREAM_NOISE = 3
STREAM_PSEUDO = 4
STREAM_DENSIFY = 10


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# ---------------------------------------------------------------------------
# schedules


def schedule_lambda(step: int, max_value: float, total_steps: int) -> float:
    if total_steps <= 0:
        return float(max_value)
    return max_value * step / total_steps


def schedule_timestep(
    step: int, total_steps: int, max_timestep: int = 1000, t_max_fraction: float = 0.98, t_min_fraction: float = 0.02
) -> int:
    frac = step / total_steps if total_steps > 0 else 1.0
    t = round(max_timestep * (t_max_fraction + (t_min_fraction - t_max_fraction) * frac))
    return int(min(max(t, 0), max_timestep - 1))


def position_lr(step: int, total_steps: int, lr_init: float = 2e-4, lr_final: float = 1e-6) -> float:
    """Log-linear (exponential) decay from lr_init at step 0 to lr_final at total_steps."""
    frac = min(max(step / total_steps, 0.0), 1.0) if total_steps > 0 else 1.0
    return float(math.exp((1 - frac) * math.log(lr_init) + frac * math.log(lr_final)))


def group_lrs(config: TrainConfig, step: int) -> dict[str, float]:
    return {
        "position": position_lr(step, config.total_steps, config.lr_position_init, config.lr_position_final),
        "color": config.lr_color,
        "opacity": config.lr_opacity,
        "scaling": config.lr_scaling,
        "rotation": config.lr_rotation,
    }


# ---------------------------------------------------------------------------
# branch state and optimizer


@dataclass
class BranchState:
    cloud: GaussianCloud
    kind: str
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    grad_accum: np.ndarray = None
    grad_hits: np.ndarray = None

    def __post_init__(self):
        self.reset_moments()
        self.reset_accumulators()

    def reset_moments(self):
        for f in RAW_FIELDS:
            shape = getattr(self.cloud, f).shape
            self.exp_avg[f] = np.zeros(shape)
            self.exp_avg_sq[f] = np.zeros(shape)

    def reset_accumulators(self):
        self.grad_accum = np.zeros(len(self.cloud))
        self.grad_hits = np.zeros(len(self.cloud), dtype=np.int64)

    def take(self, index: np.ndarray) -> None:
        """Keep/reorder rows (cloud, moments and accumulators together)."""
        self.cloud = self.cloud.subset(index)
        for f in RAW_FIELDS:
            self.exp_avg[f] = self.exp_avg[f][index]
            self.exp_avg_sq[f] = self.exp_avg_sq[f][index]
        self.grad_accum = self.grad_accum[index]
        self.grad_hits = self.grad_hits[index]

    def append(self, rows: dict[str, np.ndarray]) -> None:
        """Append new Gaussians with zeroed moments and accumulators."""
        n = len(rows["positions"])
        values = {f: np.concatenate([getattr(self.cloud, f), rows[f].astype(self.cloud.dtype)]) for f in RAW_FIELDS}
        self.cloud = GaussianCloud(**values, branch_id=self.cloud.branch_id)
        for f in RAW_FIELDS:
            pad = np.zeros((n,) + self.exp_avg[f].shape[1:])
            self.exp_avg[f] = np.concatenate([self.exp_avg[f], pad])
            self.exp_avg_sq[f] = np.concatenate([self.exp_avg_sq[f], pad])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])
        self.grad_hits = np.concatenate([self.grad_hits, np.zeros(n, dtype=np.int64)])

    def accumulate(self, screen_grad_norm: np.ndarray, visible: np.ndarray) -> None:
        self.grad_accum[visible] += screen_grad_norm[visible]
        self.grad_hits[visible] += 1


def optimizer_step(
    state: BranchState,
    grads,
    step: int,
    lrs: dict[str, float],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-15,
) -> list[str]:
    """One Adam update in place; returns the names of groups skipped for non-finite gradients.

    ``grads`` maps raw field names to arrays (or is a ParamGradients).
    ``step`` is the 1-based update count used for bias correction.
    """
    if hasattr(grads, "fields"):
        grads = grads.fields()
    b1, b2 = betas
    skipped = []
    values = {}
    for f in RAW_FIELDS:
        param = getattr(state.cloud, f)
        g = grads.get(f)
        if g is None:
            values[f] = param
            continue
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            log.warning("non-finite gradient in group %s at step %d; skipping it", GROUPS[f], step)
            skipped.append(GROUPS[f])
            values[f] = param
            continue
        m = state.exp_avg[f] = b1 * state.exp_avg[f] + (1 - b1) * g
        v = state.exp_avg_sq[f] = b2 * state.exp_avg_sq[f] + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        values[f] = (param - lrs[GROUPS[f]] * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    state.cloud = GaussianCloud(**values, branch_id=state.cloud.branch_id)
    return skipped


# ---------------------------------------------------------------------------
# adaptive density control


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0

    def as_dict(self) -> dict:
        return {"cloned": self.cloned, "split": self.split, "pruned": self.pruned}


def densify_and_prune(
    state: BranchState,
    rng: np.random.Generator,
    grad_threshold: float = 0.1,
    max_scale: float = 0.05,
    prune_min_opacity: float = 0.025,
    prune_max_scale: float = 0.1,
    max_gaussians: int = 20000,
) -> DensifyReport:
    """Clone small / split large high-gradient Gaussians, then prune. In place."""
    report = DensifyReport()
    cloud = state.cloud
    n = len(cloud)
    avg = state.grad_accum / np.maximum(state.grad_hits, 1)
    scales = np.exp(cloud.raw_scales.astype(np.float64))
    smax = scales.max(axis=1)

    cand = np.nonzero(avg > grad_threshold)[0]
    # a split adds one net Gaussian, as does a clone; highest gradients first when capped
    room = max(max_gaussians - n, 0)
    if len(cand) > room:
        order = np.argsort(-avg[cand], kind="stable")
        cand = np.sort(cand[order[:room]])
    clone = cand[smax[cand] <= max_scale]
    split = cand[smax[cand] > max_scale]

    new_rows = {f: [] for f in RAW_FIELDS}
    if len(clone):
        for f in RAW_FIELDS:
            new_rows[f].append(getattr(cloud, f)[clone])
        report.cloned = len(clone)
    if len(split):
        s = scales[split]
        rot = cloud.raw_rotations[split].astype(np.float64)
        rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
        R = quaternion_to_matrix(rot)
        for _ in range(2):
            offset = np.einsum("nij,nj->ni", R, rng.normal(size=s.shape) * s)
            new_rows["positions"].append(cloud.positions[split] + offset)
            new_rows["raw_scales"].append(np.log(s / 1.6))
            for f in ("raw_rotations", "raw_opacities", "colors"):
                new_rows[f].append(getattr(cloud, f)[split])
        report.split = len(split)
    if len(clone) or len(split):
        state.append({f: np.concatenate(v) for f, v in new_rows.items()})
    if len(split):
        keep = np.ones(len(state.cloud), dtype=bool)
        keep[split] = False
        state.take(np.nonzero(keep)[0])

    cloud = state.cloud
    opacity = sigmoid(cloud.raw_opacities[:, 0].astype(np.float64))
    smax = np.exp(cloud.raw_scales.astype(np.float64)).max(axis=1)
    keep = ~((opacity < prune_min_opacity) | (smax > prune_max_scale))
    if not keep.any():
        keep[int(np.argmax(opacity))] = True
    report.pruned = int((~keep).sum())
    if report.pruned:
        state.take(np.nonzero(keep)[0])
    state.reset_accumulators()
    return report


# ---------------------------------------------------------------------------
# initialization and priors


def initial_states(config: TrainConfig, bundle: PriorBundle, geometry_path) -> list[BranchState]:
    s0, s1, s2 = config.branch_seeds()
    clouds = [
        load_geometry_prior(geometry_path, config.geometry_count, s0, radius=config.geometry_radius, branch_id=0),
        build_perception_init(bundle, config.perception_count, s1, branch_id=1),
        new_random_sphere(config.noise_count, config.noise_radius, s2, branch_id=2),
    ]
    return [BranchState(c.astype(np.float64), kind) for c, kind in zip(clouds, BRANCH_KINDS)]


def make_prior(config: TrainConfig, bundle: PriorBundle, ground_truth: GaussianCloud | None = None, client=None):
    """Build the prior named by the config (None when prior = none)."""
    if config.prior == "none":
        return None
    if config.prior == "remote":
        return RemotePrior(
            config.prior_endpoint, timeout=config.prior_timeout, retries=config.prior_retries,
            client=client, max_timestep=config.prior_max_timestep,
        )
    if ground_truth is None:
        raise ConfigError("prior = mock needs a ground-truth cloud (manifest field 'ground_truth')")
    bg = config.background_rgb()
    gt = ground_truth.astype(np.float64)

    def renderer(camera: Camera) -> np.ndarray:
        return rasterizer.render(gt, camera, background=bg).color.numpy()

    return MockPrior(renderer, bundle.reference_camera, config.mock_kappa)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    states: list[BranchState]
    log: list[dict]
    prior_failures: int = 0

    @property
    def clouds(self) -> list[GaussianCloud]:
        return [s.cloud for s in self.states]


def _cam_record(cam: Camera) -> dict:
    return {"azimuth": cam.azimuth, "elevation": cam.elevation}


def output_names() -> list[str]:
    return [f"branch{k}_{kind}.ply" for k, kind in enumerate(BRANCH_KINDS)]


def save_branches(states: list[BranchState], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for state, name in zip(states, output_names()):
        path = directory / name
        save_ply(state.cloud.astype(np.float32), path)
        paths.append(path)
    return paths


def load_branches(directory) -> list[GaussianCloud]:
    return [load_ply(Path(directory) / name) for name in output_names()]


class Trainer:
    def __init__(self, config: TrainConfig, bundle: PriorBundle, states: list[BranchState], prior=None, out_dir=None):
        self.config = config
        self.bundle = bundle
        self.states = states
        self.prior = prior
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.background = config.background_rgb()
        self.ref_camera = bundle.reference_camera
        self.height, self.width = bundle.reference_mask.shape
        self.pseudo_cameras = pseudo_view_set(self.width, self.height, bundle.fov_y, bundle.radius)
        seed = config.seed
        self.rng_view = rng_stream(seed, STREAM_VIEW)
        self.rng_camera = rng_stream(seed, STREAM_CAMERA)
        self.rng_noise = rng_stream(seed, STREAM_NOISE)
        self.rng_pseudo = rng_stream(seed, STREAM_PSEUDO)
        self.rng_densify = [rng_stream(s, STREAM_DENSIFY + k) for k, s in enumerate(config.branch_seeds())]
        self.prior_failures = 0
        self.log: list[dict] = []
        self.timings: list[dict] = []
        self._ref = [torch.as_tensor(bundle.reference_image, dtype=torch.float64),
                     torch.as_tensor(bundle.reference_mask, dtype=torch.float64)]
        self._aug = [
            (torch.as_tensor(v.image, dtype=torch.float64), torch.as_tensor(v.mask, dtype=torch.float64))
            for v in bundle.augmented_views
        ]

    def _render(self, k: int, params, camera: Camera):
        return rasterizer.render(self.states[k].cloud, camera, self.background, params=params)

    def step(self, s: int) -> dict:
        cfg = self.config
        lam = {name: schedule_lambda(s, value, cfg.total_steps) for name, value in cfg.lambda_max.items()}
        params = [rasterizer.leaf_params(st.cloud, True) for st in self.states]
        renders = [[] for _ in range(3)]
        record: dict = {"step": s}
        breakdown = LossBreakdown(weights=lam)
        # ``total`` also carries the SDS surrogate; ``objective`` is the loss value proper
        total = torch.zeros((), dtype=torch.float64)
        objective = 0.0

        # (1) reference view
        for k in range(3):
            r = self._render(k, params[k], self.ref_camera)
            renders[k].append(r)
            lf = loss_front(r, *self._ref, lam["lambda1"], lam["lambda2"])
            breakdown.front += float(lf.detach())
            objective += float(lf.detach())
            total = total + lf

        # (2) one augmented view shared by all branches, (3) its reprojection partner
        cams = {}
        if self._aug:
            vi = int(self.rng_view.integers(len(self._aug)))
            view = self.bundle.augmented_views[vi]
            cam1 = view.camera
            cam2 = orbit_pose(cam1.azimuth + cfg.proj_delta_azimuth, cam1.elevation, cam1.radius,
                              cam1.width, cam1.height, cam1.fov_y)
            cams["augmented"] = vi
            for k in range(3):
                r1 = self._render(k, params[k], cam1)
                r2 = self._render(k, params[k], cam2)
                renders[k] += [r1, r2]
                lo = loss_other(r1, *self._aug[vi], lam["lambda3"], lam["lambda4"], lam["lambda5"])
                masks = (r1.alpha.detach().numpy() >= 0.5, r2.alpha.detach().numpy() >= 0.5)
                lp = loss_proj(r1.depth, r2.depth, cam1, cam2, masks, mode=cfg.proj_mode).value
                breakdown.other += float(lo.detach())
                breakdown.proj += float(lp.detach())
                total = total + lo + lam["alpha1"] * lp
                objective += float(lo.detach()) + lam["alpha1"] * float(lp.detach())

        # (4) co-SDS at one sampled camera
        t = schedule_timestep(s, cfg.total_steps, self._max_timestep(), cfg.t_max_fraction, cfg.t_min_fraction)
        record["t"] = t
        sds_cam = sample_sds_pose(self.bundle.input_elevation, self.rng_camera, self.bundle.radius,
                                  self.width, self.height, self.bundle.fov_y)
        noise_seed = int(self.rng_noise.integers(2**31 - 1))
        cams["sds"] = _cam_record(sds_cam)
        sds_status = "off"
        if self.prior is not None:
            sds = [self._render(k, params[k], sds_cam) for k in range(3)]
            for k in range(3):
                renders[k].append(sds[k])
            try:
                grads, response = co_sds_gradient(
                    self.prior, [r.color.detach().numpy() for r in sds], self.bundle.reference_image, t,
                    DeltaPose.between(self.ref_camera, sds_cam), weight=cfg.sds_weight, seed=noise_seed,
                    beta=cfg.co_sds_beta, alphas_cumprod=getattr(self.prior, "alphas_cumprod", None),
                )
            except PriorError as exc:
                self.prior_failures += 1
                sds_status = "skipped"
                log.warning("step %d: SDS skipped (%s)", s, exc)
                if self.prior_failures > cfg.max_prior_failures:
                    raise PriorError(
                        f"prior failed {self.prior_failures} times (limit {cfg.max_prior_failures})", retriable=False
                    ) from exc
            else:
                sds_status = "applied"
                self.timings.append({"step": s, "prior_latency": response.latency})
                for k in range(3):
                    g = torch.from_numpy(grads[k])
                    total = total + (sds[k].color * g).sum()
                breakdown.sds_scale = float(np.mean([np.abs(g).mean() for g in grads]))
        record["sds"] = sds_status

        # (5) pseudo-view co-regularization in stage 2
        pairs = []
        if s > cfg.stage2_start:
            pi = int(self.rng_pseudo.integers(len(self.pseudo_cameras)))
            cams["pseudo"] = pi
            pr = [self._render(k, params[k], self.pseudo_cameras[pi]) for k in range(3)]
            for k in range(3):
                renders[k].append(pr[k])
            for j in range(3):
                partner = (j + 1) % 3
                lc = loss_co(pr[j], pr[partner], lam["lambda6"], lam["lambda7"])
                breakdown.co += float(lc.detach())
                objective += float(lc.detach())
                total = total + lc
                pairs.append([j, partner])
        record["cameras"] = cams
        record["co_pairs"] = pairs

        total.backward()
        breakdown.total = objective

        # (6) optimizer, accumulating screen-space gradients for densification
        lrs = group_lrs(cfg, s)
        skipped = {}
        for k, st in enumerate(self.states):
            for r in renders[k]:
                g = r.means2d.grad
                if g is not None:
                    st.accumulate(rasterizer.screen_gradient_norm(g.numpy(), r.camera), r.visible)
            grads = {f: (p.grad.numpy() if p.grad is not None else None) for f, p in params[k].items()}
            bad = optimizer_step(st, grads, s, lrs, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
            if bad:
                skipped[k] = bad
        if skipped:
            record["skipped_groups"] = skipped

        # (7) densification
        if cfg.densify_from <= s <= cfg.densify_until and s % cfg.densify_interval == 0:
            record["densify"] = [
                densify_and_prune(
                    st, self.rng_densify[k], cfg.densify_grad_threshold, cfg.densify_max_scale,
                    cfg.prune_min_opacity, cfg.prune_max_scale, cfg.max_gaussians,
                ).as_dict()
                for k, st in enumerate(self.states)
            ]

        # (8) untrusted-region pruning in stage 2
        if s > cfg.stage2_start and s % cfg.untrusted_interval == 0:
            masks = branch_masks([st.cloud for st in self.states], cfg.tau, s)
            record["untrusted"] = [m.count for m in masks]
            for st, m in zip(self.states, masks):
                st.take(keep_indices(m, len(st.cloud)))

        record["losses"] = breakdown.as_dict()
        record["counts"] = [len(st.cloud) for st in self.states]
        record["lambda"] = lam
        return record

    def _max_timestep(self) -> int:
        return int(getattr(self.prior, "max_timestep", self.config.prior_max_timestep) or 1000)

    def checkpoint(self, s: int) -> None:
        if self.out_dir is None:
            return
        directory = self.out_dir / "checkpoints" / f"step_{s:05d}"
        save_branches(self.states, directory)
        rngs = {
            "view": self.rng_view.bit_generator.state,
            "camera": self.rng_camera.bit_generator.state,
            "noise": self.rng_noise.bit_generator.state,
            "pseudo": self.rng_pseudo.bit_generator.state,
            "densify": [r.bit_generator.state for r in self.rng_densify],
        }
        state = {"step": s, "config_digest": self.config.digest(), "rng": rngs}
        (directory / "state.json").write_text(json.dumps(state, sort_keys=True, indent=1) + "\n")

    def run(self) -> TrainResult:
        cfg = self.config
        log_file = timing_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.txt").write_text(dump_config(cfg))
            log_file = open(self.out_dir / "run_log.jsonl", "w")
            timing_file = open(self.out_dir / "timings.jsonl", "w")
        try:
            for s in range(1, cfg.total_steps + 1):
                record = self.step(s)
                self.log.append(record)
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    log_file.flush()
                    while self.timings:
                        timing_file.write(json.dumps(self.timings.pop(0)) + "\n")
                if s % cfg.checkpoint_interval == 0:
                    self.checkpoint(s)
                if s % 50 == 0:
                    log.info("step %d loss %.4g counts %s", s, record["losses"]["total"], record["counts"])
        finally:
            if log_file:
                log_file.close()
                timing_file.close()
        if self.out_dir is not None:
            save_branches(self.states, self.out_dir)
        return TrainResult(self.states, self.log, self.prior_failures)


def train(
    config: TrainConfig,
    bundle: PriorBundle,
    geometry_path,
    prior=None,
    out_dir=None,
    states: list[BranchState] | None = None,
) -> TrainResult:
    """Run the full schedule. Ingestion errors surface before step 1."""
    torch.set_num_threads(1)
    if states is None:
        states = initial_states(config, bundle, geometry_path)
    if config.total_steps == 0:
        return TrainResult(states, [], 0)
    return Trainer(config, bundle, states, prior, out_dir).run()
