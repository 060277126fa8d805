import numpy as np
import pytest
import torch
from fastapi import FastAPI
from fastapi.testclient import TestClient
from scipy.spatial import cKDTree
from scipy.stats import binomtest

from trisplat import files, synthetic
from trisplat.camera import orbit_pose
from trisplat.errors import IngestionError, PriorError, PriorProtocolError
from trisplat.evaluation import chamfer
from trisplat.gaussians import GaussianCloud, activate, logit
from trisplat.plyio import write_point_ply
from trisplat.priors import (
    AugmentedView,
    DeltaPose,
    MockPrior,
    PriorBundle,
    PriorQuery,
    PriorResponse,
    RemotePrior,
    backproject_depth,
    build_perception_init,
    co_sds_gradient,
    load_geometry_prior,
)
from trisplat.rasterizer import leaf_params, render
from trisplat.service import create_app


def shell_cloud(count=300, radius=0.5, scale=0.04, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    q = np.zeros((count, 4))
    q[:, 0] = 1
    return GaussianCloud(radius * d, np.full((count, 3), np.log(scale)), q,
                         logit(np.full((count, 1), 0.9)), rng.normal(size=(count, 3)))


def bundle_from(cloud, cameras):
    views = []
    for cam in cameras:
        out = render(cloud, cam).numpy()
        views.append(AugmentedView(out["color"], out["alpha"], cam, out["depth"]))
    return PriorBundle(views[0].image, views[0].mask, views, 0.0)


# ---------------------------------------------------------------------------
# geometry prior


def test_cube_vertices_pass_through(tmp_path):
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * 3 + 5
    write_point_ply(tmp_path / "cube.ply", corners)
    cloud = load_geometry_prior(tmp_path / "cube.ply", 8)
    expected = (corners - 5) / np.sqrt(27)
    assert len(cloud) == 8
    assert np.allclose(np.sort(cloud.positions, axis=0), np.sort(expected, axis=0), atol=1e-6)
    assert np.allclose(np.linalg.norm(cloud.positions, axis=1), 1.0, atol=1e-6)


def test_large_file_subsampled_to_target(tmp_path):
    pts = np.random.default_rng(0).normal(size=(1_000_000, 3))
    write_point_ply(tmp_path / "big.ply", pts)
    a = load_geometry_prior(tmp_path / "big.ply", 5000, seed=3)
    b = load_geometry_prior(tmp_path / "big.ply", 5000, seed=3)
    assert len(a) == 5000
    assert np.array_equal(a.positions, b.positions)


def test_degenerate_extent(tmp_path):
    write_point_ply(tmp_path / "dot.ply", np.ones((20, 3)))
    with pytest.raises(IngestionError, match="degenerate extent"):
        load_geometry_prior(tmp_path / "dot.ply", 10)


def test_unreadable_geometry(tmp_path):
    (tmp_path / "bad.ply").write_bytes(b"not a ply")
    with pytest.raises(IngestionError):
        load_geometry_prior(tmp_path / "bad.ply", 10)


# ---------------------------------------------------------------------------
# back-projection and perception init


def test_backproject_flat_plane():
    cam = orbit_pose(0, 0, 2, 32, 32)
    pts, cols = backproject_depth(np.full((32, 32, 3), 0.3), np.full((32, 32), 2.0), np.ones((32, 32)), cam)
    assert len(pts) == 32 * 32
    assert np.abs(pts[:, 2]).max() < 1e-12
    assert np.allclose(cols, 0.3)


def test_backproject_respects_mask():
    cam = orbit_pose(0, 0, 2, 16, 16)
    mask = np.ones((16, 16))
    mask[3, 5] = 0
    pts, _ = backproject_depth(np.zeros((16, 16, 3)), np.full((16, 16), 2.0), mask, cam)
    assert len(pts) == 16 * 16 - 1
    # the pixel at row 3, column 5 would have landed here
    missing = cam.center + 2.0 * np.array([(5.5 - cam.cx) / cam.fx, (3.5 - cam.cy) / cam.fy, 1.0]) @ cam.R
    assert np.min(np.linalg.norm(pts - missing, axis=1)) > 1e-6
    assert len(backproject_depth(np.zeros((16, 16, 3)), np.ones((16, 16)), np.zeros((16, 16)), cam)[0]) == 0


def test_render_then_backproject_round_trip():
    # small, sparse Gaussians: every foreground pixel sees one splat at its center depth
    rng = np.random.default_rng(0)
    n = 60
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = d * 0.5 * rng.uniform(0.3, 1, size=(n, 1)) ** (1 / 3)
    q = np.zeros((n, 4))
    q[:, 0] = 1
    cloud = GaussianCloud(pos, np.full((n, 3), np.log(0.01)), q, logit(np.full((n, 1), 0.7)), np.zeros((n, 3)))
    cam = orbit_pose(30, 10, 2, 256, 256)
    out = render(cloud, cam).numpy()
    pts, _ = backproject_depth(out["color"], out["depth"], out["alpha"], cam)
    assert len(pts) > 100
    assert np.median(cKDTree(pos).query(pts)[0]) < 0.02 * 0.5


def test_perception_init_single_view_equals_backprojection():
    cam = orbit_pose(0, 0, 2, 24, 24)
    yy, xx = np.mgrid[:24, :24]
    mask = ((yy - 12) ** 2 + (xx - 12) ** 2 < 64).astype(float)
    image = np.random.default_rng(1).uniform(size=(24, 24, 3))
    depth = np.full((24, 24), 2.0)
    bundle = PriorBundle(image, mask, [AugmentedView(image, mask, cam, depth)], 0.0)
    cloud = build_perception_init(bundle, 10_000)
    pts, _ = backproject_depth(image, depth, mask, cam)
    assert len(cloud) == len(pts)
    assert np.allclose(np.sort(cloud.positions, axis=0), np.sort(pts, axis=0), atol=1e-12)


def test_perception_init_synthetic_oracle():
    cloud = shell_cloud()
    cams = synthetic.training_cameras(96)
    init = build_perception_init(bundle_from(cloud, [cams[i] for i in (0, 2, 4, 6)]), 5000)
    assert len(init) == 5000
    assert chamfer(init.positions, cloud.positions) < 0.01


def test_perception_init_duplicates_and_permutation():
    cloud = shell_cloud(count=120)
    cams = synthetic.training_cameras(48)[:3]
    bundle = bundle_from(cloud, cams)
    base = build_perception_init(bundle, 800, seed=2)
    dup = PriorBundle(bundle.reference_image, bundle.reference_mask, bundle.augmented_views * 3, 0.0)
    permuted = PriorBundle(bundle.reference_image, bundle.reference_mask, bundle.augmented_views[::-1], 0.0)
    assert len(build_perception_init(dup, 800, seed=2)) <= 800
    for other in (build_perception_init(dup, 800, seed=2), build_perception_init(permuted, 800, seed=2)):
        for f in ("positions", "colors"):
            assert np.array_equal(getattr(base, f), getattr(other, f))


def test_perception_init_needs_depth():
    cam = orbit_pose(0, 0, 2, 8, 8)
    bundle = PriorBundle(np.zeros((8, 8, 3)), np.ones((8, 8)), [AugmentedView(np.zeros((8, 8, 3)), np.ones((8, 8)), cam)])
    with pytest.raises(IngestionError, match="depth"):
        build_perception_init(bundle, 10)


# ---------------------------------------------------------------------------
# mock prior and co-SDS


def one_gaussian(color_offset=0.0, seed=0):
    q = np.array([[1.0, 0, 0, 0]])
    base = np.array([[0.2, -0.4, 0.6]])
    return GaussianCloud(np.zeros((1, 3)), np.full((1, 3), np.log(0.25)), q, logit(np.array([[0.9]])), base + color_offset)


def gt_renderer(cloud):
    return lambda cam: render(cloud, cam).numpy()["color"]


def test_mock_prior_fixed_point_and_zero_kappa():
    gt = one_gaussian()
    ref = orbit_pose(0, 0, 2, 24, 24)
    cam = orbit_pose(40, 10, 2, 24, 24)
    delta = DeltaPose.between(ref, cam)
    exact = render(gt, cam).numpy()["color"]
    off = render(one_gaussian(0.8), cam).numpy()["color"]
    prior = MockPrior(gt_renderer(gt), ref)
    grads, _ = co_sds_gradient(prior, [exact] * 3, exact, 500, delta, seed=1)
    assert all(np.abs(g).max() < 1e-6 for g in grads)
    lazy = MockPrior(gt_renderer(gt), ref, kappa=0.0)
    grads, _ = co_sds_gradient(lazy, [off, exact, off], exact, 500, delta, seed=1)
    assert all(np.abs(g).max() < 1e-6 for g in grads)


def test_mock_prior_without_ground_truth():
    prior = MockPrior(lambda cam: None, orbit_pose(0, 0, 2, 8, 8))
    img = np.zeros((8, 8, 3))
    with pytest.raises(PriorError):
        co_sds_gradient(prior, [img] * 3, img, 10, DeltaPose(0, 0))


def test_co_sds_zero_weight():
    gt = one_gaussian()
    ref = orbit_pose(0, 0, 2, 16, 16)
    off = render(one_gaussian(0.5), ref).numpy()["color"]
    grads, _ = co_sds_gradient(MockPrior(gt_renderer(gt), ref), [off] * 3, off, 300, DeltaPose(0, 0), weight=0.0)
    assert all(np.all(g == 0) for g in grads)


def test_co_sds_gradient_points_toward_ground_truth():
    gt = one_gaussian()
    cam = orbit_pose(0, 0, 2, 24, 24)
    target = render(gt, cam).numpy()["color"]
    renders = [render(one_gaussian(o), cam).numpy()["color"] for o in (-1.0, 0.5, 1.5)]
    grads, _ = co_sds_gradient(MockPrior(gt_renderer(gt), cam), renders, target, 400, DeltaPose(0, 0), seed=4)
    for r, g in zip(renders, grads):
        for ch in range(3):
            diff = (target - r)[..., ch]
            sel = np.abs(diff) > 1e-3
            # a descent step moves along -g, which must agree in sign with (target - render)
            assert np.all(np.sign(-g[..., ch][sel]) == np.sign(diff[sel]))


def sds_step(cloud, prior, cam, t, seed, lr):
    params = leaf_params(cloud)
    out = render(cloud, cam, params=params)
    img = out.color.detach().numpy()
    grads, _ = co_sds_gradient(prior, [img] * 3, img, t, DeltaPose(0, 0), seed=seed)
    (out.color * torch.as_tensor(grads[0])).sum().backward()
    new = cloud.copy()
    new.colors = cloud.colors - lr * params["colors"].grad.numpy()
    return new


def test_sds_only_loop_decreases_color_error():
    gt = one_gaussian()
    cam = orbit_pose(0, 0, 2, 24, 24)
    prior = MockPrior(gt_renderer(gt), cam)
    cloud = one_gaussian(1.0)
    errors = []
    for step in range(50):
        errors.append(float(np.abs(activate(cloud).colors - activate(gt).colors).sum()))
        cloud = sds_step(cloud, prior, cam, t=500, seed=step, lr=0.05)
    errors.append(float(np.abs(activate(cloud).colors - activate(gt).colors).sum()))
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 0.5 * errors[0]


def test_co_sds_decreases_distance_in_expectation():
    gt = one_gaussian()
    cam = orbit_pose(0, 0, 2, 24, 24)
    target = render(gt, cam).numpy()["color"]
    prior = MockPrior(gt_renderer(gt), cam)
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cloud = one_gaussian(rng.normal(scale=1.0, size=3))
        before = np.mean((render(cloud, cam).numpy()["color"] - target) ** 2)
        after_cloud = sds_step(cloud, prior, cam, t=int(rng.integers(20, 980)), seed=seed, lr=0.02)
        after = np.mean((render(after_cloud, cam).numpy()["color"] - target) ** 2)
        wins += after < before
    assert binomtest(wins, 20, 0.5, alternative="greater").pvalue < 0.01


# ---------------------------------------------------------------------------
# remote prior


class EchoPrior:
    """Returns the query's own epsilon for every branch."""

    max_timestep = 1000

    def predict_noise(self, query):
        return PriorResponse([query.noise.copy() for _ in range(3)])


def client_for(app):
    return RemotePrior("http://testserver", client=TestClient(app), retries=1)


def test_echo_server_gives_zero_gradient():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    prior = client_for(create_app(EchoPrior()))
    grads, _ = co_sds_gradient(prior, [img, img * 0.5, img * 0.2], img, 300, DeltaPose(20, 10), seed=9)
    assert all(np.all(g == 0) for g in grads)


def test_mock_prior_round_trips_through_service():
    gt = one_gaussian()
    ref = orbit_pose(0, 15, 2, 16, 16)
    cam = orbit_pose(60, 35, 2, 16, 16)
    renders = [render(one_gaussian(o), cam).numpy()["color"] for o in (0.2, -0.3, 0.7)]
    # PNG transport quantizes the clean renders to 8 bits; compare against the same quantization
    quantized = [files.unb64_png(files.b64_png(r)) for r in renders]
    delta = DeltaPose.between(ref, cam)
    local, _ = co_sds_gradient(MockPrior(gt_renderer(gt), ref), quantized, quantized[0], 250, delta, seed=5)
    remote, _ = co_sds_gradient(client_for(create_app(MockPrior(gt_renderer(gt), ref))), renders, renders[0], 250,
                                delta, seed=5)
    for a, b in zip(local, remote):
        assert np.allclose(a, b, atol=1e-5)


def test_elevation_sign_flip():
    img = np.zeros((4, 4, 3))
    q = PriorQuery([img] * 3, img, 10, DeltaPose(15.0, 30.0, 0.0), seed=0)
    assert RemotePrior.payload(q)["delta_pose"]["d_elevation"] == -30.0
    seen = {}

    class Recorder(EchoPrior):
        def predict_noise(self, query):
            seen["d_elevation"] = query.delta_pose.d_elevation
            return super().predict_noise(query)

    co_sds_gradient(client_for(create_app(Recorder())), [img] * 3, img, 10, DeltaPose(15.0, 30.0), seed=0)
    # the server undoes the flip
    assert seen["d_elevation"] == 30.0


def test_wrong_shape_names_both_shapes():
    app = FastAPI()

    @app.post("/denoise")
    def denoise(body: dict):
        return {"noise_estimates": [files.encode_tensor(np.zeros((8, 8, 3), dtype=np.float32))] * 3}

    img = np.zeros((16, 16, 3))
    with pytest.raises(PriorProtocolError, match=r"\(16, 16, 3\).*\(8, 8, 3\)"):
        co_sds_gradient(client_for(app), [img] * 3, img, 10, DeltaPose(0, 0))


def test_unreachable_server_is_retriable_error():
    import httpx

    def refuse(request):
        raise httpx.ConnectError("refused", request=request)

    client = httpx.Client(transport=httpx.MockTransport(refuse))
    prior = RemotePrior("http://nowhere", client=client, retries=2)
    img = np.zeros((8, 8, 3))
    with pytest.raises(PriorError, match="3 attempts"):
        co_sds_gradient(prior, [img] * 3, img, 10, DeltaPose(0, 0))
