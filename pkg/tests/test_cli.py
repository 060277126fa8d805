import json
import shutil

import numpy as np
import pytest

from trisplat import synthetic
from trisplat.camera import evaluation_orbit
from trisplat.cli import main
from trisplat.config import CONFIG_KEYS
from trisplat.files import read_depth, read_png
from trisplat.gaussians import GaussianCloud, load_ply, logit, save_ply

BRANCHES = ["branch0_geometry.ply", "branch1_perception.ply", "branch2_noise.ply"]
SMALL = ["--geometry_count", "30", "--perception_count", "40", "--noise_count", "40"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    scene = synthetic.make_scene(size=32, count=40, seed=2)
    manifest = synthetic.write_scene(scene, d)
    return manifest


def test_init_writes_three_plys_and_is_idempotent(scene_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["init", str(scene_dir), "--out", str(tmp_path / name), *SMALL]) == 0
    for f in BRANCHES:
        cloud = load_ply(tmp_path / "a" / f)
        assert len(cloud) > 0 and np.isfinite(cloud.positions).all()
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    report = json.loads((tmp_path / "a" / "init_report.json").read_text())
    assert [b["count"] for b in report["branches"]] == [30, 40, 40]


def test_missing_geometry_field(scene_dir, tmp_path, capsys):
    broken = tmp_path / "scene"
    shutil.copytree(scene_dir.parent, broken)
    data = json.loads((broken / scene_dir.name).read_text())
    del data["geometry_prior"]
    (broken / scene_dir.name).write_text(json.dumps(data))
    assert main(["init", str(broken / scene_dir.name), "--out", str(tmp_path / "o")]) == 2
    assert "geometry_prior" in capsys.readouterr().err


def test_missing_geometry_file(scene_dir, tmp_path, capsys):
    broken = tmp_path / "scene"
    shutil.copytree(scene_dir.parent, broken)
    data = json.loads((broken / scene_dir.name).read_text())
    (broken / data["geometry_prior"]).unlink()
    assert main(["init", str(broken / scene_dir.name), "--out", str(tmp_path / "o")]) == 2
    assert "geometry_prior" in capsys.readouterr().err


def test_missing_depth_is_actionable(scene_dir, tmp_path, capsys):
    broken = tmp_path / "scene"
    shutil.copytree(scene_dir.parent, broken)
    data = json.loads((broken / scene_dir.name).read_text())
    for rec in [data["reference"]] + data["views"]:
        rec.pop("depth", None)
    (broken / scene_dir.name).write_text(json.dumps(data))
    assert main(["init", str(broken / scene_dir.name), "--out", str(tmp_path / "o"), *SMALL]) == 2
    assert "depth" in capsys.readouterr().err


def test_config_error_exit_code(scene_dir, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert main(["init", str(scene_dir), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert main(["init", str(scene_dir), "--tau", "-1", "--out", str(tmp_path / "o")]) == 3


def test_train_short_run(scene_dir, tmp_path):
    args = ["train", str(scene_dir), "--out", str(tmp_path), "--total_steps", "3", "--stage2_start", "1", *SMALL]
    assert main(args) == 0
    for f in BRANCHES + ["run_log.jsonl", "config.txt", "timings.jsonl"]:
        assert (tmp_path / f).exists()
    assert len((tmp_path / "run_log.jsonl").read_text().splitlines()) == 3


def test_prior_unreachable_exit_code(scene_dir, tmp_path, capsys):
    args = ["train", str(scene_dir), "--out", str(tmp_path), "--total_steps", "3", "--stage2_start", "1",
            "--prior", "remote", "--prior_endpoint", "http://127.0.0.1:9", "--prior_retries", "0",
            "--prior_timeout", "2", "--max_prior_failures", "1", *SMALL]
    assert main(args) == 4
    assert "prior" in capsys.readouterr().err


def test_render_default_protocol(tmp_path):
    cloud = synthetic.ground_truth_cloud(count=30, seed=1)
    save_ply(cloud, tmp_path / "c.ply")
    assert main(["render", str(tmp_path / "c.ply"), "--out", str(tmp_path / "r"), "--size", "24"]) == 0
    pngs = sorted((tmp_path / "r").glob("view_*.png"))
    assert len(pngs) == 16
    assert read_depth(tmp_path / "r" / "view_00.depth").shape == (24, 24)
    cams = json.loads((tmp_path / "r" / "cameras.json").read_text())
    assert [c["elevation"] for c in cams] == [30.0] * 16
    assert [c["azimuth"] for c in cams] == [22.5 * i for i in range(16)]
    assert [c["azimuth"] for c in cams] == [c.azimuth for c in evaluation_orbit(16, 30.0, 2.0, 24, 24)]


def test_eval_identical_images_and_shapes(tmp_path):
    cloud = synthetic.ground_truth_cloud(count=30, seed=1)
    save_ply(cloud, tmp_path / "c.ply")
    main(["render", str(tmp_path / "c.ply"), "--out", str(tmp_path / "r"), "--size", "24", "--views", "4"])
    out = tmp_path / "report.json"
    assert main(["eval", "--renders", str(tmp_path / "r"), "--reference", str(tmp_path / "r"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["psnr"] == 99.0 and report["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert report["schema_version"] == 1 and "chamfer" in report["conventions"]
    assert main(["eval", "--shape", str(tmp_path / "c.ply"), "--ground-truth", str(tmp_path / "c.ply"),
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["chamfer"] == 0.0
    assert report["volume_iou"] == 1.0
    assert report["seeds"] == {"surface_samples": 0}


def test_export_empty_density_warns(tmp_path, caplog):
    q = np.array([[1.0, 0, 0, 0]])
    faint = GaussianCloud(np.zeros((1, 3)), np.full((1, 3), np.log(0.1)), q, logit(np.array([[0.05]])), np.zeros((1, 3)))
    save_ply(faint, tmp_path / "faint.ply")
    with caplog.at_level("WARNING"):
        assert main(["export", str(tmp_path / "faint.ply"), "--out", str(tmp_path / "m.obj"), "--resolution", "16"]) == 0
    assert (tmp_path / "m.obj").exists()
    assert "empty mesh" in caplog.text


def test_export_writes_mesh(tmp_path):
    save_ply(synthetic.ground_truth_cloud(seed=1), tmp_path / "c.ply")
    assert main(["export", str(tmp_path / "c.ply"), "--out", str(tmp_path / "m.obj"), "--resolution", "24",
                 "--iso", "0.5"]) == 0
    assert "f " in (tmp_path / "m.obj").read_text()


def test_io_error_exit_code(tmp_path):
    (tmp_path / "junk.ply").write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 5\n")
    assert main(["render", str(tmp_path / "junk.ply"), "--out", str(tmp_path / "r")]) == 5


@pytest.mark.parametrize("command", ["init", "train"])
def test_help_lists_every_config_key(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in CONFIG_KEYS:
        assert f"  {key} = " in text


def test_top_level_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for code in ("0", "2", "3", "4", "5"):
        assert f"  {code}  " in text


def test_png_round_trip_from_render(tmp_path):
    save_ply(synthetic.ground_truth_cloud(count=10, seed=0), tmp_path / "c.ply")
    main(["render", str(tmp_path / "c.ply"), "--out", str(tmp_path / "r"), "--size", "16", "--views", "2"])
    color, alpha = read_png(tmp_path / "r" / "view_01.png")
    assert color.shape == (16, 16, 3) and alpha.shape == (16, 16)
