"""Command-line entry point: init | train | render | eval | export | serve-prior."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, files
from .camera import Camera, evaluation_orbit
from .config import CONFIG_KEYS, TrainConfig, load_config
from .errors import ConfigError, IngestionError, InvalidArgument, ManifestError, PlyParseError, PriorError
from .gaussians import load_ply
from .plyio import read_mesh, write_obj
from .rasterizer import render
from .scene import load_bundle, load_ground_truth, load_manifest

log = logging.getLogger("trisplat")

EXIT_OK = 0
EXIT_MANIFEST = 2
EXIT_CONFIG = 3
EXIT_PRIOR = 4
EXIT_IO = 5
REPORT_SCHEMA_VERSION = 1

EXIT_HELP = """exit codes:
  0  success
  2  manifest error (missing field or file, unparsable camera, unusable inputs)
  3  config error (unknown key, bad value)
  4  diffusion prior unreachable after the failure limit
  5  I/O error (unreadable or corrupt PLY/PNG/depth, unwritable output)
"""


def _config_help() -> str:
    defaults = TrainConfig()
    lines = ["config keys (config file 'key = value', or --key VALUE; flags override the file):"]
    lines += [f"  {k} = {getattr(defaults, k)}" for k in CONFIG_KEYS]
    return "\n".join(lines)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    group = p.add_argument_group("config overrides")
    for key in CONFIG_KEYS:
        group.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE", help=argparse.SUPPRESS)


def _config_from(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_init(args) -> int:
    from .trainer import initial_states, output_names, save_branches

    manifest = load_manifest(args.manifest)
    config = _config_from(args)
    bundle = load_bundle(manifest)
    out = Path(args.out) if args.out else manifest.output_dir / "init"
    states = initial_states(config, bundle, manifest.geometry_prior)
    save_branches(states, out)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "branches": [
            {
                "file": name,
                "kind": st.kind,
                "count": len(st.cloud),
                "extent_min": st.cloud.positions.min(axis=0).tolist(),
                "extent_max": st.cloud.positions.max(axis=0).tolist(),
            }
            for st, name in zip(states, output_names())
        ],
        "seeds": list(config.branch_seeds()),
    }
    _write_json(out / "init_report.json", report)
    print(f"wrote {', '.join(output_names())} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import make_prior, train

    manifest = load_manifest(args.manifest)
    config = _config_from(args)
    bundle = load_bundle(manifest)
    out = Path(args.out) if args.out else manifest.output_dir
    prior = make_prior(config, bundle, load_ground_truth(manifest))
    result = train(config, bundle, manifest.geometry_prior, prior=prior, out_dir=out)
    print(f"trained {config.total_steps} steps; counts {[len(c) for c in result.clouds]}; "
          f"prior failures {result.prior_failures}; outputs in {out}")
    return EXIT_OK


def _poses(args) -> list[Camera]:
    if args.poses:
        records = json.loads(Path(args.poses).read_text())
        return [Camera.from_json(r) for r in records]
    size = args.size
    return evaluation_orbit(args.views, args.elevation, args.radius, size, size, args.fov_y)


def cmd_render(args) -> int:
    cameras = _poses(args)
    out = Path(args.out)
    for ply in args.ply:
        cloud = load_ply(ply)
        target = out / Path(ply).stem if len(args.ply) > 1 else out
        target.mkdir(parents=True, exist_ok=True)
        for i, cam in enumerate(cameras):
            r = render(cloud, cam).numpy()
            files.write_png(target / f"view_{i:02d}.png", r["color"], r["alpha"])
            files.write_depth(target / f"view_{i:02d}.depth", r["depth"])
        (target / "cameras.json").write_text(json.dumps([c.to_json() for c in cameras], indent=1) + "\n")
    print(f"rendered {len(cameras)} views of {len(args.ply)} cloud(s) to {out}")
    return EXIT_OK


def _load_shape(path, seed: int) -> tuple[np.ndarray, evaluation.OccupancyGrid | None]:
    """Surface points and occupancy for a shape file.

    Meshes are sampled by area and voxelized by ray parity. A PLY without
    faces is read as a Gaussian cloud: its density iso-surface is sampled
    (falling back to the centers when the density never reaches the level).
    """
    mesh = read_mesh(path)
    if len(mesh.faces):
        return evaluation.sample_surface(mesh, seed=seed), evaluation.mesh_occupancy(mesh)
    if Path(path).suffix.lower() != ".ply":
        return np.asarray(mesh.vertices, dtype=np.float64), None
    cloud = load_ply(path)
    grid = evaluation.occupancy(cloud)
    h = grid.spacing
    iso = evaluation.marching_cubes(grid.density, grid.threshold, h, (grid.box[0] + 0.5 * h,) * 3)
    if len(iso.faces):
        return evaluation.sample_surface(iso, seed=seed), grid
    return cloud.positions.astype(np.float64), grid


def cmd_eval(args) -> int:
    report: dict = {"schema_version": REPORT_SCHEMA_VERSION, "conventions": evaluation.conventions(),
                    "seeds": {"surface_samples": args.seed}}
    if args.renders or args.reference:
        if not (args.renders and args.reference):
            raise InvalidArgument("--renders and --reference must be given together")
        names = sorted(p.name for p in Path(args.reference).glob("*.png"))
        if not names:
            raise InvalidArgument(f"no PNG files in {args.reference}")
        ours = [files.read_png(Path(args.renders) / n)[0] for n in names]
        refs = [files.read_png(Path(args.reference) / n)[0] for n in names]
        report.update(evaluation.image_report(ours, refs))
        report["views"] = names
    if args.shape or args.ground_truth:
        if not (args.shape and args.ground_truth):
            raise InvalidArgument("--shape and --ground-truth must be given together")
        a, ga = _load_shape(args.shape, args.seed)
        b, gb = _load_shape(args.ground_truth, args.seed)
        report["chamfer"] = evaluation.chamfer(a, b)
        report["volume_iou"] = evaluation.volume_iou(ga, gb) if ga is not None and gb is not None else None
    _write_json(Path(args.out), report)
    print(json.dumps({k: v for k, v in report.items() if k in ("psnr", "ssim", "chamfer", "volume_iou")}))
    return EXIT_OK


def cmd_export(args) -> int:
    cloud = load_ply(args.ply)
    mesh = evaluation.cloud_mesh(cloud, args.resolution, args.iso)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_obj(args.out, mesh.vertices, mesh.faces)
    if len(mesh.faces) == 0:
        log.warning("density never reaches iso %.3g; wrote an empty mesh to %s", args.iso, args.out)
    else:
        print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return EXIT_OK


def cmd_serve_prior(args) -> int:
    import uvicorn

    from .priors import MockPrior
    from .service import create_app

    manifest = load_manifest(args.manifest)
    bundle = load_bundle(manifest)
    gt = load_ground_truth(manifest)
    if gt is None:
        raise ManifestError("serve-prior needs the manifest field 'ground_truth'")
    gt = gt.astype(np.float64)
    prior = MockPrior(lambda cam: render(gt, cam).color.numpy(), bundle.reference_camera, args.kappa)
    uvicorn.run(create_app(prior), host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trisplat",
        description="Three-branch Gaussian splatting reconstruction from a single image plus priors.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EXIT_HELP + "\n" + _config_help(),
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("init", help="write the three initial branch PLYs", epilog=_config_help(), formatter_class=fmt)
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: <manifest output_dir>/init)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="run the optimization", epilog=_config_help(), formatter_class=fmt)
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: manifest output_dir)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render PLYs (default: 16 views at elevation 30)")
    p.add_argument("ply", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--poses", type=Path, help="JSON list of camera records instead of the orbit")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--elevation", type=float, default=30.0)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--fov_y", type=float, default=49.1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="compute metrics into a JSON report")
    p.add_argument("--renders", type=Path, help="directory of rendered PNGs")
    p.add_argument("--reference", type=Path, help="directory of ground-truth PNGs with matching names")
    p.add_argument("--shape", type=Path, help="reconstructed shape: Gaussian PLY, point PLY or mesh")
    p.add_argument("--ground-truth", dest="ground_truth", type=Path, help="ground-truth shape (OBJ/PLY)")
    p.add_argument("--seed", type=int, default=0, help="surface sampling seed")
    p.add_argument("--out", type=Path, default=Path("report.json"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="extract a mesh from a cloud's density field")
    p.add_argument("ply", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iso", type=float, default=evaluation.DEFAULT_THRESHOLD)
    p.add_argument("--resolution", type=int, default=evaluation.DEFAULT_RESOLUTION)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("serve-prior", help="serve a mock prior over HTTP for a synthetic manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--kappa", type=float, default=1.0)
    p.set_defaults(func=cmd_serve_prior)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ManifestError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PriorError as exc:
        print(f"prior error: {exc}", file=sys.stderr)
        return EXIT_PRIOR
    except (OSError, PlyParseError, InvalidArgument) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
