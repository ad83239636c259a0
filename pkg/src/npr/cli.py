"""``npr`` command line: synth, ingest, render, bench and verify.

Exit codes: 0 ok, 1 verification or module failure, 2 usage, 3 I/O.
Every command writes only inside ``--out``.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from typing import Optional

import numpy as np

from npr import _backend
from npr.clouds import FeatureCloudM, PointCloudB, StepObservation, load_cloud, save_cloud
from npr.config import load_config, sampling_config, splat_config
from npr.errors import FormatError, NprError
from npr.geometry import CameraIntrinsics, Pose

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------

def _write_json(out: str, name: str, data) -> str:
    path = os.path.join(out, name)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError("cannot serialize %r" % type(v))


def _finite(v):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["nets"] = {"seed": args.seed}
    return load_config(args.config, overrides)


def _nets(args, cfg):
    from npr.nets import NetBundle, default_bundle
    if args.weights:
        return NetBundle.load(args.weights)
    n = cfg["nets"]
    return default_bundle(n["seed"], feature_dim=cfg["features"]["dim"], desc_dim=n["desc_dim"],
                          d_model=n["d_model"], heads=n["heads"], hidden=n["hidden"],
                          splat_scale=n["splat_scale"], splat_opacity=n["splat_opacity"], patch=n["patch"])


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg["nets"]["seed"]


def _resolve(path: str, name: str) -> str:
    """A directory argument names the standard file inside it."""
    return os.path.join(path, name) if os.path.isdir(path) else path


def _load_spec(path: str):
    from npr.scene import load_scene_spec
    return load_scene_spec(_resolve(path, "scene.json"))


def _parse_pose(text: str, spec=None) -> Pose:
    """A pose file or inline JSON: {"q", "t"}, or {"yaw_deg" | "yaw", "position"}, or {"step", "yaw_deg"}."""
    if os.path.exists(text):
        with open(text) as f:
            data = json.load(f)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            raise UsageError("--pose is neither a file nor valid JSON: %r" % text)
    if not isinstance(data, dict):
        raise UsageError("--pose must be a JSON object")
    if "q" in data:
        return Pose.from_json(data)
    yaw = math.radians(data["yaw_deg"]) if "yaw_deg" in data else float(data.get("yaw", 0.0))
    if "step" in data:
        if spec is None:
            raise UsageError("a step-relative pose needs --scene")
        return Pose.from_yaw(spec.start_yaw + yaw, spec.trajectory[int(data["step"])])
    return Pose.from_yaw(yaw, tuple(data.get("position", (0.0, 0.0, 0.0))))


def held_out_pose(spec) -> Pose:
    """Middle trajectory point, halfway between two captured panorama views."""
    return Pose.from_yaw(spec.start_yaw + math.radians(15.0), spec.trajectory[len(spec.trajectory) // 2])


def _load_clouds(path: str):
    """``--cloud`` is a directory holding points.npcd / features.npcd, or a single cloud file."""
    if os.path.isdir(path):
        pts = os.path.join(path, "points.npcd")
        fts = os.path.join(path, "features.npcd")
        points = load_cloud(pts) if os.path.exists(pts) else None
        feats = load_cloud(fts) if os.path.exists(fts) else None
        if points is None and feats is None:
            raise FileNotFoundError("no points.npcd or features.npcd in %s" % path)
        return points, feats
    cloud = load_cloud(path)
    return (cloud, None) if isinstance(cloud, PointCloudB) else (None, cloud)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from npr.scene import SceneSpec, synth_scene
    if args.scene:
        spec = _load_spec(args.scene)
    else:
        cam = cfg["camera"]
        spec = SceneSpec.random(_seed(args, cfg), image_size=(cam["height"], cam["width"]),
                                grid_size=tuple(cfg["features"]["grid"]), hfov_deg=cam["hfov_deg"],
                                feature_dim=cfg["features"]["dim"])
    t0 = time.perf_counter()
    scene = synth_scene(spec)
    intr = spec.intrinsics
    _write_json(args.out, "scene.json", spec.to_json())
    _write_json(args.out, "intrinsics.json", {"width": intr.width, "height": intr.height, "fx": intr.fx,
                                              "fy": intr.fy, "cx": intr.cx, "cy": intr.cy})
    np.savez_compressed(
        os.path.join(args.out, "observations.npz"),
        rgb=np.stack([s.rgb for s in scene.steps]).astype(np.float32),
        depth=np.stack([s.depth for s in scene.steps]),
        features=np.stack([s.features for s in scene.steps]).astype(np.float32),
        poses=np.array([[list(p.rotation) + list(p.translation) for p in s.poses] for s in scene.steps]))
    print("synth: %d steps x 12 views at %dx%d in %.2fs -> %s" % (
        len(scene.steps), intr.width, intr.height, time.perf_counter() - t0, args.out))
    return EXIT_OK


def _load_observations(path: str):
    with np.load(_resolve(path, "observations.npz")) as z:
        rgb, depth, feats, poses = z["rgb"], z["depth"], z["features"], z["poses"]
    steps = []
    for i in range(len(rgb)):
        pl = [Pose(tuple(p[:4]), tuple(p[4:])) for p in poses[i]]
        steps.append(StepObservation(rgb[i].astype(np.float64), depth[i], pl, feats[i].astype(np.float64)))
    return steps


def cmd_ingest(args, cfg) -> int:
    from npr.pipeline import ingest
    if not args.scene:
        raise UsageError("ingest needs --scene (a synth output directory)")
    spec = _load_spec(args.scene)
    steps = _load_observations(os.path.dirname(_resolve(args.scene, "scene.json")) or ".")
    t0 = time.perf_counter()
    points, feats = ingest(steps, spec.intrinsics)
    save_cloud(os.path.join(args.out, "points.npcd"), points)
    save_cloud(os.path.join(args.out, "features.npcd"), feats)
    _write_json(args.out, "manifest.json", {"command": "ingest", "steps": len(steps), "points": len(points),
                                           "feature_points": len(feats), "feature_dim": feats.dim,
                                           "seconds": time.perf_counter() - t0})
    print("ingest: %d points, %d feature entries -> %s" % (len(points), len(feats), args.out))
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    from npr.fusion import encode_nerf_feature, fuse_stu
    from npr.losses import psnr
    from npr.pipeline import build_gaussians
    from npr.scene import render_view
    from npr.splat import rasterize, write_fmap, write_ppm
    from npr.volume import feature_field, panorama_intrinsics, render_feature_view
    if not args.cloud:
        raise UsageError("render needs --cloud")
    spec = _load_spec(args.scene) if args.scene else None
    points, feats = _load_clouds(args.cloud)
    nets = _nets(args, cfg)
    if args.pose:
        pose = _parse_pose(args.pose, spec)
    elif spec is not None:
        pose = held_out_pose(spec)
    else:
        pose = Pose.identity()
    cam = cfg["camera"]
    intr = spec.intrinsics if spec is not None else CameraIntrinsics.from_hfov(
        cam["width"], cam["height"], math.radians(cam["hfov_deg"]))
    grid = tuple(spec.grid_size) if spec is not None else tuple(cfg["features"]["grid"])
    hfov = math.radians(spec.hfov_deg if spec is not None else cam["hfov_deg"])
    sampling, splat = sampling_config(cfg), splat_config(cfg)
    manifest = {"command": "render", "mode": args.mode, "pose": pose.to_json(), "backend": _backend.BACKEND,
                "threads": args.threads, "width": intr.width, "height": intr.height,
                "config": {"sampling": cfg["sampling"], "splat": cfg["splat"]}, "timings": {}, "counts": {}}
    timings, counts = manifest["timings"], manifest["counts"]

    def splat_branch():
        if points is None:
            raise FileNotFoundError("splat rendering needs points.npcd")
        t0 = time.perf_counter()
        sc = build_gaussians(points, nets, sampling, args.threads)
        timings["build_gaussians"] = time.perf_counter() - t0
        counts.update(points=len(points), gaussians=len(sc.image))
        t0 = time.perf_counter()
        img = rasterize(sc.image, pose, intr, cfg=splat, threads=args.threads)
        timings["rasterize"] = time.perf_counter() - t0
        counts.update({"splat_" + k: v for k, v in img.stats.items()})
        return sc, img

    def volume_branch():
        fc = feats if feats is not None else FeatureCloudM(nets.feature_dim)
        vintr = panorama_intrinsics(grid, hfov)
        t0 = time.perf_counter()
        fmap = render_feature_view(pose, vintr, feature_field(fc, nets, sampling, args.threads))
        timings["volume"] = time.perf_counter() - t0
        counts.update(feature_points=len(fc), rays=vintr.width * vintr.height,
                      samples=vintr.width * vintr.height * sampling.samples_per_ray)
        return fmap

    if args.mode == "splat":
        _, img = splat_branch()
        write_ppm(os.path.join(args.out, "render.ppm"), img.pixels)
        manifest["outputs"] = ["render.ppm"]
        if spec is not None:
            gt, _ = render_view(spec, pose, intr)
            manifest["psnr"] = _finite(psnr(np.clip(img.pixels, 0, 1), gt))
    elif args.mode == "volume":
        fmap = volume_branch()
        write_fmap(os.path.join(args.out, "render.fmap"), fmap)
        manifest["outputs"] = ["render.fmap"]
    else:
        sc, img = splat_branch()
        t0 = time.perf_counter()
        fimg = rasterize(sc.feature, pose, intr, cfg=splat, threads=args.threads)
        timings["rasterize_feature"] = time.perf_counter() - t0
        fmap = volume_branch()
        t0 = time.perf_counter()
        f_g = fuse_stu(img.pixels, fimg.pixels, nets.enc_image, nets.enc_feature, nets.attention)
        f_n = encode_nerf_feature(fmap, nets.enc_nerf)
        timings["fusion"] = time.perf_counter() - t0
        _write_json(args.out, "embedding.json", {"f_g_rf": f_g, "f_n_f": f_n, "combined": f_g + f_n,
                                                 "dim": int(len(f_g))})
        manifest["outputs"] = ["embedding.json"]
        manifest["embedding_dim"] = int(len(f_g))
    _write_json(args.out, "manifest.json", manifest)
    extra = " psnr=%s" % manifest["psnr"] if "psnr" in manifest else ""
    print("render %s: %s%s -> %s" % (args.mode, ", ".join(manifest["outputs"]), extra, args.out))
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    from npr.bench import build_bench_scene, run_bench
    b = cfg["bench"]
    nets = _nets(args, cfg)
    t0 = time.perf_counter()
    scene = build_bench_scene(points=b["points"], width=b["width"], height=b["height"], seed=_seed(args, cfg),
                              nets=nets)
    build_s = time.perf_counter() - t0
    report = run_bench(scene, warmup=b["warmup"], runs=b["runs"], threads=args.threads,
                       sampling=sampling_config(cfg), splat=splat_config(cfg))
    report["scene_build_seconds"] = build_s
    report["ratio"] = _finite(report["ratio"])
    _write_json(args.out, "bench.json", report)
    print("bench: splat %.4fs, volume %.3fs (median), ratio %s, %d primitives, %d samples -> %s" % (
        report["splat"]["median"], report["volume"]["median"], report["ratio"], report["primitives"],
        report["samples"], args.out))
    return EXIT_OK


def cmd_verify(args, cfg) -> int:
    from npr.verify import CheckResult, junit_xml, run_checks
    results = []
    nets = None
    t0 = time.perf_counter()
    try:
        nets = _nets(args, cfg)
        results.append(CheckResult("io", "load_weights", True, time.perf_counter() - t0))
    except (NprError, OSError) as exc:
        results.append(CheckResult("io", "load_weights", False, time.perf_counter() - t0,
                                   "%s: %s" % (type(exc).__name__, exc)))
    if nets is not None:
        results += run_checks(nets, seed=_seed(args, cfg), tmpdir=args.out)
    path = os.path.join(args.out, "verify.xml")
    with open(path, "w") as f:
        f.write(junit_xml(results))
    for r in results:
        if not r.ok:
            print("FAIL %s.%s: %s" % (r.group, r.name, r.message.splitlines()[0]))
    failed = sum(not r.ok for r in results)
    print("verify: %d checks, %d passed, %d failed -> %s" % (len(results), len(results) - failed, failed, path))
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "render": cmd_render, "bench": cmd_bench,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npr", description="Point-cloud splatting and volume rendering engine.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--scene", help="scene.json or a synth output directory")
    p.add_argument("--cloud", help="ingest output directory or a single .npcd file")
    p.add_argument("--weights", help="TNW weight file (default: seeded initialization)")
    p.add_argument("--pose", help="pose JSON file or inline JSON")
    p.add_argument("--mode", choices=["splat", "volume", "stu"], default="splat")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--config", help="TOML file overriding the packaged defaults")
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.threads < 1:
        print("npr: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _config(args)
    except (KeyError, TypeError, ValueError) as exc:
        print("npr: bad config: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print("npr: %s" % exc, file=sys.stderr)
        return EXIT_IO
    try:
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print("npr: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print("npr: I/O error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_IO
    except (NprError, ValueError, KeyError) as exc:
        print("npr: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
