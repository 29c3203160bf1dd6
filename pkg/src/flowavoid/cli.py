"""Command line entry point: ``flowavoid {train,eval,render,gradcheck,benchmark}``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _resolution(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("resolution must look like 48x64") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _floats(n: int):
    def parse(text: str):
        try:
            vals = [float(v) for v in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
        return vals

    return parse


_VECTOR_OPTIONS = ("--pose", "--prev-pose")


def _join_vector_args(argv):
    """Attach values like ``-18,0,1.5,0`` to their option so argparse does not
    mistake them for flags."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _VECTOR_OPTIONS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowavoid", description="Flow-based obstacle avoidance: simulate, train and evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--iterations", type=int)
    t.add_argument("--time-budget", type=float, help="wall-clock limit in seconds")

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out episodes")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--episodes", type=int)
    e.add_argument("--speed", type=float)
    e.add_argument("--noise", type=Path, help="JSON flow-noise configuration")
    e.add_argument("--config", type=Path, help="override the configuration stored in the checkpoint")
    e.add_argument("--trajectories", type=Path, help="write per-episode logs here (JSON lines)")
    e.add_argument("--min-success", type=float, help="exit 3 if the success rate is below this")

    r = sub.add_parser("render", help="render depth and flow for one pose or a whole trajectory")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", type=Path, help="scene file")
    src.add_argument("--seed", type=int, help="generate a scene from this seed")
    what = r.add_mutually_exclusive_group(required=True)
    what.add_argument("--pose", type=_floats(4), help="x,y,z,yaw")
    what.add_argument("--trajectory", type=Path, help="trajectory log; writes per-frame dumps into --out-dir")
    r.add_argument("--out-dir", type=Path, help="directory for per-frame dumps")
    r.add_argument("--prev-pose", type=_floats(4), help="previous pose x,y,z,yaw for flow")
    r.add_argument("--resolution", type=_resolution, default=(48, 64))
    r.add_argument("--fov", type=float, default=90.0)
    r.add_argument("--depth", type=Path, help="write depth as 16-bit PGM")
    r.add_argument("--depth-raw", type=Path, help="write depth as float32 sidecar")
    r.add_argument("--flow", type=Path, help="write flow as .flo (needs --prev-pose)")
    r.add_argument("--save-scene", type=Path, help="write the scene used")

    g = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    g.add_argument("--T", type=int, default=20)
    g.add_argument("--alpha", type=float, default=0.0)
    g.add_argument("--collision", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, help="write the JSON report here")

    b = sub.add_parser("benchmark", help="renderer throughput")
    b.add_argument("--resolution", type=_resolution, default=(48, 64))
    b.add_argument("--threads", type=int, default=8)
    b.add_argument("--primitives", type=int, default=100)
    b.add_argument("--frames", type=int, default=2048)
    b.add_argument("--min-fps", type=float, help="exit 3 if the measured rate is below this")
    return p


def _cmd_train(args) -> int:
    from .config import Config, load_config
    from .train import train

    cfg = load_config(args.config) if args.config else Config()
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.time_budget is not None:
        cfg.train.time_budget_s = args.time_budget

    def progress(rec):
        logging.getLogger("flowavoid.train").info(
            "iter %d loss %.4f speed %.2f collisions %.2f", rec["iteration"], rec["loss"], rec["mean_speed"], rec["collision_rate"]
        )

    path = train(cfg, args.out, resume=args.resume, progress=progress)
    print(json.dumps({"checkpoint": str(path), "metrics": str(Path(args.out) / "metrics.jsonl")}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from dataclasses import replace

    from .config import Config, from_dict, load_config
    from .evaluate import evaluate, write_trajectories
    from .flow import FlowNoiseConfig
    from .policy import load_checkpoint

    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        _, meta, _ = load_checkpoint(args.ckpt)
        cfg = from_dict(meta["config"]) if "config" in meta else Config()
    ec = cfg.eval
    if args.episodes is not None:
        ec = replace(ec, episodes=args.episodes)
    if args.speed is not None:
        ec = replace(ec, speed=args.speed)
    noise = None
    if args.noise:
        data = json.loads(args.noise.read_text())
        unknown = set(data) - set(FlowNoiseConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown noise key(s): {', '.join(sorted(unknown))}")
        noise = FlowNoiseConfig(**data)
        noise.validate()
    m = evaluate(args.ckpt, ec, noise, cfg)
    if args.trajectories:
        write_trajectories(m, args.trajectories)
    print(json.dumps(m.as_dict()))
    if args.min_success is not None and m.success_rate < args.min_success:
        return EXIT_CHECK
    return EXIT_OK


def _cmd_render(args) -> int:
    from .flow import reprojection_flow, write_flo
    from .render import CameraIntrinsics, Pose, ray_depth, write_depth_pgm, write_depth_raw
    from .scene import generate_scene, load_scene, save_scene

    scene = load_scene(args.scene) if args.scene else generate_scene(args.seed)
    h, w = args.resolution
    intr = CameraIntrinsics(width=w, height=h, horizontal_fov=args.fov)
    if args.trajectory is not None:
        return _render_trajectory(args, scene, intr)
    pose = Pose(args.pose[:3], args.pose[3])
    depth = ray_depth(scene, pose, intr)
    summary = {"min_depth": float(depth.values.min()), "max_depth": float(depth.values.max())}
    if args.depth:
        write_depth_pgm(depth, args.depth)
    if args.depth_raw:
        write_depth_raw(depth.values, args.depth_raw)
    if args.flow:
        if args.prev_pose is None:
            raise UsageError("--flow needs --prev-pose")
        prev = Pose(args.prev_pose[:3], args.prev_pose[3])
        flow = reprojection_flow(ray_depth(scene, prev, intr), prev, pose, intr)
        write_flo(flow, args.flow)
        summary["max_flow"] = float(np.abs(flow.values).max())
    if args.save_scene:
        save_scene(scene, args.save_scene)
    print(json.dumps(summary))
    return EXIT_OK


def _render_trajectory(args, scene, intr) -> int:
    from .flow import FlowImage, write_flo
    from .render import BatchRenderer, DepthImage, Pose, write_depth_pgm, write_depth_raw
    from .trajlog import read_trajectory

    if args.out_dir is None:
        raise UsageError("--trajectory needs --out-dir")
    log = read_trajectory(args.trajectory)
    poses = log.poses()
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    r = BatchRenderer([scene], intr)
    idx = np.zeros(1, dtype=np.int64)
    prev_depth = np.zeros((1, intr.height, intr.width))
    for i, pose in enumerate(poses):
        have = np.array([i > 0])
        prev = poses[i - 1 : i] if i else poses[:1]
        depth, flow, bad = r.render(idx, pose[None], prev, prev_depth, have)
        if bad[0]:
            print(json.dumps({"frame": i, "degenerate": True}))
            break
        img = DepthImage(depth[0], intr, Pose(pose[:3], pose[3]))
        write_depth_pgm(img, out / f"depth_{i:05d}.pgm")
        write_depth_raw(depth[0], out / f"depth_{i:05d}.dpth")
        write_flo(FlowImage(flow[0], intr), out / f"flow_{i:05d}.flo")
        prev_depth = depth
    print(json.dumps({"frames": len(poses), "out_dir": str(out)}))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import GradCheckConfig, grad_check

    rep = grad_check(GradCheckConfig(T=args.T, alpha=args.alpha, collision=args.collision, seed=args.seed))
    text = rep.to_json()
    if args.out:
        args.out.write_text(text + "\n")
    print(json.dumps({"max_relative_error": rep.max_relative_error, "threshold": rep.threshold, "passed": rep.passed}))
    return EXIT_OK if rep.passed else EXIT_CHECK


def _cmd_benchmark(args) -> int:
    from .benchmark import run_benchmark

    res = run_benchmark(args.resolution, args.threads, args.primitives, args.frames)
    print(json.dumps(res.as_dict()))
    if args.min_fps is not None and res.fps < args.min_fps:
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "render": _cmd_render,
    "gradcheck": _cmd_gradcheck,
    "benchmark": _cmd_benchmark,
}


def main(argv=None) -> int:
    from .errors import ConfigError, ContractViolation

    parser = build_parser()
    try:
        args = parser.parse_args(_join_vector_args(list(sys.argv[1:] if argv is None else argv)))
    except UsageError as exc:
        print(f"flowavoid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"flowavoid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, OSError, RuntimeError, ValueError) as exc:
        print(f"flowavoid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
