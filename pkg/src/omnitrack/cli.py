"""Command-line entry point: ``omnitrack synth|flows|train|query|eval|render``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .flows import (
    CorrespondenceSet,
    FlowConfig,
    ImportProvider,
    collect_pairwise_flows,
    patch_features,
    prepare_correspondences,
    write_flow,
)
from .flows.fields import flow_filename
from .metrics import TrackSet, evaluate, load_ground_truth, save_ground_truth
from .model import load_checkpoint
from .overlay import draw_tracks, write_depth_maps, write_gif, write_overlay
from .render import Renderer, read_tracks, write_tracks
from .synth import OracleFlowProvider, dump_scene_spec, load_scene_spec, make_scene, occluder_scene
from .training import PRESETS, Trainer, load_config
from .video import VideoSequence, load_frames, save_frames

logger = logging.getLogger("omnitrack")

CACHE_ENV = "OMNITRACK_CACHE"


class UsageError(Exception):
    """Bad or missing inputs; reported with exit status 2."""


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    config: dict = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    version: str = ""

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def version_string() -> str:
    parts = [f"omnitrack {__version__}", f"torch {torch.__version__}", f"numpy {np.__version__}", f"python {platform.python_version()}"]
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            parts.append(f"git {rev.stdout.strip()}")
    except (OSError, subprocess.SubprocessError):
        pass
    return ", ".join(parts)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def video_digest(video: VideoSequence) -> str:
    return hashlib.sha256(np.ascontiguousarray(video.frames).tobytes()).hexdigest()


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_video(path: str | Path) -> VideoSequence:
    _existing(path, "video directory")
    try:
        return load_frames(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def parse_points(text: str) -> list[tuple[int, float, float]]:
    """Parse ``frame:x,y`` items separated by ';' or whitespace."""
    out = []
    for item in text.replace(";", " ").split():
        try:
            frame, xy = item.split(":")
            x, y = xy.split(",")
            out.append((int(frame), float(x), float(y)))
        except ValueError as exc:
            raise UsageError(f"bad query point {item!r}; expected frame:x,y") from exc
    return out


def read_points_file(path: str | Path) -> list[tuple[int, float, float]]:
    """One query per line, either ``frame:x,y`` or ``frame x y``; '#' starts a comment."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" in line:
            out += parse_points(line)
        else:
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise UsageError(f"bad query line {line!r}")
            out.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return out


def load_renderer(ckpt: str | Path, representative: str = "alpha") -> tuple[Renderer, dict]:
    model, meta, _ = load_checkpoint(ckpt)
    model.eval()
    if "height" not in meta:
        raise UsageError(f"{ckpt} lacks frame size metadata")
    K = int(meta.get("train_config", {}).get("samples_per_ray", 32))
    return Renderer(model, int(meta["height"]), int(meta["width"]), K=K, representative=representative), meta


# --- subcommands ---------------------------------------------------------------


def cmd_synth(args, manifest: RunManifest) -> None:
    if args.spec:
        spec = load_scene_spec(_existing(args.spec, "scene spec"))
        manifest.inputs[str(args.spec)] = file_digest(args.spec)
    else:
        spec = occluder_scene(noise_sigma=args.noise if args.noise is not None else 0.25)
    if args.noise is not None:
        spec.noise_sigma = args.noise
    out = Path(args.out)
    bundle = make_scene(spec)
    save_frames(bundle.video, out / "frames")
    dump_scene_spec(spec, out / "scene.cfg")
    save_ground_truth(bundle.tracks, out / "gt.json", (spec.height, spec.width))
    np.save(out / "labels.npy", bundle.labels)
    provider = OracleFlowProvider(bundle, seed=args.seed)
    n = spec.n_frames
    count = 0
    for i in range(n):
        for j in range(n):
            if i != j and (args.flow_gap is None or abs(i - j) <= args.flow_gap):
                write_flow(out / "flows" / flow_filename(i, j), provider(bundle.video, i, j))
                count += 1
    manifest.config = {"scene": _jsonable(asdict(spec))}
    manifest.artifacts.update(
        frames=str(out / "frames"), flows=str(out / "flows"), gt=str(out / "gt.json"), scene=str(out / "scene.cfg")
    )
    print(f"wrote {n} frames, {count} flows and {len(bundle.tracks)} ground-truth tracks to {out}")


def cmd_flows(args, manifest: RunManifest) -> None:
    video = _load_video(args.video)
    out = Path(args.out)
    if args.provider == "import":
        src = _existing(args.flow_dir or Path(args.video) / "flows", "flow directory")
        provider = ImportProvider(src)
        manifest.inputs[str(src)] = file_digest(src)
    else:
        scene = _existing(args.scene or Path(args.video) / "scene.cfg", "scene spec")
        spec = load_scene_spec(scene)
        bundle = make_scene(spec)
        if bundle.video.frames.shape != video.frames.shape:
            raise UsageError("scene spec does not match the video")
        provider = OracleFlowProvider(bundle, seed=args.seed)
        manifest.inputs[str(scene)] = file_digest(scene)
    digest = video_digest(video)
    manifest.inputs[str(args.video)] = digest
    root = Path(os.environ.get(CACHE_ENV) or out / "cache")
    cache = root / f"{digest[:16]}_{args.provider}_{args.seed}" if args.provider == "oracle" else root / f"{digest[:16]}_import"
    t0 = time.perf_counter()
    flows = collect_pairwise_flows(video, provider, cache_dir=cache, max_gap=args.max_gap)
    manifest.timings["collect"] = time.perf_counter() - t0
    overrides = {"chain": not args.no_chain, "appearance": not args.no_appearance, "max_gap": args.max_gap}
    if args.no_rescue:
        overrides["rescue"] = False
    config = FlowConfig.for_provider(args.provider, **overrides)
    t0 = time.perf_counter()
    features = patch_features(video) if config.appearance else None
    cs = prepare_correspondences(video, flows, config, features)
    manifest.timings["filter"] = time.perf_counter() - t0
    path = cs.save(out / "correspondences.npz")
    manifest.config = {"flow": asdict(config)}
    manifest.artifacts.update(correspondences=str(path), cache=str(cache))
    print(f"{len(cs)} correspondences over {cs.n_pairs} pairs -> {path}")


def _overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"bad override {item!r}; expected key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args, manifest: RunManifest) -> None:
    video = _load_video(args.video)
    flows_dir = _existing(args.flows, "correspondence directory")
    cs_path = flows_dir / "correspondences.npz" if flows_dir.is_dir() else flows_dir
    cs = CorrespondenceSet.load(_existing(cs_path, "correspondence set"))
    overrides = _overrides(args.set)
    if args.steps is not None:
        overrides["total_steps"] = str(args.steps)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        base = PRESETS[args.preset]() if args.preset else None
        if args.config:
            _existing(args.config, "config file")
            manifest.inputs[str(args.config)] = file_digest(args.config)
        cfg = load_config(args.config, base, overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    manifest.seed = cfg.seed
    manifest.inputs[str(args.video)] = video_digest(video)
    manifest.inputs[str(cs_path)] = file_digest(cs_path)
    out = Path(args.out)
    t0 = time.perf_counter()
    trainer = Trainer(video, cs, cfg, out)
    cfg.save(out / "train.cfg")
    if args.resume:
        trainer.resume(_existing(args.resume, "checkpoint"))
    trainer.run()
    manifest.timings["train"] = time.perf_counter() - t0
    manifest.config = {"train": json.loads(json.dumps(asdict(cfg)))}
    manifest.artifacts.update(checkpoint=str(out / "checkpoint.ckpt"), losses=str(out / "loss.csv"), config=str(out / "train.cfg"))
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained to step {trainer.step}; final loss {last.get('total', float('nan')):.4f}; checkpoint {out / 'checkpoint.ckpt'}")


def cmd_query(args, manifest: RunManifest) -> None:
    ckpt = _existing(args.ckpt, "checkpoint")
    renderer, meta = load_renderer(ckpt, args.representative)
    manifest.inputs[str(ckpt)] = file_digest(ckpt)
    queries = []
    if args.points:
        queries += parse_points(args.points)
    if args.points_file:
        queries += read_points_file(_existing(args.points_file, "points file"))
    if args.gt:
        gt, _ = load_ground_truth(_existing(args.gt, "ground truth"))
        queries += [(int(f), float(x), float(y)) for f, (x, y) in zip(gt.query_frames(), gt.query_points())]
    if not queries:
        raise UsageError("no query points given (use --points, --points-file or --gt)")
    n = renderer.model.n_frames
    for f, x, y in queries:
        if not 0 <= f < n:
            raise UsageError(f"query frame {f} outside 0..{n - 1}")
        if not (0 <= x <= renderer.width - 1 and 0 <= y <= renderer.height - 1):
            raise UsageError(f"query point ({x}, {y}) outside the {renderer.width}x{renderer.height} frame")
    q = np.array([[x, y] for _, x, y in queries])
    frames = np.array([f for f, _, _ in queries])
    t0 = time.perf_counter()
    tracks = renderer.track_points(q, frames, mode=args.mode)
    manifest.timings["query"] = time.perf_counter() - t0
    path = write_tracks(args.out, tracks)
    manifest.config = {"mode": args.mode, "representative": args.representative, "n_queries": len(queries), "step": meta.get("step")}
    manifest.artifacts["tracks"] = str(path)
    print(f"wrote {len(tracks)} tracks over {n} frames to {path}")


def tracks_to_trackset(tracks) -> TrackSet:
    if not tracks:
        return TrackSet(np.zeros((0, 0, 2)), np.zeros((0, 0), bool))
    return TrackSet(np.stack([t.positions for t in tracks]), ~np.stack([t.visible for t in tracks]))


def cmd_eval(args, manifest: RunManifest) -> None:
    tracks = read_tracks(_existing(args.tracks, "tracks file"))
    gt, size = load_ground_truth(_existing(args.gt, "ground truth"))
    manifest.inputs[str(args.tracks)] = file_digest(args.tracks)
    manifest.inputs[str(args.gt)] = file_digest(args.gt)
    pred = tracks_to_trackset(tracks)
    resolution = None if args.resolution == "native" else int(args.resolution)
    if resolution is not None and size is None:
        raise UsageError("ground truth lacks frame size; pass --resolution native")
    try:
        report = evaluate(pred, gt, resolution=resolution, frame_size=size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
        manifest.artifacts["metrics"] = str(args.out)
    manifest.config = {"resolution": args.resolution, "metrics": report.to_dict()}


def cmd_render(args, manifest: RunManifest) -> None:
    video = _load_video(args.video)
    tracks = read_tracks(_existing(args.tracks, "tracks file")) if args.tracks else []
    for t in tracks:
        if len(t.positions) != video.n_frames:
            raise UsageError(f"track spans {len(t.positions)} frames, video has {video.n_frames}")
    out = Path(args.out)
    paths = write_overlay(out / "overlay", video, tracks, radius=args.radius, trail=args.trail)
    manifest.artifacts["overlay"] = str(out / "overlay")
    if args.gif:
        manifest.artifacts["gif"] = str(write_gif(out / "overlay.gif", draw_tracks(video, tracks, args.radius, args.trail)))
    if args.ckpt:
        renderer, _ = load_renderer(_existing(args.ckpt, "checkpoint"))
        if (renderer.height, renderer.width) != video.shape:
            raise UsageError("checkpoint resolution does not match the video")
        depths = [renderer.pseudo_depth_map(f) for f in range(video.n_frames)]
        write_depth_maps(out / "depth", depths)
        manifest.artifacts["depth"] = str(out / "depth")
    print(f"wrote {len(paths)} overlay frames to {out / 'overlay'}")


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnitrack", description="Dense long-range point tracking by per-video optimization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    p.add_argument("--manifest", help="where to write the run manifest (default: next to the outputs)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene with frames, pairwise flows and ground truth")
    s.add_argument("--spec", help="scene file ([scene] and [sprite.*] sections); default: the occluder scene")
    s.add_argument("--out", required=True, help="output bundle directory")
    s.add_argument("--noise", type=float, help="flow noise sigma in pixels (overrides the spec)")
    s.add_argument("--flow-gap", type=int, help="only write flows between frames at most this far apart")
    s.add_argument("--seed", type=int, default=0, help="seed for flow noise and corruption")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("flows", help="collect pairwise flows, filter them and build the supervision set")
    f.add_argument("--video", required=True, help="directory of numbered PNG frames (or a bundle containing frames/)")
    f.add_argument("--out", required=True, help="output directory for correspondences.npz")
    f.add_argument("--provider", choices=["oracle", "import"], default="import", help="flow source")
    f.add_argument("--flow-dir", help="precomputed flow records for --provider import (default: <video>/flows)")
    f.add_argument("--scene", help="scene file for --provider oracle (default: <video>/scene.cfg)")
    f.add_argument("--no-chain", action="store_true", help="disable two-hop chaining of sparse pairs")
    f.add_argument("--no-rescue", action="store_true", help="disable the occlusion rescue of near pairs")
    f.add_argument("--no-appearance", action="store_true", help="disable the appearance check on distant pairs")
    f.add_argument("--max-gap", type=int, help="ignore pairs further apart than this many frames")
    f.add_argument("--seed", type=int, default=0, help="seed for the oracle provider")
    f.set_defaults(func=cmd_flows)

    t = sub.add_parser("train", help="optimize a motion representation for one video")
    t.add_argument("--video", required=True, help="directory of numbered PNG frames")
    t.add_argument("--flows", required=True, help="directory holding correspondences.npz (or the file itself)")
    t.add_argument("--config", help="INI config with [train] and [model] sections")
    t.add_argument("--preset", choices=sorted(PRESETS), help="base configuration before the config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one option, e.g. total_steps=500 or model.n_coupling=3")
    t.add_argument("--steps", type=int, help="shorthand for --set total_steps=N")
    t.add_argument("--seed", type=int, help="seed for initialization and sampling")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", required=True, help="output directory for checkpoints, loss.csv and train.cfg")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("query", help="track query points through every frame")
    q.add_argument("--ckpt", required=True, help="trained checkpoint")
    q.add_argument("--points", help="queries as frame:x,y separated by ';'")
    q.add_argument("--points-file", help="file with one frame:x,y (or 'frame x y') per line")
    q.add_argument("--gt", help="use the query points of a ground-truth file")
    q.add_argument("--mode", choices=["inference", "training"], default="inference", help="representative point or composited position")
    q.add_argument("--representative", choices=["alpha", "weight"], default="alpha", help="inference sample: largest alpha or largest compositing weight")
    q.add_argument("--out", required=True, help="output JSON-lines file")
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", help="score tracks against ground truth")
    e.add_argument("--pred", "--tracks", dest="tracks", required=True, help="JSON-lines tracks from 'query --gt'")
    e.add_argument("--gt", required=True, help="ground-truth JSON")
    e.add_argument("--resolution", default="256", help="square evaluation resolution in pixels, or 'native'")
    e.add_argument("--out", help="write the metrics as JSON here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="draw trajectories over the frames and export pseudo-depth images")
    r.add_argument("--video", required=True, help="directory of numbered PNG frames")
    r.add_argument("--tracks", help="JSON-lines tracks (omit to copy frames unchanged)")
    r.add_argument("--ckpt", help="checkpoint for pseudo-depth images")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--radius", type=int, default=2, help="dot and cross size in pixels")
    r.add_argument("--trail", type=int, default=0, help="draw this many past positions as a line")
    r.add_argument("--gif", action="store_true", help="also write an animated GIF")
    r.set_defaults(func=cmd_render)
    return p


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    out = Path(args.out)
    base = out if args.command in ("synth", "flows", "train", "render") else out.parent
    return base / f"manifest_{args.command}.json"


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=args.command, argv=argv, seed=getattr(args, "seed", None), version=version_string())
    t0 = time.perf_counter()
    try:
        args.func(args, manifest)
    except UsageError as exc:
        print(f"omnitrack {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"omnitrack {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest.timings["total"] = time.perf_counter() - t0
    if args.command != "eval" or args.out:
        manifest.write(_manifest_path(args) if args.command != "eval" else Path(args.out).parent / "manifest_eval.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
