"""Trajectory overlays and pseudo-depth images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .render import TrackResult
from .video import VideoSequence, save_frames, to_uint8

# near -> far: blue, cyan, yellow, red
_DEPTH_ANCHORS = np.array([[0.1, 0.2, 0.9], [0.1, 0.8, 0.9], [0.95, 0.85, 0.1], [0.85, 0.1, 0.1]])


def track_colors(n: int) -> np.ndarray:
    """Distinct uint8 RGB colors, evenly spaced in hue."""
    if n == 0:
        return np.zeros((0, 3), np.uint8)
    hue = np.arange(n) / n
    rgb = [np.asarray(Image.new("HSV", (1, 1), (int(h * 255), 220, 255)).convert("RGB")).reshape(3) for h in hue]
    return np.stack(rgb).astype(np.uint8)


def depth_colormap(depth: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Map a depth image to uint8 RGB with closer values drawn bluer."""
    depth = np.asarray(depth, dtype=np.float64)
    lo = float(np.min(depth)) if lo is None else lo
    hi = float(np.max(depth)) if hi is None else hi
    t = np.clip((depth - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    xp = np.linspace(0.0, 1.0, len(_DEPTH_ANCHORS))
    rgb = np.stack([np.interp(t, xp, _DEPTH_ANCHORS[:, c]) for c in range(3)], axis=-1)
    return (rgb * 255 + 0.5).astype(np.uint8)


def draw_tracks(
    video: VideoSequence,
    tracks: list[TrackResult],
    radius: int = 2,
    trail: int = 0,
) -> list[Image.Image]:
    """One annotated image per frame.

    Visible positions get a filled dot, occluded ones a cross. ``trail``
    draws the last few visible positions as a thin line.
    """
    colors = track_colors(len(tracks))
    out = []
    for f in range(video.n_frames):
        img = Image.fromarray(to_uint8(video.frames[f]))
        draw = ImageDraw.Draw(img)
        for t, c in zip(tracks, colors):
            color = tuple(int(v) for v in c)
            if trail:
                seg = [tuple(t.positions[k]) for k in range(max(0, f - trail), f + 1) if t.visible[k]]
                if len(seg) > 1:
                    draw.line(seg, fill=color, width=1)
            x, y = t.positions[f]
            if t.visible[f]:
                draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=color)
            else:
                draw.line([x - radius, y - radius, x + radius, y + radius], fill=color, width=1)
                draw.line([x - radius, y + radius, x + radius, y - radius], fill=color, width=1)
        out.append(img)
    return out


def write_overlay(out_dir: str | Path, video: VideoSequence, tracks: list[TrackResult], **kw) -> list[Path]:
    images = draw_tracks(video, tracks, **kw)
    frames = np.stack([np.asarray(im, dtype=np.float32) / 255.0 for im in images])
    return save_frames(frames, out_dir)


def write_depth_maps(out_dir: str | Path, depths: list[np.ndarray], lo: float | None = None, hi: float | None = None) -> list[Path]:
    """Color-map a sequence of depth images with one shared range."""
    stack = np.stack(depths)
    lo = float(stack.min()) if lo is None else lo
    hi = float(stack.max()) if hi is None else hi
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, d in enumerate(stack):
        p = out_dir / f"depth_{k:05d}.png"
        Image.fromarray(depth_colormap(d, lo, hi)).save(p)
        paths.append(p)
    return paths


def write_gif(path: str | Path, images: list[Image.Image], fps: float = 10.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images[0].save(path, save_all=True, append_images=images[1:], duration=int(1000 / fps), loop=0)
    return path
