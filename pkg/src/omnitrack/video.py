"""Frame sequences and coordinate conventions.

Pixel coordinates are (x, y) with pixel centres on integers 0..W-1. The
normalized range [-1, 1] maps exactly onto the first and last pixel centre.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class VideoSequence:
    frames: np.ndarray  # (N, H, W, 3) float32 in [0, 1]

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) frames, got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ValueError("a video needs at least two frames")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_normalized(self, px):
        return pixels_to_normalized(px, self.height, self.width)

    def to_pixels(self, uv):
        return normalized_to_pixels(uv, self.height, self.width)


def _scale(height: int, width: int):
    return np.array([2.0 / max(width - 1, 1), 2.0 / max(height - 1, 1)])


def pixels_to_normalized(px, height: int, width: int):
    s = _scale(height, width)
    if hasattr(px, "new_tensor"):
        return px * px.new_tensor(s) - 1.0
    return np.asarray(px) * s - 1.0


def normalized_to_pixels(uv, height: int, width: int):
    s = _scale(height, width)
    if hasattr(uv, "new_tensor"):
        return (uv + 1.0) / uv.new_tensor(s)
    return (np.asarray(uv) + 1.0) / s


def flow_pixels_to_normalized(f, height: int, width: int):
    s = _scale(height, width)
    if hasattr(f, "new_tensor"):
        return f * f.new_tensor(s)
    return np.asarray(f) * s


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of pixel-centre (x, y) coordinates."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def load_frames(directory: str | Path) -> VideoSequence:
    """Read a directory of numbered PNG frames, sorted by the number in the name."""
    directory = Path(directory)
    if (directory / "frames").is_dir():
        directory = directory / "frames"
    paths = sorted(directory.glob("*.png"), key=lambda p: (len(p.stem), p.stem))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in paths]
    return VideoSequence(np.stack(frames))


def save_frames(video: VideoSequence | np.ndarray, directory: str | Path) -> list[Path]:
    frames = video.frames if isinstance(video, VideoSequence) else np.asarray(video)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for k, frame in enumerate(frames):
        path = directory / f"{k:05d}.png"
        Image.fromarray(to_uint8(frame)).save(path)
        out.append(path)
    return out


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
