"""Flow and feature fields, bilinear lookup, and the on-disk flow cache format.

Cache record layout (little-endian)::

    b"OMNIFLOW1"            9-byte magic
    int32 i, j, H, W        header
    float32[H, W, 2]        flow vectors (dx, dy) in pixels
    uint8[H, W]             valid mask
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"OMNIFLOW1"
_HEADER = struct.Struct("<iiii")


@dataclass
class FlowField:
    source_index: int
    target_index: int
    vectors: np.ndarray  # (H, W, 2) float32, pixels
    valid_mask: np.ndarray | None = None  # (H, W) bool

    def __post_init__(self):
        if self.source_index == self.target_index:
            raise ValueError(f"flow source and target are both frame {self.source_index}")
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 2:
            raise ValueError(f"flow vectors must be (H, W, 2), got {self.vectors.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.vectors.shape[:2], dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != self.vectors.shape[:2]:
            raise ValueError("valid mask and vectors disagree in shape")
        if not np.isfinite(self.vectors[self.valid_mask]).all():
            raise ValueError("non-finite flow vector under the valid mask")

    @property
    def pair(self) -> tuple[int, int]:
        return self.source_index, self.target_index

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    @property
    def gap(self) -> int:
        return abs(self.target_index - self.source_index)


@dataclass
class FeatureMap:
    frame_index: int
    features: np.ndarray  # (H, W, D)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 3:
            raise ValueError(f"features must be (H, W, D), got {self.features.shape}")
        if (np.linalg.norm(self.features, axis=-1) == 0).any():
            raise ValueError(f"zero-norm feature vector in frame {self.frame_index}")

    @property
    def dim(self) -> int:
        return self.features.shape[-1]


def in_bounds(pts: np.ndarray, height: int, width: int) -> np.ndarray:
    x, y = pts[..., 0], pts[..., 1]
    return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1) & np.isfinite(x) & np.isfinite(y)


def _corners(pts: np.ndarray, height: int, width: int):
    x = np.clip(np.nan_to_num(pts[..., 0]), 0, width - 1)
    y = np.clip(np.nan_to_num(pts[..., 1]), 0, height - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), width - 2 if width > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(np.int64), height - 2 if height > 1 else 0)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return x, y, x0, y0, x1, y1


def bilinear_sample(field: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``field`` (H, W, C) at float (x, y) positions ``pts`` (..., 2).

    Returns ``(values, inside)``; values at out-of-bounds positions are taken
    from the clamped border and must be ignored via ``inside``.
    """
    height, width = field.shape[:2]
    x, y, x0, y0, x1, y1 = _corners(pts, height, width)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    top = field[y0, x0] * (1 - wx) + field[y0, x1] * wx
    bottom = field[y1, x0] * (1 - wx) + field[y1, x1] * wx
    return top * (1 - wy) + bottom * wy, in_bounds(pts, height, width)


def mask_sample_all(mask: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """True where every pixel contributing to a bilinear lookup is set."""
    height, width = mask.shape
    x, y, x0, y0, x1, y1 = _corners(pts, height, width)
    wx, wy = x - x0, y - y0
    ok = mask[y0, x0].copy()
    ok &= mask[y0, x1] | (wx == 0)
    ok &= mask[y1, x0] | (wy == 0)
    ok &= mask[y1, x1] | (wx == 0) | (wy == 0)
    return ok & in_bounds(pts, height, width)


def write_flow(path: str | Path, flow: FlowField) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = flow.shape
    vectors = np.where(flow.valid_mask[..., None], flow.vectors, 0.0).astype("<f4")
    blob = MAGIC + _HEADER.pack(flow.source_index, flow.target_index, h, w)
    blob += vectors.tobytes() + flow.valid_mask.astype(np.uint8).tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def read_flow(path: str | Path) -> FlowField:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not an OMNIFLOW1 record")
    i, j, h, w = _HEADER.unpack_from(data, len(MAGIC))
    off = len(MAGIC) + _HEADER.size
    n_vec = h * w * 2 * 4
    if len(data) != off + n_vec + h * w:
        raise ValueError(f"{path}: truncated flow record")
    vectors = np.frombuffer(data, dtype="<f4", count=h * w * 2, offset=off).reshape(h, w, 2)
    mask = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=off + n_vec).reshape(h, w)
    return FlowField(i, j, vectors.astype(np.float32), mask.astype(bool))


def flow_filename(i: int, j: int) -> str:
    return f"flow_{i:05d}_{j:05d}.omf"
