"""Flow and feature providers, and exhaustive pairwise flow collection."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.ndimage import uniform_filter

from ..video import VideoSequence
from .fields import FeatureMap, FlowField, flow_filename, read_flow, write_flow

logger = logging.getLogger(__name__)


class FlowProvider(Protocol):
    accepts_init: bool

    def __call__(self, video: VideoSequence, i: int, j: int, init: FlowField | None = None) -> FlowField: ...


class FlowCollectionError(RuntimeError):
    def __init__(self, pair: tuple[int, int], cause: BaseException):
        super().__init__(f"flow provider failed on pair {pair[0]}->{pair[1]}: {cause}")
        self.pair = pair


class ImportProvider:
    """Reads precomputed flows from a directory of cache records."""

    accepts_init = False

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def __call__(self, video, i: int, j: int, init: FlowField | None = None) -> FlowField:
        path = self.directory / flow_filename(i, j)
        if not path.exists():
            raise FileNotFoundError(path)
        flow = read_flow(path)
        if flow.pair != (i, j):
            raise ValueError(f"{path} holds pair {flow.pair}, expected {(i, j)}")
        return flow


def target_order(i: int, n_frames: int) -> list[tuple[int, int | None]]:
    """Targets of base frame ``i`` as ``(j, previous_target)``, nearest first on each side."""
    order = []
    for j in range(i + 1, n_frames):
        order.append((j, j - 1 if j - 1 != i else None))
    for j in range(i - 1, -1, -1):
        order.append((j, j + 1 if j + 1 != i else None))
    return order


def collect_pairwise_flows(
    video: VideoSequence,
    provider: FlowProvider,
    cache_dir: str | Path | None = None,
    reuse_cache: bool = True,
    max_gap: int | None = None,
) -> dict[tuple[int, int], FlowField]:
    """Compute the flow between every ordered pair of frames.

    For each base frame the targets are visited outward in increasing
    distance, and the flow to the previous target is handed to providers
    that accept an initialization.
    """
    n = video.n_frames
    cache = Path(cache_dir) if cache_dir is not None else None
    flows: dict[tuple[int, int], FlowField] = {}
    for i in range(n):
        for j, prev in target_order(i, n):
            if max_gap is not None and abs(i - j) > max_gap:
                continue
            path = cache / flow_filename(i, j) if cache is not None else None
            if path is not None and reuse_cache and path.exists():
                flow = read_flow(path)
            else:
                init = flows.get((i, prev)) if (prev is not None and provider.accepts_init) else None
                try:
                    flow = provider(video, i, j, init=init)
                except Exception as exc:
                    raise FlowCollectionError((i, j), exc) from exc
                if path is not None:
                    write_flow(path, flow)
            if flow.pair != (i, j):
                raise ValueError(f"provider returned pair {flow.pair} for {(i, j)}")
            if flow.shape != video.shape:
                raise ValueError(f"flow {i}->{j} has resolution {flow.shape}, video is {video.shape}")
            flows[(i, j)] = flow
    logger.info("collected %d pairwise flows", len(flows))
    return flows


def patch_features(video: VideoSequence, radius: int = 2) -> list[FeatureMap]:
    """Zero-mean, unit-norm colour patch descriptors for every pixel.

    The descriptor is the (2r+1)^2 x 3 patch around a pixel (edge-replicated)
    minus its local mean, with a small constant appended so flat patches
    still have nonzero norm.
    """
    out = []
    k = 2 * radius + 1
    for f, frame in enumerate(video.frames):
        padded = np.pad(frame, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
        h, w = frame.shape[:2]
        patches = np.stack(
            [padded[dy : dy + h, dx : dx + w] for dy in range(k) for dx in range(k)], axis=2
        )  # (H, W, k*k, 3)
        mean = uniform_filter(padded, size=(k, k, 1), mode="nearest")[radius : radius + h, radius : radius + w]
        desc = (patches - mean[:, :, None, :]).reshape(h, w, -1)
        desc = np.concatenate([desc, np.full((h, w, 1), 1e-3, np.float32)], axis=-1)
        desc /= np.linalg.norm(desc, axis=-1, keepdims=True)
        out.append(FeatureMap(f, desc))
    return out
