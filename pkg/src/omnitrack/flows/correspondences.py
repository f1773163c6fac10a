"""The filtered supervision set and the pipeline that builds it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..video import VideoSequence
from .fields import FeatureMap, FlowField, in_bounds
from .filtering import (
    APPEARANCE_MIN_GAP,
    APPEARANCE_THRESHOLD,
    CYCLE_THRESHOLD,
    RESCUE_MAX_GAP,
    appearance_filter,
    chain_augment,
    cycle_filter,
    occlusion_rescue,
)

logger = logging.getLogger(__name__)

RESCUED = np.uint8(1)
CHAINED = np.uint8(2)


class EmptySupervisionError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    cycle_threshold: float = CYCLE_THRESHOLD
    appearance: bool = True
    appearance_threshold: float = APPEARANCE_THRESHOLD
    appearance_min_gap: int = APPEARANCE_MIN_GAP
    rescue: bool = True
    rescue_max_gap: int = RESCUE_MAX_GAP
    rescue_threshold: float = CYCLE_THRESHOLD
    chain: bool = True
    chain_min_density: float = 0.5
    max_gap: int | None = None

    @classmethod
    def for_provider(cls, kind: str, **overrides) -> "FlowConfig":
        """Defaults per correspondence source: occlusion rescue only for
        dense optical flow (RAFT-like); TAP-Net-like matchers skip it."""
        cfg = cls(rescue=kind in ("raft", "oracle", "import"))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


@dataclass
class CorrespondenceSet:
    """Filtered pairwise correspondences grouped by ordered frame pair.

    Entries of pair ``k`` occupy ``offsets[k]:offsets[k+1]`` of the flat
    arrays. ``src`` is the flat pixel index y*W + x of p_i, ``dst`` the
    (x, y) position p_j in pixels, ``flags`` a bitmask of RESCUED/CHAINED.
    """

    height: int
    width: int
    n_frames: int
    pairs: np.ndarray  # (P, 2) int
    offsets: np.ndarray  # (P + 1,) int64
    src: np.ndarray  # (M,) int32
    dst: np.ndarray  # (M, 2) float32
    flags: np.ndarray  # (M,) uint8
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup = {(int(i), int(j)): k for k, (i, j) in enumerate(self.pairs)}

    def __len__(self) -> int:
        return int(self.src.shape[0])

    @property
    def n_pairs(self) -> int:
        return int(self.pairs.shape[0])

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.pairs[:, 1] - self.pairs[:, 0])

    def pair_index(self, i: int, j: int) -> int | None:
        return self._lookup.get((i, j))

    def pair_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def entries(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(p_i, p_j, flags)`` for a pair, positions in pixels."""
        k = self._lookup.get((i, j))
        if k is None:
            return np.zeros((0, 2)), np.zeros((0, 2), np.float32), np.zeros(0, np.uint8)
        sl = self.pair_slice(k)
        return self.src_xy(self.src[sl]), self.dst[sl], self.flags[sl]

    def src_xy(self, src: np.ndarray) -> np.ndarray:
        return np.stack([src % self.width, src // self.width], axis=-1).astype(np.float64)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            shape=np.array([self.height, self.width, self.n_frames]),
            pairs=self.pairs,
            offsets=self.offsets,
            src=self.src,
            dst=self.dst,
            flags=self.flags,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CorrespondenceSet":
        with np.load(path) as z:
            h, w, n = (int(v) for v in z["shape"])
            return cls(h, w, n, z["pairs"], z["offsets"], z["src"], z["dst"], z["flags"])


def build_correspondence_set(
    flows: dict[tuple[int, int], FlowField],
    keep: dict[tuple[int, int], np.ndarray],
    rescued: dict[tuple[int, int], np.ndarray] | None = None,
    chained: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] | None = None,
    n_frames: int | None = None,
) -> CorrespondenceSet:
    """Merge per-pair masks into one deterministic CorrespondenceSet.

    A pixel enters from the direct flow when it is kept or rescued, and
    from a chain only when it has no direct entry. Targets outside the
    image are dropped.
    """
    rescued = rescued or {}
    chained = chained or {}
    keys = sorted(set(keep) | set(chained))
    if not keys:
        raise EmptySupervisionError("no flow pairs to build supervision from")
    h, w = next(iter(flows.values())).shape
    n = n_frames if n_frames is not None else 1 + max(max(k) for k in keys)
    grid_idx = np.arange(h * w, dtype=np.int32).reshape(h, w)
    pairs, offsets, srcs, dsts, flags = [], [0], [], [], []
    for key in keys:
        parts_src, parts_dst, parts_flag = [], [], []
        direct = np.zeros((h, w), dtype=bool)
        if key in keep:
            resc = rescued.get(key, np.zeros((h, w), dtype=bool))
            direct = keep[key] | resc
            flow = flows[key]
            ys, xs = np.nonzero(direct)
            parts_src.append(grid_idx[ys, xs])
            parts_dst.append(np.stack([xs, ys], -1) + flow.vectors[ys, xs])
            parts_flag.append(np.where(resc[ys, xs] & ~keep[key][ys, xs], RESCUED, np.uint8(0)))
        if key in chained:
            mask, target = chained[key]
            mask = mask & ~direct
            ys, xs = np.nonzero(mask)
            parts_src.append(grid_idx[ys, xs])
            parts_dst.append(target[ys, xs])
            parts_flag.append(np.full(len(ys), CHAINED, np.uint8))
        if not parts_src:
            continue
        s = np.concatenate(parts_src)
        d = np.concatenate(parts_dst)
        fl = np.concatenate(parts_flag)
        inside = in_bounds(d, h, w)
        s, d, fl = s[inside], d[inside], fl[inside]
        if len(s) == 0:
            continue
        order = np.argsort(s, kind="stable")
        pairs.append(key)
        srcs.append(s[order])
        dsts.append(d[order].astype(np.float32))
        flags.append(fl[order].astype(np.uint8))
        offsets.append(offsets[-1] + len(s))
    if not pairs:
        raise EmptySupervisionError("every correspondence was filtered out; nothing to optimize")
    return CorrespondenceSet(
        height=h,
        width=w,
        n_frames=n,
        pairs=np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
        offsets=np.asarray(offsets, dtype=np.int64),
        src=np.concatenate(srcs),
        dst=np.concatenate(dsts),
        flags=np.concatenate(flags),
    )


@dataclass
class FilterResult:
    keep: dict
    rescued: dict
    chained: dict
    cycle_ok: dict


def filter_flows(
    flows: dict[tuple[int, int], FlowField],
    config: FlowConfig,
    features: list[FeatureMap] | None = None,
    n_frames: int | None = None,
) -> FilterResult:
    keep, rescued, cycle_ok = {}, {}, {}
    for (i, j), fwd in flows.items():
        if config.max_gap is not None and abs(i - j) > config.max_gap:
            continue
        bwd = flows.get((j, i))
        if bwd is None:
            continue
        ok = cycle_filter(fwd, bwd, config.cycle_threshold)
        cycle_ok[(i, j)] = ok
        mask = ok.copy()
        if config.appearance and features is not None and abs(i - j) > config.appearance_min_gap:
            mask &= appearance_filter(features[i], features[j], fwd, config.appearance_threshold, config.appearance_min_gap)
        keep[(i, j)] = mask
        if config.rescue and abs(i - j) < config.rescue_max_gap:
            resc = occlusion_rescue(fwd, bwd, fwd, config.rescue_threshold, config.rescue_max_gap)
            rescued[(i, j)] = resc & ~mask
    chained = {}
    if config.chain:
        n = n_frames if n_frames is not None else 1 + max(max(k) for k in flows)
        chained = chain_augment(flows, keep, n, config.chain_min_density)
    return FilterResult(keep, rescued, chained, cycle_ok)


def prepare_correspondences(
    video: VideoSequence,
    flows: dict[tuple[int, int], FlowField],
    config: FlowConfig | None = None,
    features: list[FeatureMap] | None = None,
) -> CorrespondenceSet:
    """Filter exhaustive pairwise flows and assemble the supervision set."""
    config = config or FlowConfig()
    result = filter_flows(flows, config, features, video.n_frames)
    cs = build_correspondence_set(flows, result.keep, result.rescued, result.chained, video.n_frames)
    n_resc = int(np.sum((cs.flags & RESCUED) > 0))
    n_chain = int(np.sum((cs.flags & CHAINED) > 0))
    logger.info("supervision: %d correspondences over %d pairs (%d rescued, %d chained)", len(cs), cs.n_pairs, n_resc, n_chain)
    return cs
