"""Batch sampling over the correspondence set and hard-example error maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..flows import CorrespondenceSet
from .config import TrainConfig, pair_weight


@dataclass
class Batch:
    fi: np.ndarray  # (B,) source frame
    fj: np.ndarray  # (B,) target frame
    src: np.ndarray  # (B, 2) source pixel (x, y)
    dst: np.ndarray  # (B, 2) supervising target position
    weight: np.ndarray  # (B,) flow-loss weight
    partner: np.ndarray  # (B,) index of another entry of the same pair, for gradient losses
    window: int

    def __len__(self) -> int:
        return len(self.fi)


class BatchSampler:
    """Draws image pairs inside the curriculum window, then correspondences
    within each pair: half proportional to the source frame's error map,
    half uniform."""

    def __init__(self, cs: CorrespondenceSet, cfg: TrainConfig, rng: np.random.Generator):
        self.cs = cs
        self.cfg = cfg
        self.rng = rng
        self.gaps = cs.gaps
        self.counts = cs.counts

    def eligible_pairs(self, step: int) -> np.ndarray:
        window = self.cfg.window(step, self.cs.n_frames)
        return np.nonzero((self.gaps <= window) & (self.counts > 0))[0]

    def sample(self, step: int, error_maps: np.ndarray | None = None) -> Batch:
        cfg, cs, rng = self.cfg, self.cs, self.rng
        window = cfg.window(step, cs.n_frames)
        eligible = self.eligible_pairs(step)
        if len(eligible) == 0:
            raise RuntimeError(f"no supervised pairs within window {window}")
        chosen = rng.choice(eligible, size=cfg.pairs_per_step, replace=True)
        n = cfg.per_pair
        n_hard = n // 2 if (cfg.hard_mining and error_maps is not None) else 0
        fi, fj, src, dst, weight, partner = [], [], [], [], [], []
        for slot, k in enumerate(chosen):
            i, j = (int(v) for v in cs.pairs[k])
            sl = cs.pair_slice(k)
            count = sl.stop - sl.start
            picks = rng.integers(0, count, size=n - n_hard)
            if n_hard:
                err = error_maps[i].reshape(-1)[cs.src[sl]].astype(np.float64)
                total = err.sum()
                if total > 0:
                    cdf = np.cumsum(err / total)
                    hard = np.minimum(np.searchsorted(cdf, rng.random(n_hard), side="right"), count - 1)
                else:
                    hard = rng.integers(0, count, size=n_hard)
                picks = np.concatenate([hard, picks])
            idx = sl.start + picks
            fi.append(np.full(n, i))
            fj.append(np.full(n, j))
            src.append(cs.src_xy(cs.src[idx]))
            dst.append(cs.dst[idx].astype(np.float64))
            weight.append(np.full(n, pair_weight(abs(i - j), window)))
            partner.append(slot * n + rng.permutation(n))
        return Batch(
            fi=np.concatenate(fi),
            fj=np.concatenate(fj),
            src=np.concatenate(src),
            dst=np.concatenate(dst),
            weight=np.concatenate(weight),
            partner=np.concatenate(partner),
            window=window,
        )


def uniform_error_maps(n_frames: int, height: int, width: int) -> np.ndarray:
    return np.ones((n_frames, height, width), dtype=np.float32)


@torch.no_grad()
def refresh_error_maps(renderer, cs: CorrespondenceSet, stride: int = 1) -> np.ndarray:
    """Per-pixel distance between predicted and supervising flow to the next
    frame (previous frame for the last one). Pixels without supervision on
    that pair get zero; with ``stride > 1`` each sampled error covers its
    stride x stride block."""
    n, h, w = cs.n_frames, cs.height, cs.width
    maps = np.zeros((n, h, w), dtype=np.float32)
    for i in range(n):
        j = i + 1 if i < n - 1 else i - 1
        k = cs.pair_index(i, j)
        if k is None:
            continue
        sl = cs.pair_slice(k)
        src = cs.src[sl]
        xy = cs.src_xy(src)
        on_grid = (xy[:, 0] % stride == 0) & (xy[:, 1] % stride == 0)
        if not on_grid.any():
            continue
        xy, dst = xy[on_grid], cs.dst[sl][on_grid]
        pred, _, _ = renderer.query_motion(xy, i, j, mode="training")
        err = np.linalg.norm(pred - dst, axis=-1).astype(np.float32)
        xs, ys = xy[:, 0].astype(int), xy[:, 1].astype(int)
        for dy in range(stride):
            for dx in range(stride):
                yy, xx = ys + dy, xs + dx
                ok = (yy < h) & (xx < w)
                maps[i, yy[ok], xx[ok]] = err[ok]
    return maps
