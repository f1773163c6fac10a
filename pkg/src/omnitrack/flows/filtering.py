"""Reliability checks on pairwise flow: cycle consistency, appearance
consistency, occlusion rescue, and chaining of reliable flows."""

from __future__ import annotations

import numpy as np

from ..video import pixel_grid
from .fields import FeatureMap, FlowField, bilinear_sample, in_bounds, mask_sample_all

CYCLE_THRESHOLD = 3.0
APPEARANCE_THRESHOLD = 0.5
APPEARANCE_MIN_GAP = 8
RESCUE_MAX_GAP = 3


def _check_pair(forward: FlowField, backward: FlowField) -> None:
    if forward.pair != (backward.target_index, backward.source_index):
        raise ValueError(f"flows {forward.pair} and {backward.pair} are not a forward/backward pair")
    if forward.shape != backward.shape:
        raise ValueError("forward and backward flows differ in resolution")


def cycle_error(forward: FlowField, backward: FlowField) -> np.ndarray:
    """Per-pixel ||f_fwd(p) + f_bwd(p + f_fwd(p))||; inf where the lookup leaves
    the image or lands on invalid backward flow."""
    _check_pair(forward, backward)
    grid = pixel_grid(*forward.shape)
    q = grid + forward.vectors
    back, inside = bilinear_sample(backward.vectors, q)
    err = np.linalg.norm(forward.vectors + back, axis=-1)
    ok = inside & forward.valid_mask & mask_sample_all(backward.valid_mask, q)
    return np.where(ok, err, np.inf)


def cycle_filter(forward: FlowField, backward: FlowField, threshold: float = CYCLE_THRESHOLD) -> np.ndarray:
    """Keep pixels whose forward-backward error is at most ``threshold`` pixels."""
    return cycle_error(forward, backward) <= threshold


def appearance_filter(
    feat_i: FeatureMap,
    feat_j: FeatureMap,
    flow: FlowField,
    threshold: float = APPEARANCE_THRESHOLD,
    min_gap: int = APPEARANCE_MIN_GAP,
) -> np.ndarray:
    """Keep pixels whose source feature and (bilinearly looked-up) target feature
    have cosine similarity >= ``threshold``. Pairs at most ``min_gap`` frames
    apart are not checked."""
    if feat_i.dim != feat_j.dim:
        raise ValueError(f"feature dimensions differ: {feat_i.dim} vs {feat_j.dim}")
    if (feat_i.frame_index, feat_j.frame_index) != flow.pair:
        raise ValueError(f"features for {feat_i.frame_index}->{feat_j.frame_index} used with flow {flow.pair}")
    if flow.gap <= min_gap:
        return np.ones(flow.shape, dtype=bool)
    q = pixel_grid(*flow.shape) + flow.vectors
    target, inside = bilinear_sample(feat_j.features, q)
    src = feat_i.features
    cos = (src * target).sum(-1) / (np.linalg.norm(src, axis=-1) * np.linalg.norm(target, axis=-1) + 1e-12)
    return inside & (cos >= threshold)


def occlusion_rescue(
    flow_a: FlowField,
    flow_b: FlowField,
    flow_c: FlowField | None = None,
    threshold: float = CYCLE_THRESHOLD,
    max_gap: int = RESCUE_MAX_GAP,
) -> np.ndarray:
    """Flag pixels that fail the direct cycle check but pass the secondary one.

    From p, flow_a (i->j) lands at q, flow_b (j->i) brings q back to r, and
    flow_c (i->j, defaults to flow_a) sends r forward to s. The pixel is
    rescued when ||r - p|| > threshold but ||s - q|| <= threshold, and only
    for pairs less than ``max_gap`` frames apart.
    """
    flow_c = flow_a if flow_c is None else flow_c
    _check_pair(flow_a, flow_b)
    if flow_c.pair != flow_a.pair:
        raise ValueError("flow_c must run in the same direction as flow_a")
    if flow_a.gap >= max_gap:
        return np.zeros(flow_a.shape, dtype=bool)
    h, w = flow_a.shape
    p = pixel_grid(h, w)
    q = p + flow_a.vectors
    b, q_in = bilinear_sample(flow_b.vectors, q)
    r = q + b
    c, r_in = bilinear_sample(flow_c.vectors, r)
    s = r + c
    ab = np.linalg.norm(r - p, axis=-1)
    bc = np.linalg.norm(s - q, axis=-1)
    valid = (
        q_in
        & r_in
        & flow_a.valid_mask
        & mask_sample_all(flow_b.valid_mask, q)
        & mask_sample_all(flow_c.valid_mask, r)
    )
    return valid & (ab > threshold) & (bc <= threshold)


def chain_flows(path: list[int], flows: dict, keep: dict) -> tuple[np.ndarray, np.ndarray]:
    """Compose reliable flows along ``path`` (a list of frame ids).

    ``flows[(a, b)]`` is a FlowField and ``keep[(a, b)]`` its reliability
    mask. Returns ``(ok, target)``: pixels of the first frame whose every hop
    lands on reliable flow inside the image and ends inside it, and their
    end positions.
    """
    first = flows[(path[0], path[1])]
    h, w = first.shape
    pos = pixel_grid(h, w)
    ok = keep[(path[0], path[1])].copy()
    pos = pos + first.vectors
    ok &= in_bounds(pos, h, w)
    for a, b in zip(path[1:-1], path[2:]):
        ok &= mask_sample_all(keep[(a, b)], pos)
        step, inside = bilinear_sample(flows[(a, b)].vectors, pos)
        pos = pos + step
        ok &= inside
    return ok & in_bounds(pos, h, w), pos


def chain_augment(
    flows: dict,
    keep: dict,
    n_frames: int,
    min_density: float = 0.5,
    hop_paths: dict | None = None,
) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
    """Chained supervision for pairs whose direct flow is too sparse.

    By default every pair (i, j) with |i - j| >= 2 whose reliable fraction is
    below ``min_density`` gets a two-hop chain through the midpoint frame.
    ``hop_paths`` overrides this with explicit ``{(i, j): [i, k1, .., j]}``.
    Returns ``{(i, j): (mask, targets)}`` covering only pixels that have no
    direct entry.
    """
    out = {}
    if hop_paths is None:
        hop_paths = {}
        for (i, j), mask in keep.items():
            if abs(i - j) < 2 or mask.mean() >= min_density:
                continue
            k = (i + j) // 2
            if (i, k) in flows and (k, j) in flows:
                hop_paths[(i, j)] = [i, k, j]
    for (i, j), path in hop_paths.items():
        if path[0] != i or path[-1] != j:
            raise ValueError(f"chain path {path} does not run {i}->{j}")
        if any((a, b) not in flows for a, b in zip(path, path[1:])):
            continue
        ok, target = chain_flows(path, flows, keep)
        direct = keep.get((i, j))
        if direct is not None:
            ok &= ~direct
        if ok.any():
            out[(i, j)] = (ok, target)
    return out
