"""Acceptance gate.

Each test checks one criterion at its stated tolerance and records a
pass/fail line that is printed in the terminal summary. The end-to-end
criteria share trained runs on the occluder scene (about 20 minutes each
on one CPU core); deselect them with ``-m "not slow"``.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import randomize_heads, record_acceptance
from omnitrack.flows import (
    FlowConfig,
    collect_pairwise_flows,
    patch_features,
    prepare_correspondences,
)
from omnitrack.flows.fields import FeatureMap, bilinear_sample, in_bounds
from omnitrack.flows.filtering import APPEARANCE_MIN_GAP, RESCUE_MAX_GAP, appearance_filter
from omnitrack.metrics import TrackSet, evaluate, temporal_coherence
from omnitrack.model import build_model
from omnitrack.render import (
    Renderer,
    alpha_from_density,
    composite_color,
    composite_correspondence,
    composite_pseudo_depth,
    write_tracks,
)
from omnitrack.synth import OracleFlowProvider, SceneSpec, SpriteSpec, make_scene, occluder_scene
from omnitrack.training import BatchSampler, Trainer, compute_losses, micro_config, reduced_config
from omnitrack.video import pixel_grid
from oracles import brute_force_metrics, naive_composite

SPRITE, OCCLUDER = 1, 2
OCCLUSION = range(20, 28)


def _check(cid, passed, detail):
    record_acceptance(cid, passed, detail)
    assert passed, f"{cid}: {detail}"


# --- C1-C4: model, renderer and loss properties ------------------------------------


def test_c1_bijectivity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        model = build_model(10, reduced_config().model, seed=seed)
        randomize_heads(model, 0.1, seed)
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(10_000, 3, generator=g) * 2.0 - torch.tensor([1.0, 1.0, 0.0])
        psi = model.latent_codes(torch.randint(0, 10, (10_000,), generator=g))
        with torch.no_grad():
            back = model.map_from_canonical(model.map_to_canonical(x, psi), psi)
        worst = max(worst, (back - x).abs().max().item())
    elapsed = time.perf_counter() - t0
    _check("C1", worst < 1e-5 and elapsed < 60, f"max |T^-1(T(x)) - x| = {worst:.2e} (< 1e-5), {elapsed:.1f} s")


def test_c2_structural_cycle_consistency():
    t0 = time.perf_counter()
    cycle = direct = 0.0
    for seed in range(10):
        model = build_model(10, reduced_config().model, seed=seed)
        randomize_heads(model, 0.1, seed)
        g = torch.Generator().manual_seed(100 + seed)
        x = torch.rand(10_000, 3, generator=g) * 2.0 - torch.tensor([1.0, 1.0, 0.0])
        fi, fj, fk = (model.latent_codes(torch.randint(0, 10, (10_000,), generator=g)) for _ in range(3))
        with torch.no_grad():
            xj = model.map_local_to_local(x, fi, fj)
            xk = model.map_local_to_local(xj, fj, fk)
            back = model.map_local_to_local(xk, fk, fi)
            cycle = max(cycle, (back - x).abs().max().item())
            direct = max(direct, (model.map_local_to_local(x, fi, fk) - xk).abs().max().item())
    elapsed = time.perf_counter() - t0
    _check(
        "C2",
        cycle < 3e-4 and direct < 1e-4 and elapsed < 60,
        f"i->j->k->i error {cycle:.2e} (< 3e-4), direct vs chained {direct:.2e} (< 1e-4), {elapsed:.1f} s",
    )


def test_c3_compositing_matches_direct_summation():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 33))
        sigma = rng.exponential(rng.choice([0.05, 1.0, 10.0]), k)
        xj = rng.normal(size=(k, 3))
        col = rng.uniform(size=(k, 3))
        depth = np.sort(rng.uniform(0, 2, k))
        alpha = alpha_from_density(torch.tensor(sigma))
        x_hat, _, opacity = composite_correspondence(alpha, torch.tensor(xj))
        c_hat = composite_color(alpha, torch.tensor(col))
        d_hat = composite_pseudo_depth(alpha, torch.tensor(depth))
        ref_x, ref_op = naive_composite(sigma, xj.tolist())
        ref_c, _ = naive_composite(sigma, col.tolist())
        ref_d, _ = naive_composite(sigma, [[d] for d in depth])
        pairs = list(zip(x_hat.tolist(), ref_x)) + list(zip(c_hat.tolist(), ref_c)) + [(d_hat.item(), ref_d[0]), (opacity.item(), ref_op)]
        for got, ref in pairs:
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-12) if abs(ref) > 1e-12 else abs(got - ref))
    _check("C3", worst < 1e-6, f"max relative deviation from direct summation {worst:.2e} over 1000 rays (< 1e-6)")


def test_c4_gradient_check():
    t0 = time.perf_counter()
    bundle = make_scene(
        SceneSpec(
            height=24,
            width=24,
            n_frames=6,
            background_seed=1,
            camera_velocity=(0.5, 0.0),
            sprites=[SpriteSpec(size=(6, 6), depth=1, texture_seed=5, start=(2.0, 9.0), velocity=(2.0, 0.0))],
        )
    )
    flows = collect_pairwise_flows(bundle.video, OracleFlowProvider(bundle, noise_sigma=0.25))
    cs = prepare_correspondences(bundle.video, flows, FlowConfig(appearance=False))
    cfg = micro_config(window_initial=5)
    model = build_model(6, cfg.model, seed=0).double()
    randomize_heads(model, 0.1, 0)
    renderer = Renderer(model, 24, 24, K=cfg.samples_per_ray)
    batch = BatchSampler(cs, cfg, np.random.default_rng(0)).sample(0)
    frames = torch.as_tensor(bundle.video.frames, dtype=torch.float64)
    step = cfg.lambda_pho_ramp  # every loss term active

    def loss():
        return compute_losses(model, renderer, batch, frames, cfg, step, torch.Generator().manual_seed(7))[0]

    model.zero_grad()
    loss().backward()
    params = list(model.parameters())
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(1).choice(offsets[-1], 500, replace=False)
    h = 1e-6
    ok = 0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, idx = params[k].view(-1), int(flat - offsets[k])
            analytic = params[k].grad.view(-1)[idx].item()
            old = p[idx].item()
            p[idx] = old + h
            up = loss().item()
            p[idx] = old - h
            down = loss().item()
            p[idx] = old
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic), abs(numeric))
            ok += denom < 1e-8 or abs(analytic - numeric) / denom < 1e-3
    frac = ok / len(picks)
    elapsed = time.perf_counter() - t0
    _check("C4", frac >= 0.99 and elapsed < 300, f"{frac:.1%} of 500 parameters within rel. error 1e-3 (>= 99%), {elapsed:.1f} s")


# --- C5: metrics ----------------------------------------------------------------


def test_c5_metrics_oracle():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        n, t = int(rng.integers(1, 5)), int(rng.integers(3, 7))
        gt = rng.integers(0, 12, (n, t, 2)).astype(float)
        pred = gt + rng.integers(-9, 10, (n, t, 2))
        gt_occ = rng.random((n, t)) < 0.3
        gt_occ[:, 0] = False
        pred_occ = rng.random((n, t)) < 0.3
        got = evaluate(TrackSet(pred, pred_occ), TrackSet(gt, gt_occ), resolution=None)
        ref = brute_force_metrics(pred.tolist(), pred_occ.tolist(), gt.tolist(), gt_occ.tolist())
        same = got.delta_avg == ref["delta_avg"] and got.aj == ref["aj"] and got.oa == ref["oa"]
        if ref["tc"] is None:
            same &= got.tc is None
        else:
            # a mean of per-frame norms; only summation order may differ
            same &= math.isclose(got.tc, ref["tc"], rel_tol=1e-12, abs_tol=1e-15)
        mismatches += not same

    # one point, one frame, 3 px off: within 4, 8 and 16 only
    delta = evaluate(TrackSet([[[3.0, 0.0]]], [[False]]), TrackSet([[[0.0, 0.0]]], [[False]]), resolution=None).delta_avg
    # one perfect point and one predicted visible where the gt is occluded
    zeros = np.zeros((2, 1, 2))
    aj = evaluate(TrackSet(zeros, [[False], [False]]), TrackSet(zeros, [[False], [True]]), resolution=None).aj
    hand_ok = delta == 0.6 and aj == 0.5
    _check("C5", mismatches == 0 and hand_ok, f"{mismatches} mismatches on 100 random instances; hand cases delta_avg = {delta}, AJ = {aj}")


# --- C6: flow filtering ------------------------------------------------------------


def test_c6_injected_violations():
    # integer camera motion keeps every clean cycle exact; corrupting only the
    # i < j flows makes each failure attributable to one injected vector
    n, h, w = 14, 32, 32
    bundle = make_scene(SceneSpec(height=h, width=w, n_frames=n, background_seed=4, camera_velocity=(1.0, 0.0)))
    prov = OracleFlowProvider(bundle, noise_sigma=0.0, corruption_fraction=0.05, corruption_mode="offset", seed=3, corrupt_pairs="forward")
    flows = collect_pairwise_flows(bundle.video, prov)
    cs = prepare_correspondences(bundle.video, flows, FlowConfig(chain=False, appearance=False))
    grid = pixel_grid(h, w)
    tp = fp = fn = 0
    for (i, j), flow in flows.items():
        if abs(i - j) <= RESCUE_MAX_GAP:
            continue
        motion = bundle.motion(0, i, j)
        domain = in_bounds(grid + motion, h, w)
        if i < j:
            injected = prov.corrupted[(i, j)]
        else:
            # a clean backward vector fails when it lands on a corrupted forward pixel
            bad = prov.corrupted[(j, i)]
            target = np.rint(grid + motion).astype(int)
            injected = np.zeros((h, w), bool)
            injected[domain] = bad[target[domain][:, 1], target[domain][:, 0]]
        kept = np.zeros(h * w, bool)
        k = cs.pair_index(i, j)
        if k is not None:
            kept[cs.src[cs.pair_slice(k)]] = True
        removed = ~kept.reshape(h, w) & domain
        injected &= domain
        tp += int((removed & injected).sum())
        fp += int((removed & ~injected).sum())
        fn += int((~removed & injected).sum())
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)

    # appearance: sprite pixels whose flow is locked to the background at gaps > 8,
    # with one-hot layer features so sprite and background are orthogonal
    spec = SceneSpec(
        height=48,
        width=48,
        n_frames=16,
        background_seed=2,
        camera_velocity=(0.5, 0.0),
        sprites=[SpriteSpec(size=(8, 8), depth=1, texture_seed=9, start=(4.0, 20.0), velocity=(2.0, 0.0))],
    )
    scene = make_scene(spec)
    feats = [FeatureMap(f, scene.layer_onehot(f)) for f in range(spec.n_frames)]
    rng = np.random.default_rng(0)
    grid = pixel_grid(48, 48)
    n_injected = n_caught = 0
    for i in range(spec.n_frames):
        for j in range(spec.n_frames):
            if abs(i - j) <= APPEARANCE_MIN_GAP:
                continue
            flow = scene.exact_flow(i, j)
            vec = flow.vectors.copy()
            target = grid + scene.motion(0, i, j)
            onehot, inside = bilinear_sample(scene.layer_onehot(j), target)
            candidates = (scene.labels[i] == SPRITE) & inside & (onehot[..., 0] == 1.0)
            pick = candidates & (rng.random((48, 48)) < 0.5)
            vec[pick] = scene.motion(0, i, j)
            keep = appearance_filter(feats[i], feats[j], type(flow)(i, j, vec))
            n_injected += int(pick.sum())
            n_caught += int((pick & ~keep).sum())
    caught = n_caught / max(n_injected, 1)
    _check(
        "C6",
        precision == 1.0 and recall == 1.0 and n_injected > 0 and caught == 1.0,
        f"cycle filter precision {precision:.4f} recall {recall:.4f} over {tp} injected vectors beyond gap {RESCUE_MAX_GAP}; "
        f"appearance filter removed {n_caught}/{n_injected} background-locked vectors",
    )


# --- C7-C11: end-to-end runs on the occluder scene ----------------------------------


class OccluderRun:
    """One training run of the reduced configuration on the occluder scene."""

    def __init__(self, sigma: float, photometric: bool, out_dir):
        torch.set_num_threads(1)
        self.bundle = make_scene(occluder_scene(noise_sigma=sigma))
        video = self.bundle.video
        self.provider = OracleFlowProvider(self.bundle, noise_sigma=sigma, seed=0)
        flows = collect_pairwise_flows(video, self.provider)
        self.flows = flows
        cs = prepare_correspondences(video, flows, FlowConfig.for_provider("oracle"), patch_features(video))
        cfg = reduced_config(use_photometric=photometric)
        self.trainer = Trainer(video, cs, cfg, out_dir)
        self.trainer.run()
        self.renderer = self.trainer.renderer
        gt = self.bundle.tracks
        self.tracks = self.renderer.track_points(gt.query_points(), gt.query_frames())
        self.tracks_path = write_tracks(out_dir / "tracks.jsonl", self.tracks)
        self.pred = TrackSet(np.stack([t.positions for t in self.tracks]), ~np.stack([t.visible for t in self.tracks]))
        self.report = evaluate(self.pred, gt, resolution=None)


@pytest.fixture(scope="session")
def occluder_runs(tmp_path_factory):
    cache = {}

    def get(name: str, sigma: float = 0.25, photometric: bool = True) -> OccluderRun:
        if name not in cache:
            cache[name] = OccluderRun(sigma, photometric, tmp_path_factory.mktemp(name))
        return cache[name]

    return get


def chained_adjacent_tracks(bundle, provider, flows) -> np.ndarray:
    """Follow the noisy adjacent-frame flows from each query, forward and backward."""
    gt = bundle.tracks
    n = bundle.n_frames
    out = np.zeros(gt.positions.shape)
    for t, (q, p) in enumerate(zip(gt.query_frames(), gt.query_points())):
        out[t, q] = p
        for step in (1, -1):
            pos = p.copy()
            f = q
            while 0 <= f + step < n:
                vec, inside = bilinear_sample(flows[(f, f + step)].vectors, pos)
                if inside:
                    pos = pos + vec
                f += step
                out[t, f] = pos
    return out


@pytest.mark.slow
def test_c7_end_to_end_tracking(occluder_runs):
    run = occluder_runs("c7")
    gt = run.bundle.tracks
    err = np.linalg.norm(run.pred.positions - gt.positions, axis=-1)
    visible = ~gt.occluded
    within2 = float((err[visible] < 2.0).mean())
    oa = run.report.oa
    hidden = np.zeros_like(visible)
    sprite = gt.layers == SPRITE
    hidden[np.ix_(sprite, list(OCCLUSION))] = gt.occluded[np.ix_(sprite, list(OCCLUSION))]
    within8 = float((err[hidden] < 8.0).mean())
    passed = within2 >= 0.85 and oa >= 0.85 and within8 >= 0.70
    # diagnostic only: the same checkpoint read out with the largest-weight rule
    alt = Renderer(run.renderer.model, run.renderer.height, run.renderer.width, K=run.renderer.K, representative="weight")
    alt_tracks = alt.track_points(gt.query_points(), gt.query_frames())
    alt_err = np.linalg.norm(np.stack([t.positions for t in alt_tracks]) - gt.positions, axis=-1)
    alt_oa = float((np.stack([t.visible for t in alt_tracks]) == visible).mean())
    _check(
        "C7",
        passed,
        f"visible within 2 px {within2:.3f} (>= 0.85), OA {oa:.3f} (>= 0.85), "
        f"occluded sprite frames within 8 px {within8:.3f} (>= 0.70) over {int(hidden.sum())} pairs; AJ {run.report.aj:.3f}; "
        f"largest-weight rule: within 2 px {float((alt_err[visible] < 2.0).mean()):.3f}, OA {alt_oa:.3f}",
    )


@pytest.mark.slow
def test_c8_coherence_beats_chained_flow(occluder_runs):
    run = occluder_runs("c7")
    gt = run.bundle.tracks
    chained = chained_adjacent_tracks(run.bundle, run.provider, run.flows)
    tc_ours = temporal_coherence(run.pred.positions, gt.positions, gt.occluded)
    tc_chain = temporal_coherence(chained, gt.positions, gt.occluded)
    _check("C8", tc_ours <= 0.5 * tc_chain, f"TC optimized {tc_ours:.4f} vs chained adjacent flow {tc_chain:.4f} (ratio {tc_ours / tc_chain:.3f} <= 0.5)")


@pytest.mark.slow
def test_c9_pseudo_depth_ordering(occluder_runs):
    run = occluder_runs("c7")
    bundle, renderer = run.bundle, run.renderer
    labels = bundle.labels
    # a frame before the occlusion where the whole sprite is in view
    full = (labels == SPRITE).reshape(bundle.n_frames, -1).sum(1)
    source = max(f for f in range(OCCLUSION.start) if full[f] == full.max())
    ys, xs = np.nonzero(labels[source] == SPRITE)
    sprite_px = np.stack([xs, ys], -1).astype(float)
    occluder_depth, sprite_depth = [], []
    for f in OCCLUSION:
        occluder_depth.append(renderer.pseudo_depth_map(f)[labels[f] == OCCLUDER])
        # composited depth of the sprite's surface points carried into frame f
        _, _, z = renderer.query_motion(sprite_px, source, f, mode="training")
        sprite_depth.append(z)
    occ_med = float(np.median(np.concatenate(occluder_depth)))
    spr_med = float(np.median(np.concatenate(sprite_depth)))
    _check("C9", occ_med < spr_med, f"median pseudo-depth occluder {occ_med:.4f} < sprite {spr_med:.4f} over frames {OCCLUSION.start}-{OCCLUSION.stop - 1}")


@pytest.mark.slow
def test_c10_photometric_ablation(occluder_runs):
    full = occluder_runs("c10_full", sigma=0.5, photometric=True)
    ablated = occluder_runs("c10_nopho", sigma=0.5, photometric=False)
    a, b = full.report.delta_avg, ablated.report.delta_avg
    _check("C10", a >= b - 0.01, f"delta_avg full {a:.4f} vs no photometric {b:.4f} at sigma 0.5 (full >= ablated - 0.01)")


@pytest.mark.slow
def test_c11_determinism(occluder_runs):
    first = occluder_runs("c7")
    second = occluder_runs("c7_repeat")
    same = first.tracks_path.read_bytes() == second.tracks_path.read_bytes()
    _check("C11", same, f"exported tracks of two seed-{first.trainer.cfg.seed} runs are {'byte-identical' if same else 'different'}")
