import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from omnitrack.model import build_model
from omnitrack.render import (
    Renderer,
    TrackResult,
    alpha_from_density,
    composite_color,
    composite_correspondence,
    composite_pseudo_depth,
    compositing_weights,
    read_tracks,
    sample_ray,
    transmittance_at,
    write_tracks,
)

from conftest import tiny_model_config


def test_deterministic_bin_centres():
    rays = sample_ray(torch.zeros(1, 2), 2, "deterministic")
    assert torch.allclose(rays.depths, torch.tensor([[0.5, 1.5]]))
    assert torch.equal(rays.points[0, :, :2], torch.zeros(2, 2))


def test_stratified_one_per_bin():
    g = torch.Generator().manual_seed(0)
    p = torch.rand(200, 2) * 2 - 1
    rays = sample_ray(p, 32, "stratified", g)
    bins = torch.floor(rays.depths / (2.0 / 32)).long()
    assert torch.equal(bins, torch.arange(32).expand(200, 32))
    assert torch.all(rays.depths[:, 1:] > rays.depths[:, :-1])
    assert torch.equal(rays.points[..., :2], p[:, None, :].expand(200, 32, 2))
    assert torch.equal(rays.points[..., 2], rays.depths)


def test_sample_ray_rejects_bad_input():
    with pytest.raises(ValueError):
        sample_ray(torch.zeros(1, 2), 0)
    with pytest.raises(ValueError):
        sample_ray(torch.zeros(1, 2), 4, "random")


def test_composite_hand_cases():
    alpha = torch.tensor([0.5, 0.5], dtype=torch.float64)
    xj = torch.tensor([[1.0, 1, 1], [3.0, 3, 3]], dtype=torch.float64)
    x_hat, p_hat, opacity = composite_correspondence(alpha, xj)
    assert torch.allclose(x_hat, torch.full((3,), 1.25, dtype=torch.float64))
    assert torch.allclose(p_hat, torch.full((2,), 1.25, dtype=torch.float64))
    assert opacity.item() == pytest.approx(0.75)
    color = composite_color(alpha, torch.tensor([[1.0, 0, 0], [0, 0, 1.0]], dtype=torch.float64))
    assert torch.allclose(color, torch.tensor([0.5, 0.0, 0.25], dtype=torch.float64))
    assert composite_pseudo_depth(alpha, torch.tensor([0.5, 1.5], dtype=torch.float64)).item() == pytest.approx(0.625)


def test_composite_limits():
    opaque = alpha_from_density(torch.tensor([1e4, 0.3, 0.2], dtype=torch.float64))
    xj = torch.randn(3, 3, dtype=torch.float64)
    assert torch.allclose(composite_correspondence(opaque, xj)[0], xj[0])
    assert composite_pseudo_depth(opaque, torch.tensor([0.7, 1.0, 1.5], dtype=torch.float64)).item() == pytest.approx(0.7)
    vacuum = torch.zeros(3, dtype=torch.float64)
    x_hat, _, op = composite_correspondence(vacuum, xj)
    assert torch.equal(x_hat, torch.zeros(3, dtype=torch.float64)) and op.item() == 0
    assert torch.equal(composite_color(vacuum, torch.rand(3, 3, dtype=torch.float64)), torch.zeros(3, dtype=torch.float64))


def test_single_sample_degenerates():
    alpha = torch.tensor([0.3], dtype=torch.float64)
    xj = torch.tensor([[2.0, -1.0, 0.5]], dtype=torch.float64)
    assert torch.equal(composite_correspondence(alpha, xj)[0], 0.3 * xj[0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=40))
def test_weights_properties(sigmas):
    alpha = alpha_from_density(torch.tensor(sigmas, dtype=torch.float64))
    w, T = compositing_weights(alpha)
    assert T[0] == 1.0
    assert torch.all(T[1:] <= T[:-1])
    assert torch.all(w >= 0)
    assert w.sum() <= 1.0 + 1e-12
    # sum of weights is exactly the saturated fraction
    assert torch.isclose(w.sum(), 1.0 - torch.prod(1.0 - alpha), atol=1e-12)


def test_transmittance_at():
    depths = torch.tensor([0.25, 0.75, 1.25, 1.75])
    alpha = torch.tensor([0.0, 1.0, 0.0, 0.0])
    assert transmittance_at(alpha, depths, torch.tensor(0.5)).item() == 1.0
    assert transmittance_at(alpha, depths, torch.tensor(1.5)).item() == 0.0
    assert transmittance_at(alpha, depths, torch.tensor(1.5), margin=1.0).item() == 1.0


class PlaneModel(torch.nn.Module):
    """Stub model: an opaque plane at depth ``plane_z`` in canonical space and
    a per-frame translation ``shift * t`` in x applied by the mapping."""

    def __init__(self, n_frames: int, shift: float, plane_z: float = 1.0, blockers=None):
        super().__init__()
        self.n_frames = n_frames
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.shift = shift
        self.plane_z = plane_z
        self.blockers = blockers or []  # (x0, x1, z) slabs in canonical space

    def all_latents(self):
        return torch.arange(self.n_frames, dtype=torch.float64)[:, None]

    def latent_codes(self, frames):
        return torch.as_tensor(frames, dtype=torch.float64)[:, None]

    def map_to_canonical(self, x, psi):
        off = torch.zeros_like(x)
        off[..., 0] = -self.shift * psi[..., 0]
        return x + off

    def map_from_canonical(self, u, psi):
        off = torch.zeros_like(u)
        off[..., 0] = self.shift * psi[..., 0]
        return u + off

    def query_canonical(self, u):
        sigma = torch.where((u[..., 2] - self.plane_z).abs() < 0.05, 50.0, 0.0).to(u.dtype)
        for x0, x1, z in self.blockers:
            hit = (u[..., 0] >= x0) & (u[..., 0] <= x1) & ((u[..., 2] - z).abs() < 0.05)
            sigma = torch.where(hit, torch.full_like(sigma, 50.0), sigma)
        return sigma, torch.ones(u.shape[:-1] + (3,), dtype=u.dtype) * 0.5


def test_identity_model_queries():
    model = build_model(4, tiny_model_config(), seed=0)
    r = Renderer(model, 16, 20, K=8)
    pts = np.array([[0.0, 0.0], [19.0, 15.0], [7.3, 4.2]])
    for mode in ("inference", "training"):
        pos, vis, dep = r.query_motion(pts, 0, 3, mode)
        assert pos.shape == (3, 2) and vis.shape == (3,) and dep.shape == (3,)
        if mode == "inference":
            assert np.allclose(pos, pts, atol=1e-4)
    track = r.full_trajectory(pts[2], 1)
    assert np.allclose(track.positions, pts[2], atol=1e-4)
    assert np.all(np.isfinite(track.positions))


def test_query_outside_image_rejected():
    r = Renderer(build_model(3, tiny_model_config()), 10, 10, K=4)
    with pytest.raises(ValueError):
        r.query_motion(np.array([[10.5, 2.0]]), 0, 1)


def test_stub_translation_model():
    w = h = 21
    shift = 0.1  # normalized units per frame = 1 px per frame at width 21
    model = PlaneModel(5, shift)
    r = Renderer(model, h, w, K=32)
    pts = np.array([[5.0, 5.0], [10.0, 12.0]])
    for j in range(5):
        pos, vis, _ = r.query_motion(pts, 0, j, "inference")
        assert np.allclose(pos, pts + [[j * shift * (w - 1) / 2, 0]], atol=1e-6)
        assert vis.all()
    # opaque single surface: composited and representative positions agree
    pos_t, _, _ = r.query_motion(pts, 0, 3, "training")
    pos_i, _, _ = r.query_motion(pts, 0, 3, "inference")
    assert np.abs(pos_t - pos_i).max() < 1e-3


def test_self_query_returns_input():
    r = Renderer(PlaneModel(3, 0.2), 11, 11, K=16)
    pts = np.array([[3.0, 4.0]])
    pos, _, _ = r.query_motion(pts, 1, 1)
    assert np.allclose(pos, pts, atol=1e-4)


def test_visibility_occluder_and_threshold_monotone():
    # slab in front of the plane covers canonical x in [-0.2, 0.2]
    model = PlaneModel(3, 0.0, plane_z=1.5, blockers=[(-0.2, 0.2, 0.5)])
    r = Renderer(model, 11, 11, K=32)
    pts = np.array([[5.0, 5.0], [1.0, 5.0]])
    _, vis, dep = r.query_motion(pts, 0, 1)
    # the first ray's max-alpha sample is on the blocker itself, so it is visible
    assert vis[0] and dep[0] < 1.0
    # query a point on the plane behind the blocker directly through transmittance
    behind = torch.tensor([[0.0, 0.0, 1.5], [-0.8, 0.0, 1.5]], dtype=torch.float64)
    T = r.transmittance(behind, model.all_latents()[[1, 1]])
    assert T[0] < 1e-6 and T[1] == pytest.approx(1.0)
    verdicts = []
    for tau in (0.1, 0.3, 0.5, 0.7, 0.9):
        r.vis_threshold = tau
        verdicts.append(r.query_motion(pts, 0, 1)[1])
    for a, b in zip(verdicts, verdicts[1:]):
        assert not np.any(b & ~a)


def test_pseudo_depth_ordering():
    # near slab at z=0.5 over canonical x in [-1, 0]; far plane at z=1.5 elsewhere
    model = PlaneModel(2, 0.0, plane_z=1.5, blockers=[(-1.0, 0.0, 0.5)])
    r = Renderer(model, 9, 9, K=32)
    depth = r.pseudo_depth_map(0)
    assert depth.shape == (9, 9)
    assert np.median(depth[:, :3]) < np.median(depth[:, 6:])


def test_track_points_matches_full_trajectory():
    model = PlaneModel(4, 0.05)
    r = Renderer(model, 15, 15, K=16)
    q = np.array([[2.0, 3.0], [8.0, 8.0]])
    batch = r.track_points(q, np.array([0, 2]))
    single = r.full_trajectory(q[1], 2)
    assert np.allclose(batch[1].positions, single.positions)
    assert np.array_equal(batch[1].visible, single.visible)


def test_track_jsonl_roundtrip(tmp_path):
    t = TrackResult(2, np.array([1.5, 2.5]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([True, False]), np.array([0.5, 0.7]))
    path = write_tracks(tmp_path / "t.jsonl", [t, t])
    back = read_tracks(path)
    assert len(back) == 2
    assert back[0].query_frame == 2
    assert np.array_equal(back[0].positions, t.positions)
    assert np.array_equal(back[0].visible, t.visible)
    rec = t.to_record(scale=(2.0, 0.5))
    assert rec["frames"][1] == [6.0, 2.0, False, 0.7]
