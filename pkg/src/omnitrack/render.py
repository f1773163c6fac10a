"""Rays, alpha compositing, occlusion tests and trajectory queries."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import FAR, NEAR, OmniMotionModel
from .video import normalized_to_pixels, pixels_to_normalized


@dataclass
class RaySamples:
    depths: torch.Tensor  # (..., K)
    points: torch.Tensor  # (..., K, 3)
    sigma: torch.Tensor | None = None
    color: torch.Tensor | None = None

    @property
    def alpha(self) -> torch.Tensor:
        return alpha_from_density(self.sigma)

    @property
    def transmittance(self) -> torch.Tensor:
        return compositing_weights(self.alpha)[1]


def sample_ray(
    p: torch.Tensor,
    K: int,
    mode: str = "stratified",
    generator: torch.Generator | None = None,
    near: float = NEAR,
    far: float = FAR,
) -> RaySamples:
    """Depth samples along the orthographic rays through normalized pixels ``p`` (..., 2).

    ``stratified`` draws one uniform depth inside each of K equal bins;
    ``deterministic`` uses the bin centres.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    edges = torch.linspace(near, far, K + 1, dtype=p.dtype, device=p.device)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    shape = p.shape[:-1] + (K,)
    if mode == "stratified":
        u = torch.rand(shape, generator=generator, dtype=p.dtype, device=p.device)
    elif mode == "deterministic":
        u = torch.full(shape, 0.5, dtype=p.dtype, device=p.device)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    depths = lo + u * width
    points = torch.cat([p[..., None, :].expand(shape + (2,)), depths[..., None]], dim=-1)
    return RaySamples(depths, points)


def alpha_from_density(sigma: torch.Tensor) -> torch.Tensor:
    return 1.0 - torch.exp(-sigma)


def compositing_weights(alpha: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Weights T_k * alpha_k and transmittances T_k = prod_{l<k} (1 - alpha_l)."""
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    trans = torch.cat([torch.ones_like(alpha[..., :1]), trans[..., :-1]], dim=-1)
    return trans * alpha, trans


def composite(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Sum over samples of ``weights[..., k] * values[..., k, :]``; no renormalization."""
    return (weights[..., None] * values).sum(dim=-2)


def composite_correspondence(alpha: torch.Tensor, x_j: torch.Tensor):
    """Return ``(x_hat_j, p_hat_j, accumulated_opacity)``."""
    w, _ = compositing_weights(alpha)
    x_hat = composite(w, x_j)
    return x_hat, x_hat[..., :2], w.sum(-1)


def composite_color(alpha: torch.Tensor, color: torch.Tensor) -> torch.Tensor:
    w, _ = compositing_weights(alpha)
    return composite(w, color)


def composite_pseudo_depth(alpha: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    w, _ = compositing_weights(alpha)
    return (w * depths).sum(-1)


def transmittance_at(alpha: torch.Tensor, depths: torch.Tensor, z: torch.Tensor, margin: float = 0.0) -> torch.Tensor:
    """Transmittance in front of depth ``z`` from samples strictly closer than ``z - margin``."""
    in_front = depths < (z[..., None] - margin)
    return torch.prod(torch.where(in_front, 1.0 - alpha, torch.ones_like(alpha)), dim=-1)


@dataclass
class TrackResult:
    query_frame: int
    query_xy: np.ndarray  # (2,) pixels
    positions: np.ndarray  # (N, 2) pixels
    visible: np.ndarray  # (N,) bool
    pseudo_depth: np.ndarray  # (N,)

    def to_record(self, scale: tuple[float, float] = (1.0, 1.0)) -> dict:
        sx, sy = scale
        return {
            "query_frame": int(self.query_frame),
            "query_xy_px": [float(self.query_xy[0] * sx), float(self.query_xy[1] * sy)],
            "frames": [
                [float(x * sx), float(y * sy), bool(v), float(d)]
                for (x, y), v, d in zip(self.positions, self.visible, self.pseudo_depth)
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrackResult":
        arr = np.asarray(rec["frames"], dtype=np.float64).reshape(-1, 4)
        return cls(rec["query_frame"], np.asarray(rec["query_xy_px"]), arr[:, :2], arr[:, 2] > 0.5, arr[:, 3])


def write_tracks(path: str | Path, tracks: list[TrackResult], scale: tuple[float, float] = (1.0, 1.0)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in tracks:
            fh.write(json.dumps(t.to_record(scale)) + "\n")
    return path


def read_tracks(path: str | Path) -> list[TrackResult]:
    with open(path) as fh:
        return [TrackResult.from_record(json.loads(line)) for line in fh if line.strip()]


class Renderer:
    """Answers motion queries against an OmniMotion model.

    Positions passed in and returned are in pixels of a ``height`` x
    ``width`` video; internally everything is normalized.
    """

    def __init__(
        self,
        model: OmniMotionModel,
        height: int,
        width: int,
        K: int = 32,
        vis_threshold: float = 0.5,
        vis_margin: float | None = None,
        representative: str = "alpha",
        chunk: int = 8192,
    ):
        if representative not in ("alpha", "weight"):
            raise ValueError("representative must be 'alpha' or 'weight'")
        self.model = model
        self.height = height
        self.width = width
        self.K = K
        self.vis_threshold = vis_threshold
        self.vis_margin = (FAR - NEAR) / K if vis_margin is None else vis_margin
        self.representative = representative
        self.chunk = chunk

    def _norm(self, px):
        return pixels_to_normalized(px, self.height, self.width)

    def _px(self, uv):
        return normalized_to_pixels(uv, self.height, self.width)

    def render(
        self,
        p_i: torch.Tensor,
        psi_i: torch.Tensor,
        psi_j: torch.Tensor | None,
        mode: str = "deterministic",
        generator: torch.Generator | None = None,
    ) -> dict[str, torch.Tensor]:
        """Lift normalized pixels of frame i to rays, map them into frame j.

        ``psi_i``/``psi_j`` are latent codes broadcastable to ``p_i.shape[:-1]``.
        """
        rays = sample_ray(p_i, self.K, mode, generator)
        u = self.model.map_to_canonical(rays.points, psi_i[..., None, :])
        sigma, color = self.model.query_canonical(u)
        alpha = alpha_from_density(sigma)
        weights, trans = compositing_weights(alpha)
        out = {
            "depths": rays.depths,
            "points": rays.points,
            "canonical": u,
            "sigma": sigma,
            "alpha": alpha,
            "weights": weights,
            "transmittance": trans,
            "color": composite(weights, color),
            "pseudo_depth": (weights * rays.depths).sum(-1),
            "opacity": weights.sum(-1),
        }
        if psi_j is not None:
            x_j = self.model.map_from_canonical(u, psi_j[..., None, :])
            out["x_j"] = x_j
            out["x_hat_j"] = composite(weights, x_j)
        return out

    def representative_index(self, alpha: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
        return torch.argmax(alpha if self.representative == "alpha" else weights, dim=-1)

    @torch.no_grad()
    def transmittance(self, points_j: torch.Tensor, psi_j: torch.Tensor) -> torch.Tensor:
        """Transmittance of normalized 3D points as seen along frame-j rays."""
        rays = sample_ray(points_j[..., :2], self.K, "deterministic")
        u = self.model.map_to_canonical(rays.points, psi_j[..., None, :])
        sigma, _ = self.model.query_canonical(u)
        return transmittance_at(alpha_from_density(sigma), rays.depths, points_j[..., 2], self.vis_margin)

    @torch.no_grad()
    def query_motion(self, p_i_px, i, j, mode: str = "inference"):
        """Map pixels ``p_i_px`` (..., 2) of frame(s) ``i`` to frame(s) ``j``.

        Returns ``(p_hat_j_px, visible, pseudo_depth)`` where pseudo-depth is
        the depth of the representative point in frame j.
        """
        dtype = next(self.model.parameters()).dtype
        p = torch.tensor(np.asarray(p_i_px, dtype=np.float64), dtype=dtype)
        if p.numel() and (self._norm(p).abs() > 1.0 + 1e-6).any():
            raise ValueError("query point outside the image")
        shape = p.shape[:-1]
        fi = torch.as_tensor(i).expand(shape).reshape(-1)
        fj = torch.as_tensor(j).expand(shape).reshape(-1)
        uv = self._norm(p).reshape(-1, 2)
        psi = self.model.all_latents()
        pos, vis, dep = [], [], []
        for s in range(0, uv.shape[0], self.chunk):
            sl = slice(s, s + self.chunk)
            out = self.render(uv[sl], psi[fi[sl]], psi[fj[sl]], "deterministic")
            if mode == "training":
                x = out["x_hat_j"]
            elif mode == "inference":
                k = self.representative_index(out["alpha"], out["weights"])
                x = torch.gather(out["x_j"], -2, k[:, None, None].expand(-1, 1, 3))[:, 0]
            else:
                raise ValueError(f"unknown query mode {mode!r}")
            t = self.transmittance(x, psi[fj[sl]])
            pos.append(self._px(x[:, :2]))
            vis.append(t >= self.vis_threshold)
            dep.append(x[:, 2])
        cat = lambda xs: torch.cat(xs).reshape(shape + xs[0].shape[1:]).cpu().numpy()
        return cat(pos), cat(vis), cat(dep)

    @torch.no_grad()
    def full_trajectory(self, p_i_px, i: int, mode: str = "inference") -> TrackResult:
        n = self.model.n_frames
        p = np.broadcast_to(np.asarray(p_i_px, dtype=np.float64), (n, 2))
        pos, vis, dep = self.query_motion(p, i, torch.arange(n), mode)
        return TrackResult(i, np.asarray(p_i_px, dtype=np.float64), pos, vis, dep)

    @torch.no_grad()
    def track_points(self, queries: np.ndarray, frames: np.ndarray, mode: str = "inference") -> list[TrackResult]:
        """Full trajectories for many queries at once: ``queries`` (Q, 2) px, ``frames`` (Q,)."""
        n = self.model.n_frames
        q = np.asarray(queries, dtype=np.float64)
        fr = np.asarray(frames, dtype=np.int64)
        pts = np.repeat(q[:, None], n, axis=1)
        fi = torch.as_tensor(np.repeat(fr[:, None], n, axis=1))
        fj = torch.arange(n).expand(len(q), n)
        pos, vis, dep = self.query_motion(pts, fi, fj, mode)
        return [TrackResult(int(fr[k]), q[k], pos[k], vis[k], dep[k]) for k in range(len(q))]

    @torch.no_grad()
    def pseudo_depth_map(self, frame: int) -> np.ndarray:
        """Composited pseudo-depth for every pixel of a frame (H, W)."""
        dtype = next(self.model.parameters()).dtype
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        px = torch.as_tensor(np.stack([xs, ys], -1).reshape(-1, 2), dtype=dtype)
        uv = self._norm(px)
        psi = self.model.latent_codes(torch.tensor([frame]))[0]
        out = []
        for s in range(0, uv.shape[0], self.chunk):
            r = self.render(uv[s : s + self.chunk], psi, None, "deterministic")
            out.append(r["pseudo_depth"])
        return torch.cat(out).reshape(self.height, self.width).cpu().numpy()

    @torch.no_grad()
    def predicted_flow(self, i: int, j: int, stride: int = 1, mode: str = "training") -> tuple[np.ndarray, np.ndarray]:
        """Flow i->j at a (strided) pixel grid; returns (pixels (M, 2), flow (M, 2))."""
        ys, xs = np.mgrid[0 : self.height : stride, 0 : self.width : stride]
        px = np.stack([xs, ys], -1).reshape(-1, 2).astype(np.float64)
        pos, _, _ = self.query_motion(px, i, j, mode)
        return px, pos - px
