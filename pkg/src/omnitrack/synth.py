"""Layered sprite videos with exact trajectories, flows and occlusion.

Every layer moves by pure translation, so a point's image position is its
layer-local coordinate plus the layer offset at that frame. The background
follows the camera translation program; sprites follow their own programs
in image space. Smaller ``depth`` means nearer; the background is behind
every sprite.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter, map_coordinates

from .flows.fields import FlowField
from .metrics import TrackSet
from .video import VideoSequence, pixel_grid

BACKGROUND = 0


@dataclass
class SpriteSpec:
    size: tuple[int, int]  # (width, height) in pixels
    depth: int
    texture_seed: int = 0
    start: tuple[float, float] = (0.0, 0.0)  # top-left corner at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)
    waypoints: list[tuple[float, float, float]] | None = None  # (t, x, y) of the top-left corner

    def offsets(self, n_frames: int) -> np.ndarray:
        t = np.arange(n_frames, dtype=np.float64)
        if self.waypoints:
            wp = np.asarray(sorted(self.waypoints), dtype=np.float64)
            if len(wp) >= 3:
                spline = CubicSpline(wp[:, 0], wp[:, 1:], axis=0)
                return spline(t)
            return np.stack([np.interp(t, wp[:, 0], wp[:, k]) for k in (1, 2)], axis=-1)
        return np.asarray(self.start, dtype=np.float64) + t[:, None] * np.asarray(self.velocity, dtype=np.float64)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_frames: int = 16
    background_seed: int = 0
    camera_velocity: tuple[float, float] = (0.0, 0.0)
    sprites: list[SpriteSpec] = field(default_factory=list)
    noise_sigma: float = 0.0
    corruption_fraction: float = 0.0
    texture_smoothing: float = 1.0
    tracks_per_layer: int = 9
    background_tracks: int = 16

    def validate(self) -> None:
        if self.n_frames < 3:
            raise ValueError("a scene needs at least 3 frames")
        depths = [s.depth for s in self.sprites]
        if len(set(depths)) != len(depths):
            raise ValueError("sprite depth layers must be distinct")
        for k, sprite in enumerate(self.sprites):
            off = sprite.offsets(self.n_frames)
            w, h = sprite.size
            if (off[:, 0] < 0).any() or (off[:, 1] < 0).any() or (off[:, 0] + w > self.width).any() or (
                off[:, 1] + h > self.height
            ).any():
                raise ValueError(f"sprite {k} leaves the frame")


def _texture(rng: np.random.Generator, height: int, width: int, smoothing: float, base=None) -> np.ndarray:
    noise = rng.standard_normal((height, width, 3))
    if smoothing > 0:
        noise = gaussian_filter(noise, sigma=(smoothing, smoothing, 0), mode="wrap")
    noise /= noise.std(axis=(0, 1), keepdims=True) + 1e-12
    tex = (0.5 if base is None else np.asarray(base)) + 0.15 * noise
    return np.clip(tex, 0.0, 1.0)


def _bilinear_texture(tex: np.ndarray, coords: np.ndarray) -> np.ndarray:
    # coords (..., 2) as (x, y) in texel units
    flat = coords.reshape(-1, 2)
    out = np.stack(
        [map_coordinates(tex[..., c], [flat[:, 1], flat[:, 0]], order=1, mode="nearest") for c in range(3)],
        axis=-1,
    )
    return out.reshape(coords.shape[:-1] + (3,))


@dataclass
class SyntheticBundle:
    """A rendered scene together with everything needed to check a tracker."""

    spec: SceneSpec
    video: VideoSequence
    offsets: np.ndarray  # (L, N, 2) per-layer translation; layer 0 is the background
    layer_depth: np.ndarray  # (L,) depth rank, background = +inf
    layer_size: np.ndarray  # (L, 2) covered extent (w, h); background covers everything
    labels: np.ndarray  # (N, H, W) index of the visible layer
    textures: list[np.ndarray]
    tracks: TrackSet

    @property
    def n_frames(self) -> int:
        return self.video.n_frames

    @property
    def n_layers(self) -> int:
        return len(self.layer_depth)

    def motion(self, layer: int, i: int, j: int) -> np.ndarray:
        return self.offsets[layer, j] - self.offsets[layer, i]

    def covers(self, layer: int, frame: int, pts: np.ndarray) -> np.ndarray:
        if layer == BACKGROUND:
            return np.ones(pts.shape[:-1], dtype=bool)
        local = pts - self.offsets[layer, frame]
        w, h = self.layer_size[layer]
        return (local[..., 0] >= 0) & (local[..., 0] < w) & (local[..., 1] >= 0) & (local[..., 1] < h)

    def occluded(self, layer: int, frame: int, pts: np.ndarray) -> np.ndarray:
        """A point of ``layer`` at ``pts`` is occluded iff a strictly nearer layer covers it,
        or it lies outside the image."""
        h, w = self.video.shape
        occ = ~((pts[..., 0] >= 0) & (pts[..., 0] <= w - 1) & (pts[..., 1] >= 0) & (pts[..., 1] <= h - 1))
        for other in range(self.n_layers):
            if self.layer_depth[other] < self.layer_depth[layer]:
                occ |= self.covers(other, frame, pts)
        return occ

    def render_at(self, frame: int, pts: np.ndarray) -> np.ndarray:
        """Colour of the visible surface at continuous pixel positions."""
        out = np.zeros(pts.shape[:-1] + (3,))
        order = np.argsort(-self.layer_depth)  # far to near
        for layer in order:
            cov = self.covers(layer, frame, pts)
            if cov.any():
                out[cov] = _bilinear_texture(self.textures[layer], pts[cov] - self.offsets[layer, frame])
        return out

    def exact_flow(self, i: int, j: int) -> FlowField:
        motion = self.offsets[:, j] - self.offsets[:, i]  # (L, 2)
        return FlowField(i, j, motion[self.labels[i]].astype(np.float32))

    def occlusion_mask(self, i: int, j: int) -> np.ndarray:
        """Pixels of frame i whose surface point is hidden (or off-image) in frame j."""
        grid = pixel_grid(*self.video.shape)
        lab = self.labels[i]
        out = np.zeros(lab.shape, dtype=bool)
        for layer in range(self.n_layers):
            sel = lab == layer
            if sel.any():
                out[sel] = self.occluded(layer, j, grid[sel] + self.motion(layer, i, j))
        return out

    def layer_onehot(self, frame: int) -> np.ndarray:
        return np.eye(self.n_layers, dtype=np.float32)[self.labels[frame]]


def make_scene(spec: SceneSpec) -> SyntheticBundle:
    spec.validate()
    n, h, w = spec.n_frames, spec.height, spec.width
    t = np.arange(n, dtype=np.float64)
    cam = t[:, None] * np.asarray(spec.camera_velocity, dtype=np.float64)
    # background texture spans every position the camera exposes, plus a border
    lo = np.floor(-cam.max(axis=0)) - 2
    hi = np.ceil(-cam.min(axis=0)) + 2
    bg_origin = lo  # texel (0, 0) sits here at frame 0
    bg_size = (int(hi[1] - lo[1]) + h, int(hi[0] - lo[0]) + w)
    bg_rng = np.random.default_rng(spec.background_seed)
    textures = [_texture(bg_rng, bg_size[0], bg_size[1], spec.texture_smoothing)]
    offsets = [bg_origin + cam]
    depths = [np.inf]
    sizes = [(np.inf, np.inf)]
    for sprite in spec.sprites:
        rng = np.random.default_rng(sprite.texture_seed)
        base = rng.uniform(0.1, 0.9, size=3)
        sw, sh = sprite.size
        textures.append(_texture(rng, sh + 1, sw + 1, spec.texture_smoothing, base=base))
        offsets.append(sprite.offsets(n))
        depths.append(float(sprite.depth))
        sizes.append((sw, sh))
    offsets = np.stack(offsets)
    depth_arr = np.asarray(depths)
    size_arr = np.asarray(sizes, dtype=np.float64)

    bundle = SyntheticBundle(
        spec=spec,
        video=VideoSequence(np.zeros((n, h, w, 3), np.float32)),
        offsets=offsets,
        layer_depth=depth_arr,
        layer_size=size_arr,
        labels=np.zeros((n, h, w), dtype=np.int64),
        textures=textures,
        tracks=TrackSet(np.zeros((0, n, 2)), np.zeros((0, n), bool)),
    )
    grid = pixel_grid(h, w)
    frames = np.zeros((n, h, w, 3), np.float32)
    for f in range(n):
        labels = np.zeros((h, w), dtype=np.int64)
        nearest = np.full((h, w), np.inf)
        for layer in range(1, len(depths)):
            cov = bundle.covers(layer, f, grid) & (depth_arr[layer] < nearest)
            labels[cov] = layer
            nearest[cov] = depth_arr[layer]
        bundle.labels[f] = labels
        frames[f] = bundle.render_at(f, grid)
    bundle.video = VideoSequence(frames)
    bundle.tracks = _sample_tracks(bundle, spec)
    return bundle


def _sample_tracks(bundle: SyntheticBundle, spec: SceneSpec) -> TrackSet:
    n = bundle.n_frames
    h, w = bundle.video.shape
    positions, occluded, layers = [], [], []

    def add(layer: int, frame: int, start: np.ndarray):
        pos = start[None] + bundle.offsets[layer] - bundle.offsets[layer, frame]
        occ = np.array([bundle.occluded(layer, f, pos[f]) for f in range(n)])
        if occ.all():
            return
        positions.append(pos)
        occluded.append(occ)
        layers.append(layer)

    side = max(int(round(np.sqrt(spec.tracks_per_layer))), 1)
    for layer in range(1, bundle.n_layers):
        sw, sh = bundle.layer_size[layer]
        # grid over the sprite interior, placed at the first frame it is fully visible
        fr = next((f for f in range(n) if not bundle.occluded(layer, f, bundle.offsets[layer, f] + [[0, 0], [sw - 1, sh - 1]]).any()), 0)
        fx = (np.arange(side) + 0.5) / side * (sw - 1)
        fy = (np.arange(side) + 0.5) / side * (sh - 1)
        for yy in fy:
            for xx in fx:
                add(layer, fr, bundle.offsets[layer, fr] + np.array([xx, yy]))

    # background grid restricted to points that stay inside the image
    side = max(int(round(np.sqrt(spec.background_tracks))), 1)
    shift = bundle.offsets[BACKGROUND] - bundle.offsets[BACKGROUND, 0]
    xmin, xmax = -shift[:, 0].min(), (w - 1) - shift[:, 0].max()
    ymin, ymax = -shift[:, 1].min(), (h - 1) - shift[:, 1].max()
    for yy in ymin + (np.arange(side) + 0.5) / side * (ymax - ymin):
        for xx in xmin + (np.arange(side) + 0.5) / side * (xmax - xmin):
            add(BACKGROUND, 0, np.array([xx, yy]))

    return TrackSet(np.asarray(positions), np.asarray(occluded), layers=np.asarray(layers))


class OracleFlowProvider:
    """Serves the bundle's exact flows plus noise and optional corruption.

    ``corruption_mode="background"`` replaces the chosen pixels' flow with
    the background layer's motion; ``"offset"`` adds a random displacement
    with length drawn from ``offset_range``. With ``corrupt_pairs="forward"``
    only flows with i < j are corrupted, so a cycle check of a forward flow
    against its clean backward flow flags exactly the injected pixels. The
    chosen pixels are recorded per pair in ``corrupted``.
    """

    accepts_init = True

    def __init__(
        self,
        bundle: SyntheticBundle,
        noise_sigma: float | None = None,
        corruption_fraction: float | None = None,
        corruption_mode: str = "background",
        offset_range: tuple[float, float] = (4.0, 8.0),
        seed: int = 0,
        corrupt_pairs: str = "all",
    ):
        self.bundle = bundle
        self.noise_sigma = bundle.spec.noise_sigma if noise_sigma is None else noise_sigma
        self.corruption_fraction = bundle.spec.corruption_fraction if corruption_fraction is None else corruption_fraction
        if corruption_mode not in ("background", "offset"):
            raise ValueError(f"unknown corruption mode {corruption_mode!r}")
        self.corruption_mode = corruption_mode
        if corrupt_pairs not in ("all", "forward"):
            raise ValueError(f"unknown corrupt_pairs {corrupt_pairs!r}")
        self.corrupt_pairs = corrupt_pairs
        self.offset_range = offset_range
        self.seed = seed
        self.corrupted: dict[tuple[int, int], np.ndarray] = {}
        self.init_seen: dict[tuple[int, int], tuple[int, int] | None] = {}

    def __call__(self, video: VideoSequence | None, i: int, j: int, init: FlowField | None = None) -> FlowField:
        self.init_seen[(i, j)] = None if init is None else init.pair
        flow = self.bundle.exact_flow(i, j)
        vec = flow.vectors.astype(np.float64)
        h, w = flow.shape
        rng = np.random.default_rng([self.seed, i, j])
        if self.noise_sigma > 0:
            vec = vec + rng.normal(0.0, self.noise_sigma, size=vec.shape)
        mask = np.zeros((h, w), dtype=bool)
        n_bad = int(round(self.corruption_fraction * h * w))
        if self.corrupt_pairs == "forward" and i > j:
            n_bad = 0
        if n_bad:
            idx = rng.choice(h * w, size=n_bad, replace=False)
            mask.flat[idx] = True
            if self.corruption_mode == "background":
                vec[mask] = self.bundle.motion(BACKGROUND, i, j)
            else:
                ang = rng.uniform(0, 2 * np.pi, n_bad)
                mag = rng.uniform(*self.offset_range, n_bad)
                vec[mask] += np.stack([np.cos(ang), np.sin(ang)], -1) * mag[:, None]
        self.corrupted[(i, j)] = mask
        return FlowField(i, j, vec.astype(np.float32))


# --- scene spec files ---------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def load_scene_spec(path: str | Path) -> SceneSpec:
    """Parse an INI-style scene file: a ``[scene]`` section plus ``[sprite.*]`` sections."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return scene_spec_from_config(cp)


def scene_spec_from_config(cp: configparser.ConfigParser) -> SceneSpec:
    sc = cp["scene"]
    spec = SceneSpec(
        height=sc.getint("height", 64),
        width=sc.getint("width", 64),
        n_frames=sc.getint("n_frames", 16),
        background_seed=sc.getint("background_seed", 0),
        camera_velocity=_floats(sc.get("camera_velocity", "0 0")),
        noise_sigma=sc.getfloat("noise_sigma", 0.0),
        corruption_fraction=sc.getfloat("corruption_fraction", 0.0),
        texture_smoothing=sc.getfloat("texture_smoothing", 1.0),
        tracks_per_layer=sc.getint("tracks_per_layer", 9),
        background_tracks=sc.getint("background_tracks", 16),
    )
    for name in sorted(s for s in cp.sections() if s.startswith("sprite")):
        sec = cp[name]
        waypoints = None
        if "waypoints" in sec:
            vals = _floats(sec["waypoints"])
            waypoints = [tuple(vals[k : k + 3]) for k in range(0, len(vals), 3)]
        size = _floats(sec["size"])
        spec.sprites.append(
            SpriteSpec(
                size=(int(size[0]), int(size[1])),
                depth=sec.getint("depth"),
                texture_seed=sec.getint("texture_seed", 0),
                start=_floats(sec.get("start", "0 0")),
                velocity=_floats(sec.get("velocity", "0 0")),
                waypoints=waypoints,
            )
        )
    return spec


def dump_scene_spec(spec: SceneSpec, path: str | Path) -> Path:
    cp = configparser.ConfigParser()
    cp["scene"] = {
        "height": str(spec.height),
        "width": str(spec.width),
        "n_frames": str(spec.n_frames),
        "background_seed": str(spec.background_seed),
        "camera_velocity": " ".join(repr(float(v)) for v in spec.camera_velocity),
        "noise_sigma": repr(float(spec.noise_sigma)),
        "corruption_fraction": repr(float(spec.corruption_fraction)),
        "texture_smoothing": repr(float(spec.texture_smoothing)),
        "tracks_per_layer": str(spec.tracks_per_layer),
        "background_tracks": str(spec.background_tracks),
    }
    for k, s in enumerate(spec.sprites):
        sec = {
            "size": f"{s.size[0]} {s.size[1]}",
            "depth": str(s.depth),
            "texture_seed": str(s.texture_seed),
            "start": " ".join(repr(float(v)) for v in s.start),
            "velocity": " ".join(repr(float(v)) for v in s.velocity),
        }
        if s.waypoints:
            sec["waypoints"] = " ".join(repr(float(v)) for wp in s.waypoints for v in wp)
        cp[f"sprite.{k}"] = sec
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def occluder_scene(noise_sigma: float = 0.25, seed: int = 0) -> SceneSpec:
    """48-frame 96x96 scene: panning background, a 2 px/frame sprite that is
    fully hidden behind a static occluder for frames 20-27."""
    return SceneSpec(
        height=96,
        width=96,
        n_frames=48,
        background_seed=seed,
        camera_velocity=(0.5, 0.0),
        noise_sigma=noise_sigma,
        texture_smoothing=1.0,
        tracks_per_layer=9,
        background_tracks=16,
        sprites=[
            SpriteSpec(size=(10, 10), depth=2, texture_seed=seed + 101, start=(4.0, 8.0), velocity=(1.6, 1.2)),
            SpriteSpec(size=(23, 20), depth=1, texture_seed=seed + 202, start=(35.0, 31.0), velocity=(0.0, 0.0)),
        ],
    )
