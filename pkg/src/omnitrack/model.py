"""OmniMotion representation: latent codes, invertible mapping, canonical field."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

# Split pattern is cycled over the coupling stack: z, y, x, z, y, x, ...
SPLIT_CYCLE = (2, 1, 0)

NEAR = 0.0
FAR = 2.0

CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """Raised when a coupling layer produces a non-finite value."""

    def __init__(self, layer: int, direction: str):
        super().__init__(f"non-finite output in coupling layer {layer} ({direction})")
        self.layer = layer
        self.direction = direction


@dataclass
class ModelConfig:
    n_coupling: int = 6
    coupling_hidden: int = 256
    coupling_depth: int = 3
    n_freq: int = 4
    latent_dim: int = 128
    latent_hidden: int = 256
    latent_layers: int = 2
    field_hidden: int = 512
    field_layers: int = 3
    field_type: str = "gabor"  # or "mlp"
    gabor_scale: float = 8.0
    density_bias: float = 0.0  # initial pre-softplus density offset
    latent_gabor_scale: float = 8.0
    check_finite: bool = True

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def positional_encode(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """Concatenate ``x`` with sin/cos of ``x`` at frequencies 2^0*pi .. 2^(n-1)*pi.

    Output layout is ``[x, sin(f_0 x), .., sin(f_{n-1} x), cos(f_0 x), ..]``
    where each block spans all input dimensions, so the length is d*(2n+1).
    """
    if n_freq <= 0:
        return x
    freqs = math.pi * 2.0 ** torch.arange(n_freq, dtype=x.dtype, device=x.device)
    xf = (x[..., None, :] * freqs[:, None]).flatten(-2)
    return torch.cat([x, torch.sin(xf), torch.cos(xf)], dim=-1)


def contract(u: torch.Tensor) -> torch.Tensor:
    """Contract all of R^3 into the open ball of radius 2.

    Points inside the unit ball are left alone; outside, the radius r maps
    to 2 - 1/r along the same direction.
    """
    norm = torch.linalg.norm(u, dim=-1, keepdim=True)
    # clamp keeps the unused branch finite at the origin
    safe = norm.clamp_min(1.0)
    outside = (2.0 - 1.0 / safe) * (u / safe)
    return torch.where(norm <= 1.0, u, outside)


class GaborFilter(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, scale: float, alpha: float, beta: float = 1.0):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.mu = nn.Parameter(2.0 * torch.rand(out_dim, in_dim) - 1.0)
        gamma = torch.distributions.Gamma(alpha, beta).sample((out_dim,))
        self.gamma = nn.Parameter(gamma)
        with torch.no_grad():
            self.linear.weight.mul_(scale * torch.sqrt(gamma)[:, None])
            self.linear.bias.uniform_(-math.pi, math.pi)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # expanded |x - mu|^2 keeps this a matmul instead of a (N, H, d) temporary
        d2 = (x * x).sum(-1, keepdim=True) - 2.0 * x @ self.mu.T + (self.mu * self.mu).sum(-1)
        return torch.sin(self.linear(x)) * torch.exp(-0.5 * d2 * self.gamma)


class GaborNet(nn.Module):
    """Multiplicative filter network with Gabor filters.

    The first hidden activation is a filter of the input; every following
    hidden activation is a linear map of the previous one multiplied
    elementwise with a fresh filter of the raw input.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        out_dim: int,
        n_layers: int,
        scale: float = 8.0,
        weight_scale: float = 1.0,
        alpha: float = 6.0,
    ):
        super().__init__()
        per_layer = scale / math.sqrt(n_layers)
        self.filters = nn.ModuleList(
            [GaborFilter(in_dim, hidden, per_layer, alpha / n_layers) for _ in range(n_layers)]
        )
        self.linears = nn.ModuleList([nn.Linear(hidden, hidden) for _ in range(n_layers - 1)])
        bound = math.sqrt(weight_scale / hidden)
        for lin in self.linears:
            nn.init.uniform_(lin.weight, -bound, bound)
        self.output = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.filters[0](x)
        for filt, lin in zip(self.filters[1:], self.linears):
            h = lin(h) * filt(x)
        return self.output(h)


class PlainMLP(nn.Module):
    """Positionally encoded ReLU network, the fallback for the Gabor field."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, n_layers: int, n_freq: int = 8):
        super().__init__()
        self.n_freq = n_freq
        layers: list[nn.Module] = []
        width = in_dim * (2 * n_freq + 1)
        for _ in range(n_layers):
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(positional_encode(x, self.n_freq))


class CouplingLayer(nn.Module):
    """Affine coupling on one coordinate of a 3D point.

    The transformed coordinate is scaled by exp(s) and shifted by t, where
    (s, t) come from an MLP on the positionally encoded remaining two
    coordinates and the frame latent code.
    """

    def __init__(self, transform_dim: int, latent_dim: int, hidden: int, depth: int = 3, n_freq: int = 4):
        super().__init__()
        self.transform_dim = transform_dim
        self.keep_dims = [d for d in range(3) if d != transform_dim]
        self.n_freq = n_freq
        in_dim = 2 * (2 * n_freq + 1) + latent_dim
        layers: list[nn.Module] = []
        width = in_dim
        for _ in range(depth - 1):
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        self.hidden = nn.Sequential(*layers)
        self.head = nn.Linear(width, 2)
        # zero head => identity layer at init
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def scale_shift(self, x: torch.Tensor, psi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        kept = x[..., self.keep_dims]
        h = torch.cat([positional_encode(kept, self.n_freq), psi.expand(*kept.shape[:-1], psi.shape[-1])], dim=-1)
        st = self.head(self.hidden(h))
        return st[..., 0], st[..., 1]

    def _replace(self, x: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        cols = list(x.unbind(-1))
        cols[self.transform_dim] = value
        return torch.stack(cols, dim=-1)

    def forward(self, x: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        s, t = self.scale_shift(x, psi)
        return self._replace(x, x[..., self.transform_dim] * torch.exp(s) + t)

    def inverse(self, y: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        s, t = self.scale_shift(y, psi)
        return self._replace(y, (y[..., self.transform_dim] - t) * torch.exp(-s))


class MappingNetwork(nn.Module):
    """Stack of coupling layers shared by every frame; the latent picks the frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.check_finite = cfg.check_finite
        if cfg.n_coupling < 3:
            log.warning("with %d coupling layers some coordinates are never transformed", cfg.n_coupling)
        self.layers = nn.ModuleList(
            [
                CouplingLayer(SPLIT_CYCLE[k % 3], cfg.latent_dim, cfg.coupling_hidden, cfg.coupling_depth, cfg.n_freq)
                for k in range(cfg.n_coupling)
            ]
        )

    def _check(self, x: torch.Tensor, layer: int, direction: str) -> None:
        if self.check_finite and not torch.isfinite(x).all():
            raise NumericError(layer, direction)

    def forward(self, x: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x, psi)
            self._check(x, k, "to_canonical")
        return x

    def inverse(self, u: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        for k in reversed(range(len(self.layers))):
            u = self.layers[k].inverse(u, psi)
            self._check(u, k, "from_canonical")
        return u


class LatentGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = GaborNet(1, cfg.latent_hidden, cfg.latent_dim, cfg.latent_layers, scale=cfg.latent_gabor_scale)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.net(t[..., None])


class CanonicalField(nn.Module):
    """Density and colour over contracted canonical space."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.field_type == "gabor":
            self.net = GaborNet(3, cfg.field_hidden, 4, cfg.field_layers, scale=cfg.gabor_scale)
        elif cfg.field_type == "mlp":
            self.net = PlainMLP(3, cfg.field_hidden, 4, cfg.field_layers)
        else:
            raise ValueError(f"unknown field_type {cfg.field_type!r}")
        out_layer = [m for m in self.net.modules() if isinstance(m, nn.Linear)][-1]
        with torch.no_grad():
            out_layer.bias[0] += cfg.density_bias

    def forward(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(contract(u))
        return F.softplus(out[..., 0]), torch.sigmoid(out[..., 1:])


class OmniMotionModel(nn.Module):
    """Per-video motion representation.

    Frame ``i`` of an ``n_frames`` video has normalized time i/(n_frames-1);
    its latent code conditions the shared bijection between the local
    volume [-1,1]^2 x [0,2] and canonical space.
    """

    def __init__(self, n_frames: int, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.n_frames = n_frames
        self.latent = LatentGenerator(self.cfg)
        self.mapping = MappingNetwork(self.cfg)
        self.field = CanonicalField(self.cfg)

    def frame_times(self, frames: torch.Tensor) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return frames.to(dtype) / max(self.n_frames - 1, 1)

    def latent_codes(self, frames: torch.Tensor) -> torch.Tensor:
        return self.latent(self.frame_times(torch.as_tensor(frames)))

    def all_latents(self) -> torch.Tensor:
        return self.latent_codes(torch.arange(self.n_frames))

    def map_to_canonical(self, x: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        return self.mapping(x, psi)

    def map_from_canonical(self, u: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        return self.mapping.inverse(u, psi)

    def map_local_to_local(self, x: torch.Tensor, psi_i: torch.Tensor, psi_j: torch.Tensor) -> torch.Tensor:
        return self.mapping.inverse(self.mapping(x, psi_i), psi_j)

    def query_canonical(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.field(u)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "field": list(self.field.parameters()),
            "mapping": list(self.mapping.parameters()),
            "latent": list(self.latent.parameters()),
        }


def build_model(n_frames: int, cfg: ModelConfig | None = None, seed: int | None = None) -> OmniMotionModel:
    if seed is None:
        return OmniMotionModel(n_frames, cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return OmniMotionModel(n_frames, cfg)


# --- checkpoints -------------------------------------------------------------
# A checkpoint is a numpy .npz archive. Parameter arrays live under
# "param/<name>", optimizer tensors under "optim/<key>", and a JSON blob in
# "meta" carries the format version, configs, config hash and step.


def save_checkpoint(
    path: str | Path,
    model: OmniMotionModel,
    step: int = 0,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_frames": model.n_frames,
        "model_config": asdict(model.cfg),
        "config_hash": model.cfg.digest(),
        "step": int(step),
    }
    meta.update(extra_meta or {})
    arrays.update(extra_arrays or {})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[OmniMotionModel, dict, dict[str, np.ndarray]]:
    """Return ``(model, meta, extra_arrays)`` from a checkpoint file."""
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    meta = json.loads(bytes(data.pop("meta")).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig(**meta["model_config"])
    if cfg.digest() != meta["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    model = OmniMotionModel(meta["n_frames"], cfg)
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in data.items() if k.startswith("param/")}
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    extra = {k: v for k, v in data.items() if not k.startswith("param/")}
    return model, meta, extra
