"""The optimization loop: losses for one batch, Adam with per-group rates, checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from ..flows import CorrespondenceSet
from ..model import NumericError, OmniMotionModel, build_model, load_checkpoint, save_checkpoint
from ..render import Renderer
from ..video import VideoSequence, pixels_to_normalized
from .config import TrainConfig
from .losses import (
    loss_depth_range,
    loss_flow,
    loss_gradient_pairs,
    loss_photometric,
    loss_regularization,
    total_loss,
)
from .sampling import Batch, BatchSampler, refresh_error_maps, uniform_error_maps

logger = logging.getLogger(__name__)

GROUPS = ("field", "mapping", "latent")
LOSS_NAMES = ("total", "flow", "pho", "reg", "pgrad", "fgrad", "zrange")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; last good state saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


def compute_losses(
    model: OmniMotionModel,
    renderer: Renderer,
    batch: Batch,
    frames: torch.Tensor,
    cfg: TrainConfig,
    step: int,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Total loss and its components for one batch.

    ``frames`` is the (N, H, W, 3) video in [0, 1]. Flow terms are measured
    in pixels; the smoothness and depth-range terms in normalized units.
    """
    dtype = next(model.parameters()).dtype
    n, h, w = frames.shape[:3]
    fi = torch.as_tensor(batch.fi)
    fj = torch.as_tensor(batch.fj)
    src = torch.as_tensor(batch.src, dtype=dtype)
    dst = torch.as_tensor(batch.dst, dtype=dtype)
    psi = model.all_latents()
    out = renderer.render(pixels_to_normalized(src, h, w), psi[fi], psi[fj], "stratified", generator)

    scale = torch.tensor([(w - 1) / 2.0, (h - 1) / 2.0], dtype=dtype)
    flow_pred = (out["x_hat_j"][:, :2] + 1.0) * scale - src
    flow_obs = dst - src
    weights = torch.as_tensor(batch.weight, dtype=dtype)
    idx1 = torch.arange(len(batch))
    idx2 = torch.as_tensor(batch.partner)

    comps = {"flow": loss_flow(flow_pred, flow_obs, weights)}
    comps["fgrad"] = loss_gradient_pairs(flow_pred, flow_obs, idx1, idx2)

    xs, ys = batch.src[:, 0].astype(np.int64), batch.src[:, 1].astype(np.int64)
    color_obs = frames[batch.fi, ys, xs].to(dtype)
    comps["pho"] = loss_photometric(out["color"], color_obs)
    comps["pgrad"] = loss_gradient_pairs(out["color"], color_obs, idx1, idx2)

    z_terms = [out["x_j"][..., 2]]
    # acceleration penalty on a share of the rays whose source frame has both neighbours
    n_reg = max(1, int(round(cfg.reg_fraction * len(batch))))
    interior = torch.nonzero((fi[:n_reg] > 0) & (fi[:n_reg] < n - 1)).squeeze(-1)
    if len(interior):
        u = out["canonical"][interior]
        x = out["points"][interior]
        f = fi[interior]
        x_prev = model.map_from_canonical(u, psi[f - 1][:, None, :])
        x_next = model.map_from_canonical(u, psi[f + 1][:, None, :])
        comps["reg"] = loss_regularization(x_prev, x, x_next)
        z_terms += [x_prev[..., 2], x_next[..., 2]]
    else:
        comps["reg"] = torch.zeros((), dtype=dtype)
    comps["zrange"] = loss_depth_range(torch.cat([z.reshape(-1) for z in z_terms]))

    lam = {
        "pho": cfg.lambda_pho(step),
        "reg": cfg.lambda_reg,
        "pgrad": cfg.lambda_pgrad if cfg.use_photometric else 0.0,
        "fgrad": cfg.lambda_fgrad,
        "zrange": cfg.lambda_zrange,
    }
    return total_loss(comps, lam), comps


class DivergenceMonitor:
    """Warns once per episode when the loss stays above ``factor`` times its
    initial level for ``patience`` consecutive steps."""

    def __init__(self, factor: float, patience: int, warmup: int = 10):
        self.factor = factor
        self.patience = patience
        self.warmup = warmup
        self._initial: list[float] = []
        self.run = 0
        self.warned = False

    @property
    def baseline(self) -> float | None:
        return float(np.median(self._initial)) if len(self._initial) >= self.warmup else None

    def update(self, loss: float) -> bool:
        if self.baseline is None:
            self._initial.append(loss)
            return False
        if loss > self.factor * self.baseline:
            self.run += 1
        else:
            self.run = 0
            self.warned = False
        if self.run >= self.patience and not self.warned:
            self.warned = True
            logger.warning("loss above %.0fx its initial level for %d steps", self.factor, self.run)
            return True
        return False

    def state(self) -> dict:
        return {"initial": self._initial, "run": self.run, "warned": self.warned}

    def load(self, state: dict) -> None:
        self._initial = list(state["initial"])
        self.run = int(state["run"])
        self.warned = bool(state["warned"])


class Trainer:
    """Owns the model, optimizer, sampler and all RNG state of one run.

    A single seed drives model initialization, pair/pixel sampling and the
    stratified depth jitter, so two runs with equal seeds and inputs are
    identical on one worker.
    """

    def __init__(
        self,
        video: VideoSequence,
        cs: CorrespondenceSet,
        cfg: TrainConfig,
        out_dir: str | Path | None = None,
        model: OmniMotionModel | None = None,
    ):
        if len(cs) == 0:
            raise ValueError("empty correspondence set")
        if (cs.n_frames, cs.height, cs.width) != (video.n_frames, video.height, video.width):
            raise ValueError("correspondence set does not match the video")
        self.video = video
        self.cs = cs
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = model if model is not None else build_model(video.n_frames, cfg.model, seed=cfg.seed)
        self.renderer = Renderer(self.model, video.height, video.width, K=cfg.samples_per_ray)
        self.frames = torch.as_tensor(np.asarray(video.frames, dtype=np.float32))
        self.rng = np.random.default_rng(cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.sampler = BatchSampler(cs, cfg, self.rng)
        groups = self.model.parameter_groups()
        rates = cfg.learning_rates(0)
        self.optimizer = torch.optim.Adam([{"params": groups[g], "lr": rates[g], "name": g} for g in GROUPS])
        self.error_maps = uniform_error_maps(video.n_frames, video.height, video.width) if cfg.hard_mining else None
        self.error_stamp = 0
        self.step = 0
        self.history: list[dict] = []
        self.monitor = DivergenceMonitor(cfg.divergence_factor, cfg.divergence_patience)
        self._last_good = self._snapshot()

    # --- state -----------------------------------------------------------

    def _snapshot(self) -> dict:
        return {"model": copy.deepcopy(self.model.state_dict()), "step": self.step}

    def set_learning_rates(self, step: int) -> None:
        rates = self.cfg.learning_rates(step)
        for group in self.optimizer.param_groups:
            group["lr"] = rates[group["name"]]

    def _optimizer_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays, counts = {}, {}
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        for k, p in enumerate(params):
            st = self.optimizer.state.get(p)
            if not st:
                continue
            arrays[f"optim/{k}/exp_avg"] = st["exp_avg"].numpy()
            arrays[f"optim/{k}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
            counts[str(k)] = float(st["step"])
        return arrays, counts

    def save(self, path: str | Path) -> Path:
        arrays, counts = self._optimizer_arrays()
        arrays["rng/torch"] = self.generator.get_state().numpy()
        if self.error_maps is not None:
            arrays["error_maps"] = self.error_maps
        meta = {
            "train_config": _config_dict(self.cfg),
            "height": self.video.height,
            "width": self.video.width,
            "optim_steps": counts,
            "rng_numpy": self.rng.bit_generator.state,
            "error_stamp": self.error_stamp,
            "monitor": self.monitor.state(),
        }
        return save_checkpoint(path, self.model, self.step, arrays, meta)

    def resume(self, path: str | Path) -> None:
        """Restore parameters, optimizer moments, RNG streams and the step counter."""
        model, meta, extra = load_checkpoint(path)
        if model.n_frames != self.model.n_frames or model.cfg != self.model.cfg:
            raise ValueError("checkpoint does not match this run's model")
        self.model.load_state_dict(model.state_dict())
        self.step = int(meta["step"])
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        self.optimizer.state.clear()
        for key, count in meta.get("optim_steps", {}).items():
            p = params[int(key)]
            self.optimizer.state[p] = {
                "step": torch.tensor(count),
                "exp_avg": torch.from_numpy(extra[f"optim/{key}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(extra[f"optim/{key}/exp_avg_sq"].copy()),
            }
        self.set_learning_rates(self.step)
        if "rng/torch" in extra:
            self.generator.set_state(torch.from_numpy(extra["rng/torch"].copy()))
        if "rng_numpy" in meta:
            self.rng.bit_generator.state = meta["rng_numpy"]
        if "error_maps" in extra:
            self.error_maps = extra["error_maps"].copy()
        self.error_stamp = int(meta.get("error_stamp", 0))
        if "monitor" in meta:
            self.monitor.load(meta["monitor"])
        self._last_good = self._snapshot()

    # --- loop ------------------------------------------------------------

    def refresh_error_maps(self) -> None:
        self.error_maps = refresh_error_maps(self.renderer, self.cs, self.cfg.error_map_stride)
        self.error_stamp = self.step

    def train_step(self) -> dict[str, float]:
        step = self.step
        self.set_learning_rates(step)
        batch = self.sampler.sample(step, self.error_maps)
        self.optimizer.zero_grad(set_to_none=True)
        try:
            loss, comps = compute_losses(self.model, self.renderer, batch, self.frames, self.cfg, step, self.generator)
        except NumericError:
            loss, comps = torch.tensor(float("nan")), {}
        if not torch.isfinite(loss):
            self._abort(step)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        record = {"step": step, "total": loss.item()}
        record.update({k: v.item() for k, v in comps.items()})
        record["window"] = batch.window
        self.monitor.update(record["total"])
        return record

    def _abort(self, step: int):
        self.model.load_state_dict(self._last_good["model"])
        path = None
        if self.out_dir is not None:
            self.step = self._last_good["step"]
            path = self.save(self.out_dir / "last_good.ckpt")
            self.write_history()
        raise NonFiniteLossError(step, path)

    def run(self, steps: int | None = None, callback=None) -> OmniMotionModel:
        """Train until ``steps`` more iterations (default: up to ``total_steps``) are done."""
        end = self.cfg.total_steps if steps is None else self.step + steps
        cfg = self.cfg
        t0 = time.perf_counter()
        while self.step < end:
            if cfg.hard_mining and self.step > 0 and self.step % cfg.error_refresh_every == 0 and self.error_stamp != self.step:
                self.refresh_error_maps()
            record = self.train_step()
            self.history.append(record)
            if self.step % cfg.log_every == 0:
                self._last_good = self._snapshot()
                logger.info(
                    "step %d loss %.4f flow %.4f (%.1f s)", self.step, record["total"], record["flow"], time.perf_counter() - t0
                )
            if self.out_dir is not None and self.step % cfg.checkpoint_every == 0:
                self.save(self.out_dir / "checkpoint.ckpt")
                self.write_history()
            if callback is not None:
                callback(self, record)
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoint.ckpt")
            self.write_history()
        return self.model

    def write_history(self, path: str | Path | None = None) -> Path | None:
        """Append-free rewrite of the loss curve CSV (one row per step of this session)."""
        if path is None:
            if self.out_dir is None:
                return None
            path = self.out_dir / "loss.csv"
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["step", *LOSS_NAMES, "window"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            writer.writeheader()
            for rec in self.history:
                writer.writerow(rec)
        return path


def _config_dict(cfg: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def train(
    video: VideoSequence,
    cs: CorrespondenceSet,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    callback=None,
) -> Trainer:
    """Run a full optimization and return the trainer (model at ``trainer.model``)."""
    trainer = Trainer(video, cs, cfg, out_dir)
    if out_dir is not None:
        cfg.save(Path(out_dir) / "train.cfg")
    if resume is not None:
        trainer.resume(resume)
    trainer.run(callback=callback)
    return trainer
