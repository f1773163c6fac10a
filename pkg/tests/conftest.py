import numpy as np
import pytest
import torch

from omnitrack.model import ModelConfig
from omnitrack.synth import SceneSpec, SpriteSpec, make_scene


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        n_coupling=3,
        coupling_hidden=16,
        latent_dim=8,
        latent_hidden=16,
        field_hidden=16,
        field_layers=2,
        n_freq=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def randomize_heads(model, scale: float = 0.1, seed: int = 0) -> None:
    """Give every coupling head nonzero weights so the mapping is not the identity."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in model.mapping.layers:
            layer.head.weight.copy_(torch.randn(layer.head.weight.shape, generator=g) * scale)
            layer.head.bias.copy_(torch.randn(layer.head.bias.shape, generator=g) * scale)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def small_bundle():
    """24x24, 6 frames: panning background and one sprite moving 2 px/frame right."""
    spec = SceneSpec(
        height=24,
        width=24,
        n_frames=6,
        background_seed=1,
        camera_velocity=(0.5, 0.0),
        sprites=[SpriteSpec(size=(6, 6), depth=1, texture_seed=5, start=(2.0, 9.0), velocity=(2.0, 0.0))],
        tracks_per_layer=4,
        background_tracks=4,
    )
    return make_scene(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(cid: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[cid] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid:<4} {'PASS' if passed else 'FAIL'}  {detail}")
