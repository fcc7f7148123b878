import sys

import numpy as np
import pytest

from capformer.datapipe import WindowSample
from capformer.model import ModelConfig, init_params
from capformer.synthetic import SynthConfig, generate_synthetic

TOY_CONFIG = ModelConfig(n_features=10, latent_dim=3, window=4, d_model=8, n_heads=2, d_ff=12,
                         n_blocks=2, ae_hidden=6, recon_weight=0.5, seed=3)


def toy_batch(n: int = 2, cfg: ModelConfig = TOY_CONFIG, seed: int = 0) -> list[WindowSample]:
    rng = np.random.default_rng(seed)
    return [WindowSample(rng.normal(size=(cfg.window, cfg.n_features)), float(rng.normal()),
                         "toy", cfg.window + k) for k in range(n)]


def perturbed_params(cfg: ModelConfig = TOY_CONFIG, seed: int = 1):
    """Random init with non-trivial biases and norm parameters."""
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for name, v in params.tensors.items():
        if name.endswith((".b", ".bias", ".b1", ".b2")):
            v += rng.normal(scale=0.1, size=v.shape)
        elif name.endswith(".gain"):
            v += rng.normal(scale=0.1, size=v.shape)
    return params


@pytest.fixture
def toy_cfg():
    return TOY_CONFIG


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_cells=2, n_cycles=40, samples_per_cycle=(60, 90))
    return generate_synthetic(cfg, seed=5)


@pytest.fixture(scope="session")
def default_synth():
    return generate_synthetic(SynthConfig(), seed=0)


QUIET = dict(capacity_noise=0.0, voltage_noise=0.0, current_noise=0.0, temperature_noise=0.0,
             regen_probability=0.0)


def steady_window(window: int = 16) -> WindowSample:
    """First window of a fade-free, noise-free cell: ``window`` identical cycles."""
    from capformer.datapipe import build_windows
    from capformer.pipeline import prepare

    cfg = SynthConfig(n_cells=2, n_cycles=40, fade_linear=0.0, fade_quadratic=0.0, **QUIET)
    data = prepare(generate_synthetic(cfg, seed=0).cells, "S1", 10)
    train, _ = build_windows(data.normalized, window, 10, "S1")
    return train[0]


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
