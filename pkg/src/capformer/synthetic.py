"""Synthetic CC-CV charging cycles with quadratic capacity fade and regeneration bumps.

Each cell's clean capacity is ``c0 * (1 - a*t - b*t**2) + r_t`` where ``r_t``
jumps up at random regeneration events and decays geometrically afterwards.
The charging profiles are shaped by the cell's state of health: a degraded
cell reaches the voltage limit sooner (shorter constant-current phase),
charges in fewer samples and peaks in temperature earlier.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from .datapipe import CycleProfile
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    n_cells: int = 4
    n_cycles: int = 180
    samples_per_cycle: tuple[int, int] = (120, 240)
    nominal_capacity: float = 1.86
    fade_linear: float = 5e-4
    fade_quadratic: float = 6.5e-6
    cell_variation: float = 0.15
    regen_probability: float = 0.04
    regen_size: tuple[float, float] = (0.004, 0.015)
    regen_decay: float = 0.8
    capacity_noise: float = 0.002
    voltage_noise: float = 0.002
    current_noise: float = 0.005
    temperature_noise: float = 0.05
    charge_current: float = 1.5
    cutoff_current: float = 0.02
    voltage_limit: float = 4.2
    ambient_temperature: float = 24.0
    sample_period_s: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "samples_per_cycle", tuple(int(x) for x in self.samples_per_cycle))
        object.__setattr__(self, "regen_size", tuple(float(x) for x in self.regen_size))
        lo, hi = self.samples_per_cycle
        if self.n_cells < 1 or self.n_cycles < 2:
            raise ConfigError("need n_cells >= 1 and n_cycles >= 2")
        if not 16 <= lo <= hi:
            raise ConfigError(f"samples_per_cycle must satisfy 16 <= lo <= hi, got {(lo, hi)}")
        if not 0 <= self.regen_probability <= 1:
            raise ConfigError("regen_probability must lie in [0, 1]")
        if not 0 <= self.regen_decay < 1:
            raise ConfigError("regen_decay must lie in [0, 1)")
        for name in ("capacity_noise", "voltage_noise", "current_noise", "temperature_noise",
                     "cell_variation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_cycle"] = list(self.samples_per_cycle)
        d["regen_size"] = list(self.regen_size)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class RegenEvent:
    cycle_index: int
    jump: float


@dataclass
class SyntheticDataset:
    cells: dict[str, list[CycleProfile]]
    events: dict[str, list[RegenEvent]] = field(default_factory=dict)
    clean_capacity: dict[str, np.ndarray] = field(default_factory=dict)


def cell_ids(n_cells: int) -> list[str]:
    return [f"S{k + 1}" for k in range(n_cells)]


def _cycle_profile(cfg: SynthConfig, rng: np.random.Generator, cell: str, index: int,
                   capacity: float, health: float, c0: float) -> CycleProfile:
    lo, hi = cfg.samples_per_cycle
    n = max(lo, int(round(hi * capacity / c0)))
    n_cc = int(round(n * (0.3 + 0.45 * health)))
    n_cc = min(max(n_cc, 2), n - 2)
    n_cv = n - n_cc
    t = np.arange(n) * cfg.sample_period_s

    u = np.arange(n_cc) / (n_cc - 1)
    v_start = 3.45 + 0.25 * (1.0 - health)
    v_cc = v_start + (cfg.voltage_limit - v_start) * (0.7 * np.sqrt(u) + 0.3 * u ** 3)
    voltage = np.concatenate([v_cc, np.full(n_cv, cfg.voltage_limit)])

    tau = n_cv / np.log(cfg.charge_current / cfg.cutoff_current)
    k_cv = np.arange(1, n_cv + 1)
    current = np.concatenate([np.full(n_cc, cfg.charge_current),
                              cfg.charge_current * np.exp(-k_cv / tau)])

    peak = cfg.ambient_temperature + 6.0 + 3.0 * (1.0 - health)
    t_cc = cfg.ambient_temperature + (peak - cfg.ambient_temperature) * u ** 1.5
    settle = cfg.ambient_temperature + 0.5
    t_cv = settle + (peak - settle) * np.exp(-k_cv / (0.35 * n_cv))
    temperature = np.concatenate([t_cc, t_cv])

    voltage = voltage + rng.normal(0.0, cfg.voltage_noise, n) if cfg.voltage_noise else voltage
    current = current + rng.normal(0.0, cfg.current_noise, n) if cfg.current_noise else current
    if cfg.temperature_noise:
        temperature = temperature + rng.normal(0.0, cfg.temperature_noise, n)
    observed = capacity + (rng.normal(0.0, cfg.capacity_noise) if cfg.capacity_noise else 0.0)
    return CycleProfile(cell, index, t, current, voltage, temperature, observed)


def generate_synthetic(cfg: SynthConfig = SynthConfig(), seed: int = 0) -> SyntheticDataset:
    """Deterministic synthetic dataset of ``cfg.n_cells`` cells."""
    root = np.random.SeedSequence(seed)
    cycles = np.arange(cfg.n_cycles, dtype=np.float64)
    out = SyntheticDataset({})
    for cell, child in zip(cell_ids(cfg.n_cells), root.spawn(cfg.n_cells)):
        rng = np.random.default_rng(child)
        var = rng.uniform(-1.0, 1.0, size=3) * cfg.cell_variation
        a = cfg.fade_linear * (1.0 + var[0])
        b = cfg.fade_quadratic * (1.0 + var[1])
        c0 = cfg.nominal_capacity * (1.0 + 0.1 * var[2])
        base = c0 * (1.0 - a * cycles - b * cycles ** 2)
        if np.any(base <= 0):
            raise ConfigError(f"fade parameters drive cell {cell} capacity non-positive "
                              f"by cycle {int(np.argmax(base <= 0)) + 1}")
        regen = 0.0
        clean = np.empty(cfg.n_cycles)
        events = []
        for t in range(cfg.n_cycles):
            regen *= cfg.regen_decay
            if t > 0 and rng.random() < cfg.regen_probability:
                jump = c0 * rng.uniform(*cfg.regen_size)
                regen += jump
                events.append(RegenEvent(t + 1, jump))
            clean[t] = base[t] + regen
        profiles = [_cycle_profile(cfg, rng, cell, t + 1, clean[t], clean[t] / c0, c0)
                    for t in range(cfg.n_cycles)]
        out.cells[cell] = profiles
        out.events[cell] = events
        out.clean_capacity[cell] = clean
    return out


def check_horizon(cfg: SynthConfig, window: int, holdout: int) -> None:
    if cfg.n_cycles <= window + holdout:
        raise ConfigError(f"n_cycles={cfg.n_cycles} must exceed window + holdout "
                          f"= {window + holdout}")
