"""Cycle ingestion, downsampling, normalization, windowing and noise augmentation.

Feature vector layout (default ``ChannelLayout``)::

    [ V_1..V_16 | T_1..T_16 | I_1..I_15 | capacity ]     (48 entries)

Cycle CSV schema (one row per sample, header required)::

    cell_id,cycle_index,timestamp_s,current_a,voltage_v,temperature_c,capacity_ah
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError

CSV_COLUMNS = ("cell_id", "cycle_index", "timestamp_s", "current_a", "voltage_v",
               "temperature_c", "capacity_ah")
CHANNELS = ("voltage", "temperature", "current", "capacity")


@dataclass(frozen=True)
class ChannelLayout:
    """Number of downsampled points per measured channel."""

    voltage: int = 16
    temperature: int = 16
    current: int = 15

    def __post_init__(self):
        for name in ("voltage", "temperature", "current"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ChannelLayout.{name} must be >= 1")

    @property
    def n_features(self) -> int:
        return self.voltage + self.temperature + self.current + 1

    def slices(self) -> dict[str, slice]:
        v, t, i = self.voltage, self.temperature, self.current
        return {
            "voltage": slice(0, v),
            "temperature": slice(v, v + t),
            "current": slice(v + t, v + t + i),
            "capacity": slice(v + t + i, v + t + i + 1),
        }

    def counts(self) -> dict[str, int]:
        return {"voltage": self.voltage, "temperature": self.temperature,
                "current": self.current}


DEFAULT_LAYOUT = ChannelLayout()


@dataclass(eq=False)
class CycleProfile:
    """Raw samples of one charging cycle."""

    cell_id: str
    cycle_index: int
    timestamp: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temperature: np.ndarray
    capacity: float

    def __post_init__(self):
        self.timestamp = np.asarray(self.timestamp, dtype=np.float64)
        self.current = np.asarray(self.current, dtype=np.float64)
        self.voltage = np.asarray(self.voltage, dtype=np.float64)
        self.temperature = np.asarray(self.temperature, dtype=np.float64)
        self.capacity = float(self.capacity)
        lengths = {len(self.timestamp), len(self.current), len(self.voltage),
                   len(self.temperature)}
        if len(lengths) != 1 or 0 in lengths:
            raise DataError(
                f"cell {self.cell_id} cycle {self.cycle_index}: ragged or empty channels "
                f"(timestamp={len(self.timestamp)}, current={len(self.current)}, "
                f"voltage={len(self.voltage)}, temperature={len(self.temperature)})")
        if not self.capacity > 0:
            raise DataError(f"cell {self.cell_id} cycle {self.cycle_index}: "
                            f"capacity must be > 0, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.timestamp)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CycleProfile):
            return NotImplemented
        return (self.cell_id == other.cell_id and self.cycle_index == other.cycle_index
                and self.capacity == other.capacity
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("timestamp", "current", "voltage", "temperature")))


@dataclass(eq=False)
class FeatureVector:
    values: np.ndarray
    cycle_index: int
    cell_id: str = ""

    @property
    def capacity(self) -> float:
        return float(self.values[-1])


@dataclass(eq=False)
class WindowSample:
    """``window`` consecutive feature vectors and the next cycle's capacity."""

    inputs: np.ndarray
    target: float
    cell_id: str
    t: int

    @property
    def target_cycle(self) -> int:
        return self.t + 1


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8")
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return fh.read()
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_cycles(source) -> list[CycleProfile]:
    """Parse a cycle CSV into profiles sorted by ``(cell_id, cycle_index)``.

    ``source`` may be a path, raw bytes, or a binary/text file object.
    """
    reader = csv.DictReader(io.StringIO(_read_text(source)))
    header = reader.fieldnames or []
    for col in CSV_COLUMNS:
        if col not in header:
            raise FormatError(f"cycle CSV is missing column {col!r}")

    groups: dict[tuple[str, int], dict[str, list]] = {}
    channels = ("timestamp_s", "current_a", "voltage_v", "temperature_c")
    for lineno, row in enumerate(reader, start=2):
        cell = (row["cell_id"] or "").strip()
        try:
            cycle = int(row["cycle_index"])
        except (TypeError, ValueError):
            raise FormatError(f"line {lineno}: bad cycle_index {row['cycle_index']!r}") from None
        g = groups.setdefault((cell, cycle), {c: [] for c in channels + ("capacity_ah",)})
        for col in channels + ("capacity_ah",):
            raw = row.get(col)
            if raw is None or raw.strip() == "":
                continue  # absent sample surfaces as a ragged cycle below
            try:
                g[col].append(float(raw))
            except ValueError:
                raise DataError(f"cell {cell} cycle {cycle}, line {lineno}: "
                                f"non-numeric {col} value {raw!r}") from None

    profiles = []
    for (cell, cycle), g in sorted(groups.items()):
        lengths = {c: len(g[c]) for c in channels}
        if len(set(lengths.values())) != 1:
            raise DataError(f"cell {cell} cycle {cycle}: ragged channels {lengths}")
        ts = np.asarray(g["timestamp_s"])
        if np.any(np.diff(ts) <= 0):
            raise DataError(f"cell {cell} cycle {cycle}: timestamps are not strictly increasing")
        caps = set(g["capacity_ah"])
        if len(caps) != 1:
            raise DataError(f"cell {cell} cycle {cycle}: capacity_ah must be one constant "
                            f"value per cycle, found {len(caps)} distinct values")
        profiles.append(CycleProfile(cell, cycle, ts, g["current_a"], g["voltage_v"],
                                     g["temperature_c"], caps.pop()))
    return profiles


def write_cycles(profiles: Iterable[CycleProfile], dest) -> None:
    """Write profiles in the cycle-CSV schema (floats in round-trip ``repr`` form)."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write_cycles(profiles, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for p in sorted(profiles, key=lambda p: (p.cell_id, p.cycle_index)):
        cap = repr(p.capacity)
        for k in range(len(p)):
            writer.writerow((p.cell_id, p.cycle_index, repr(float(p.timestamp[k])),
                             repr(float(p.current[k])), repr(float(p.voltage[k])),
                             repr(float(p.temperature[k])), cap))


def group_by_cell(profiles: Iterable) -> dict[str, list]:
    """Map ``cell_id`` to its items ordered by ``cycle_index``."""
    out: dict[str, list] = {}
    for p in profiles:
        out.setdefault(p.cell_id, []).append(p)
    return {k: sorted(v, key=lambda p: p.cycle_index) for k, v in sorted(out.items())}


# --------------------------------------------------------------------------
# downsampling
# --------------------------------------------------------------------------


def subsample_indices(length: int, count: int) -> np.ndarray:
    """Evenly spaced indices ``round(i*(length-1)/(count-1))``, halves rounded up.

    First and last samples are always selected.
    """
    if count < 1 or length < count:
        raise DataError(f"cannot select {count} samples from a channel of length {length}")
    if count == 1:
        return np.zeros(1, dtype=np.intp)
    i = np.arange(count, dtype=np.int64)
    # exact integer form of floor(i*(L-1)/(k-1) + 1/2)
    return ((2 * i * (length - 1) + (count - 1)) // (2 * (count - 1))).astype(np.intp)


def downsample(cycle: CycleProfile, layout: ChannelLayout = DEFAULT_LAYOUT) -> FeatureVector:
    parts = []
    for name, count in layout.counts().items():
        channel = getattr(cycle, name)
        if len(channel) < count:
            raise DataError(f"cell {cycle.cell_id} cycle {cycle.cycle_index}: {name} channel "
                            f"has {len(channel)} samples, need at least {count}")
        parts.append(channel[subsample_indices(len(channel), count)])
    parts.append(np.array([cycle.capacity]))
    return FeatureVector(np.concatenate(parts), cycle.cycle_index, cycle.cell_id)


def downsample_cells(cells: Mapping[str, Sequence[CycleProfile]],
                     layout: ChannelLayout = DEFAULT_LAYOUT) -> dict[str, list[FeatureVector]]:
    return {cell: [downsample(c, layout) for c in cycles] for cell, cycles in cells.items()}


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-channel mean/std; every point of a channel shares one pair."""

    layout: ChannelLayout
    mean: dict[str, float]
    std: dict[str, float]
    degenerate: tuple[str, ...] = ()

    @property
    def warning(self) -> bool:
        return bool(self.degenerate)

    def _vectors(self) -> tuple[np.ndarray, np.ndarray]:
        mu = np.empty(self.layout.n_features)
        sd = np.empty(self.layout.n_features)
        for name, sl in self.layout.slices().items():
            mu[sl] = self.mean[name]
            sd[sl] = self.std[name]
        return mu, sd

    def apply(self, values: np.ndarray) -> np.ndarray:
        mu, sd = self._vectors()
        return (np.asarray(values, dtype=np.float64) - mu) / sd

    def invert(self, values: np.ndarray) -> np.ndarray:
        mu, sd = self._vectors()
        return np.asarray(values, dtype=np.float64) * sd + mu

    def normalize_capacity(self, c):
        return (np.asarray(c, dtype=np.float64) - self.mean["capacity"]) / self.std["capacity"]

    def denormalize_capacity(self, z):
        return np.asarray(z, dtype=np.float64) * self.std["capacity"] + self.mean["capacity"]

    def to_dict(self) -> dict:
        return {"layout": self.layout.counts(), "mean": dict(self.mean),
                "std": dict(self.std), "degenerate": list(self.degenerate)}

    @classmethod
    def from_dict(cls, data: Mapping) -> NormStats:
        return cls(ChannelLayout(**data["layout"]), {k: float(v) for k, v in data["mean"].items()},
                   {k: float(v) for k, v in data["std"].items()}, tuple(data["degenerate"]))


def compute_stats(vectors: Sequence[FeatureVector],
                  layout: ChannelLayout = DEFAULT_LAYOUT) -> NormStats:
    if not vectors:
        raise ContractError("cannot compute normalization statistics of an empty set")
    data = np.stack([v.values for v in vectors])
    if data.shape[1] != layout.n_features:
        raise ContractError(f"feature vectors have {data.shape[1]} entries, layout "
                            f"expects {layout.n_features}")
    mean, std, degenerate = {}, {}, []
    for name, sl in layout.slices().items():
        block = data[:, sl]
        mu = float(block.mean())
        sd = float(np.sqrt(np.mean((block - mu) ** 2)))
        if not sd > 0:
            sd = 1.0
            degenerate.append(name)
        mean[name], std[name] = mu, sd
    return NormStats(layout, mean, std, tuple(degenerate))


def normalize(vectors: Sequence[FeatureVector], stats: NormStats | None = None,
              layout: ChannelLayout = DEFAULT_LAYOUT) -> tuple[list[FeatureVector], NormStats]:
    """Standardize every entry with its channel's statistics.

    With ``stats=None`` the statistics are computed from ``vectors`` (training
    path) and returned; otherwise the given ones are reused.
    """
    if not vectors:
        raise ContractError("normalize: empty input")
    if stats is None:
        stats = compute_stats(vectors, layout)
    out = [FeatureVector(stats.apply(v.values), v.cycle_index, v.cell_id) for v in vectors]
    return out, stats


def denormalize(vectors: Sequence[FeatureVector], stats: NormStats) -> list[FeatureVector]:
    return [FeatureVector(stats.invert(v.values), v.cycle_index, v.cell_id) for v in vectors]


# --------------------------------------------------------------------------
# augmentation and windowing
# --------------------------------------------------------------------------


def augment(dataset: Sequence[Sequence[FeatureVector]], sigma: float,
            seed: int | np.random.SeedSequence) -> list[list[FeatureVector]]:
    """Copy of ``dataset`` with i.i.d. ``N(0, sigma^2)`` noise on every entry."""
    if sigma < 0:
        raise ConfigError(f"augmentation sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    out = []
    for seq in dataset:
        if not seq:
            out.append([])
            continue
        if sigma == 0:
            out.append([FeatureVector(v.values.copy(), v.cycle_index, v.cell_id) for v in seq])
            continue
        noise = rng.normal(0.0, sigma, size=(len(seq), len(seq[0].values)))
        out.append([FeatureVector(v.values + noise[k], v.cycle_index, v.cell_id)
                    for k, v in enumerate(seq)])
    return out


def build_windows(
    cells: Mapping[str, Sequence[FeatureVector]],
    window: int,
    holdout_last: int = 0,
    target_cell: str | None = None,
    targets: Mapping[str, Sequence[float]] | None = None,
) -> tuple[list[WindowSample], list[WindowSample]]:
    """Stride-1 windows per cell with next-cycle targets, split into train/test.

    Windows of ``target_cell`` whose target lies in its final ``holdout_last``
    cycles go to test; everything else trains. ``targets`` overrides the
    target capacities per cell (used to keep targets clean for noisy copies);
    by default the capacity entry of the next cycle's vector is used.
    """
    if window < 1 or holdout_last < 0:
        raise ConfigError("window must be >= 1 and holdout_last >= 0")
    if target_cell is not None and target_cell not in cells:
        raise ConfigError(f"target cell {target_cell!r} not found; available: {sorted(cells)}")
    train: list[WindowSample] = []
    test: list[WindowSample] = []
    for cell, seq in cells.items():
        n = len(seq)
        if n <= window + 1:
            raise DataError(f"cell {cell}: {n} cycles is too few for window {window}")
        if cell == target_cell and n <= window + holdout_last:
            raise DataError(f"cell {cell}: {n} cycles cannot hold window {window} "
                            f"plus a holdout of {holdout_last}")
        idx = [v.cycle_index for v in seq]
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise DataError(f"cell {cell}: cycle indices are not consecutive")
        data = np.stack([v.values for v in seq])
        tgt = (np.asarray(targets[cell], dtype=np.float64) if targets is not None
               else data[:, -1])
        if len(tgt) != n:
            raise ContractError(f"cell {cell}: {len(tgt)} targets for {n} cycles")
        first_test = n - holdout_last if cell == target_cell else n
        for end in range(window, n):  # `end` is the position of the target cycle
            sample = WindowSample(data[end - window:end].copy(), float(tgt[end]), cell,
                                  idx[end - 1])
            (test if end >= first_test else train).append(sample)
    return train, test


def training_corpus(
    cells: Mapping[str, Sequence[FeatureVector]],
    window: int,
    holdout_last: int,
    target_cell: str,
    sigmas: Sequence[float] = (0.001, 0.002, 0.005),
    seed: int = 0,
) -> tuple[list[WindowSample], list[WindowSample]]:
    """Original windows plus one noisy copy per sigma; targets stay clean.

    ``cells`` must already be normalized. Test windows come from the clean
    data only.
    """
    clean_targets = {c: [v.values[-1] for v in seq] for c, seq in cells.items()}
    train, test = build_windows(cells, window, holdout_last, target_cell, clean_targets)
    names = list(cells)
    children = np.random.SeedSequence(seed).spawn(len(sigmas))
    for sigma, child in zip(sigmas, children):
        noisy = dict(zip(names, augment([cells[c] for c in names], sigma, child)))
        extra, _ = build_windows(noisy, window, holdout_last, target_cell, clean_targets)
        train.extend(extra)
    return train, test
