"""Joint reconstruction + prediction objective and an Adam training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .checkpoint import save_checkpoint
from .datapipe import NormStats, WindowSample
from .errors import ConfigError, ContractError, NumericError
from .model import ModelConfig, ModelParams, forward, init_params, stack_windows

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "pred_loss", "recon_loss", "total_loss", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    shuffle_seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not isinstance(self.epochs, (int, np.integer)) or self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, (int, np.integer)) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("Adam betas must lie in [0, 1) and adam_eps must be > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def loss_terms(p: Mapping, cfg: ModelConfig, x_rows, targets, recon_weight: float):
    """``(total, prediction, reconstruction)`` for stacked windows.

    Prediction is the batch mean of squared target errors; reconstruction is
    the squared-error norm per reconstructed vector averaged over all
    ``batch * window`` vectors.
    """
    pred, x_rec = forward(p, cfg, x_rows)
    n_windows = pred.shape[0]
    pred_term = nc.scale(nc.sum_squares(nc.sub(pred, targets)), 1.0 / n_windows)
    recon_term = nc.scale(nc.sum_squares(nc.sub(x_rec, x_rows)),
                          1.0 / nc.value_of(x_rows).shape[0])
    total = nc.add(pred_term, nc.scale(recon_term, recon_weight))
    return total, pred_term, recon_term


def _batch_arrays(batch: Sequence[WindowSample], cfg: ModelConfig):
    if not batch:
        raise ContractError("joint_loss: empty batch")
    x = stack_windows(batch).reshape(-1, cfg.n_features)
    y = np.array([[s.target] for s in batch], dtype=np.float64)
    return x, y


def joint_loss_terms(batch: Sequence[WindowSample], params: ModelParams,
                     recon_weight: float | None = None) -> tuple[float, float, float]:
    lam = params.config.recon_weight if recon_weight is None else recon_weight
    if lam < 0:
        raise ConfigError(f"recon_weight must be >= 0, got {lam}")
    x, y = _batch_arrays(batch, params.config)
    with nc.no_tape():
        terms = loss_terms(params.tensors, params.config, x, y, lam)
    return tuple(float(t[0, 0]) for t in terms)


def joint_loss(batch: Sequence[WindowSample], params: ModelParams,
               recon_weight: float | None = None) -> float:
    return joint_loss_terms(batch, params, recon_weight)[0]


def loss_and_grads(batch_x: np.ndarray, batch_y: np.ndarray, params: ModelParams,
                   recon_weight: float):
    """Loss terms (floats) and gradients for every parameter."""
    with nc.Tape() as tape:
        watched = {k: tape.watch(v, k) for k, v in params.tensors.items()}
        total, pred, recon = loss_terms(watched, params.config, batch_x, batch_y, recon_weight)
    values = tuple(float(nc.value_of(t)[0, 0]) for t in (total, pred, recon))
    grads = nc.backward(tape, total)
    return values, grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    if set(tensors) != set(grads):
        raise ContractError(f"adam_step: gradient keys differ from parameters: "
                            f"{sorted(set(tensors) ^ set(grads))}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient of {name} has shape {g.shape}, "
                                f"parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    pred_loss: float
    recon_loss: float
    total_loss: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    heldout_recon: list[float] = field(default_factory=list)
    steps: int = 0
    checkpoint_path: str | None = None

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for e in self.epochs:
                writer.writerow((e.epoch, repr(float(e.pred_loss)), repr(float(e.recon_loss)),
                                 repr(float(e.total_loss)), f"{e.seconds:.3f}"))


def _check_finite(values: tuple[float, float, float], epoch: int, batch: int) -> None:
    for name, v in zip(("total", "prediction", "reconstruction"), values):
        if not np.isfinite(v):
            raise NumericError(f"non-finite {name} loss ({v}) at epoch {epoch}, batch {batch}")


def _check_params(params: ModelParams, step: int) -> None:
    for name, v in params.tensors.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"parameter {name} became non-finite at step {step}")


def train(
    train_windows: Sequence[WindowSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    init: ModelParams | None = None,
    heldout: Sequence[WindowSample] | None = None,
    checkpoint_path=None,
    norm_stats: NormStats | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Minimize the joint loss with mini-batch Adam; deterministic given seeds.

    ``heldout`` windows, if given, get their reconstruction loss recorded after
    every epoch. Epoch losses are batch-size weighted means of the per-batch
    values seen during the epoch.
    """
    if not train_windows:
        raise ContractError("train: no training windows")
    params = init.copy() if init is not None else init_params(model_cfg)
    if params.config != model_cfg:
        raise ConfigError("train: init params were built for a different ModelConfig")
    x_all = stack_windows(train_windows)
    if x_all.shape[1:] != (model_cfg.window, model_cfg.n_features):
        raise ContractError(f"train: windows have shape {x_all.shape[1:]}, model expects "
                            f"({model_cfg.window}, {model_cfg.n_features})")
    y_all = np.array([s.target for s in train_windows], dtype=np.float64)
    lam = model_cfg.recon_weight
    rng = np.random.default_rng(train_cfg.shuffle_seed)
    state = AdamState()
    report = TrainReport()
    n = len(train_windows)
    bs = train_cfg.batch_size

    for epoch in range(1, train_cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        for b, lo in enumerate(range(0, n, bs)):
            idx = order[lo:lo + bs]
            xb = x_all[idx].reshape(-1, model_cfg.n_features)
            yb = y_all[idx].reshape(-1, 1)
            try:
                values, grads = loss_and_grads(xb, yb, params, lam)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            _check_finite(values, epoch, b)
            sums += np.array(values) * len(idx)
            clip_global_norm(grads, train_cfg.clip_norm)
            adam_step(params, grads, state, train_cfg)
            report.steps += 1
            if report.steps % train_cfg.log_every == 0:
                _check_params(params, report.steps)
                logger.debug("step %d epoch %d loss %.6g", report.steps, epoch, values[0])
        total, pred, recon = (float(v) for v in sums / n)
        report.epochs.append(EpochStats(epoch, pred, recon, total, time.perf_counter() - start))
        if heldout:
            report.heldout_recon.append(joint_loss_terms(heldout, params, lam)[2])
        logger.info("epoch %d/%d total %.6g pred %.6g recon %.6g", epoch, train_cfg.epochs,
                    total, pred, recon)
    _check_params(params, report.steps)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, norm_stats)
        report.checkpoint_path = str(checkpoint_path)
    return params, report


# --------------------------------------------------------------------------
# gradient audit
# --------------------------------------------------------------------------

GRADCHECK_CONFIG = ModelConfig(n_features=10, latent_dim=3, window=4, d_model=8, n_heads=2,
                               d_ff=12, n_blocks=2, ae_hidden=6, recon_weight=0.5, seed=0)


def gradient_audit(cfg: ModelConfig = GRADCHECK_CONFIG, n_windows: int = 2, seed: int = 0,
                   step: float = 1e-5, tol: float = 1e-4) -> nc.GradCheckReport:
    """Finite-difference check of the full joint objective on random windows.

    Biases and norm parameters are jittered away from their zero/one init so
    that every gradient path is exercised.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg)
    for name, v in params.tensors.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") or leaf == "gain":
            v += rng.normal(scale=0.1, size=v.shape)
    x = rng.normal(size=(n_windows * cfg.window, cfg.n_features))
    y = rng.normal(size=(n_windows, 1))
    return nc.grad_check(lambda p: loss_terms(p, cfg, x, y, cfg.recon_weight)[0],
                         params.tensors, step=step, tol=tol)
