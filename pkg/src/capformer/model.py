"""Autoencoder + encoder-only transformer that maps a window of cycles to the next capacity.

Data flow for one window of ``window`` cycles, each a ``n_features`` vector::

    X (window x n_features)
      -> encoder: affine -> ReLU -> affine           (window x latent_dim)
      -> affine projection to d_model, + sinusoidal positional encoding
      -> n_blocks x [post-norm MHA sublayer, post-norm ReLU FFN sublayer]
      -> last row -> affine head -> scalar capacity

The decoder (latent -> ReLU MLP -> n_features) runs alongside and feeds the
reconstruction term of the training loss.

Batches of windows are stacked row-wise into one ``(B*window, n_features)``
matrix; attention is restricted to row groups of size ``window`` so each
window only attends to itself.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 48
    latent_dim: int = 8
    window: int = 16
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_blocks: int = 2
    ae_hidden: int = 24
    recon_weight: float = 0.5
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for f in ("n_features", "latent_dim", "window", "d_model", "n_heads",
                  "d_ff", "n_blocks", "ae_hidden"):
            value = getattr(self, f)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"ModelConfig.{f} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for sinusoidal encoding, got {self.d_model}")
        if self.recon_weight < 0:
            raise ConfigError(f"recon_weight must be >= 0, got {self.recon_weight}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be > 0, got {self.ln_eps}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Expected shape of every learnable tensor, in canonical order."""
    q, h, l, d = cfg.n_features, cfg.ae_hidden, cfg.latent_dim, cfg.d_model
    shapes: dict[str, tuple[int, int]] = {
        "ae.enc1.w": (q, h), "ae.enc1.b": (1, h),
        "ae.enc2.w": (h, l), "ae.enc2.b": (1, l),
        "ae.dec1.w": (l, h), "ae.dec1.b": (1, h),
        "ae.dec2.w": (h, q), "ae.dec2.b": (1, q),
        "proj.w": (l, d), "proj.b": (1, d),
    }
    for k in range(cfg.n_blocks):
        pre = f"block{k}"
        for i in range(cfg.n_heads):
            for m in ("wq", "wk", "wv"):
                shapes[f"{pre}.head{i}.{m}"] = (d, cfg.d_k)
        shapes[f"{pre}.wo"] = (d, d)
        shapes[f"{pre}.ln1.gain"] = (1, d)
        shapes[f"{pre}.ln1.bias"] = (1, d)
        shapes[f"{pre}.ffn.w1"] = (d, cfg.d_ff)
        shapes[f"{pre}.ffn.b1"] = (1, cfg.d_ff)
        shapes[f"{pre}.ffn.w2"] = (cfg.d_ff, d)
        shapes[f"{pre}.ffn.b2"] = (1, d)
        shapes[f"{pre}.ln2.gain"] = (1, d)
        shapes[f"{pre}.ln2.bias"] = (1, d)
    shapes["head.w"] = (d, 1)
    shapes["head.b"] = (1, 1)
    return shapes


def param_group(name: str) -> str:
    """Coarse grouping used in gradient-audit tables (e.g. ``block0.attn.wq``)."""
    parts = name.split(".")
    if parts[0] == "ae":
        return "ae." + parts[1]
    if parts[0].startswith("block"):
        if parts[1].startswith("head"):
            return f"{parts[0]}.attn.{parts[2]}"
        return ".".join(parts[:2])
    return parts[0]


@dataclass
class ModelParams:
    """Learnable tensors keyed by name, plus the architecture they belong to."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        self.audit()

    def audit(self) -> None:
        expected = param_shapes(self.config)
        missing = set(expected) - set(self.tensors)
        extra = set(self.tensors) - set(expected)
        if missing or extra:
            raise ShapeError(f"parameter set mismatch: missing={sorted(missing)} "
                             f"unexpected={sorted(extra)}")
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if got != shape:
                raise ShapeError(f"parameter {name} has shape {got}, expected {shape}")

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def theta1(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("ae.")}

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(cfg: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            tensors[name] = np.ones(shape)
        elif leaf in ("b", "bias", "b1", "b2"):
            tensors[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(cfg, tensors)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even columns, cos on odd columns."""
    if d_model <= 0 or d_model % 2:
        raise ConfigError(f"positional encoding needs a positive even width, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    two_j = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_j / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _affine(x, p: Mapping, prefix: str):
    return nc.add(nc.matmul(x, p[prefix + ".w"]), p[prefix + ".b"])


def block_view(p: Mapping, k: int) -> dict:
    """Parameters of encoder block ``k`` with the ``blockK.`` prefix stripped."""
    pre = f"block{k}."
    return {name[len(pre):]: v for name, v in p.items() if name.startswith(pre)}


def _n_heads(block_params: Mapping) -> int:
    n = 0
    while f"head{n}.wq" in block_params:
        n += 1
    if n == 0:
        raise ShapeError("block parameters contain no attention heads")
    return n


def multi_head_attention(x, block_params: Mapping, group: int | None = None,
                         return_weights: bool = False):
    """Bidirectional multi-head scaled dot-product attention.

    ``x`` is ``(rows, d_model)``; rows are split into consecutive groups of
    ``group`` (default: all rows) and every query attends only to keys of its
    own group. With ``return_weights`` the per-head softmax matrices (each
    ``(rows, group)``) are returned too.
    """
    rows, width = nc.value_of(x).shape
    group = rows if group is None else group
    n_heads = _n_heads(block_params)
    wo = block_params["wo"]
    if nc.value_of(wo).shape != (width, width):
        raise ShapeError(f"wo has shape {nc.value_of(wo).shape}, expected {(width, width)}")
    heads, weights = [], []
    for i in range(n_heads):
        wq = block_params[f"head{i}.wq"]
        d_k = nc.value_of(wq).shape[1]
        q = nc.matmul(x, wq)
        k = nc.matmul(x, block_params[f"head{i}.wk"])
        v = nc.matmul(x, block_params[f"head{i}.wv"])
        scores = nc.scale(nc.grouped_matmul_bt(q, k, group), 1.0 / math.sqrt(d_k))
        attn = nc.softmax_rows(scores)
        weights.append(nc.value_of(attn))
        heads.append(nc.grouped_matmul(attn, v, group))
    out = nc.matmul(heads[0] if n_heads == 1 else nc.concat_cols(heads), wo)
    if return_weights:
        return out, weights
    return out


def feed_forward(x, block_params: Mapping):
    hidden = nc.relu(nc.add(nc.matmul(x, block_params["ffn.w1"]), block_params["ffn.b1"]))
    return nc.add(nc.matmul(hidden, block_params["ffn.w2"]), block_params["ffn.b2"])


def encoder_block(x, block_params: Mapping, group: int | None = None, eps: float = 1e-5):
    """Post-norm residual block: ``LN(x + MHA(x))`` then ``LN(u + FFN(u))``."""
    u = nc.layer_norm(nc.add(x, multi_head_attention(x, block_params, group)),
                      block_params["ln1.gain"], block_params["ln1.bias"], eps)
    return nc.layer_norm(nc.add(u, feed_forward(u, block_params)),
                         block_params["ln2.gain"], block_params["ln2.bias"], eps)


def encode(x, p: Mapping):
    return _affine(nc.relu(_affine(x, p, "ae.enc1")), p, "ae.enc2")


def decode(h, p: Mapping):
    return _affine(nc.relu(_affine(h, p, "ae.dec1")), p, "ae.dec2")


def autoencode(x, theta1: Mapping | ModelParams):
    """Latent code and reconstruction of one feature vector.

    Accepts a 1-D vector (or anything with ``.values``) and returns two 1-D
    arrays ``(h, x_rec)``.
    """
    p = theta1.tensors if isinstance(theta1, ModelParams) else theta1
    vec = np.asarray(getattr(x, "values", x), dtype=np.float64)
    q = p["ae.enc1.w"].shape[0]
    if vec.shape != (q,):
        raise ShapeError(f"autoencode: expected a vector of length {q}, got shape {vec.shape}")
    with nc.no_tape():
        h = encode(vec.reshape(1, q), p)
        x_rec = decode(h, p)
    return h.ravel(), x_rec.ravel()


# --------------------------------------------------------------------------
# full model
# --------------------------------------------------------------------------


def forward(p: Mapping, cfg: ModelConfig, x_rows):
    """Run stacked windows through the model.

    ``x_rows`` is ``(B*window, n_features)``. Returns ``(pred, x_rec)`` with
    ``pred`` of shape ``(B, 1)`` and ``x_rec`` shaped like ``x_rows``.
    """
    rows, q = nc.value_of(x_rows).shape
    w = cfg.window
    if q != cfg.n_features or rows % w or rows == 0:
        raise ShapeError(f"forward: input shape {(rows, q)} is not a stack of "
                         f"({w}, {cfg.n_features}) windows")
    n_windows = rows // w
    h = encode(x_rows, p)
    x_rec = decode(h, p)
    pe = np.tile(positional_encoding(w, cfg.d_model), (n_windows, 1))
    z = nc.add(_affine(h, p, "proj"), pe)
    for k in range(cfg.n_blocks):
        z = encoder_block(z, block_view(p, k), group=w, eps=cfg.ln_eps)
    last = nc.take_rows(z, np.arange(n_windows) * w + (w - 1))
    return _affine(last, p, "head"), x_rec


def _window_matrix(window, cfg: ModelConfig) -> np.ndarray:
    if isinstance(window, np.ndarray):
        arr = np.asarray(window, dtype=np.float64)
    else:
        arr = np.array([np.asarray(getattr(v, "values", v), dtype=np.float64) for v in window])
    if arr.shape != (cfg.window, cfg.n_features):
        raise ShapeError(f"window has shape {arr.shape}, expected "
                         f"({cfg.window}, {cfg.n_features})")
    return arr


def predict_next_capacity(window, params: ModelParams) -> float:
    """Scalar next-cycle capacity (normalized units) for one window."""
    arr = _window_matrix(window, params.config)
    with nc.no_tape():
        pred, _ = forward(params.tensors, params.config, arr)
    return float(pred[0, 0])


def predict_batch(params: ModelParams, windows: np.ndarray) -> np.ndarray:
    """Predictions for a ``(B, window, n_features)`` stack of windows."""
    cfg = params.config
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1:] != (cfg.window, cfg.n_features):
        raise ShapeError(f"predict_batch: got shape {windows.shape}")
    with nc.no_tape():
        pred, _ = forward(params.tensors, cfg, windows.reshape(-1, cfg.n_features))
    return pred[:, 0]


def attention_weights(params: ModelParams, window) -> list[list[np.ndarray]]:
    """Softmax matrices per block and head for one window (diagnostics)."""
    cfg = params.config
    arr = _window_matrix(window, cfg)
    p = params.tensors
    out = []
    with nc.no_tape():
        h = encode(arr, p)
        z = _affine(h, p, "proj") + positional_encoding(cfg.window, cfg.d_model)
        for k in range(cfg.n_blocks):
            bp = block_view(p, k)
            _, weights = multi_head_attention(z, bp, return_weights=True)
            out.append(weights)
            z = encoder_block(z, bp, eps=cfg.ln_eps)
    return out


def stack_windows(windows: Sequence) -> np.ndarray:
    """Stack window inputs (arrays or objects with ``.inputs``) into ``(B, w, q)``."""
    return np.stack([np.asarray(getattr(s, "inputs", s), dtype=np.float64) for s in windows])
