"""Shared feed-forward encoder and its meta-learned parameters.

The encoder maps raw feature vectors into a latent space where per-task
densities are fitted. Besides the network weights, the common parameter
set carries ``log_shrinkage``: the log of the covariance ridge added to
every adapted class covariance, meta-learned jointly with the weights
(log-parameterized so the ridge stays strictly positive under
unconstrained gradient steps).

Checkpoint format ("ENCK v1", little-endian throughout):

    magic   4 bytes  b"ENCK"
    u32     version (1)
    u32     input_dim
    u32     n_hidden
    u32[n]  hidden dims
    u32     latent_dim
    f64     dropout_rate
    f64     log_shrinkage
    then per layer, in order: weight matrix (fan_in*fan_out f64,
    row-major) followed by bias (fan_out f64)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

STD_FLOOR = 1e-6  # per-dimension clamp so constant dims stay finite
DEFAULT_SHRINKAGE = 0.1

_MAGIC = b"ENCK"
_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    latent_dim: int = 256
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ValueError("input_dim and latent_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.latent_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class CommonParams:
    """Everything meta-learning updates: weights, biases, log covariance ridge."""

    config: EncoderConfig
    weights: list[dc.Array]
    biases: list[dc.Array]
    log_shrinkage: dc.Array

    def parameters(self) -> list[dc.Array]:
        return [*self.weights, *self.biases, self.log_shrinkage]

    def shrinkage(self) -> dc.Array:
        return dc.exp(self.log_shrinkage)

    def copy(self) -> "CommonParams":
        return CommonParams(
            config=self.config,
            weights=[dc.Array(w.data, requires_grad=True) for w in self.weights],
            biases=[dc.Array(b.data, requires_grad=True) for b in self.biases],
            log_shrinkage=dc.Array(self.log_shrinkage.data, requires_grad=True),
        )


def init(config: EncoderConfig, seed: int) -> CommonParams:
    """Glorot-uniform weights, zero biases, ridge initialized to 0.1."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(dc.Array(rng.uniform(-a, a, size=(fan_in, fan_out)),
                                requires_grad=True))
        biases.append(dc.Array(np.zeros((1, fan_out)), requires_grad=True))
    return CommonParams(
        config=config,
        weights=weights,
        biases=biases,
        log_shrinkage=dc.Array(np.log(DEFAULT_SHRINKAGE), requires_grad=True),
    )


def embed(params: CommonParams, x: dc.Array, train_mode: bool = False,
          rng: np.random.Generator | None = None) -> dc.Array:
    """Forward pass Linear -> ReLU -> (Dropout) -> ... -> Linear.

    Deterministic when ``train_mode`` is False; dropout uses inverted
    scaling so evaluation needs no rescaling.
    """
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise dc.ShapeMismatchError(
            f"expected input of shape (B, {params.config.input_dim}), got {x.shape}")
    rate = params.config.dropout_rate
    if train_mode and rate > 0.0 and rng is None:
        raise ValueError("train_mode embedding with dropout needs an rng")

    n = x.shape[0]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = dc.add(dc.matmul(h, w), dc.tile_rows(b, n))
        if i < last:
            h = dc.relu(h)
            if train_mode and rate > 0.0:
                keep = 1.0 - rate
                mask = (rng.random(h.shape) < keep).astype(np.float64) / keep
                h = dc.mul(h, dc.Array(mask))
    return h


def standardize(support_z: dc.Array, query_z: dc.Array
                ) -> tuple[dc.Array, dc.Array, dc.Array]:
    """Divide support and query embeddings by the support's per-dim std.

    Std is the population form (divisor N_S) and clamped below at
    ``STD_FLOOR``; the clamp happens on the variance so the sqrt gradient
    stays finite when a dimension is constant. Query statistics never
    enter the scale. Returns (support, query, scale).
    """
    n_s = support_z.shape[0]
    if n_s < 2:
        raise ValueError(f"standardize needs at least 2 support rows, got {n_s}")
    mu = dc.reshape(dc.reduce_mean(support_z, axis=0), (1, support_z.shape[1]))
    centered = dc.sub(support_z, dc.tile_rows(mu, n_s))
    var = dc.reshape(dc.reduce_mean(dc.mul(centered, centered), axis=0),
                     (1, support_z.shape[1]))
    floor = STD_FLOOR * STD_FLOOR
    clamped = dc.add(dc.relu(dc.sub(var, floor)), dc.Array(np.full(var.shape, floor)))
    scale = dc.sqrt(clamped)  # == max(std, STD_FLOOR) exactly
    sup = dc.div(support_z, dc.tile_rows(scale, n_s))
    qry = dc.div(query_z, dc.tile_rows(scale, query_z.shape[0]))
    return sup, qry, scale


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(path, params: CommonParams) -> None:
    cfg = params.config
    parts = [
        _MAGIC,
        struct.pack("<III", _VERSION, cfg.input_dim, len(cfg.hidden_dims)),
        struct.pack(f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims) if cfg.hidden_dims else b"",
        struct.pack("<I", cfg.latent_dim),
        struct.pack("<d", cfg.dropout_rate),
        struct.pack("<d", float(params.log_shrinkage.data)),
    ]
    for w, b in zip(params.weights, params.biases):
        parts.append(w.data.astype("<f8").tobytes(order="C"))
        parts.append(b.data.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> CommonParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    version, input_dim, n_hidden = take("<III")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    hidden = take(f"<{n_hidden}I") if n_hidden else ()
    (latent_dim,) = take("<I")
    (dropout_rate,) = take("<d")
    (log_shrinkage,) = take("<d")
    cfg = EncoderConfig(input_dim=input_dim, hidden_dims=tuple(hidden),
                        latent_dim=latent_dim, dropout_rate=dropout_rate)

    def take_floats(count):
        nonlocal off
        need = count * 8
        if off + need > len(blob):
            raise CheckpointError(f"{path}: truncated parameter payload")
        vals = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += need
        return vals

    weights, biases = [], []
    for fan_in, fan_out in cfg.layer_dims:
        w = take_floats(fan_in * fan_out).reshape(fan_in, fan_out)
        b = take_floats(fan_out).reshape(1, fan_out)
        weights.append(dc.Array(w, requires_grad=True))
        biases.append(dc.Array(b, requires_grad=True))
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return CommonParams(config=cfg, weights=weights, biases=biases,
                        log_shrinkage=dc.Array(log_shrinkage, requires_grad=True))
