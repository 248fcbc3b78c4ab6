"""Local training and server aggregation for the supported FL algorithms.

Supported kinds: fedavg, fedavgm (server momentum on the aggregate delta),
fedprox (proximal gradient addend), scaffold (control-variate correction,
option-II control update), moon (model-contrastive feature loss), feddecorr
(feature correlation penalty). All local training is plain SGD on mean
cross-entropy, with the kind's addend folded into the per-step gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from flgen.numerics import (
    Batch,
    ModelParams,
    backward,
    forward,
    sgd_step,
    softmax_cross_entropy,
    zeros_like_values,
)

ALGORITHM_KINDS = ("fedavg", "fedavgm", "fedprox", "scaffold", "moon", "feddecorr")


@dataclass(frozen=True)
class AlgorithmConfig:
    kind: str = "fedavg"
    local_iters: int = 200
    batch_size: int = 64
    lr: float = 0.01
    mu: float = 0.01
    server_momentum: float = 0.9
    tau: float = 0.5
    moon_weight: float = 1.0
    decorr_weight: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ALGORITHM_KINDS:
            raise ValueError(f"unknown algorithm kind {self.kind!r}")
        if self.local_iters < 1:
            raise ValueError("local_iters must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # lr = 0 is allowed: it freezes local training, used by degenerate checks.
        if self.lr < 0.0:
            raise ValueError("lr must be non-negative")
        if self.mu < 0.0:
            raise ValueError("mu must be non-negative")
        if not 0.0 <= self.server_momentum < 1.0:
            raise ValueError("server_momentum must be in [0, 1)")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.moon_weight < 0.0 or self.decorr_weight < 0.0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ClientTrainState:
    """Per-client persistent state: scaffold control variate, moon's previous
    local model. None means not yet initialized."""

    control_variate: np.ndarray | None = None
    previous_local_model: ModelParams | None = None


@dataclass
class ServerState:
    """Coordinator-side state, mutated only between rounds."""

    global_model: ModelParams
    momentum_buffer: np.ndarray = field(default=None)  # type: ignore[assignment]
    global_control: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.momentum_buffer is None:
            self.momentum_buffer = zeros_like_values(self.global_model)
        if self.global_control is None:
            self.global_control = zeros_like_values(self.global_model)


def fedprox_term(local_values: np.ndarray, global_values: np.ndarray, mu: float) -> np.ndarray:
    """Gradient of (mu/2)*||theta - theta_global||^2, i.e. mu*(theta - theta_global)."""
    local_values = np.asarray(local_values, dtype=np.float64)
    global_values = np.asarray(global_values, dtype=np.float64)
    if local_values.shape != global_values.shape:
        raise ValueError("parameter vectors differ in shape")
    if mu < 0.0:
        raise ValueError("mu must be non-negative")
    return mu * (local_values - global_values)


def scaffold_correction(grad: np.ndarray, c_k: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Corrected gradient: grad - c_k + c."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(c_k) or grad.shape != np.shape(c):
        raise ValueError("control variates differ in shape from the gradient")
    return grad - c_k + c


def scaffold_update_control(
    global_model: ModelParams,
    local_model: ModelParams,
    local_iters: int,
    lr: float,
    c_k: np.ndarray,
    c: np.ndarray,
) -> np.ndarray:
    """Option-II control update: c_k <- c_k - c + (theta_global - theta_local)/(E*lr)."""
    if local_iters * lr == 0.0:
        raise ValueError("scaffold control update undefined: local_iters * lr is zero")
    if local_model.layer_shapes != global_model.layer_shapes:
        raise ValueError("local and global model shapes differ")
    drift = (global_model.values - local_model.values) / (local_iters * lr)
    return np.asarray(c_k, dtype=np.float64) - np.asarray(c, dtype=np.float64) + drift


def scaffold_server_control(
    server: ServerState, control_deltas: Sequence[np.ndarray], num_clients: int
) -> None:
    """c <- c + (sum of selected clients' control deltas) / num_clients."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if control_deltas:
        server.global_control = server.global_control + sum(control_deltas) / num_clients


def _cosine_and_grad(z: np.ndarray, other: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cos(z, other) and its gradient in z."""
    zn = np.linalg.norm(z, axis=1)
    on = np.linalg.norm(other, axis=1)
    if np.any(zn == 0.0) or np.any(on == 0.0):
        raise ValueError("zero-norm feature vector in contrastive loss")
    cos = (z * other).sum(axis=1) / (zn * on)
    # d cos / dz = other/(|z||other|) - cos * z/|z|^2
    grad = other / (zn * on)[:, None] - (cos / zn**2)[:, None] * z
    return cos, grad


def _moon_batch(
    z: np.ndarray, z_global: np.ndarray, z_prev: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """Mean contrastive loss over rows and its gradient in z.

    Per row: -log( exp(cos(z, zg)/tau) / (exp(cos(z, zg)/tau) + exp(cos(z, zp)/tau)) ).
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    cos_g, dcos_g = _cosine_and_grad(z, z_global)
    cos_p, dcos_p = _cosine_and_grad(z, z_prev)
    s_g = cos_g / tau
    s_p = cos_p / tau
    m = np.maximum(s_g, s_p)
    log_denom = m + np.log(np.exp(s_g - m) + np.exp(s_p - m))
    losses = log_denom - s_g
    p_g = np.exp(s_g - log_denom)
    p_p = np.exp(s_p - log_denom)
    n = z.shape[0]
    dz = (((p_g - 1.0) / tau)[:, None] * dcos_g + (p_p / tau)[:, None] * dcos_p) / n
    return float(losses.mean()), dz


def moon_loss(
    z: np.ndarray, z_global: np.ndarray, z_prev: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """Contrastive loss for one feature vector; returns (loss, dloss/dz)."""
    z = np.asarray(z, dtype=np.float64)
    z_global = np.asarray(z_global, dtype=np.float64)
    z_prev = np.asarray(z_prev, dtype=np.float64)
    if z.ndim != 1 or z.shape != z_global.shape or z.shape != z_prev.shape:
        raise ValueError("expected three feature vectors of equal length")
    loss, dz = _moon_batch(z[None, :], z_global[None, :], z_prev[None, :], tau)
    return loss, dz[0]


def feddecorr_loss(features: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared Frobenius norm of the feature correlation matrix over h^2.

    Features are standardized per dimension (mean 0, std from the batch with
    a 1e-8 variance guard); returns (loss, dloss/dfeatures).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got {x.shape}")
    n, h = x.shape
    if n < 2:
        raise ValueError("feddecorr needs at least 2 samples")
    mu = x.mean(axis=0)
    centered = x - mu
    var = (centered * centered).mean(axis=0)
    s = np.sqrt(var + 1e-8)
    z = centered / s
    corr = z.T @ z / n
    loss = float((corr * corr).sum() / (h * h))
    # dL/dz = (4 / (n h^2)) z corr, then back through the standardization.
    g_z = (4.0 / (n * h * h)) * (z @ corr)
    g_mean = g_z.mean(axis=0)
    proj = (g_z * z).mean(axis=0)
    g_x = (g_z - g_mean - z * proj) / s
    return loss, g_x


def aggregate(local_models: Sequence[ModelParams], sizes: Sequence[float]) -> ModelParams:
    """Dataset-size weighted average of parameter vectors."""
    if not local_models:
        raise ValueError("no local models to aggregate")
    if len(local_models) != len(sizes):
        raise ValueError("sizes do not match models")
    shapes = local_models[0].layer_shapes
    for m in local_models:
        if m.layer_shapes != shapes:
            raise ValueError("local models differ in shape")
    w = np.asarray(sizes, dtype=np.float64)
    if np.any(w <= 0.0):
        raise ValueError("dataset sizes must be positive")
    w = w / w.sum()
    values = np.zeros_like(local_models[0].values)
    for wk, m in zip(w, local_models):
        values += wk * m.values
    return ModelParams(values, shapes)


def server_update(server: ServerState, delta: np.ndarray, cfg: AlgorithmConfig) -> ModelParams:
    """Apply the aggregate delta; fedavgm routes it through a momentum buffer."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != server.global_model.values.shape:
        raise ValueError("delta shape does not match the global model")
    if cfg.kind == "fedavgm":
        server.momentum_buffer = cfg.server_momentum * server.momentum_buffer + delta
        step = server.momentum_buffer
    else:
        step = delta
    server.global_model = ModelParams(
        server.global_model.values + step, server.global_model.layer_shapes
    )
    return server.global_model


def _minibatch_indices(
    n: int, batch_size: int, iters: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Epoch shuffling without replacement: chunks of a fresh permutation,
    reshuffled whenever the permutation is exhausted. The tail chunk of an
    epoch may be smaller than batch_size."""
    produced = 0
    while produced < iters:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if produced == iters:
                return
            yield perm[start:start + batch_size]
            produced += 1


def local_train(
    global_model: ModelParams,
    data: Batch,
    cfg: AlgorithmConfig,
    state: ClientTrainState,
    server: ServerState,
    rng: np.random.Generator,
) -> tuple[ModelParams, ClientTrainState]:
    """Run cfg.local_iters SGD steps on one dataset; see train_schedule."""
    return train_schedule(global_model, [(data, cfg.local_iters)], cfg, state, server, rng)


def train_schedule(
    global_model: ModelParams,
    phases: Sequence[tuple[Batch, int]],
    cfg: AlgorithmConfig,
    state: ClientTrainState,
    server: ServerState,
    rng: np.random.Generator,
) -> tuple[ModelParams, ClientTrainState]:
    """Sequential training phases sharing one model and one RNG stream.

    Total iterations across phases must equal cfg.local_iters (the scaffold
    control update depends on it). Returns the trained model and the updated
    client state; the server state is read, never written.
    """
    if not phases:
        raise ValueError("empty training schedule")
    total = sum(iters for _, iters in phases)
    if total != cfg.local_iters:
        raise ValueError(f"schedule covers {total} iterations, expected {cfg.local_iters}")

    use_prox = cfg.kind == "fedprox" and cfg.mu > 0.0
    use_moon = cfg.kind == "moon" and cfg.moon_weight > 0.0
    use_decorr = cfg.kind == "feddecorr" and cfg.decorr_weight > 0.0
    use_scaffold = cfg.kind == "scaffold"
    c_k = state.control_variate
    if use_scaffold and c_k is None:
        c_k = zeros_like_values(global_model)

    theta = global_model
    step = 0
    for data, iters in phases:
        if iters < 0:
            raise ValueError("negative phase length")
        if iters == 0:
            continue
        for idx in _minibatch_indices(len(data), cfg.batch_size, iters, rng):
            batch = Batch(data.inputs[idx], data.labels[idx])
            trace = forward(theta, batch)
            loss, dlogits = softmax_cross_entropy(trace.logits, batch.labels)
            dfeatures = None
            if use_moon:
                z_global = forward(global_model, batch).features
                if state.previous_local_model is not None:
                    z_prev = forward(state.previous_local_model, batch).features
                else:
                    z_prev = z_global
                moon_val, dz = _moon_batch(trace.features, z_global, z_prev, cfg.tau)
                loss += cfg.moon_weight * moon_val
                dfeatures = cfg.moon_weight * dz
            if use_decorr and len(batch) >= 2:
                # correlation is undefined for a single row; skip tail batches of 1
                dec_val, dx = feddecorr_loss(trace.features)
                loss += cfg.decorr_weight * dec_val
                dfeatures = dx * cfg.decorr_weight if dfeatures is None else dfeatures + cfg.decorr_weight * dx
            if not np.isfinite(loss):
                raise ValueError(f"non-finite loss at iteration {step}")
            grad = backward(theta, trace, dlogits, dfeatures)
            if use_prox:
                grad = grad + fedprox_term(theta.values, global_model.values, cfg.mu)
            if use_scaffold:
                grad = scaffold_correction(grad, c_k, server.global_control)
            theta = sgd_step(theta, grad, cfg.lr)
            step += 1

    new_control = state.control_variate
    if use_scaffold:
        new_control = scaffold_update_control(
            global_model, theta, cfg.local_iters, cfg.lr, c_k, server.global_control
        )
    new_prev = theta if cfg.kind == "moon" else state.previous_local_model
    return theta, ClientTrainState(control_variate=new_control, previous_local_model=new_prev)
