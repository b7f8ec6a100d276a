"""One-class training: contraction objective, center initialization and
updates, and the epoch loop.

The center is data, not a parameter: it is recomputed only at epoch
boundaries (never inside an epoch) and receives no gradient. Center
passes run the model in infer mode, so the center is a deterministic
function of the parameters rather than of batch composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import manifolds
from .errors import ConfigError, EmptySetError, NumericalError
from .model import ModelConfig, MotionModel
from .tensor import Adam, Tape, add, mean_all, mse, scale

STATIC = "static"
DYNAMIC = "dynamic"


@dataclass
class TrainConfig:
    model: ModelConfig
    epochs: int = 80
    learning_rate: float = 1e-4
    batch_size: int = 256
    weight_decay: float = 1e-5
    center_strategy: str = DYNAMIC
    gamma: float = 1.0
    phi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.center_strategy not in (STATIC, DYNAMIC):
            raise ConfigError(f"unknown center strategy {self.center_strategy!r}")


@dataclass
class CenterState:
    point: manifolds.LatentPoint
    strategy: str


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    embedding_variance: float
    center_norm: float


@dataclass
class TrainState:
    model: MotionModel
    center: CenterState
    epoch: int
    history: list[EpochStats] = field(default_factory=list)
    center_history: list[np.ndarray] = field(default_factory=list)


def compute_center(model: MotionModel, windows: np.ndarray) -> np.ndarray:
    """Manifold centroid of the training set's current latent points."""
    if len(windows) == 0:
        raise EmptySetError("cannot compute a center from an empty training set")
    points = model.latent_points(windows)
    return manifolds.centroid(points, model.manifold)


def warm_batchnorm(model: MotionModel, windows: np.ndarray, chunk: int = 1024) -> None:
    """Seed batchnorm running statistics with one train-mode pass.

    Virgin running stats (mean 0, var 1) map a ReLU-dead row to an exactly
    zero latent, which the spherical head cannot project; data-driven
    stats remove that hazard before the first center computation.
    """
    if not model.bn_states():
        return
    for sl in _batch_slices(len(windows), chunk):
        if len(sl) < 2:
            continue
        model.project_embedding(windows[sl], "train", update_stats=True)


def init_center(model: MotionModel, windows: np.ndarray, strategy: str) -> CenterState:
    """First center: warm the normalization statistics, then take the
    centroid of the latent points under those (now frozen) statistics."""
    if len(windows) == 0:
        raise EmptySetError("cannot compute a center from an empty training set")
    warm_batchnorm(model, windows)
    coords = compute_center(model, windows)
    return CenterState(manifolds.LatentPoint(model.manifold, coords), strategy)


def update_center(model: MotionModel, windows: np.ndarray, state: CenterState) -> CenterState:
    """Epoch-start refresh: static keeps the initialized center, dynamic
    recomputes the centroid under the current parameters."""
    if state.strategy == STATIC:
        return state
    coords = compute_center(model, windows)
    return CenterState(manifolds.LatentPoint(model.manifold, coords), state.strategy)


def _decay_value(model: MotionModel, alpha: float) -> float:
    return alpha * sum(float((p.data**2).sum()) for _, p, decay in model.named_params() if decay)


def objective_value(
    model: MotionModel, batch: np.ndarray, center: np.ndarray, config: TrainConfig
) -> float:
    """Pure train-mode objective (no tape, no state mutation); the finite-
    difference reference for :func:`objective_backward`."""
    result = model.forward(batch, "train", update_stats=False)
    dist = manifolds.distance_to_center(result.point.data, center, model.manifold)
    loss = float(dist.mean())
    if model.manifold == manifolds.SPHERICAL:
        loss *= config.phi
    if model.config.ae:
        loss += config.gamma * float(
            np.mean((result.reconstruction.data - result.canonical_input) ** 2)
        )
    return loss + _decay_value(model, config.weight_decay)


def objective_backward(
    model: MotionModel,
    batch: np.ndarray,
    center: np.ndarray,
    config: TrainConfig,
    update_stats: bool = True,
) -> tuple[float, np.ndarray]:
    """Evaluate the objective on one batch and leave gradients on the
    parameters. Returns (loss, manifold points) for diagnostics."""
    with Tape() as tape:
        result = model.forward(batch, "train", update_stats=update_stats)
        dist = manifolds.distance_to_center_t(result.point, center, model.manifold)
        loss = mean_all(dist)
        if model.manifold == manifolds.SPHERICAL:
            loss = scale(loss, config.phi)
        if model.config.ae:
            loss = add(loss, scale(mse(result.reconstruction, result.canonical_input), config.gamma))
        tape.backward(loss)

    value = float(loss.data)
    alpha = config.weight_decay
    if alpha > 0:
        value += _decay_value(model, alpha)
        for _, p, decay in model.named_params():
            if decay:
                p.accumulate_grad(2.0 * alpha * p.data)
    return value, result.point.data


def _batch_slices(n: int, batch_size: int) -> list[np.ndarray]:
    bounds = list(range(0, n, batch_size)) + [n]
    # a trailing singleton cannot be batch-normalized; fold it into the
    # previous batch when one exists
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def train(windows: np.ndarray, config: TrainConfig, epoch_callback=None) -> TrainState:
    """Run the full OCC loop on normalized training windows [N,T,V,2].

    ``epoch_callback(epoch, model, center)`` fires at each epoch start,
    after the center update and before any optimizer step.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 4 or len(windows) == 0:
        raise EmptySetError(f"training requires a non-empty [N,T,V,2] window array, got {windows.shape}")

    model = MotionModel(config.model, config.seed)
    optimizer = Adam([p for _, p, _ in model.named_params()], lr=config.learning_rate)
    shuffle_rng = np.random.default_rng([int(config.seed), 0x73687566])

    center = init_center(model, windows, config.center_strategy)
    state = TrainState(model=model, center=center, epoch=0)

    n = len(windows)
    slices = _batch_slices(n, config.batch_size)
    for epoch in range(config.epochs):
        center = update_center(model, windows, center)
        state.center = center
        state.center_history.append(center.point.coords.copy())
        if epoch_callback is not None:
            epoch_callback(epoch, model, center)

        order = shuffle_rng.permutation(n)
        total = 0.0
        points = []
        for b, sl in enumerate(slices):
            idx = order[sl]
            model.zero_grad()
            loss, batch_points = objective_backward(
                model, windows[idx], center.point.coords, config
            )
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            optimizer.step()
            total += loss * len(idx)
            points.append(batch_points)

        z = np.concatenate(points, axis=0)
        state.history.append(
            EpochStats(
                epoch=epoch,
                mean_loss=total / n,
                embedding_variance=float(z.var(axis=0).mean()),
                center_norm=float(np.linalg.norm(center.point.coords)),
            )
        )
        state.epoch = epoch + 1
    return state


def write_loss_history(path, history: list[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,embedding_variance,center_norm\n")
        for row in history:
            fh.write(
                f"{row.epoch},{row.mean_loss!r},{row.embedding_variance!r},{row.center_norm!r}\n"
            )
