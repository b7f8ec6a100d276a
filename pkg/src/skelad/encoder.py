"""Graph-convolutional motion encoders and the mirrored decoder.

The main encoder stacks four separable layers, each computing
``sigma(A_s A_t X W)`` with the temporal contraction applied first, plus a
residual connection (a learnable 1x1 channel projection when widths
differ, added after the activation). The non-separable variant replaces
the two factor matrices with one full node adjacency over all T*V nodes
and reuses the same scaffold. The decoder un-pools an embedding back to
every node and runs the layer stack with reversed channel widths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    activation,
    add,
    affine,
    broadcast_nodes,
    channel_map,
    contract_nodes,
    contract_spatial,
    contract_temporal,
    flatten_nodes,
    mean_pool_nodes,
    separable_layer,
)

SEPARABLE = "separable"
PLAIN = "plain"

DEFAULT_CHANNELS = (2, 32, 16, 8, 8)
ADJ_INIT_NOISE = 0.01


@dataclass
class EncoderConfig:
    frames: int
    joints: int
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    layer_count: int = 4
    kind: str = SEPARABLE
    pool: str = "mean"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.kind not in (SEPARABLE, PLAIN):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.pool not in ("mean", "flatten"):
            raise ConfigError(f"unknown pooling {self.pool!r}")
        if len(self.channels) != self.layer_count + 1:
            raise ConfigError(
                f"channels {self.channels} must list {self.layer_count + 1} widths "
                f"for {self.layer_count} layers"
            )
        if self.channels[0] != 2:
            raise ConfigError(f"first channel width must be 2, got {self.channels[0]}")
        if self.frames < 1 or self.joints < 1:
            raise ConfigError("frames and joints must be positive")

    @property
    def embed_width(self) -> int:
        if self.pool == "mean":
            return self.channels[-1]
        return self.frames * self.joints * self.channels[-1]


def separable_adjacency_params(frames: int, joints: int) -> int:
    """Entries in one layer's (A_s, A_t) factor pair: T*V^2 + V*T^2."""
    return frames * joints * joints + joints * frames * frames


def plain_adjacency_params(frames: int, joints: int) -> int:
    """Entries in one full spatio-temporal adjacency: (V*T)^2."""
    return (frames * joints) ** 2


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _near_identity(rng: np.random.Generator, count: int, side: int) -> np.ndarray:
    base = np.broadcast_to(np.eye(side), (count, side, side)).copy()
    return base + rng.uniform(-ADJ_INIT_NOISE, ADJ_INIT_NOISE, size=base.shape)


class _LayerBase:
    """Shared residual/activation scaffold for one graph layer."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, act: str):
        self.act = act
        self.weight = Tensor(_uniform(rng, c_in, (c_in, c_out)), requires_grad=True)
        self.residual = (
            None
            if c_in == c_out
            else Tensor(_uniform(rng, c_in, (c_in, c_out)), requires_grad=True)
        )

    def _contract(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        h = activation(channel_map(self._contract(x), self.weight), self.act)
        res = x if self.residual is None else channel_map(x, self.residual)
        return add(h, res)

    def _shared_params(self, prefix: str):
        params = [(f"{prefix}.weight", self.weight, True)]
        if self.residual is not None:
            params.append((f"{prefix}.residual", self.residual, True))
        return params


class SeparableLayer(_LayerBase):
    def __init__(self, frames, joints, c_in, c_out, rng, act="relu"):
        self.a_s = Tensor(_near_identity(rng, frames, joints), requires_grad=True)
        self.a_t = Tensor(_near_identity(rng, joints, frames), requires_grad=True)
        super().__init__(c_in, c_out, rng, act)

    def _contract(self, x: Tensor) -> Tensor:
        # A_s A_t X evaluated right to left: temporal first, then spatial
        return contract_spatial(self.a_s, contract_temporal(self.a_t, x))

    def forward(self, x: Tensor) -> Tensor:
        # fused equivalent of the _LayerBase composition
        return separable_layer(self.a_t, self.a_s, self.weight, x, self.residual, self.act)

    def named_params(self, prefix: str):
        return [
            (f"{prefix}.a_s", self.a_s, True),
            (f"{prefix}.a_t", self.a_t, True),
        ] + self._shared_params(prefix)


class PlainLayer(_LayerBase):
    def __init__(self, frames, joints, c_in, c_out, rng, act="relu"):
        self.a_st = Tensor(_near_identity(rng, 1, frames * joints)[0], requires_grad=True)
        super().__init__(c_in, c_out, rng, act)

    def _contract(self, x: Tensor) -> Tensor:
        return contract_nodes(self.a_st, x)

    def named_params(self, prefix: str):
        return [(f"{prefix}.a_st", self.a_st, True)] + self._shared_params(prefix)


def _build_layers(config: EncoderConfig, channels, rng, final_act="relu"):
    cls = SeparableLayer if config.kind == SEPARABLE else PlainLayer
    layers = []
    n = len(channels) - 1
    for i in range(n):
        act = final_act if i == n - 1 else "relu"
        layers.append(cls(config.frames, config.joints, channels[i], channels[i + 1], rng, act))
    return layers


class GcnEncoder:
    """Layer stack plus pooling to a fixed-width embedding."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.layers = _build_layers(config, config.channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        if self.config.pool == "mean":
            return mean_pool_nodes(x)
        return flatten_nodes(x)

    def named_params(self, prefix: str = "encoder"):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}.layer{i}"))
        return out


class GcnDecoder:
    """Reversed encoder: un-pool the embedding to all nodes, then run the
    layer stack with reversed channel widths down to 2 coordinate channels.
    The last layer keeps the identity activation so outputs are signed."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        channels = tuple(reversed(config.channels))
        self.unpool = Tensor(
            _uniform(rng, config.embed_width, (config.embed_width, channels[0])),
            requires_grad=True,
        )
        self.layers = _build_layers(config, channels, rng, final_act="identity")

    def forward(self, embedding: Tensor) -> Tensor:
        x = affine(embedding, self.unpool)
        x = broadcast_nodes(x, self.config.frames, self.config.joints)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def named_params(self, prefix: str = "decoder"):
        out = [(f"{prefix}.unpool", self.unpool, True)]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}.layer{i}"))
        return out
