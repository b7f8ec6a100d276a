"""Projection head mapping encoder embeddings into the latent space.

Three variants: identity (pass-through), linear (two stacked affine
maps), and nonlinear (repeated affine -> ReLU -> batchnorm blocks
followed by a final affine map). The final map carries no bias by
default, which removes the constant-shift escape route from the
contraction objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import BatchNormState, Tensor, activation, affine, batchnorm

IDENTITY = "identity"
LINEAR = "linear"
NONLINEAR = "nonlinear"
KINDS = (IDENTITY, LINEAR, NONLINEAR)


@dataclass
class ProjectorConfig:
    kind: str = NONLINEAR
    nonlinear_blocks: int = 1
    latent_dim: int = 8
    final_bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown projector kind {self.kind!r}")
        if self.nonlinear_blocks < 0:
            raise ConfigError(f"nonlinear_blocks must be >= 0, got {self.nonlinear_blocks}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")

    def check_width(self, embed_width: int) -> None:
        if self.kind == IDENTITY and self.latent_dim != embed_width:
            raise ConfigError(
                f"identity projector requires latent_dim == encoder embedding width "
                f"({embed_width}), got {self.latent_dim}"
            )


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Projector:
    def __init__(self, config: ProjectorConfig, embed_width: int, rng: np.random.Generator):
        config.check_width(embed_width)
        self.config = config
        self.embed_width = embed_width
        self.hidden: list[tuple[Tensor, Tensor, BatchNormState | None]] = []
        self.final_weight: Tensor | None = None
        self.final_bias: Tensor | None = None

        e, n = embed_width, config.latent_dim
        if config.kind == IDENTITY:
            return
        if config.kind == LINEAR:
            # first of the two affine maps keeps the embedding width
            self.hidden.append(
                (Tensor(_uniform(rng, e, (e, e)), requires_grad=True),
                 Tensor(np.zeros(e), requires_grad=True),
                 None)
            )
        else:
            for _ in range(config.nonlinear_blocks):
                self.hidden.append(
                    (Tensor(_uniform(rng, e, (e, e)), requires_grad=True),
                     Tensor(np.zeros(e), requires_grad=True),
                     BatchNormState(e))
                )
        self.final_weight = Tensor(_uniform(rng, e, (e, n)), requires_grad=True)
        if config.final_bias:
            self.final_bias = Tensor(np.zeros(n), requires_grad=True)

    def forward(self, x: Tensor, mode: str, update_stats: bool = True) -> Tensor:
        if self.config.kind == IDENTITY:
            return x
        for weight, bias, bn in self.hidden:
            x = affine(x, weight, bias)
            if bn is not None:
                x = activation(x, "relu")
                x = batchnorm(x, bn, mode, update_stats=update_stats)
        return affine(x, self.final_weight, self.final_bias)

    def named_params(self, prefix: str = "projector"):
        out = []
        for i, (weight, bias, bn) in enumerate(self.hidden):
            out.append((f"{prefix}.block{i}.weight", weight, True))
            out.append((f"{prefix}.block{i}.bias", bias, False))
            if bn is not None:
                out.append((f"{prefix}.block{i}.bn.gamma", bn.gamma, False))
                out.append((f"{prefix}.block{i}.bn.beta", bn.beta, False))
        if self.final_weight is not None:
            out.append((f"{prefix}.final.weight", self.final_weight, True))
        if self.final_bias is not None:
            out.append((f"{prefix}.final.bias", self.final_bias, False))
        return out

    def bn_states(self, prefix: str = "projector"):
        return [
            (f"{prefix}.block{i}.bn", bn)
            for i, (_, _, bn) in enumerate(self.hidden)
            if bn is not None
        ]
