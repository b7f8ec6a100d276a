"""Full model: encoder -> projector -> latent manifold (+ optional decoder),
parameter registry, and bit-exact checkpoint serialization.

Checkpoints are ``.npz`` archives written with fixed zip metadata so that
identical runs produce identical bytes. Entries: ``param/<name>`` and
``bn/<name>/{running_mean,running_var}`` arrays, ``center/coords``,
``norm/{median,iqr}``, and a ``meta`` JSON blob (configs, manifold,
center strategy, window stride, format version).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from . import manifolds
from .encoder import EncoderConfig, GcnDecoder, GcnEncoder
from .errors import ConfigError, StateError
from .projector import Projector, ProjectorConfig
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    projector: ProjectorConfig
    manifold: str = manifolds.EUCLIDEAN
    ae: bool = False

    def __post_init__(self):
        if self.manifold not in manifolds.MANIFOLDS:
            raise ConfigError(f"unknown manifold {self.manifold!r}")
        self.projector.check_width(self.encoder.embed_width)


@dataclass
class ForwardResult:
    embedding: Tensor  # [N, E] pooled encoder output
    latent: Tensor  # [N, n] projector output
    point: Tensor  # [N, n] latent mapped onto the manifold
    reconstruction: Tensor | None  # [T, V, N, 2] (canonical layout) in AE mode
    canonical_input: np.ndarray  # the input batch in canonical [T, V, N, 2] layout


class MotionModel:
    """Encoder + projector (+ decoder) built deterministically from a seed."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        rng = np.random.default_rng([int(seed), 0x6D6F6465])
        self.encoder = GcnEncoder(config.encoder, rng)
        self.projector = Projector(config.projector, config.encoder.embed_width, rng)
        self.decoder = GcnDecoder(config.encoder, rng) if config.ae else None

    @property
    def manifold(self) -> str:
        return self.config.manifold

    @staticmethod
    def _to_canonical(batch: np.ndarray) -> np.ndarray:
        """[N,T,V,C] batches become the op layout [T,V,N,C]."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4:
            raise ConfigError(f"expected a window batch [N,T,V,C], got shape {batch.shape}")
        return np.ascontiguousarray(batch.transpose(1, 2, 0, 3))

    def project_embedding(
        self, batch: np.ndarray, mode: str, update_stats: bool = True
    ) -> tuple[Tensor, Tensor]:
        """Encoder embedding and projector latent, without the manifold map."""
        x = Tensor(self._to_canonical(batch))
        embedding = self.encoder.forward(x)
        latent = self.projector.forward(embedding, mode, update_stats=update_stats)
        return embedding, latent

    def forward(self, batch: np.ndarray, mode: str, update_stats: bool = True) -> ForwardResult:
        canonical = self._to_canonical(batch)
        x = Tensor(canonical)
        embedding = self.encoder.forward(x)
        latent = self.projector.forward(embedding, mode, update_stats=update_stats)
        point = manifolds.to_manifold_t(latent, self.config.manifold)
        recon = self.decoder.forward(embedding) if self.decoder is not None else None
        return ForwardResult(embedding, latent, point, recon, canonical)

    def reconstruct(self, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
        """Decoded windows, returned in the public [N,T,V,2] layout."""
        if self.decoder is None:
            raise StateError("reconstruction requested but the model has no decoder (ae off)")
        recon = self.forward(batch, mode, update_stats=False).reconstruction.data
        return np.ascontiguousarray(recon.transpose(2, 0, 1, 3))

    def latent_points(self, batch: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Infer-mode manifold points for a window array, without a tape."""
        batch = np.asarray(batch, dtype=np.float64)
        chunks = [
            self.forward(batch[i : i + batch_size], "infer", update_stats=False).point.data
            for i in range(0, len(batch), batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def named_params(self) -> list[tuple[str, Tensor, bool]]:
        out = list(self.encoder.named_params())
        out.extend(self.projector.named_params())
        if self.decoder is not None:
            out.extend(self.decoder.named_params())
        return out

    def bn_states(self):
        return self.projector.bn_states()

    def zero_grad(self) -> None:
        for _, p, _ in self.named_params():
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """np.savez with fixed zip timestamps, so identical content gives
    identical bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(arrays[name]), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


@dataclass
class Checkpoint:
    model: MotionModel
    center: "manifolds.LatentPoint"
    center_strategy: str
    stats_median: np.ndarray
    stats_iqr: np.ndarray
    stride: int
    seed: int
    median_scores: dict[str, float]


def _model_meta(config: ModelConfig) -> dict:
    return {
        "encoder": {
            "frames": config.encoder.frames,
            "joints": config.encoder.joints,
            "channels": list(config.encoder.channels),
            "layer_count": config.encoder.layer_count,
            "kind": config.encoder.kind,
            "pool": config.encoder.pool,
        },
        "projector": {
            "kind": config.projector.kind,
            "nonlinear_blocks": config.projector.nonlinear_blocks,
            "latent_dim": config.projector.latent_dim,
            "final_bias": config.projector.final_bias,
        },
        "manifold": config.manifold,
        "ae": config.ae,
    }


def _config_from_meta(meta: dict) -> ModelConfig:
    enc = meta["encoder"]
    proj = meta["projector"]
    return ModelConfig(
        encoder=EncoderConfig(
            frames=enc["frames"],
            joints=enc["joints"],
            channels=tuple(enc["channels"]),
            layer_count=enc["layer_count"],
            kind=enc["kind"],
            pool=enc["pool"],
        ),
        projector=ProjectorConfig(
            kind=proj["kind"],
            nonlinear_blocks=proj["nonlinear_blocks"],
            latent_dim=proj["latent_dim"],
            final_bias=proj["final_bias"],
        ),
        manifold=meta["manifold"],
        ae=meta["ae"],
    )


def save_checkpoint(
    path,
    model: MotionModel,
    center: "manifolds.LatentPoint",
    center_strategy: str,
    stats_median: np.ndarray,
    stats_iqr: np.ndarray,
    stride: int,
    seed: int,
    median_scores: dict[str, float] | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor, _ in model.named_params():
        arrays[f"param/{name}"] = tensor.data
    for name, bn in model.bn_states():
        arrays[f"bn/{name}/running_mean"] = bn.running_mean
        arrays[f"bn/{name}/running_var"] = bn.running_var
    arrays["center/coords"] = center.coords
    arrays["norm/median"] = np.asarray(stats_median, dtype=np.float64)
    arrays["norm/iqr"] = np.asarray(stats_iqr, dtype=np.float64)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model": _model_meta(model.config),
        "center_strategy": center_strategy,
        "stride": int(stride),
        "seed": int(seed),
        "median_scores": median_scores or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays["meta"] = np.frombuffer(blob, dtype=np.uint8)
    _write_npz(path, arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as archive:
        data = {k: archive[k] for k in archive.files}
    if "meta" not in data:
        raise ConfigError(f"{path} is not a skelad checkpoint (missing meta entry)")
    meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint format version {version} does not match supported "
            f"version {CHECKPOINT_VERSION}"
        )
    config = _config_from_meta(meta["model"])
    model = MotionModel(config, seed=meta["seed"])
    for name, tensor, _ in model.named_params():
        key = f"param/{name}"
        if key not in data:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        if data[key].shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {data[key].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(data[key], dtype=np.float64)
    for name, bn in model.bn_states():
        bn.running_mean = np.ascontiguousarray(data[f"bn/{name}/running_mean"], dtype=np.float64)
        bn.running_var = np.ascontiguousarray(data[f"bn/{name}/running_var"], dtype=np.float64)
    center = manifolds.LatentPoint(config.manifold, data["center/coords"])
    return Checkpoint(
        model=model,
        center=center,
        center_strategy=meta["center_strategy"],
        stats_median=np.asarray(data["norm/median"], dtype=np.float64),
        stats_iqr=np.asarray(data["norm/iqr"], dtype=np.float64),
        stride=meta["stride"],
        seed=meta["seed"],
        median_scores={k: float(v) for k, v in meta["median_scores"].items()},
    )
