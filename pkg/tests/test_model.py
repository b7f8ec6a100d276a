import numpy as np
import pytest

from skelad import manifolds
from skelad.encoder import EncoderConfig
from skelad.errors import ConfigError, StateError
from skelad.model import ModelConfig, MotionModel, load_checkpoint, save_checkpoint
from skelad.projector import ProjectorConfig


def tiny_model_config(manifold="euclidean", ae=False, projector="nonlinear", latent=4):
    encoder = EncoderConfig(frames=3, joints=4, channels=(2, 4, 4), layer_count=2)
    if projector == "identity":
        latent = encoder.embed_width
    return ModelConfig(
        encoder=encoder,
        projector=ProjectorConfig(kind=projector, latent_dim=latent),
        manifold=manifold,
        ae=ae,
    )


class TestModel:
    def test_build_is_seed_deterministic(self):
        a = MotionModel(tiny_model_config(), seed=7)
        b = MotionModel(tiny_model_config(), seed=7)
        for (name_a, pa, _), (name_b, pb, _) in zip(a.named_params(), b.named_params()):
            assert name_a == name_b
            assert np.array_equal(pa.data, pb.data)

    def test_forward_shapes(self):
        model = MotionModel(tiny_model_config(ae=True), seed=0)
        batch = np.random.default_rng(0).normal(size=(5, 3, 4, 2))
        result = model.forward(batch, "train")
        assert result.embedding.data.shape == (5, 4)
        assert result.latent.data.shape == (5, 4)
        assert result.point.data.shape == (5, 4)
        assert result.reconstruction.data.shape == (3, 4, 5, 2)  # canonical layout
        assert model.reconstruct(batch).shape == (5, 3, 4, 2)

    def test_manifold_constraint_on_points(self):
        rng = np.random.default_rng(1)
        batch = rng.normal(size=(6, 3, 4, 2))
        hyp = MotionModel(tiny_model_config("hyperbolic"), seed=1).latent_points(batch)
        assert np.linalg.norm(hyp, axis=1).max() < 1.0
        sph = MotionModel(tiny_model_config("spherical"), seed=1).latent_points(batch)
        assert np.abs(np.linalg.norm(sph, axis=1) - 1.0).max() < 1e-12

    def test_reconstruct_requires_decoder(self):
        model = MotionModel(tiny_model_config(ae=False), seed=0)
        with pytest.raises(StateError):
            model.reconstruct(np.zeros((1, 3, 4, 2)))

    def test_latent_points_chunking_invariant(self):
        model = MotionModel(tiny_model_config(), seed=2)
        batch = np.random.default_rng(2).normal(size=(7, 3, 4, 2))
        assert np.array_equal(
            model.latent_points(batch, batch_size=3), model.latent_points(batch, batch_size=1024)
        )


class TestCheckpoint:
    def _save(self, tmp_path, model, center_coords=None, manifold="euclidean"):
        coords = center_coords if center_coords is not None else np.zeros(4)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(
            path,
            model,
            manifolds.LatentPoint(manifold, coords),
            center_strategy="dynamic",
            stats_median=np.array([0.1, -0.2]),
            stats_iqr=np.array([1.5, 2.0]),
            stride=1,
            seed=3,
            median_scores={"hyp": 0.25},
        )
        return path

    def test_roundtrip_bit_exact(self, tmp_path):
        model = MotionModel(tiny_model_config(ae=True), seed=3)
        # give running stats non-default values
        model.forward(np.random.default_rng(3).normal(size=(8, 3, 4, 2)), "train")
        path = self._save(tmp_path, model, center_coords=np.array([0.1, 0.2, -0.3, 0.0]))
        loaded = load_checkpoint(path)

        originals = {name: p.data for name, p, _ in model.named_params()}
        for name, p, _ in loaded.model.named_params():
            assert np.array_equal(p.data, originals[name]), name
        for (name, bn), (_, bn_orig) in zip(loaded.model.bn_states(), model.bn_states()):
            assert np.array_equal(bn.running_mean, bn_orig.running_mean)
            assert np.array_equal(bn.running_var, bn_orig.running_var)
        assert np.array_equal(loaded.center.coords, [0.1, 0.2, -0.3, 0.0])
        assert loaded.center_strategy == "dynamic"
        assert loaded.stride == 1
        assert loaded.median_scores == {"hyp": 0.25}

        batch = np.random.default_rng(4).normal(size=(6, 3, 4, 2))
        assert np.array_equal(model.latent_points(batch), loaded.model.latent_points(batch))

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        model = MotionModel(tiny_model_config(), seed=5)
        p1 = tmp_path / "a.npz"
        p2 = tmp_path / "b.npz"
        for path in (p1, p2):
            save_checkpoint(
                path, model, manifolds.LatentPoint("euclidean", np.zeros(4)),
                center_strategy="static", stats_median=np.zeros(2), stats_iqr=np.ones(2),
                stride=1, seed=5,
            )
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        import json
        import zipfile

        model = MotionModel(tiny_model_config(), seed=6)
        path = self._save(tmp_path, model)
        with np.load(path) as archive:
            entries = {k: archive[k] for k in archive.files}
        meta = json.loads(bytes(entries["meta"]).decode())
        meta["format_version"] = 999
        entries["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **entries)
        with pytest.raises(ConfigError, match="version"):
            load_checkpoint(path)

    def test_non_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(ConfigError):
            load_checkpoint(path)
