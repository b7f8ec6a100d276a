import numpy as np
import pytest
from helpers import finite_difference, rel_error

from skelad.errors import ConfigError
from skelad.projector import Projector, ProjectorConfig
from skelad.tensor import Tape, Tensor, activation, sum_all


class TestConfig:
    def test_identity_requires_matching_width(self):
        cfg = ProjectorConfig(kind="identity", latent_dim=4)
        with pytest.raises(ConfigError, match="identity projector"):
            cfg.check_width(6)
        cfg.check_width(4)

    def test_invalid_kind(self):
        with pytest.raises(ConfigError):
            ProjectorConfig(kind="mlp")

    def test_negative_blocks(self):
        with pytest.raises(ConfigError):
            ProjectorConfig(nonlinear_blocks=-1)


class TestForward:
    def test_identity_passthrough(self):
        rng = np.random.default_rng(0)
        proj = Projector(ProjectorConfig(kind="identity", latent_dim=5), 5, rng)
        x = Tensor(rng.normal(size=(3, 5)))
        assert proj.forward(x, "infer") is x

    def test_linear_with_identity_maps_is_passthrough(self):
        rng = np.random.default_rng(1)
        proj = Projector(ProjectorConfig(kind="linear", latent_dim=4), 4, rng)
        proj.hidden[0][0].data = np.eye(4)
        proj.hidden[0][1].data = np.zeros(4)
        proj.final_weight.data = np.eye(4)
        x = rng.normal(size=(3, 4))
        assert np.allclose(proj.forward(Tensor(x), "infer").data, x)

    @pytest.mark.parametrize("kind,blocks", [("identity", 0), ("linear", 0), ("nonlinear", 1), ("nonlinear", 2)])
    def test_output_width_is_latent_dim(self, kind, blocks):
        rng = np.random.default_rng(2)
        latent = 6 if kind == "identity" else 4
        cfg = ProjectorConfig(kind=kind, nonlinear_blocks=blocks, latent_dim=latent)
        proj = Projector(cfg, 6, rng)
        out = proj.forward(Tensor(rng.normal(size=(8, 6))), "train")
        assert out.data.shape == (8, latent)

    def test_infer_single_sample_batch_independent(self):
        rng = np.random.default_rng(3)
        proj = Projector(ProjectorConfig(kind="nonlinear", latent_dim=4), 6, rng)
        # make running stats non-trivial first
        proj.forward(Tensor(rng.normal(size=(16, 6))), "train")
        single = rng.normal(size=(1, 6))
        alone = proj.forward(Tensor(single), "infer").data
        batched = proj.forward(Tensor(np.vstack([single, rng.normal(size=(7, 6))])), "infer").data
        # batch contents never enter (running stats only); BLAS rounding may
        # differ by an ulp between batch shapes
        assert np.abs(alone[0] - batched[0]).max() < 1e-12
        again = proj.forward(Tensor(single), "infer").data
        assert np.array_equal(alone, again)

    def test_zero_weights_map_zero_to_zero(self):
        rng = np.random.default_rng(4)
        for kind, blocks in [("linear", 0), ("nonlinear", 1), ("nonlinear", 2)]:
            proj = Projector(ProjectorConfig(kind=kind, nonlinear_blocks=blocks, latent_dim=3), 5, rng)
            for weight, bias, _ in proj.hidden:
                weight.data = np.zeros_like(weight.data)
                bias.data = np.zeros_like(bias.data)
            proj.final_weight.data = np.zeros_like(proj.final_weight.data)
            out = proj.forward(Tensor(np.zeros((4, 5))), "train").data
            assert np.array_equal(out, np.zeros((4, 3)))

    def test_final_bias_enables_offset(self):
        rng = np.random.default_rng(5)
        proj = Projector(
            ProjectorConfig(kind="nonlinear", latent_dim=3, final_bias=True), 5, rng
        )
        assert proj.final_bias is not None
        proj.final_bias.data = np.array([1.0, 2.0, 3.0])
        proj.final_weight.data = np.zeros_like(proj.final_weight.data)
        out = proj.forward(Tensor(np.zeros((4, 5))), "infer").data
        assert np.allclose(out, [1.0, 2.0, 3.0])

    def test_nonlinear_gradients(self):
        rng = np.random.default_rng(6)
        proj = Projector(ProjectorConfig(kind="nonlinear", latent_dim=4), 6, rng)
        x = Tensor(rng.normal(size=(8, 6)), requires_grad=True)
        params = [x] + [p for _, p, _ in proj.named_params()]

        def loss():
            # tanh breaks the batch symmetry; a plain sum over a batchnorm
            # output has an exactly zero input gradient
            return sum_all(activation(proj.forward(x, "train", update_stats=False), "tanh"))

        with Tape() as tape:
            tape.backward(loss())
        fd = finite_difference(lambda: float(loss().data), [p.data for p in params])
        for p, ref in zip(params, fd):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            assert rel_error(grad, ref) < 1e-5
