import numpy as np
import pytest
from helpers import finite_difference, rel_error

from skelad.errors import ConfigError, DimensionError
from skelad.tensor import (
    Adam,
    BatchNormState,
    Tape,
    Tensor,
    activation,
    add,
    affine,
    batchnorm,
    broadcast_nodes,
    channel_map,
    contract_nodes,
    contract_spatial,
    contract_temporal,
    flatten_nodes,
    matmul,
    mean_all,
    mean_pool_nodes,
    mse,
    scale,
    sum_all,
)

GRAD_TOL = 1e-6


def check_grads(build_loss, params, tol=GRAD_TOL, step=1e-5):
    """Compare tape gradients of build_loss() against finite differences."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    fd = finite_difference(lambda: float(build_loss().data), [p.data for p in params], step=step)
    for p, ref in zip(params, fd):
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert rel_error(grad, ref) < tol, f"gradient mismatch for shape {p.shape}"


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        check_grads(lambda: sum_all(matmul(a, b)), [a, b])


class TestContractSpatial:
    def test_identity_adjacency(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 4, 2)))
        a = Tensor(np.broadcast_to(np.eye(4), (3, 4, 4)).copy())
        assert np.allclose(contract_spatial(a, x).data, x.data)

    def test_joint_swap(self):
        a = Tensor(np.array([[[0.0, 1.0], [1.0, 0.0]]]))
        x = Tensor(np.array([[[1.0], [2.0]]]))
        assert np.array_equal(contract_spatial(a, x).data, [[[2.0], [1.0]]])

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 4, 4)))
        xs = rng.normal(size=(3, 4, 5, 2))  # canonical [T,V,N,C]
        batched = contract_spatial(a, Tensor(xs)).data
        for i in range(5):
            assert np.array_equal(batched[:, :, i], contract_spatial(a, Tensor(xs[:, :, i])).data)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            contract_spatial(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 4, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        check_grads(lambda: sum_all(contract_spatial(a, x)), [a, x])


class TestContractTemporal:
    def test_identity_adjacency(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(4, 3, 2)))
        a = Tensor(np.broadcast_to(np.eye(4), (3, 4, 4)).copy())
        assert np.allclose(contract_temporal(a, x).data, x.data)

    def test_frame_swap(self):
        a = Tensor(np.array([[[0.0, 1.0], [1.0, 0.0]]]))
        x = Tensor(np.array([[[1.0]], [[3.0]]]))
        assert np.array_equal(contract_temporal(a, x).data, [[[3.0]], [[1.0]]])

    def test_gradients(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 3, 2)), requires_grad=True)
        check_grads(lambda: sum_all(contract_temporal(a, x)), [a, x])

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.normal(size=(3, 4, 4)))
        xs = rng.normal(size=(4, 3, 5, 2))  # canonical [T,V,N,C]
        batched = contract_temporal(a, Tensor(xs)).data
        for i in range(5):
            assert np.array_equal(batched[:, :, i], contract_temporal(a, Tensor(xs[:, :, i])).data)


class TestContractNodes:
    def test_identity(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 4, 2)))
        a = Tensor(np.eye(12))
        assert np.allclose(contract_nodes(a, x).data, x.data)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 3, 4, 2)), requires_grad=True)  # T*V = 6
        check_grads(lambda: sum_all(contract_nodes(a, x)), [a, x])

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(20)
        a = Tensor(rng.normal(size=(6, 6)))
        xs = rng.normal(size=(2, 3, 5, 2))
        batched = contract_nodes(a, Tensor(xs)).data
        for i in range(5):
            assert np.allclose(batched[:, :, i], contract_nodes(a, Tensor(xs[:, :, i])).data)


class TestActivation:
    def test_relu(self):
        out = activation(Tensor([-1.0, 0.0, 2.0]), "relu")
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_tanh_at_zero(self):
        assert activation(Tensor([0.0]), "tanh").data[0] == 0.0

    def test_tanh_gradient_closed_form(self):
        x = Tensor([0.5], requires_grad=True)
        with Tape() as tape:
            tape.backward(sum_all(activation(x, "tanh")))
        expected = 1.0 - np.tanh(0.5) ** 2
        assert abs(x.grad[0] - expected) < 1e-12
        assert abs(expected - 0.786448) < 1e-6
        fd = finite_difference(lambda: float(np.tanh(x.data[0])), [x.data])[0]
        assert rel_error(x.grad, fd) < 1e-8

    def test_relu_subgradient_zero_at_kink(self):
        x = Tensor([0.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(sum_all(activation(x, "relu")))
        assert x.grad[0] == 0.0

    def test_identity(self):
        x = Tensor([1.0, -2.0])
        assert np.array_equal(activation(x, "identity").data, x.data)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            activation(Tensor([0.0]), "selu")


class TestBatchNorm:
    def test_standardized_batch_passes_through(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(16, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        state = BatchNormState(3)
        out = batchnorm(Tensor(x), state, "train")
        assert np.allclose(out.data, x, atol=1e-4)

    def test_train_output_standardized(self):
        rng = np.random.default_rng(10)
        x = rng.normal(loc=3.0, scale=5.0, size=(32, 4))
        state = BatchNormState(4)
        out = batchnorm(Tensor(x), state, "train").data
        assert np.abs(out.mean(axis=0)).max() < 1e-6
        assert np.abs(out.var(axis=0) - 1.0).max() < 1e-2

    def test_running_stats_updated_with_momentum(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(8, 2))
        state = BatchNormState(2)
        batchnorm(Tensor(x), state, "train")
        expected_mean = 0.1 * x.mean(axis=0)
        expected_var = 0.9 * 1.0 + 0.1 * x.var(axis=0) * 8 / 7
        assert np.allclose(state.running_mean, expected_mean)
        assert np.allclose(state.running_var, expected_var)

    def test_infer_uses_running_stats_only(self):
        state = BatchNormState(2)
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 0.25])
        x = np.array([[3.0, 0.0]])
        out = batchnorm(Tensor(x), state, "infer").data
        expected = (x - state.running_mean) / np.sqrt(state.running_var + 1e-5)
        assert np.allclose(out, expected)

    def test_infer_batch_size_independent(self):
        rng = np.random.default_rng(12)
        state = BatchNormState(3)
        state.running_mean = rng.normal(size=3)
        state.running_var = rng.uniform(0.5, 2.0, size=3)
        single = rng.normal(size=(1, 3))
        alone = batchnorm(Tensor(single), state, "infer").data
        stacked = batchnorm(Tensor(np.vstack([single, rng.normal(size=(4, 3))])), state, "infer").data
        assert np.array_equal(alone[0], stacked[0])

    def test_train_requires_two_samples(self):
        with pytest.raises(DimensionError):
            batchnorm(Tensor(np.zeros((1, 2))), BatchNormState(2), "train")

    def test_gradients(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
        state = BatchNormState(3)
        state.gamma.data = rng.uniform(0.5, 1.5, size=3)
        state.beta.data = rng.normal(size=3)
        weights = Tensor(rng.normal(size=(3, 1)), requires_grad=True)

        def loss():
            h = batchnorm(x, state, "train", update_stats=False)
            return sum_all(channel_map(activation(h, "tanh"), weights))

        check_grads(loss, [x, state.gamma, state.beta, weights], tol=1e-5)

    def test_infer_gradients(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        state = BatchNormState(3)
        state.running_mean = rng.normal(size=3)
        state.running_var = rng.uniform(0.5, 2.0, size=3)
        check_grads(lambda: sum_all(batchnorm(x, state, "infer")), [x, state.gamma, state.beta])


class TestSmallOps:
    def test_channel_map_gradients(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(2, 3, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        check_grads(lambda: sum_all(channel_map(x, w)), [x, w])

    def test_affine_and_add_and_scale_gradients(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        y = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def loss():
            return mean_all(scale(add(affine(x, w, b), y), 1.7))

        check_grads(loss, [x, w, b, y])

    def test_pool_flatten_broadcast_mse_gradients(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(3, 2, 4, 2)), requires_grad=True)  # [T,V,N,C]
        e = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        target = rng.normal(size=(2, 4, 3, 2))

        check_grads(lambda: sum_all(mean_pool_nodes(x)), [x])
        check_grads(lambda: sum_all(flatten_nodes(x)), [x])
        check_grads(lambda: mse(broadcast_nodes(e, 2, 4), target), [e])

    def test_mean_pool_values(self):
        x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 2, 2))
        out = mean_pool_nodes(x)
        assert np.allclose(out.data, x.data.mean(axis=(0, 1)))

    def test_flatten_matches_per_sample_order(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(2, 3, 4, 2))
        flat = flatten_nodes(Tensor(x)).data
        assert flat.shape == (4, 12)
        assert np.array_equal(flat[1], x[:, :, 1, :].reshape(-1))


class TestTape:
    def test_multi_consumer_accumulation(self):
        """A tensor feeding two consumers accumulates both contributions,
        matching a duplicate-input formulation."""
        rng = np.random.default_rng(18)
        x_data = rng.normal(size=(3, 3))
        b1 = Tensor(rng.normal(size=(3, 2)))
        b2 = Tensor(rng.normal(size=(3, 2)))

        shared = Tensor(x_data.copy(), requires_grad=True)
        with Tape() as tape:
            loss = add(sum_all(matmul(shared, b1)), sum_all(matmul(shared, b2)))
            tape.backward(loss)

        dup1 = Tensor(x_data.copy(), requires_grad=True)
        dup2 = Tensor(x_data.copy(), requires_grad=True)
        with Tape() as tape:
            loss = add(sum_all(matmul(dup1, b1)), sum_all(matmul(dup2, b2)))
            tape.backward(loss)

        assert np.array_equal(shared.grad, dup1.grad + dup2.grad)

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        out = matmul(x, Tensor(np.eye(2)))
        assert out.requires_grad is False

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = matmul(x, Tensor(np.eye(2)))
            with pytest.raises(DimensionError):
                tape.backward(out)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(19)
        a = Tensor(rng.normal(size=(4, 4)))
        x = Tensor(rng.normal(size=(4, 3)))
        first = matmul(a, x).data
        second = matmul(a, x).data
        assert np.array_equal(first, second)


class TestAdam:
    def test_zero_gradient_from_fresh_state(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.zeros(2)
        opt = Adam([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])
        assert np.array_equal(opt.m[0], np.zeros(2))
        assert np.array_equal(opt.v[0], np.zeros(2))

    def test_moments_decay_under_zero_gradient(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam([p], lr=0.1)
        opt.m[0][:] = 1.0
        opt.v[0][:] = 1.0
        p.grad = np.zeros(1)
        opt.step()
        assert np.allclose(opt.m[0], 0.9)
        assert np.allclose(opt.v[0], 0.999)

    def test_first_step_magnitude_is_lr(self):
        # hand evaluation: m_hat = v_hat = 1, so the step is lr/(1 + eps)
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.ones(1)
        opt = Adam([p], lr=0.1)
        opt.step()
        assert abs(-p.data[0] - 0.1) < 1e-8

    def test_constant_gradient_descends_monotonically(self):
        p = Tensor([3.0], requires_grad=True)
        opt = Adam([p], lr=0.05)
        previous = p.data[0]
        for _ in range(20):
            p.grad = np.ones(1)
            opt.step()
            assert p.data[0] < previous
            previous = p.data[0]

    def test_shape_mismatch(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.zeros(3)
        with pytest.raises(DimensionError):
            Adam([p], lr=0.1).step()

    def test_deterministic(self):
        def run():
            p = Tensor([1.0, -1.0], requires_grad=True)
            opt = Adam([p], lr=0.01)
            for i in range(5):
                p.grad = np.array([0.1 * i, -0.2])
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())
