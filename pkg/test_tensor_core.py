"""
Pruebas del núcleo de tensores y de las capas diferenciables
"""
import numpy as np
import pytest

from core.errors import NumericError, ShapeError
from core import layers
from core.layers import (
    BatchNormState,
    batchnorm3d,
    conv3d,
    interpolation_matrix,
    maxpool3d,
    set_num_threads,
    upsample_trilinear,
)
from core.tensor import (
    Tensor,
    activation,
    backward,
    combine,
    frozen,
    gradcheck,
    multiply,
    no_grad,
    pairwise_sum,
    reduce,
    tensor_new,
)
from models import ConvSpec

TOL = 1e-6


def weighted(out: Tensor, r: np.ndarray) -> Tensor:
    """Suma ponderada: evita gradientes triviales de una suma simple"""
    return reduce(multiply(out, Tensor(r, dtype="f64")), "sum")


class TestTensorNew:
    def test_deterministic_fill(self):
        """Misma semilla, mismos valores"""
        a = tensor_new((2, 3), "f64", "uniform", seed=3, lo=-1.0, hi=1.0)
        b = tensor_new((2, 3), "f64", "uniform", seed=3, lo=-1.0, hi=1.0)
        assert np.array_equal(a.data, b.data)
        assert a.dtype == "f64"
        assert np.all((a.data >= -1.0) & (a.data < 1.0))

    def test_constant_and_zeros(self):
        assert np.all(tensor_new((4,), fill="constant", value=2.5).data == 2.5)
        assert not tensor_new((1, 1, 2, 2, 2)).data.any()

    def test_invalid_extents(self):
        with pytest.raises(ShapeError):
            tensor_new((2, 0))

    def test_unknown_dtype_and_fill(self):
        with pytest.raises(ShapeError):
            tensor_new((2,), dtype="f16")
        with pytest.raises(ValueError):
            tensor_new((2,), fill="bogus")


class TestReductions:
    def test_pairwise_sum(self):
        assert pairwise_sum(np.arange(7, dtype=np.float64)) == 21.0
        values = np.random.default_rng(0).normal(size=(3, 101))
        assert np.allclose(pairwise_sum(values), values.sum(axis=-1))

    def test_reduce_axes(self):
        x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
        out = reduce(x, "mean", axes=(1,))
        assert out.shape == (2, 4)
        assert np.allclose(out.data, x.data.mean(axis=1))
        assert reduce(x, "sum").item() == 276.0

    def test_reduce_mean_gradcheck(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), dtype="f64")
        r = rng.normal(size=(2, 4))
        assert gradcheck(lambda t: weighted(reduce(t, "mean", axes=(1,)), r), x) < TOL


class TestCombine:
    def test_concat_channels(self):
        a = tensor_new((1, 2, 3, 3, 3), fill="constant", value=1.0)
        b = tensor_new((1, 1, 3, 3, 3), fill="constant", value=2.0)
        out = combine(a, b, "concat_channels")
        assert out.shape == (1, 3, 3, 3, 3)
        assert np.all(out.data[:, 2] == 2.0)

    def test_shape_mismatch(self):
        a = tensor_new((1, 1, 3, 3, 3))
        with pytest.raises(ShapeError):
            combine(a, tensor_new((1, 1, 3, 3, 2)), "add")
        with pytest.raises(ShapeError):
            combine(a, tensor_new((1, 1, 2, 3, 3)), "concat_channels")

    def test_concat_gradcheck(self, rng):
        b = Tensor(rng.normal(size=(1, 1, 2, 2, 2)), dtype="f64")
        r = rng.normal(size=(1, 3, 2, 2, 2))
        x = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), dtype="f64")
        assert gradcheck(lambda t: weighted(combine(t, b, "concat_channels"), r), x) < TOL


class TestBackward:
    def test_shared_input(self):
        """y = a*a + a acumula ambos caminos: dy/da = 2a + 1"""
        a = Tensor(np.array([2.0]), requires_grad=True, dtype="f64")
        y = combine(multiply(a, a), a, "add")
        backward(reduce(y, "sum"))
        assert np.allclose(a.grad, [5.0])

    def test_gradients_accumulate(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype="f64")
        backward(reduce(a * 3.0, "sum"))
        backward(reduce(a * 3.0, "sum"))
        assert np.allclose(a.grad, [6.0, 6.0])

    def test_non_scalar_loss(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(a * 2.0)

    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = a * 2.0
        assert out.node is None
        assert not out.requires_grad

    def test_frozen_parameters_get_no_gradient(self):
        """Un parámetro congelado al registrar la operación no recibe gradiente después"""
        w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype="f64")
        v = Tensor(np.array([4.0, 5.0, 6.0]), requires_grad=True, dtype="f64")
        with frozen([w]):
            loss = reduce(multiply(w, v), "sum")
        assert w.requires_grad
        backward(loss)
        assert w.grad is None
        assert np.allclose(v.grad, w.data)


class TestActivations:
    @pytest.mark.parametrize("kind", ["relu", "leaky_relu", "sigmoid"])
    def test_gradcheck(self, rng, kind):
        data = rng.uniform(0.1, 2.0, size=(1, 2, 2, 3, 3)) * rng.choice([-1.0, 1.0], size=(1, 2, 2, 3, 3))
        r = rng.normal(size=data.shape)
        x = Tensor(data, dtype="f64")
        assert gradcheck(lambda t: weighted(activation(t, kind), r), x) < TOL

    def test_sigmoid_open_interval(self):
        out = activation(Tensor(np.array([-1000.0, 0.0, 1000.0]), dtype="f32"), "sigmoid")
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)
        assert out.data[1] == pytest.approx(0.5)


class TestConv3d:
    SPEC = ConvSpec(in_channels=2, out_channels=3, kernel=(3, 2, 3), stride=(2, 1, 2),
                    padding=(1, 0, 1), has_bias=True)

    def _inputs(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 5, 4, 6)), dtype="f64")
        w = Tensor(rng.normal(size=self.SPEC.weight_shape), dtype="f64")
        b = Tensor(rng.normal(size=(3,)), dtype="f64")
        return x, w, b

    def test_output_extent(self, rng):
        x, w, b = self._inputs(rng)
        assert conv3d(x, self.SPEC, w, b).shape == (2, 3, 3, 3, 3)

    def test_matches_direct_sum(self, rng):
        """Una salida calculada a mano con el relleno de ceros"""
        x, w, b = self._inputs(rng)
        out = conv3d(x, self.SPEC, w, b).data
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (0, 0), (1, 1)))
        # salida (n=1, c=2, z=1, y=2, x=1): ventana z 2..4, y 2..3, x 2..4 sobre la entrada rellena
        window = xp[1, :, 2:5, 2:4, 2:5]
        expected = (w.data[2] * window).sum() + b.data[2]
        assert out[1, 2, 1, 2, 1] == pytest.approx(expected)

    def test_matches_loop_oracle(self, rng):
        x, w, b = self._inputs(rng)
        out = conv3d(x, self.SPEC, w, b).data
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (0, 0), (1, 1)))
        kz, ky, kx = w.shape[2:]
        sx, sy, sz = self.SPEC.stride
        expected = np.zeros_like(out)
        for n, co, oz, oy, ox in np.ndindex(*out.shape):
            window = xp[n, :, oz * sz:oz * sz + kz, oy * sy:oy * sy + ky, ox * sx:ox * sx + kx]
            expected[n, co, oz, oy, ox] = (w.data[co] * window).sum() + b.data[co]
        assert np.allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_linearity(self, seed):
        rng = np.random.default_rng(seed)
        spec = ConvSpec.same(2, 3, (3, 3, 3))
        w = Tensor(rng.normal(size=spec.weight_shape), dtype="f64")
        x, y = rng.normal(size=(2, 1, 2, 5, 6, 4))
        alpha, beta = rng.normal(size=2)
        combined = conv3d(Tensor(alpha * x + beta * y, dtype="f64"), spec, w).data
        separate = alpha * conv3d(Tensor(x, dtype="f64"), spec, w).data + beta * conv3d(Tensor(y, dtype="f64"), spec, w).data
        assert np.allclose(combined, separate, atol=1e-6)

    def test_separable_chain_equals_rank_one_kernel(self, rng):
        kernel = (5, 3, 3)
        specs = [ConvSpec.same(1, 1, (kernel[0], 1, 1)), ConvSpec.same(1, 1, (1, kernel[1], 1)),
                 ConvSpec.same(1, 1, (1, 1, kernel[2]))]
        dense = ConvSpec.same(1, 1, kernel)
        for _ in range(50):
            u, v, w = (rng.normal(size=k) for k in kernel)
            x = Tensor(rng.normal(size=(1, 1, 4, 5, 6)), dtype="f64")
            h = conv3d(x, specs[0], Tensor(u.reshape(1, 1, 1, 1, -1), dtype="f64"))
            h = conv3d(h, specs[1], Tensor(v.reshape(1, 1, 1, -1, 1), dtype="f64"))
            h = conv3d(h, specs[2], Tensor(w.reshape(1, 1, -1, 1, 1), dtype="f64"))
            outer = np.einsum("z,y,x->zyx", w, v, u)[np.newaxis, np.newaxis]
            expected = conv3d(x, dense, Tensor(outer, dtype="f64"))
            assert np.max(np.abs(h.data - expected.data)) < 1e-6

    def test_independent_of_thread_count(self, rng):
        x, w, b = self._inputs(rng)
        x = Tensor(rng.normal(size=(4, 2, 5, 4, 6)), dtype="f64", requires_grad=True)
        r = rng.normal(size=(4, 3, 3, 3, 3))
        previous = layers._threads
        results = []
        try:
            for threads in (1, 4):
                set_num_threads(threads)
                x.zero_grad()
                out = conv3d(x, self.SPEC, w, b)
                backward(weighted(out, r))
                results.append((out.data.copy(), x.grad.copy()))
        finally:
            set_num_threads(previous)
        assert np.array_equal(results[0][0], results[1][0])
        assert np.array_equal(results[0][1], results[1][1])

    def test_gradcheck_input(self, rng):
        x, w, b = self._inputs(rng)
        r = rng.normal(size=(2, 3, 3, 3, 3))
        assert gradcheck(lambda t: weighted(conv3d(t, self.SPEC, w, b), r), x) < TOL

    def test_gradcheck_weight_and_bias(self, rng):
        x, w, b = self._inputs(rng)
        r = rng.normal(size=(2, 3, 3, 3, 3))
        assert gradcheck(lambda t: weighted(conv3d(x, self.SPEC, t, b), r), w) < TOL
        assert gradcheck(lambda t: weighted(conv3d(x, self.SPEC, w, t), r), b) < TOL

    def test_channel_mismatch(self, rng):
        _, w, b = self._inputs(rng)
        with pytest.raises(ShapeError):
            conv3d(tensor_new((1, 3, 5, 4, 6), "f64"), self.SPEC, w, b)

    def test_extent_smaller_than_kernel(self):
        spec = ConvSpec(in_channels=1, out_channels=1, kernel=(3, 3, 3))
        with pytest.raises(ShapeError):
            conv3d(tensor_new((1, 1, 2, 3, 3)), spec, tensor_new(spec.weight_shape))


class TestMaxPool:
    def test_pairs_along_x(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 1, 4))
        out = maxpool3d(x, kernel=(2, 1, 1), stride=(2, 1, 1))
        assert out.data.ravel().tolist() == [2.0, 4.0]

    def test_matches_loop_oracle(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 7, 6)), dtype="f64")
        out = maxpool3d(x, kernel=(3, 3, 1), stride=(2, 2, 1), padding=(1, 1, 0)).data
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        expected = np.zeros_like(out)
        for n, c, oz, oy, ox in np.ndindex(*out.shape):
            expected[n, c, oz, oy, ox] = xp[n, c, oz, 2 * oy:2 * oy + 3, 2 * ox:2 * ox + 3].max()
        assert np.array_equal(out, expected)

    def test_padding_never_wins(self):
        x = Tensor(-np.arange(1, 28, dtype=np.float64).reshape(1, 1, 3, 3, 3))
        out = maxpool3d(x, kernel=(3, 3, 1), stride=(2, 2, 1), padding=(1, 1, 0))
        assert out.shape == (1, 1, 3, 2, 2)
        assert np.all(out.data < 0)

    def test_gradcheck(self, rng):
        values = rng.permutation(2 * 4 * 5 * 5).astype(np.float64).reshape(1, 2, 4, 5, 5) * 0.1
        r = rng.normal(size=(1, 2, 4, 3, 3))
        x = Tensor(values, dtype="f64")
        fn = lambda t: weighted(maxpool3d(t, (3, 3, 1), (2, 2, 1), (1, 1, 0)), r)
        assert gradcheck(fn, x, h=1e-6) < TOL


class TestBatchNorm:
    def _params(self, rng, c=3):
        gamma = Tensor(rng.uniform(0.5, 1.5, size=c), dtype="f64")
        beta = Tensor(rng.normal(size=c), dtype="f64")
        return gamma, beta

    def test_train_normalizes(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(2, 3, 4, 4, 4)), dtype="f64")
        gamma = Tensor(np.ones(3), dtype="f64")
        beta = Tensor(np.zeros(3), dtype="f64")
        state = BatchNormState(3, np.float64)
        out = batchnorm3d(x, gamma, beta, state, "train")
        assert np.allclose(out.data.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-10)
        assert np.allclose(out.data.var(axis=(0, 2, 3, 4)), 1.0, atol=1e-3)
        assert np.allclose(state.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3, 4)))

    def test_eval_uses_running_stats(self, rng):
        gamma, beta = self._params(rng)
        state = BatchNormState(3, np.float64)
        state.running_mean[...] = [1.0, 2.0, 3.0]
        state.running_var[...] = [4.0, 4.0, 4.0]
        x = Tensor(rng.normal(size=(1, 3, 2, 2, 2)), dtype="f64")
        out = batchnorm3d(x, gamma, beta, state, "eval", eps=1e-12)
        expected = (x.data[0, 1] - 2.0) / 2.0 * gamma.data[1] + beta.data[1]
        assert np.allclose(out.data[0, 1], expected)

    def test_gradcheck_train(self, rng):
        gamma, beta = self._params(rng)
        state = BatchNormState(3, np.float64)
        x = Tensor(rng.normal(size=(2, 3, 2, 3, 3)), dtype="f64")
        r = rng.normal(size=x.shape)
        assert gradcheck(lambda t: weighted(batchnorm3d(t, gamma, beta, state, "train"), r), x) < TOL
        assert gradcheck(lambda t: weighted(batchnorm3d(x, t, beta, state, "train"), r), gamma) < TOL

    def test_invalid_eps(self, rng):
        gamma, beta = self._params(rng)
        with pytest.raises(NumericError):
            batchnorm3d(tensor_new((1, 3, 2, 2, 2), "f64"), gamma, beta, BatchNormState(3), eps=0.0)


class TestUpsample:
    def test_identity_scale(self):
        assert np.allclose(interpolation_matrix(5, 5, 1.0), np.eye(5))

    def test_constant_stays_constant(self):
        x = tensor_new((1, 2, 2, 3, 3), "f64", "constant", value=4.0)
        out = upsample_trilinear(x, (2, 2, 2))
        assert out.shape == (1, 2, 4, 6, 6)
        assert np.allclose(out.data, 4.0)

    def test_linear_ramp(self):
        """Un ramp en x se reproduce en los puntos interiores: valor = o / 2 - 0.25"""
        ramp = np.arange(6, dtype=np.float64)
        x = Tensor(np.broadcast_to(ramp, (1, 1, 2, 3, 6)).copy(), dtype="f64")
        out = upsample_trilinear(x, (2, 1, 1)).data
        assert out.shape == (1, 1, 2, 3, 12)
        o = np.arange(1, 11)
        assert np.allclose(out[0, 0, 1, 2, 1:11], o / 2.0 - 0.25)
        assert out[0, 0, 0, 0, 0] == 0.0 and out[0, 0, 0, 0, 11] == 5.0

    def test_gradcheck(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 2, 3, 2)), dtype="f64")
        r = rng.normal(size=(1, 2, 2, 6, 4))
        assert gradcheck(lambda t: weighted(upsample_trilinear(t, (2, 2, 1)), r), x) < TOL

    def test_non_integer_factor(self):
        with pytest.raises(ShapeError):
            upsample_trilinear(tensor_new((1, 1, 2, 2, 2)), (1.5, 2, 2))
