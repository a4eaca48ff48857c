import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from missfuse import diffcore as dc
from missfuse.diffcore import Tensor, grad_check
from missfuse.errors import ConfigError, DimensionError, GradCheckError


def leaf(rng, *shape, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        assert out.data.tolist() == [[3, 4], [5, 6]]

    def test_scalar_matrices(self):
        assert dc.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    @pytest.mark.parametrize("seed", range(5))
    def test_triple_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.abs(dc.matmul(Tensor(a), Tensor(b)).data - triple_loop(a, b)).max() <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        assert grad_check(lambda: dc.matmul(a, b).sigmoid().sum(), [a, b]) <= 1e-8

    def test_bmm_broadcast_gradients(self):
        rng = np.random.default_rng(2)
        a, b = leaf(rng, 1, 5, 3), leaf(rng, 4, 3, 2)
        assert dc.bmm(a, b).shape == (4, 5, 2)
        assert grad_check(lambda: (dc.bmm(a, b) * dc.bmm(a, b)).sum(), [a, b]) <= 1e-6


class TestMaskedSoftmax:
    def test_uniform(self):
        out = dc.masked_softmax(Tensor(np.zeros(3)), np.zeros(3))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_single_survivor(self):
        out = dc.masked_softmax(Tensor([5.0, 1.0, 2.0]), np.array([0.0, -np.inf, -np.inf]))
        assert out.data.tolist() == [1.0, 0.0, 0.0]

    def test_all_masked_is_zero(self):
        out = dc.masked_softmax(Tensor([1.0, 2.0]), np.array([-np.inf, -np.inf]))
        assert out.data.tolist() == [0.0, 0.0]
        assert np.all(np.isfinite(out.data))

    def test_bool_mask_equivalent_to_bias(self):
        logits = Tensor([0.3, -1.0, 2.0, 0.5])
        a = dc.masked_softmax(logits, np.array([True, False, True, True]))
        b = dc.masked_softmax(logits, np.array([0.0, -np.inf, 0.0, 0.0]))
        assert np.array_equal(a.data, b.data)

    def test_rejects_other_bias_values(self):
        with pytest.raises(ValueError):
            dc.masked_softmax(Tensor([1.0, 2.0]), np.array([0.0, 1.0]))

    def test_huge_logits_stay_finite(self):
        out = dc.masked_softmax(Tensor([1e308, -1e308, 5.0]), np.array([True, True, False]))
        assert out.data.tolist() == [1.0, 0.0, 0.0]

    def test_masked_logits_receive_zero_gradient(self):
        logits = Tensor([0.5, 1.5, -0.2], requires_grad=True)
        weights = Tensor([1.0, -2.0, 3.0])
        (dc.masked_softmax(logits, np.array([True, False, True])) * weights).sum().backward()
        assert logits.grad[1] == 0.0
        assert np.all(logits.grad[[0, 2]] != 0.0)

    def test_gradient_check_with_mask(self):
        rng = np.random.default_rng(3)
        logits = leaf(rng, 4, 5)
        keep = rng.random((4, 5)) < 0.6
        keep[0] = False
        w = Tensor(rng.standard_normal((4, 5)))
        assert grad_check(lambda: (dc.masked_softmax(logits, keep, axis=1) * w).sum(), [logits]) <= 1e-8

    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=8),
        st.lists(st.booleans(), min_size=8, max_size=8),
    )
    @settings(max_examples=200, deadline=None)
    def test_properties(self, logits, keep):
        keep = np.array(keep[: len(logits)])
        out = dc.masked_softmax(Tensor(np.array(logits)), keep).data
        assert np.all(out[~keep] == 0.0)
        assert np.all((out >= 0) & (out <= 1))
        expected = 1.0 if keep.any() else 0.0
        assert abs(out.sum() - expected) <= 1e-12


class TestLayerNorm:
    def test_constant_input_maps_to_zero(self):
        out = dc.layer_norm(Tensor(np.ones(4)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.all(out.data == 0.0)

    def test_already_normalised(self):
        out = dc.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1, 1], atol=1e-5)

    def test_needs_two_features(self):
        with pytest.raises(ConfigError):
            dc.layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]))

    @pytest.mark.parametrize("seed", range(5))
    def test_moments(self, seed):
        x = np.random.default_rng(seed).standard_normal(16) * 3 + 2
        out = dc.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert abs(out.mean()) <= 1e-10
        assert abs(out.var() - 1) <= 1e-4

    @given(st.floats(-1e3, 1e3))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, c):
        x = np.random.default_rng(0).standard_normal((3, 8))
        g, s = Tensor(np.ones(8)), Tensor(np.zeros(8))
        a = dc.layer_norm(Tensor(x), g, s).data
        b = dc.layer_norm(Tensor(x + c), g, s).data
        assert np.abs(a - b).max() <= 1e-10 * max(1.0, abs(c))

    def test_affine_and_gradients(self):
        rng = np.random.default_rng(4)
        x, g, s = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
        w = Tensor(rng.standard_normal((3, 6)))
        assert grad_check(lambda: (dc.layer_norm(x, g, s) * w).sum(), [x, g, s]) <= 1e-6


def _cases():
    # (name, builder(rng) -> (f, params))
    def unary(op, positive=False):
        def build(rng, shape):
            a = leaf(rng, *shape, positive=positive)
            w = Tensor(rng.standard_normal(shape))
            return (lambda: (op(a) * w).sum()), [a]

        return build

    def binary(op, positive_b=False):
        def build(rng, shape):
            a, b = leaf(rng, *shape), leaf(rng, *shape, positive=positive_b)
            w = Tensor(rng.standard_normal(shape))
            return (lambda: (op(a, b) * w).sum()), [a, b]

        return build

    def broadcast(rng, shape):
        a, b = leaf(rng, *shape), leaf(rng, shape[-1])
        return (lambda: (a * b + b).sum() / 3.0), [a, b]

    def concat(rng, shape):
        a, b = leaf(rng, *shape), leaf(rng, *shape)
        w = Tensor(rng.standard_normal(shape[:-1] + (2 * shape[-1],)))
        return (lambda: (dc.concat([a, b], axis=-1) * w).sum()), [a, b]

    def slicing(rng, shape):
        a = leaf(rng, *shape)
        return (lambda: (a[..., :1] * a[..., -1:]).sum() + a[[0, 0]].sum()), [a]

    def reductions(rng, shape):
        a = leaf(rng, *shape)
        return (lambda: a.mean(axis=-1).exp().sum() + a.sum(axis=0, keepdims=True).sigmoid().sum()), [a]

    def stack_where(rng, shape):
        a, b = leaf(rng, *shape), leaf(rng, *shape)
        cond = rng.random(shape) < 0.5
        return (lambda: dc.where(cond, a, b * b).sum() + (dc.stack([a, b], axis=0) * dc.stack([b, a], axis=-1).reshape((2,) + shape)).sum()), [a, b]

    def clip(rng, shape):
        a = leaf(rng, *shape)
        a.data = np.where(np.abs(np.abs(a.data) - 0.5) < 1e-3, 0.0, a.data)
        return (lambda: (dc.clip(a, -0.5, 0.5) * dc.clip(a, -0.5, 0.5)).sum()), [a]

    return {
        "add": binary(lambda a, b: a + b),
        "sub": binary(lambda a, b: a - b),
        "mul": binary(lambda a, b: a * b),
        "div": binary(lambda a, b: a / b, positive_b=True),
        "exp": unary(dc.exp),
        "log": unary(dc.log, positive=True),
        "sqrt": unary(dc.sqrt, positive=True),
        "sigmoid": unary(dc.sigmoid),
        "neg": unary(lambda a: -a),
        "softmax": unary(lambda a: dc.softmax(a, axis=-1)),
        "broadcast": broadcast,
        "concat": concat,
        "slice": slicing,
        "reductions": reductions,
        "stack_where": stack_where,
        "clip": clip,
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_on_random_shapes(name):
    # 20 random small shapes per op
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(20):
        shape = tuple(int(d) for d in rng.integers(1, 4, size=rng.integers(1, 3)))
        f, params = CASES[name](rng, shape)
        assert grad_check(f, params) <= 1e-4, shape


class TestGradCheck:
    def test_square(self):
        w = Tensor(np.array(3.0), requires_grad=True)
        assert grad_check(lambda: w * w, [w]) <= 1e-8
        assert w.grad == pytest.approx(6.0)

    def test_requires_float64(self):
        w = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ConfigError):
            grad_check(lambda: w.sum(), [w])

    @pytest.mark.filterwarnings("ignore:invalid value encountered in log")
    def test_non_finite_loss_aborts(self):
        w = Tensor(np.array([-1.0]), requires_grad=True)
        with pytest.raises(GradCheckError):
            grad_check(lambda: dc.log(w).sum(), [w])

    def test_detects_wrong_gradient(self):
        w = Tensor(np.array([2.0]), requires_grad=True)

        def halved_square():
            # forward w^2 with a deliberately wrong backward (w instead of 2w)
            return dc._result(w.data**2, (w,), lambda g: (g * w.data,)).sum()

        # tape 2, finite differences 4: relative error |2 - 4| / 4
        assert grad_check(halved_square, [w]) == pytest.approx(0.5)


class TestTape:
    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with dc.no_grad():
            out = (a * 2).sum()
        assert not out.requires_grad

    def test_shared_subexpression_accumulates(self):
        a = Tensor(np.array([1.5]), requires_grad=True)
        b = a * a
        (b + b).sum().backward()
        assert a.grad[0] == pytest.approx(6.0)

    def test_float32_preserved(self):
        a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        out = (a * 0.5 + 1.0).exp()
        assert out.dtype == np.float32

    def test_deep_chain_does_not_recurse(self):
        a = Tensor(np.array([0.0]), requires_grad=True)
        x = a
        for _ in range(5000):
            x = x + 1.0
        x.sum().backward()
        assert a.grad[0] == 1.0


class TestLinear:
    def test_init_range(self):
        lin = dc.Linear.init(16, 4, np.random.default_rng(0), np.float64)
        assert np.abs(lin.w.data).max() <= 1 / 4
        assert lin.w.shape == (16, 4) and lin.b.shape == (4,)

    def test_stacked_matches_individual(self):
        rng = np.random.default_rng(1)
        st_lin = dc.StackedLinear.init(3, 5, 2, rng, np.float64)
        x = rng.standard_normal((3, 7, 5))
        out = st_lin(Tensor(x)).data
        for m in range(3):
            np.testing.assert_allclose(out[m], x[m] @ st_lin.w.data[m] + st_lin.b.data[m], atol=1e-12)
