import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vnn import autodiff as ad
from vnn.autodiff import Rng, ShapeError, Tensor

from util import check_grads, fd_gradient, max_rel_err


class TestMatmul:
    def test_identity(self):
        v = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
        out = ad.matmul(Tensor(np.eye(3)), v)
        np.testing.assert_array_equal(out.data, v.data)

    def test_against_dot_product_oracle(self):
        a = [[1.0, 1.0]]
        b = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        # element-by-element oracle
        expected = [[sum(a[i][k] * b[k][j] for k in range(2)) for j in range(3)]
                    for i in range(1)]
        assert expected == [[1.0, 1.0, 0.0]]
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, np.array(expected))

    def test_shape_mismatch_names_both_shapes(self):
        a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 3\)"):
            ad.matmul(a, b)

    def test_associativity(self):
        rng = Rng(7)
        a = rng.normal((4, 5))
        b = rng.normal((5, 6))
        c = rng.normal((6, 3))
        left = ad.matmul(ad.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = ad.matmul(Tensor(a), ad.matmul(Tensor(b), Tensor(c))).data
        assert max_rel_err(left, right) <= 1e-12


class TestReduce:
    def test_mean_axis0(self):
        out = ad.reduce(Tensor([[1.0, 2.0], [3.0, 4.0]]), 0, "mean")
        np.testing.assert_array_equal(out.data, [2.0, 3.0])

    def test_argmax_tie_breaks_low(self):
        out = ad.reduce(Tensor([5.0, 5.0, 1.0]), 0, "argmax")
        assert out.data == 0.0

    def test_sum_axis1_scalar_loop_oracle(self):
        x = [[1.0, 2.0], [3.0, 4.0]]
        expected = []
        for row in x:
            acc = 0.0
            for v in row:
                acc += v
            expected.append(acc)
        out = ad.reduce(Tensor(x), 1, "sum")
        np.testing.assert_array_equal(out.data, expected)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            ad.reduce(Tensor([[1.0]]), 2, "sum")

    def test_max_gradient_goes_to_first_maximum(self):
        x = Tensor([[2.0, 5.0, 5.0]], requires_grad=True)
        ad.backward(ad.sum_all(ad.max_axis(x, 1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    @given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 1))
    @settings(max_examples=25, deadline=None)
    def test_sum_matches_loop_oracle(self, n, m, axis):
        x = Rng(n * 31 + m).normal((n, m))
        out = ad.reduce(Tensor(x), axis, "sum").data
        oracle = np.apply_along_axis(lambda r: sum(r.tolist()), axis, x)
        assert max_rel_err(out, oracle) <= 1e-12


class TestBackward:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_constant_root_writes_no_grads(self):
        x = Tensor([1.0, 2.0])
        root = ad.sum_all(ad.mul(x, x))
        ad.backward(root)
        assert x.grad is None

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            ad.backward(ad.mul(x, x))

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0], requires_grad=True)
        for _ in range(2):
            ad.backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_wv_inner_product_matches_finite_differences(self):
        rng = Rng(3)
        w = Tensor(rng.normal((4, 5)), requires_grad=True)
        v = Tensor(rng.normal((5, 1)))

        def loss():
            wv = ad.matmul(w, v)
            return ad.sum_all(ad.mul(wv, wv))

        ad.backward(loss())
        numeric = fd_gradient(loss, w, step=1e-5)
        assert max_rel_err(w.grad, numeric) <= 1e-6

    def test_diamond_graph_sums_both_paths(self):
        # root = (x*x) + (x*3) built once and reused: d/dx = 2x + 3
        x = Tensor([2.0], requires_grad=True)
        shared = ad.mul(x, 2.0)
        root = ad.sum_all(ad.add(ad.mul(shared, shared), shared))
        ad.backward(root)
        # hand expansion: f = (2x)^2 + 2x -> f' = 8x + 2 = 18 at x=2
        np.testing.assert_allclose(x.grad, [18.0])


class TestRandom:
    def test_same_seed_identical(self):
        a = ad.rand_normal(Rng(11), (4, 4)).data
        b = ad.rand_normal(Rng(11), (4, 4)).data
        np.testing.assert_array_equal(a, b)

    def test_normal_law_of_large_numbers(self):
        x = ad.rand_normal(Rng(5), (100_000,)).data
        assert abs(x.mean()) < 0.02

    def test_uniform_range(self):
        x = ad.rand_uniform(Rng(6), (100_000,)).data
        assert x.min() >= 0.0 and x.max() < 1.0

    def test_child_streams_are_independent_and_stable(self):
        r = Rng(9)
        a1 = r.child(1).normal(3)
        a2 = Rng(9).child(1).normal(3)
        b = r.child(2).normal(3)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)


class TestBroadcastPolicy:
    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ShapeError, match="expand"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))

    def test_scalar_with_tensor_allowed(self):
        out = ad.mul(Tensor([[1.0, 2.0]]), 3.0)
        np.testing.assert_array_equal(out.data, [[3.0, 6.0]])

    def test_scalar_tensor_gradient_sums(self):
        s = Tensor(2.0, requires_grad=True)
        x = Tensor([1.0, 2.0, 3.0])
        ad.backward(ad.sum_all(ad.mul(x, s)))
        np.testing.assert_allclose(s.grad, 6.0)

    def test_expand_backward_sums(self):
        x = Tensor(np.ones((1, 3)), requires_grad=True)
        ad.backward(ad.sum_all(ad.expand(x, (4, 3))))
        np.testing.assert_array_equal(x.grad, 4.0 * np.ones((1, 3)))


def _rand(shape, seed, scale=1.0):
    return Tensor(scale * Rng(seed).normal(shape), requires_grad=True)


class TestGradientsEverywhere:
    """Central-difference checks (step 1e-5, rel err <= 1e-6) for every
    differentiable primitive on O(1) random inputs."""

    def test_arithmetic(self):
        a, b = _rand((3, 4), 1), _rand((3, 4), 2)
        b.data += 3.0  # keep the divisor away from zero
        check_grads(lambda: ad.sum_all(ad.mul(ad.add(a, b), ad.sub(a, b))), [a, b])
        check_grads(lambda: ad.sum_all(ad.div(a, b)), [a, b])
        check_grads(lambda: ad.mean_all(ad.square(ad.neg(a))), [a])

    def test_elementwise(self):
        x = _rand((2, 5), 3)
        check_grads(lambda: ad.sum_all(ad.exp(x)), [x])
        check_grads(lambda: ad.sum_all(ad.tanh(x)), [x])
        check_grads(lambda: ad.sum_all(ad.sigmoid(x)), [x])
        y = _rand((6,), 4)
        y.data[:] = np.abs(y.data) + 0.5
        check_grads(lambda: ad.sum_all(ad.log(y)), [y])
        check_grads(lambda: ad.sum_all(ad.sqrt(y)), [y])

    def test_relu_and_clamp_away_from_kinks(self):
        x = _rand((10,), 5)
        x.data[np.abs(x.data) < 0.1] += 0.3
        check_grads(lambda: ad.sum_all(ad.relu(x)), [x])
        y = _rand((10,), 6, scale=2.0)
        y.data[np.abs(np.abs(y.data) - 1.0) < 0.1] += 0.3
        check_grads(lambda: ad.sum_all(ad.clamp(y, -1.0, 1.0)), [y])

    def test_reductions(self):
        x = _rand((4, 5), 7)
        check_grads(lambda: ad.sum_all(ad.mul(ad.mean_axis(x, 1), ad.mean_axis(x, 1))), [x])
        check_grads(lambda: ad.sum_all(ad.square(ad.sum_axis(x, 0))), [x])
        check_grads(lambda: ad.sum_all(ad.max_axis(x, 1)), [x])

    def test_shape_ops(self):
        x = _rand((2, 3, 4), 8)
        check_grads(lambda: ad.sum_all(ad.square(ad.reshape(x, (6, 4)))), [x])
        check_grads(lambda: ad.sum_all(ad.square(ad.transpose(x, (2, 0, 1)))), [x])
        y = _rand((2, 3), 9)
        check_grads(lambda: ad.sum_all(ad.square(ad.concat([x_part for x_part in (y, y)], 0))), [y])

    def test_norm_and_cross(self):
        x = _rand((5, 4, 3), 10)
        check_grads(lambda: ad.sum_all(ad.norm_last(x)), [x])
        a, b = _rand((6, 3), 11), _rand((6, 3), 12)
        check_grads(lambda: ad.sum_all(ad.square(ad.cross_last(a, b))), [a, b])

    def test_channel_map_and_pair_transpose(self):
        w, v = _rand((4, 5), 13), _rand((6, 5, 3), 14)
        check_grads(lambda: ad.sum_all(ad.square(ad.channel_map(w, v))), [w, v])
        t = _rand((6, 3, 3), 15)
        vv = _rand((6, 4, 3), 16)
        check_grads(lambda: ad.sum_all(ad.square(ad.pair_transpose_map(vv, t))), [vv, t])

    def test_vn_clip_both_branches(self):
        q, k = _rand((8, 3, 3), 17), _rand((8, 3, 3), 18)
        # keep probes off the <q,k>=0 boundary
        dots = np.einsum("ncd,ncd->nc", q.data, k.data)
        assert np.abs(dots).min() > 1e-3
        for alpha in (0.0, 0.2):
            check_grads(lambda: ad.sum_all(ad.square(ad.vn_clip(q, k, 1e-6, alpha))), [q, k],
                        tol=2e-6)

    def test_gathers_and_segments(self):
        v = _rand((5, 4, 3), 19)
        idx_rows = np.array([0, 2, 2, 4])
        check_grads(lambda: ad.sum_all(ad.square(ad.gather_rows(v, idx_rows))), [v])
        idx_c = np.array([1, 0, 3, 2])
        check_grads(lambda: ad.sum_all(ad.square(ad.gather_channel(v, idx_c))), [v])
        idx_nc = Rng(20).integers(0, 5, size=(3, 4))
        check_grads(lambda: ad.sum_all(ad.square(ad.gather_channel_rows(v, idx_nc))), [v])
        x = _rand((4, 2, 4, 3), 21)
        idx_slot = Rng(22).integers(0, 2, size=(4, 4))
        check_grads(lambda: ad.sum_all(ad.square(ad.gather_slot(x, idx_slot))), [x])
        e = _rand((6, 2, 3), 23)
        seg = np.array([0, 0, 1, 2, 2, 2])
        check_grads(lambda: ad.sum_all(ad.square(ad.segment_sum(e, seg, 3))), [e])

    def test_where(self):
        a, b = _rand((7,), 24), _rand((7,), 25)
        mask = Rng(26).uniform((7,)) > 0.5
        check_grads(lambda: ad.sum_all(ad.square(ad.where(mask, a, b))), [a, b])


class TestNoGrad:
    def test_no_graph_inside_block(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y._parents == () and not y.requires_grad
