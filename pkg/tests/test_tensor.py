import numpy as np
import pytest

from fedbnn import tensor as T

from conftest import rel_err


class TestSign:
    def test_zero_maps_to_plus_one(self):
        assert T.sign(np.array([0.3, -0.2, 0.0])).tolist() == [1.0, -1.0, 1.0]

    def test_all_positive(self, rng):
        x = rng.uniform(0.1, 5.0, 20)
        assert np.all(T.sign(x) == 1.0)

    def test_idempotent(self, rng):
        x = rng.standard_normal(50)
        assert np.array_equal(T.sign(T.sign(x)), T.sign(x))


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((2, 2))
        assert np.allclose(T.matmul(np.eye(2), a), a)

    def test_hand_product(self):
        out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
        assert out.tolist() == [[2.0], [4.0]]

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            T.matmul(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))

    def test_associative(self, rng):
        for _ in range(10):
            a, b, c = (rng.standard_normal((3, 3)) for _ in range(3))
            lhs = T.matmul(T.matmul(a, b), c)
            rhs = T.matmul(a, T.matmul(b, c))
            assert np.max(np.abs(lhs - rhs)) < 1e-12


class TestSvd:
    def test_diagonal(self):
        res = T.svd(np.diag([3.0, 1.0]))
        assert np.allclose(res.s, [3.0, 1.0])
        assert np.allclose(np.abs(res.u), np.eye(2), atol=1e-12)

    def test_zero_matrix(self):
        res = T.svd(np.zeros((2, 2)))
        assert np.allclose(res.s, 0.0)

    def test_reconstruction_and_orthonormality(self, rng):
        for m, n in [(5, 3), (3, 5), (4, 4), (1, 6), (8, 2)]:
            a = rng.standard_normal((m, n))
            u, s, vt = T.svd(a)
            r = min(m, n)
            assert u.shape == (m, r) and vt.shape == (r, n)
            assert np.all(np.diff(s) <= 1e-12) and np.all(s >= 0)
            assert np.max(np.abs(u.T @ u - np.eye(r))) < 1e-10
            assert np.max(np.abs(vt @ vt.T - np.eye(r))) < 1e-10
            rec = u @ np.diag(s) @ vt
            assert np.linalg.norm(rec - a) <= 1e-8 * max(np.linalg.norm(a), 1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            T.svd(np.array([[1.0, np.nan], [0.0, 1.0]]))

    def test_deterministic(self, rng):
        a = rng.standard_normal((6, 4))
        r1, r2 = T.svd(a), T.svd(a.copy())
        assert np.array_equal(r1.u, r2.u)
        assert np.array_equal(r1.s, r2.s)
        assert np.array_equal(r1.vt, r2.vt)


class TestConvForward:
    def test_identity_1x1_kernel(self, rng):
        x = rng.standard_normal((2, 5, 5))
        w = np.zeros((2, 2, 1, 1))
        w[0, 0, 0, 0] = w[1, 1, 0, 0] = 1.0
        assert np.allclose(T.conv2d_forward(x, w), x)

    def test_all_ones_sum(self):
        out = T.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 9.0

    def test_same_padding_dims(self, rng):
        x = rng.standard_normal((3, 7, 9))
        w = rng.standard_normal((4, 3, 3, 3))
        assert T.conv2d_forward(x, w, stride=1, pad=1).shape == (4, 7, 9)

    def test_kernel_too_large(self, rng):
        with pytest.raises(ValueError):
            T.conv2d_forward(rng.standard_normal((1, 2, 2)),
                             rng.standard_normal((1, 1, 3, 3)))

    def test_batch_matches_loop(self, rng):
        x = rng.standard_normal((4, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        batched = T.conv2d_forward(x, w, stride=2, pad=1)
        for i in range(4):
            assert np.allclose(batched[i], T.conv2d_forward(x[i], w, stride=2, pad=1))

    def test_pad_value(self):
        # a single +1 pixel with -1 padding: 3x3 all-ones kernel sums 8*(-1)+1
        x = np.ones((1, 1, 1))
        w = np.ones((1, 1, 3, 3))
        out = T.conv2d_forward(x, w, stride=1, pad=1, pad_value=-1.0)
        assert out[0, 0, 0] == -7.0


class TestConvBackward:
    def test_zero_cotangent(self, rng):
        x = rng.standard_normal((2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        go = np.zeros((3, 2, 2))
        gx, gw = T.conv2d_backward(x, w, go)
        assert not gx.any() and not gw.any()

    def test_1x1_scalar_chain(self):
        x = np.full((1, 1, 1), 2.0)
        w = np.full((1, 1, 1, 1), 3.0)
        go = np.full((1, 1, 1), 5.0)
        gx, gw = T.conv2d_backward(x, w, go)
        assert gx[0, 0, 0] == 15.0 and gw[0, 0, 0, 0] == 10.0

    @pytest.mark.parametrize("ci,co,h,w,k,stride,pad", [
        (1, 2, 4, 4, 3, 1, 0),
        (2, 1, 5, 6, 3, 1, 1),
        (2, 2, 6, 6, 3, 2, 1),
        (1, 3, 7, 5, 2, 2, 0),
        (3, 2, 8, 8, 3, 3, 2),
    ])
    def test_matches_central_differences(self, rng, ci, co, h, w, k, stride, pad):
        x = rng.standard_normal((ci, h, w))
        wt = rng.standard_normal((co, ci, k, k))
        go = rng.standard_normal(T.conv2d_forward(x, wt, stride, pad).shape)
        gx, gw = T.conv2d_backward(x, wt, go, stride, pad)
        eps = 1e-5

        def loss(xa, wa):
            return float(np.sum(T.conv2d_forward(xa, wa, stride, pad) * go))

        for _ in range(8):
            i = tuple(rng.integers(0, s) for s in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            num = (loss(xp, wt) - loss(xm, wt)) / (2 * eps)
            assert rel_err(num, gx[i], floor=1.0) < 1e-6
        for _ in range(8):
            i = tuple(rng.integers(0, s) for s in wt.shape)
            wp, wm = wt.copy(), wt.copy()
            wp[i] += eps
            wm[i] -= eps
            num = (loss(x, wp) - loss(x, wm)) / (2 * eps)
            assert rel_err(num, gw[i], floor=1.0) < 1e-6


class TestMaxPool:
    def test_roundtrip_gradient_routing(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        pooled, arg = T.maxpool2d_forward(x)
        go = rng.standard_normal(pooled.shape)
        gx = T.maxpool2d_backward(go, arg)
        assert gx.shape == x.shape
        # every window routes its cotangent to exactly one cell
        assert np.allclose(gx.sum(), go.sum())

    def test_odd_dims_rejected(self, rng):
        with pytest.raises(ValueError):
            T.maxpool2d_forward(rng.standard_normal((1, 1, 5, 4)))
