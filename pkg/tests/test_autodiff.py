import numpy as np
import pytest

from tridiff import autodiff as ad
from tridiff.validation import ShapeError


def leaf(values):
    return ad.Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_sum_of_squares_hand_value(self):
        x = leaf([3.0, 4.0])
        assert ad.tensor_sum(ad.mul(x, x)).item() == 25.0

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal(3)
        out = ad.matmul(ad.constant(np.eye(3)), ad.constant(v))
        np.testing.assert_array_equal(out.data, v)

    def test_masked_residual_against_loop(self):
        # ||A x - y||^2 for a 2x2 masking A, cross-checked coordinate by coordinate
        x = np.array([1.5, -2.0, 0.5, 3.0])
        keep = np.array([0, 3])
        y = np.array([1.0, 1.0])
        out = ad.sq_norm(ad.sub(ad.gather(ad.constant(x), keep), ad.constant(y)))
        expected = 0.0
        for i, k in enumerate(keep):
            expected += (x[k] - y[i]) ** 2
        assert out.item() == pytest.approx(expected, abs=1e-15)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(leaf([1.0, 2.0]), leaf([1.0, 2.0, 3.0]))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_intermediate_names_op(self):
        big = leaf([1e308])
        with pytest.raises(FloatingPointError, match="mul"):
            ad.mul(big, big)

    def test_evaluate_helper(self):
        out = ad.evaluate(lambda a, b: ad.tensor_sum(ad.mul(a, b)), leaf([1.0, 2.0]), leaf([3.0, 4.0]))
        assert out.item() == 11.0


class TestGradient:
    def test_quadratic_gradient(self):
        x = leaf([3.0, 4.0])
        g = ad.gradient(ad.tensor_sum(ad.mul(x, x)), x)
        np.testing.assert_allclose(g.data, [6.0, 8.0], rtol=0, atol=0)

    def test_masked_least_squares_closed_form(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal(6)
        keep = np.array([1, 2, 5])
        y = rng.standard_normal(3)
        x = leaf(x0)
        out = ad.sq_norm(ad.sub(ad.gather(x, keep), ad.constant(y)))
        g = ad.gradient(out, x).data
        m = np.zeros((3, 6))
        m[np.arange(3), keep] = 1.0
        expected = 2.0 * m.T @ (m @ x0 - y)
        np.testing.assert_allclose(g, expected, atol=1e-14)

    def test_two_layer_mlp_matches_fd(self):
        rng = np.random.default_rng(2)
        w1 = ad.constant(rng.standard_normal((5, 7)))
        b1 = ad.constant(rng.standard_normal(7))
        w2 = ad.constant(rng.standard_normal((7, 3)))
        b2 = ad.constant(rng.standard_normal(3))

        def f(x):
            h = ad.tanh(ad.affine(x, w1, b1))
            return ad.tensor_sum(ad.affine(h, w2, b2))

        report = ad.check_gradient(f, rng.standard_normal(5), step=1e-5, tol=1e-6)
        assert report.passed, report

    def test_gradient_requires_scalar(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ad.GraphError, match="scalar"):
            ad.gradient(ad.mul(x, x), x)

    def test_gradient_requires_participation(self):
        x = leaf([1.0, 2.0])
        other = leaf([1.0, 2.0])
        out = ad.tensor_sum(ad.mul(x, x))
        with pytest.raises(ad.GraphError, match="participate"):
            ad.gradient(out, other)

    def test_gradient_linearity(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            x0 = rng.standard_normal(4)
            a, b = rng.standard_normal(2)

            def f(x):
                return ad.sq_norm(ad.tanh(x))

            def g(x):
                return ad.tensor_sum(ad.mul(ad.silu(x), x))

            x1 = leaf(x0)
            combo = ad.add(ad.mul(f(x1), a), ad.mul(g(x1), b))
            grad_combo = ad.gradient(combo, x1).data
            x2, x3 = leaf(x0), leaf(x0)
            parts = a * ad.gradient(f(x2), x2).data + b * ad.gradient(g(x3), x3).data
            np.testing.assert_allclose(grad_combo, parts, rtol=1e-12)

    def test_backward_deterministic(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal(8)

        def build(x):
            h = ad.silu(ad.mul(x, x))
            return ad.add(ad.sq_norm(h), ad.mean(x))

        grads = []
        for _ in range(2):
            x = leaf(x0.copy())
            grads.append(ad.gradient(build(x), x).data)
        assert np.array_equal(grads[0], grads[1])


# one scenario per supported op family; each builds a scalar from the leaf
FD_SCENARIOS = {
    "add": (4, lambda x, c: ad.sq_norm(ad.add(x, c["v4"]))),
    "add_scalar": (4, lambda x, c: ad.sq_norm(ad.add(x, 0.7))),
    "sub": (4, lambda x, c: ad.sq_norm(ad.sub(c["v4"], x))),
    "mul": (4, lambda x, c: ad.tensor_sum(ad.mul(x, c["v4"]))),
    "mul_scalar": (4, lambda x, c: ad.sq_norm(ad.mul(x, -1.3))),
    "matmul_mat_vec": (3, lambda x, c: ad.sq_norm(ad.matmul(c["m43"], x))),
    "matmul_vec_mat": (4, lambda x, c: ad.sq_norm(ad.matmul(x, c["m43"]))),
    "affine": (3, lambda x, c: ad.sq_norm(ad.affine(x, c["m34"], c["v4"]))),
    "sum": (5, lambda x, c: ad.mul(ad.tensor_sum(x), 2.0)),
    "mean": (5, lambda x, c: ad.mul(ad.mean(ad.mul(x, x)), 3.0)),
    "sq_norm": (5, lambda x, c: ad.sq_norm(x)),
    "tanh": (4, lambda x, c: ad.sq_norm(ad.tanh(x))),
    "silu": (4, lambda x, c: ad.sq_norm(ad.silu(x))),
    "gather": (6, lambda x, c: ad.sq_norm(ad.gather(x, np.array([0, 2, 2, 5])))),
    "scatter": (3, lambda x, c: ad.sq_norm(ad.scatter(x, np.array([1, 4, 2]), (6,)))),
    "reshape": (6, lambda x, c: ad.sq_norm(ad.conv2d(ad.reshape(x, (2, 3)), c["k22"]))),
    "conv1d": (6, lambda x, c: ad.sq_norm(ad.conv1d(x, c["k3"]))),
    "conv2d": (16, lambda x, c: ad.sq_norm(ad.conv2d(ad.reshape(x, (4, 4)), c["k33"]))),
    "block_mean": (16, lambda x, c: ad.sq_norm(ad.block_mean(ad.reshape(x, (4, 4)), 2))),
    "magnitude": (4, lambda x, c: ad.tensor_sum(ad.magnitude(x, c["v4"]))),
    "clip": (4, lambda x, c: ad.sq_norm(ad.clip(ad.mul(x, 0.4), -1.0, 1.0))),
}


@pytest.mark.parametrize("name", sorted(FD_SCENARIOS))
def test_op_gradient_matches_fd_at_random_points(name):
    dim, build = FD_SCENARIOS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    consts = {
        "v4": ad.constant(rng.standard_normal(4)),
        "m43": ad.constant(rng.standard_normal((4, 3)) if name == "matmul_vec_mat"
                           else rng.standard_normal((3, 4)).T),
        "m34": ad.constant(rng.standard_normal((3, 4))),
        "k3": ad.constant(rng.standard_normal(3)),
        "k22": ad.constant(rng.standard_normal((2, 2))),
        "k33": ad.constant(rng.standard_normal((3, 3))),
    }
    worst = 0.0
    for _ in range(100):
        x0 = rng.standard_normal(dim)
        report = ad.check_gradient(lambda x: build(x, consts), x0, step=1e-5, tol=1e-6)
        worst = max(worst, report.max_rel_err)
        assert report.passed, f"{name}: {report}"
    assert worst < 1e-6


def test_float32_gradients_coarser_tolerance():
    # 32-bit reverse-mode gradients vs a float64 finite-difference reference
    rng = np.random.default_rng(7)
    for _ in range(20):
        x0 = rng.standard_normal(4).astype(np.float32)
        x = ad.Tensor(x0, requires_grad=True)
        out = ad.sq_norm(ad.tanh(x))
        assert out.data.dtype == np.float32
        g32 = ad.gradient(out, x).data
        x64 = x0.astype(np.float64)
        step = 1e-5
        for j in range(4):
            xp, xm = x64.copy(), x64.copy()
            xp[j] += step
            xm[j] -= step
            fp = ad.sq_norm(ad.tanh(ad.Tensor(xp))).item()
            fm = ad.sq_norm(ad.tanh(ad.Tensor(xm))).item()
            fd = (fp - fm) / (2 * step)
            denom = max(abs(fd), abs(float(g32[j])), 1e-6)
            assert abs(float(g32[j]) - fd) / denom < 1e-4


class TestCheckGradient:
    def test_quadratic_passes(self):
        report = ad.check_gradient(lambda x: ad.sq_norm(x), np.array([1.0, -2.0]),
                                   step=1e-5, tol=1e-6)
        assert report.passed and report.max_rel_err < 1e-6

    def test_kink_flagged_not_failed(self):
        # coordinate 0 sits exactly on the clip boundary
        x0 = np.array([1.0, 0.2])
        report = ad.check_gradient(lambda x: ad.tensor_sum(ad.clip(x, -1.0, 1.0)), x0,
                                   step=1e-5, tol=1e-6)
        assert 0 in report.ambiguous
        assert 1 not in report.ambiguous
        assert report.passed

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError, match="step"):
            ad.check_gradient(lambda x: ad.sq_norm(x), np.zeros(2), step=0.0)


class TestOpContracts:
    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather(leaf([1.0, 2.0]), np.array([5]))

    def test_scatter_duplicate_indices(self):
        with pytest.raises(ValueError, match="duplicate"):
            ad.scatter(leaf([1.0, 2.0]), np.array([1, 1]), (4,))

    def test_conv2d_kernel_too_large(self):
        with pytest.raises(ShapeError, match="kernel"):
            ad.conv2d(leaf(np.ones((2, 2))), ad.constant(np.ones((3, 3))))

    def test_block_mean_indivisible(self):
        with pytest.raises(ShapeError):
            ad.block_mean(leaf(np.ones((3, 4))), 2)

    def test_magnitude_zero_gradient_at_zero(self):
        re = leaf([0.0, 3.0])
        im = ad.constant([0.0, 4.0])
        out = ad.tensor_sum(ad.magnitude(re, im))
        g = ad.gradient(out, re).data
        np.testing.assert_allclose(g, [0.0, 0.6])

    def test_clip_boundary_subgradient_zero(self):
        x = leaf([-1.0, 0.0, 1.0, 2.0, -3.0])
        g = ad.gradient(ad.tensor_sum(ad.clip(x, -1.0, 1.0)), x).data
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0, 0.0, 0.0])
