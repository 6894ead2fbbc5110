"""Layer kernels against independent oracles.

The convolution oracle is a direct quadruple loop; the gradient oracle
is central finite differences through the network's own forward pass.
"""

import numpy as np
import pytest

from cactusnet.errors import ShapeMismatchError
from cactusnet.nn import LayerSpec, Network, backward, conv2d, forward
from cactusnet.nn.layers import maxpool2d, maxpool2d_backward, softmax


def conv2d_loop_oracle(image, kernels, stride=1):
    """Direct-loop valid convolution, accumulated in float64."""
    h, w, c_in = image.shape
    kh, kw, _, c_out = kernels.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((ho, wo, c_out), dtype=np.float64)
    for oy in range(ho):
        for ox in range(wo):
            for ky in range(kh):
                for kx in range(kw):
                    for ci in range(c_in):
                        for co in range(c_out):
                            out[oy, ox, co] += (
                                float(image[oy * stride + ky, ox * stride + kx, ci])
                                * float(kernels[ky, kx, ci, co]))
    return out


class TestConv2d:
    def test_identity_kernel(self):
        img = np.arange(9, dtype=np.float32).reshape(3, 3, 1)
        k = np.ones((1, 1, 1, 1), dtype=np.float32)
        np.testing.assert_array_equal(conv2d(img, k, 1), img)

    def test_zero_kernel_annihilates(self):
        rng = np.random.default_rng(0)
        img = rng.random((5, 4, 2), dtype=np.float32)
        k = np.zeros((2, 2, 2, 3), dtype=np.float32)
        np.testing.assert_array_equal(conv2d(img, k, 1),
                                      np.zeros((4, 3, 3), dtype=np.float32))

    def test_matches_loop_oracle_4x4(self):
        rng = np.random.default_rng(7)
        img = rng.random((4, 4, 1), dtype=np.float32)
        k = rng.random((2, 2, 1, 1), dtype=np.float32)
        got = conv2d(img, k, 1)
        want = conv2d_loop_oracle(img, k, 1)
        assert got.shape == (3, 3, 1)
        np.testing.assert_allclose(got, want, atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(2, 9, size=2)
        kh = int(rng.integers(1, h + 1))
        kw = int(rng.integers(1, w + 1))
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        img = rng.standard_normal((h, w, c_in))
        k = rng.standard_normal((kh, kw, c_in, c_out))
        np.testing.assert_allclose(conv2d(img, k, stride),
                                   conv2d_loop_oracle(img, k, stride),
                                   rtol=1e-6, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        img = np.zeros((3, 3, 2), dtype=np.float32)
        k = np.zeros((2, 2, 1, 4), dtype=np.float32)
        with pytest.raises(ShapeMismatchError) as exc:
            conv2d(img, k)
        assert "(3, 3, 2)" in str(exc.value) and "(2, 2, 1, 4)" in str(exc.value)

    def test_kernel_larger_than_input_rejected(self):
        img = np.zeros((2, 2, 1), dtype=np.float32)
        k = np.zeros((3, 3, 1, 1), dtype=np.float32)
        with pytest.raises(ShapeMismatchError):
            conv2d(img, k)


class TestMaxPool:
    def test_known_values(self):
        x = np.array([[1, 2, 5, 3],
                      [4, 0, 1, 2],
                      [3, 1, 6, 0],
                      [2, 2, 1, 1]], dtype=np.float32).reshape(1, 4, 4, 1)
        out, _ = maxpool2d(x, (2, 2), 2)
        np.testing.assert_array_equal(out.reshape(2, 2), [[4, 5], [3, 6]])

    def test_backward_routes_to_argmax(self):
        x = np.array([[1, 2], [4, 0]], dtype=np.float32).reshape(1, 2, 2, 1)
        out, idx = maxpool2d(x, (2, 2), 2)
        dout = np.ones_like(out)
        dx = maxpool2d_backward(x.shape, idx, dout, (2, 2), 2)
        np.testing.assert_array_equal(dx.reshape(2, 2), [[0, 0], [1, 0]])


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((16, 7)).astype(np.float32) * 10
        y = softmax(x)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-5)
        assert (y >= 0).all() and (y <= 1).all()


# ---------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------

def kink_margin(net, batch):
    """Distance of the forward pass from ReLU/max-pool non-smoothness.

    Finite differences are only a valid oracle where the loss is locally
    smooth; a parameter step of 1e-3 moves activations by well under the
    0.02 margin enforced by ``draw_kink_safe``.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    trace = forward(net, batch)
    margin = np.inf
    x = net._normalize_batch(batch)
    for i, spec in enumerate(net.specs):
        inp = x if i == 0 else trace[i - 1]
        if spec.kind == "ReLU":
            margin = min(margin, float(np.abs(inp).min()))
        elif spec.kind == "MaxPool2D":
            kh, kw = spec.kernel
            win = sliding_window_view(inp, (kh, kw), axis=(1, 2))
            win = win[:, ::spec.stride, ::spec.stride]
            flat = np.sort(win.reshape(win.shape[:4] + (kh * kw,)), axis=-1)
            if flat.shape[-1] > 1:
                gap = flat[..., -1] - flat[..., -2]
                # an exact 0/0 tie is a fully clipped ReLU window; it stays
                # pinned at zero under small parameter steps, so it is safe
                live = ~((flat[..., -1] == 0) & (flat[..., -2] == 0))
                if live.any():
                    margin = min(margin, float(gap[live].min()))
    return margin


def draw_kink_safe(net, input_shape, rng, n=3, min_margin=0.02, tries=50):
    """Draw a batch whose forward pass stays away from ReLU/pool kinks.

    Prefers a margin of ``min_margin``; otherwise takes the best draw
    seen, down to a hard floor of 8e-3 (a 1e-3 parameter step moves any
    activation in these nets by well under 4e-3).
    """
    best, best_margin = None, -np.inf
    for _ in range(tries):
        batch = rng.standard_normal((n,) + tuple(input_shape))
        margin = kink_margin(net, batch)
        if margin > min_margin:
            return batch
        if margin > best_margin:
            best, best_margin = batch, margin
    if best_margin >= 8e-3:
        return best
    raise AssertionError(
        f"could not draw a kink-safe batch (best margin {best_margin:.4f})")


def finite_difference_grads(net, batch, targets, loss_kind, step=1e-3):
    """Central finite differences of the loss w.r.t. every parameter."""
    fd = {}
    for i in net.unfrozen_param_layers():
        fd[i] = {}
        for key in ("W", "b"):
            base = net.params[i][key]
            g = np.zeros_like(base, dtype=np.float64)
            flat = base.reshape(-1)
            for j in range(flat.size):
                for sign in (+1.0, -1.0):
                    bumped = base.copy().reshape(-1)
                    bumped[j] += sign * step
                    params = list(net.params)
                    params[i] = dict(net.params[i], **{key: bumped.reshape(base.shape)})
                    _, loss = backward(net.with_params(params), batch, targets, loss_kind)
                    g.reshape(-1)[j] += sign * loss / (2 * step)
            fd[i][key] = g
    return fd


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    for i in numeric:
        for key in ("W", "b"):
            a, b = analytic[i][key], numeric[i][key]
            np.testing.assert_allclose(a, b, rtol=rtol, atol=atol,
                                       err_msg=f"layer {i} {key}")


def small_net(specs, input_shape, seed):
    # float64 copies keep the finite-difference quotients meaningful
    return Network.build(specs, input_shape, seed).astype(np.float64)


GRADCHECK_CASES = {
    "dense_relu_softmax_ce": (
        [LayerSpec.dense(5), LayerSpec.relu(), LayerSpec.dense(3), LayerSpec.softmax()],
        (4,), "CrossEntropy"),
    "dense_mse": ([LayerSpec.dense(3)], (6,), "MSE"),
    "conv_relu_dense_softmax_ce": (
        [LayerSpec.conv(2, 3), LayerSpec.relu(), LayerSpec.flatten(),
         LayerSpec.dense(2), LayerSpec.softmax()],
        (6, 6, 1), "CrossEntropy"),
    "conv_pool_dense_mse": (
        [LayerSpec.conv(3, 2, stride=2), LayerSpec.maxpool(2), LayerSpec.flatten(),
         LayerSpec.dense(2)],
        (8, 7, 2), "MSE"),
    "conv_stride_softmax_ce": (
        [LayerSpec.conv(2, (2, 3), stride=2), LayerSpec.relu(), LayerSpec.maxpool(2, 1),
         LayerSpec.flatten(), LayerSpec.dense(3), LayerSpec.softmax()],
        (7, 8, 1), "CrossEntropy"),
}


@pytest.mark.parametrize("case", sorted(GRADCHECK_CASES))
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(case, seed):
    specs, input_shape, loss_kind = GRADCHECK_CASES[case]
    rng = np.random.default_rng(seed)
    net = small_net(specs, input_shape, seed=seed * 101 + 5)
    batch = draw_kink_safe(net, input_shape, rng)
    width = net.output_shape[0]
    if loss_kind == "CrossEntropy":
        targets = np.eye(width)[rng.integers(0, width, size=3)]
    else:
        targets = rng.standard_normal((3, width))
    analytic, _ = backward(net, batch, targets, loss_kind)
    numeric = finite_difference_grads(net, batch, targets, loss_kind)
    assert_grads_close(analytic, numeric)


def test_frozen_layers_produce_no_gradients():
    specs = [LayerSpec.dense(4, frozen=True), LayerSpec.relu(),
             LayerSpec.dense(2), LayerSpec.softmax()]
    net = Network.build(specs, (3,), seed=0)
    rng = np.random.default_rng(0)
    batch = rng.standard_normal((2, 3)).astype(np.float32)
    targets = np.eye(2, dtype=np.float32)
    grads, _ = backward(net, batch, targets)
    assert set(grads) == {2}
