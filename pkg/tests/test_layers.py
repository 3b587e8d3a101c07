import math

import numpy.testing as npt
import pytest
import torch
import torch.nn.functional as F

from generic import DimensionError, NumericError, ConfigurationError
from layers import ConvParams, LinearParams, conv2d, conv2d_backward, linear, linear_backward, avg_pool2d, \
    avg_pool2d_backward, decode, decode_backward, softmax_ce, to_one_hot, is_spike_tensor
from gradcheck import numerical_grad, relative_error


def random_conv(in_channels, out_channels, k, stride=1, padding=0, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return ConvParams.from_tensors(torch.randn(out_channels, in_channels, k, k, generator=g, dtype=dtype),
                                   torch.randn(out_channels, generator=g, dtype=dtype), stride, padding)


def test_conv2d_identity_kernel_returns_input():
    x = torch.rand(2, 3, 4, 5, 5)
    params = ConvParams.from_tensors(torch.eye(4).view(4, 4, 1, 1), torch.zeros(4))
    torch.testing.assert_close(conv2d(x, params), x)


def test_conv2d_zero_kernel_broadcasts_bias():
    x = torch.rand(2, 1, 3, 4, 4)
    params = ConvParams.from_tensors(torch.zeros(2, 3, 3, 3), torch.tensor([0.5, -1.0]))
    out = conv2d(x, params)
    assert out.shape == (2, 1, 2, 2, 2)
    torch.testing.assert_close(out[:, :, 0], torch.full((2, 1, 2, 2), 0.5))
    torch.testing.assert_close(out[:, :, 1], torch.full((2, 1, 2, 2), -1.0))


def test_conv2d_hand_computed_sum():
    x = torch.arange(9, dtype=torch.float32).view(1, 1, 1, 3, 3)
    params = ConvParams.from_tensors(torch.ones(1, 1, 3, 3), torch.tensor([1.0]))
    assert float(conv2d(x, params).squeeze()) == 37.0


def test_conv2d_stride_and_padding_geometry():
    params = random_conv(2, 3, 3, stride=2, padding=1, dtype=torch.float32)
    out = conv2d(torch.rand(1, 2, 2, 5, 5), params)
    assert out.shape == (1, 2, 3, 3, 3)


def test_conv2d_is_applied_per_timestep():
    x = torch.rand(3, 2, 2, 6, 6, dtype=torch.float64)
    params = random_conv(2, 4, 3, padding=1)
    full = conv2d(x, params)
    for t in range(3):
        torch.testing.assert_close(full[t], conv2d(x[t:t + 1], params)[0])


def test_conv2d_is_linear_in_input():
    params = random_conv(2, 2, 3, padding=1)
    params.bias.data.zero_()
    a, b = torch.rand(2, 1, 2, 4, 4, dtype=torch.float64), torch.rand(2, 1, 2, 4, 4, dtype=torch.float64)
    torch.testing.assert_close(conv2d(2.0 * a + b, params), 2.0 * conv2d(a, params) + conv2d(b, params))


def test_conv2d_rejects_bad_shapes():
    params = random_conv(3, 2, 3, dtype=torch.float32)
    with pytest.raises(DimensionError):
        conv2d(torch.rand(1, 1, 2, 5, 5), params)
    with pytest.raises(DimensionError):
        conv2d(torch.rand(1, 1, 3, 2, 2), params)
    with pytest.raises(DimensionError):
        conv2d(torch.rand(1, 3, 5, 5), params)
    with pytest.raises(ConfigurationError):
        ConvParams(3, 2, 0)


def test_conv2d_backward_matches_autograd():
    params = random_conv(2, 3, 3, stride=2, padding=1, seed=1)
    x = torch.rand(2, 2, 2, 5, 5, dtype=torch.float64)
    grad_out = torch.rand(2, 2, 3, 3, 3, dtype=torch.float64)
    grad_x, grad_k, grad_b = conv2d_backward(grad_out, x, params)

    xr = x.clone().requires_grad_(True)
    kr = params.kernel.detach().clone().requires_grad_(True)
    br = params.bias.detach().clone().requires_grad_(True)
    out = F.conv2d(xr.reshape(4, 2, 5, 5), kr, br, stride=2, padding=1)
    out.backward(grad_out.reshape(4, 3, 3, 3))
    torch.testing.assert_close(grad_x, xr.grad)
    torch.testing.assert_close(grad_k, kr.grad)
    torch.testing.assert_close(grad_b, br.grad)


def test_conv2d_backward_matches_finite_differences():
    params = random_conv(1, 2, 3, padding=1, seed=2)
    x = torch.rand(2, 1, 1, 4, 4, dtype=torch.float64)
    weights = torch.rand(2, 1, 2, 4, 4, dtype=torch.float64)

    def loss():
        return float((conv2d(x, params) * weights).sum())

    _, grad_k, _ = conv2d_backward(weights, x, params)
    assert relative_error(grad_k, numerical_grad(loss, params.kernel)) < 1e-6


def test_linear_hand_example_and_shape():
    fc = LinearParams.from_tensors(torch.tensor([[1.0, 2.0], [3.0, 4.0]]), torch.tensor([1.0, 1.0]))
    out = linear(torch.ones(1, 1, 2), fc)
    assert out.shape == (1, 1, 2, 1, 1)
    npt.assert_allclose(out.reshape(-1).numpy(), [4.0, 8.0])


def test_linear_flattens_feature_maps():
    fc = LinearParams.from_tensors(torch.ones(1, 12), torch.zeros(1))
    out = linear(torch.ones(2, 3, 3, 2, 2), fc)
    assert out.shape == (2, 3, 1, 1, 1)
    assert bool((out == 12.0).all())
    with pytest.raises(DimensionError):
        linear(torch.ones(2, 3, 2, 2, 2), fc)


def test_linear_backward_matches_autograd():
    g = torch.Generator().manual_seed(3)
    fc = LinearParams.from_tensors(torch.randn(3, 8, generator=g, dtype=torch.float64),
                                   torch.randn(3, generator=g, dtype=torch.float64))
    x = torch.rand(2, 4, 2, 2, 2, dtype=torch.float64)
    grad_out = torch.rand(2, 4, 3, 1, 1, dtype=torch.float64)
    grad_x, grad_w, grad_b = linear_backward(grad_out, x, fc)

    xr = x.clone().requires_grad_(True)
    wr = fc.weight.detach().clone().requires_grad_(True)
    br = fc.bias.detach().clone().requires_grad_(True)
    F.linear(xr.reshape(2, 4, 8), wr, br).backward(grad_out.reshape(2, 4, 3))
    torch.testing.assert_close(grad_x, xr.grad)
    torch.testing.assert_close(grad_w, wr.grad)
    torch.testing.assert_close(grad_b, br.grad)


def test_avg_pool2d_and_backward():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 1, 2, 2)
    assert float(avg_pool2d(x, 2).squeeze()) == 2.5
    grad = avg_pool2d_backward(torch.ones(1, 1, 1, 1, 1), 2)
    torch.testing.assert_close(grad, torch.full((1, 1, 1, 2, 2), 0.25))
    with pytest.raises(DimensionError):
        avg_pool2d(torch.rand(1, 1, 1, 3, 3), 2)


def test_decode_averages_over_time():
    decoder = LinearParams.from_tensors(torch.ones(2, 3), torch.tensor([0.0, 1.0]))
    spikes = torch.zeros(2, 1, 3)
    spikes[0, 0] = 1.0
    q = decode(spikes, decoder)
    npt.assert_allclose(q.numpy(), [[1.5, 2.5]])
    assert decode(torch.ones(4, 2, 3, 1, 1), decoder).shape == (2, 2)


def test_decode_backward_matches_autograd():
    g = torch.Generator().manual_seed(4)
    decoder = LinearParams.from_tensors(torch.randn(3, 6, generator=g, dtype=torch.float64),
                                        torch.zeros(3, dtype=torch.float64))
    spikes = (torch.rand(4, 2, 6, 1, 1, generator=g, dtype=torch.float64) > 0.5).double()
    grad_q = torch.randn(2, 3, generator=g, dtype=torch.float64)
    grad_s, grad_w, _ = decode_backward(grad_q, spikes, decoder)

    sr = spikes.clone().requires_grad_(True)
    wr = decoder.weight.detach().clone().requires_grad_(True)
    F.linear(sr.reshape(4, 2, 6), wr).mean(dim=0).backward(grad_q)
    torch.testing.assert_close(grad_s, sr.grad)
    torch.testing.assert_close(grad_w, wr.grad)


def test_softmax_ce_hand_example():
    loss, grad = softmax_ce(torch.tensor([[1.0, 2.0, 3.0]]), torch.tensor([[0.0, 0.0, 1.0]]))
    assert loss == pytest.approx(0.40760596, abs=1e-5)
    npt.assert_allclose(grad.sum(dim=-1).numpy(), [0.0], atol=1e-6)


def test_softmax_ce_uniform_logits_and_gradient_scale():
    loss, grad = softmax_ce(torch.zeros(2, 4), to_one_hot(torch.tensor([0, 3]), 4))
    assert loss == pytest.approx(math.log(4.0), abs=1e-6)
    npt.assert_allclose(grad[0].numpy(), [(0.25 - 1.0) / 2, 0.125, 0.125, 0.125], atol=1e-7)


def test_softmax_ce_is_stable_for_large_logits():
    loss, grad = softmax_ce(torch.tensor([[1000.0, 0.0]]), torch.tensor([[1.0, 0.0]]))
    assert loss == pytest.approx(0.0, abs=1e-6)
    assert bool(torch.isfinite(grad).all())


def test_softmax_ce_rejects_non_finite_and_mismatched():
    with pytest.raises(NumericError):
        softmax_ce(torch.tensor([[float("nan"), 0.0]]), torch.tensor([[1.0, 0.0]]))
    with pytest.raises(DimensionError):
        softmax_ce(torch.zeros(2, 3), torch.zeros(2, 4))


def test_to_one_hot_and_spike_check():
    onehot = to_one_hot(torch.tensor([2, 0]), 3)
    npt.assert_array_equal(onehot.numpy(), [[0, 0, 1], [1, 0, 0]])
    assert is_spike_tensor(torch.tensor([0.0, 1.0, 1.0]))
    assert not is_spike_tensor(torch.tensor([0.0, 0.5]))


def test_conv2d_diagonal_kernel_cross_correlation():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 1, 2, 2)
    params = ConvParams.from_tensors(torch.tensor([[1.0, 0.0], [0.0, 1.0]]).view(1, 1, 2, 2), torch.zeros(1))
    assert float(conv2d(x, params).squeeze()) == 5.0


def test_linear_diagonal_weight():
    fc = LinearParams.from_tensors(torch.tensor([[2.0, 0.0], [0.0, 3.0]]), torch.tensor([1.0, -1.0]))
    npt.assert_allclose(linear(torch.ones(1, 1, 2), fc).reshape(-1).numpy(), [3.0, 2.0])


def test_decode_identity_decoder_averages_spike_trains():
    decoder = LinearParams.from_tensors(torch.eye(2), torch.zeros(2))
    spikes = torch.tensor([[1.0, 0.0], [1.0, 1.0]]).view(2, 1, 2)
    npt.assert_allclose(decode(spikes, decoder).numpy(), [[1.0, 0.5]])
