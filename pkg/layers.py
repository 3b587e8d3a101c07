import math

import torch
import torch.nn.functional as F
from torch.nn.grad import conv2d_input, conv2d_weight

from generic import DimensionError, NumericError, ConfigurationError


def check_spatio_temporal(x, name="input"):
    if x.dim() != 5 or any(d < 1 for d in x.shape):
        raise DimensionError("%s must be a non-empty [T, N, C, H, W] tensor, got shape %s" % (name, tuple(x.shape)))


def is_spike_tensor(x):
    return bool(((x == 0) | (x == 1)).all())


def fold_time(x):
    # [T, N, ...] -> [T*N, ...]
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def unfold_time(x, timesteps, batch_size):
    return x.reshape(timesteps, batch_size, *x.shape[1:])


def to_one_hot(y_true, n_classes):
    y_onehot = torch.zeros(y_true.size(0), n_classes, dtype=torch.float32, device=y_true.device)
    y_onehot.scatter_(1, y_true.long().unsqueeze(-1), 1)
    return y_onehot


class ConvParams(torch.nn.Module):
    """
    Kernel and bias of a 2d convolution. Parameters never require autograd,
    gradients are written to `.grad` by the hand-derived backward pass.

    Shape:
        kernel: (C_out, C_in, k, k)
        bias: (C_out,)
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, dtype=torch.float32):
        super(ConvParams, self).__init__()
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise ConfigurationError("invalid conv geometry: in=%d out=%d k=%d stride=%d padding=%d"
                                     % (in_channels, out_channels, kernel_size, stride, padding))
        self.stride = stride
        self.padding = padding
        self.kernel = torch.nn.Parameter(torch.zeros(out_channels, in_channels, kernel_size, kernel_size, dtype=dtype),
                                         requires_grad=False)
        self.bias = torch.nn.Parameter(torch.zeros(out_channels, dtype=dtype), requires_grad=False)

    @classmethod
    def from_tensors(cls, kernel, bias, stride=1, padding=0):
        out_channels, in_channels, kernel_size, _ = kernel.shape
        params = cls(in_channels, out_channels, kernel_size, stride, padding, dtype=kernel.dtype)
        params.kernel.data.copy_(kernel)
        params.bias.data.copy_(bias)
        return params

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def kernel_size(self):
        return self.kernel.shape[-1]

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_size * self.kernel_size

    def output_size(self, height, width):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (height + 2 * p - k) // s + 1, (width + 2 * p - k) // s + 1

    def extra_repr(self):
        return "%d, %d, kernel_size=%d, stride=%d, padding=%d" % (
            self.in_channels, self.out_channels, self.kernel_size, self.stride, self.padding)


class LinearParams(torch.nn.Module):
    """
    Shape:
        weight: (D_out, D_in)
        bias: (D_out,)
    """

    def __init__(self, in_features, out_features, dtype=torch.float32):
        super(LinearParams, self).__init__()
        if in_features < 1 or out_features < 1:
            raise ConfigurationError("invalid linear geometry: in=%d out=%d" % (in_features, out_features))
        self.weight = torch.nn.Parameter(torch.zeros(out_features, in_features, dtype=dtype), requires_grad=False)
        self.bias = torch.nn.Parameter(torch.zeros(out_features, dtype=dtype), requires_grad=False)

    @classmethod
    def from_tensors(cls, weight, bias):
        params = cls(weight.shape[1], weight.shape[0], dtype=weight.dtype)
        params.weight.data.copy_(weight)
        params.bias.data.copy_(bias)
        return params

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    @property
    def fan_in(self):
        return self.in_features

    def extra_repr(self):
        return "in_features=%d, out_features=%d" % (self.in_features, self.out_features)


def conv2d(input, params):
    """
    Apply the same convolution independently at every timestep.

    Shape:
        input: (T, N, C_in, H, W)
        output: (T, N, C_out, H', W')
    """
    check_spatio_temporal(input)
    timesteps, batch_size, channels, height, width = input.shape
    if channels != params.in_channels:
        raise DimensionError("conv2d: input shape %s does not match kernel shape %s"
                             % (tuple(input.shape), tuple(params.kernel.shape)))
    out_h, out_w = params.output_size(height, width)
    if out_h < 1 or out_w < 1:
        raise DimensionError("conv2d: kernel %s does not fit input %s" % (tuple(params.kernel.shape), tuple(input.shape)))
    output = F.conv2d(fold_time(input), params.kernel, params.bias, stride=params.stride, padding=params.padding)
    return unfold_time(output, timesteps, batch_size)


def conv2d_backward(grad_output, input, params):
    """
    Returns (grad_input, grad_kernel, grad_bias), kernel and bias gradients summed over T and N.
    """
    timesteps, batch_size = input.shape[:2]
    x, g = fold_time(input), fold_time(grad_output)
    grad_input = conv2d_input(x.shape, params.kernel, g, stride=params.stride, padding=params.padding)
    grad_kernel = conv2d_weight(x, params.kernel.shape, g, stride=params.stride, padding=params.padding)
    grad_bias = g.sum(dim=(0, 2, 3))
    return unfold_time(grad_input, timesteps, batch_size), grad_kernel, grad_bias


def _flatten_features(input, in_features):
    if input.dim() == 3:
        flat = input
    elif input.dim() == 5:
        flat = input.reshape(input.shape[0], input.shape[1], -1)
    else:
        raise DimensionError("linear: expected a [T, N, D] or [T, N, C, H, W] input, got shape %s" % (tuple(input.shape),))
    if flat.shape[-1] != in_features:
        raise DimensionError("linear: input has %d features per sample, weight expects %d" % (flat.shape[-1], in_features))
    return flat


def linear(input, params):
    """
    Fully connected map on the flattened per-timestep features.

    Shape:
        input: (T, N, D_in) or (T, N, C, H, W) with C*H*W == D_in
        output: (T, N, D_out, 1, 1)
    """
    flat = _flatten_features(input, params.in_features)
    output = F.linear(flat, params.weight, params.bias)
    return output.reshape(output.shape[0], output.shape[1], output.shape[2], 1, 1)


def linear_backward(grad_output, input, params):
    flat = _flatten_features(input, params.in_features)
    g = grad_output.reshape(flat.shape[0], flat.shape[1], params.out_features)
    grad_input = torch.matmul(g, params.weight).reshape(input.shape)
    grad_weight = torch.einsum("tno,tni->oi", g, flat)
    grad_bias = g.sum(dim=(0, 1))
    return grad_input, grad_weight, grad_bias


def avg_pool2d(input, window):
    check_spatio_temporal(input)
    timesteps, batch_size, _, height, width = input.shape
    if window < 1 or height % window != 0 or width % window != 0:
        raise DimensionError("avg_pool2d: window %d does not divide spatial dims %dx%d" % (window, height, width))
    output = F.avg_pool2d(fold_time(input), window)
    return unfold_time(output, timesteps, batch_size)


def avg_pool2d_backward(grad_output, window):
    # each input cell receives 1/window^2 of its pooled cell's gradient
    grad = grad_output.repeat_interleave(window, dim=-2).repeat_interleave(window, dim=-1)
    return grad / float(window * window)


def decode(spikes, decoder):
    """
    Q = (1/T) * sum_t (W * flatten(o_t)) + b

    Shape:
        spikes: (T, N, ...) flattening to D_in features
        output: (N, D_out)
    """
    out = linear(spikes, decoder)
    return out.reshape(out.shape[0], out.shape[1], -1).mean(dim=0)


def decode_backward(grad_q, spikes, decoder):
    timesteps = spikes.shape[0]
    grad_output = grad_q.unsqueeze(0).expand(timesteps, *grad_q.shape) / float(timesteps)
    return linear_backward(grad_output, spikes, decoder)


def softmax_ce(q, labels):
    """
    Mean softmax cross-entropy over the batch.

    Returns the loss as a python float and dL/dQ = (softmax(Q) - y) / N.
    """
    if q.dim() != 2 or q.shape != labels.shape:
        raise DimensionError("softmax_ce: logits %s and labels %s must be matching [N, classes]"
                             % (tuple(q.shape), tuple(labels.shape)))
    if not bool(torch.isfinite(q).all()):
        raise NumericError("softmax_ce: logits contain non-finite values")
    labels = labels.to(q.dtype)
    log_probs = torch.log_softmax(q, dim=-1)
    loss = -(labels * log_probs).sum(dim=-1).mean()
    grad_q = (torch.exp(log_probs) - labels) / float(q.shape[0])
    loss = float(loss)
    if math.isnan(loss):
        raise NumericError("softmax_ce: loss is nan")
    return loss, grad_q
