import logging
from dataclasses import dataclass

import torch

from generic import ConfigurationError, DimensionError, StateError
from layers import check_spatio_temporal, ConvParams, LinearParams

logger = logging.getLogger(__name__)

# per-channel statistics over time, batch and space
REDUCE_DIMS = (0, 1, 3, 4)


class TdBnParams(torch.nn.Module):
    """
    Threshold-dependent batch normalization over [T, N, C, H, W] inputs.

        y = lam * alpha * v_th * (x - mean) / sqrt(var + eps) + beta
    """

    def __init__(self, num_channels, alpha=1.0, v_th=1.0, eps=1e-5, momentum=0.1, dtype=torch.float32):
        super(TdBnParams, self).__init__()
        if num_channels < 1:
            raise ConfigurationError("tdBN needs at least one channel")
        if alpha <= 0.0 or v_th <= 0.0:
            raise ConfigurationError("tdBN alpha and v_th must be positive, got %r and %r" % (alpha, v_th))
        if eps < 0.0 or not 0.0 < momentum < 1.0:
            raise ConfigurationError("tdBN needs eps >= 0 and momentum in (0, 1), got %r and %r" % (eps, momentum))
        self.alpha = float(alpha)
        self.v_th = float(v_th)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.lam = torch.nn.Parameter(torch.ones(num_channels, dtype=dtype), requires_grad=False)
        self.beta = torch.nn.Parameter(torch.zeros(num_channels, dtype=dtype), requires_grad=False)
        self.register_buffer("running_mean", torch.zeros(num_channels, dtype=dtype))
        self.register_buffer("running_var", torch.ones(num_channels, dtype=dtype))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    @property
    def num_channels(self):
        return self.lam.shape[0]

    @property
    def scale(self):
        return self.alpha * self.v_th

    @property
    def populated(self):
        return int(self.num_batches_tracked) > 0

    def set_running_stats(self, mean, var):
        self.running_mean.copy_(mean)
        self.running_var.copy_(var)
        self.num_batches_tracked.fill_(max(1, int(self.num_batches_tracked)))

    def extra_repr(self):
        return "%d, alpha=%.4f, v_th=%.4f, eps=%g" % (self.num_channels, self.alpha, self.v_th, self.eps)


@dataclass
class TdBnCache:
    x_hat: torch.Tensor
    inv_std: torch.Tensor
    shape: tuple


def _per_channel(v):
    return v.view(1, 1, -1, 1, 1)


def _check_input(x, params):
    check_spatio_temporal(x)
    if x.shape[2] != params.num_channels:
        raise DimensionError("tdBN has %d channels but input has shape %s" % (params.num_channels, tuple(x.shape)))


def tdbn_forward_train(x, params, update_stats=True):
    _check_input(x, params)
    count = x.numel() // x.shape[2]
    if count < 2:
        raise ConfigurationError("tdBN batch statistics need at least 2 elements per channel")
    mean = x.mean(dim=REDUCE_DIMS)
    x_centered = x - _per_channel(mean)
    var = (x_centered * x_centered).mean(dim=REDUCE_DIMS)
    inv_std = torch.rsqrt(var + params.eps)
    x_hat = x_centered * _per_channel(inv_std)
    y = _per_channel(params.lam) * (params.scale * x_hat) + _per_channel(params.beta)
    if update_stats:
        m = params.momentum
        params.running_mean.mul_(1.0 - m).add_(m * mean)
        params.running_var.mul_(1.0 - m).add_(m * var)
        params.num_batches_tracked += 1
    return y, TdBnCache(x_hat=x_hat, inv_std=inv_std, shape=tuple(x.shape))


def tdbn_forward_infer(x, params):
    _check_input(x, params)
    if not params.populated:
        raise StateError("tdBN running statistics were never populated")
    factor = params.lam * params.scale * torch.rsqrt(params.running_var + params.eps)
    return (x - _per_channel(params.running_mean)) * _per_channel(factor) + _per_channel(params.beta)


def tdbn_backward(grad_y, cache, params):
    """
    Returns (grad_x, grad_lam, grad_beta). Gradients flow through the batch
    mean and variance.
    """
    if cache is None:
        raise StateError("tdbn_backward needs the cache of a train-mode forward")
    if tuple(grad_y.shape) != cache.shape:
        raise DimensionError("tdbn_backward: gradient %s does not match cached input %s"
                             % (tuple(grad_y.shape), cache.shape))
    x_hat = cache.x_hat
    grad_beta = grad_y.sum(dim=REDUCE_DIMS)
    grad_lam = (grad_y * x_hat).sum(dim=REDUCE_DIMS) * params.scale
    grad_x_hat = grad_y * _per_channel(params.lam * params.scale)
    mean_grad = _per_channel(grad_x_hat.mean(dim=REDUCE_DIMS))
    mean_proj = _per_channel((grad_x_hat * x_hat).mean(dim=REDUCE_DIMS))
    grad_x = _per_channel(cache.inv_std) * (grad_x_hat - mean_grad - x_hat * mean_proj)
    return grad_x, grad_lam, grad_beta


def fuse_into_weights(layer, params):
    """
    Fold inference-time tdBN into the preceding conv or fc layer:
        W' = W * factor,  B' = (B - running_mean) * factor + beta
    with factor = lam * alpha * v_th / sqrt(running_var + eps).
    """
    if not params.populated:
        raise StateError("cannot fuse tdBN whose running statistics were never populated")
    factor = params.lam * params.scale * torch.rsqrt(params.running_var + params.eps)
    if isinstance(layer, ConvParams):
        if layer.out_channels != params.num_channels:
            raise DimensionError("conv has %d output channels, tdBN has %d" % (layer.out_channels, params.num_channels))
        kernel = layer.kernel * factor.view(-1, 1, 1, 1)
        bias = (layer.bias - params.running_mean) * factor + params.beta
        return ConvParams.from_tensors(kernel, bias, stride=layer.stride, padding=layer.padding)
    if isinstance(layer, LinearParams):
        if layer.out_features != params.num_channels:
            raise DimensionError("fc has %d outputs, tdBN has %d" % (layer.out_features, params.num_channels))
        weight = layer.weight * factor.view(-1, 1)
        bias = (layer.bias - params.running_mean) * factor + params.beta
        return LinearParams.from_tensors(weight, bias)
    raise DimensionError("tdBN can only be fused into a conv or fc layer, got %s" % type(layer).__name__)
