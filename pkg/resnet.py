import math
import logging
from dataclasses import dataclass

import torch

from generic import ConfigurationError, GraphError
from layers import ConvParams, LinearParams
from model import NetworkGraph, ConvNode, FcNode, TdBnNode, LifNode, PoolNode, AddNode, INPUT, assign_alpha
from neuron import LifHyper
from tdbn import TdBnParams

logger = logging.getLogger(__name__)

BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class StageSpec:
    block: str  # "basic" or "bottleneck"
    channels: int
    repeats: int
    stride: int  # stride of the first block of the stage


@dataclass(frozen=True)
class ArchSpec:
    stem_kernel: int
    stem_channels: int
    stem_stride: int
    stages: tuple
    head_pool: int = 0  # 0: none, -1: global average, k: k x k average pooling
    head_fc: int = 0


ARCHITECTURES = {
    "resnet8": ArchSpec(3, 16, 1, (StageSpec("basic", 16, 1, 1),
                                   StageSpec("basic", 32, 1, 2),
                                   StageSpec("basic", 64, 1, 2))),
    "resnet17": ArchSpec(3, 64, 1, (StageSpec("basic", 64, 3, 2),
                                    StageSpec("basic", 128, 4, 2)), head_pool=2, head_fc=256),
    "resnet19": ArchSpec(3, 128, 1, (StageSpec("basic", 128, 3, 1),
                                     StageSpec("basic", 256, 3, 2),
                                     StageSpec("basic", 512, 2, 2)), head_pool=2, head_fc=256),
    "resnet34": ArchSpec(7, 64, 2, (StageSpec("basic", 64, 3, 2),
                                    StageSpec("basic", 128, 4, 2),
                                    StageSpec("basic", 256, 6, 2),
                                    StageSpec("basic", 512, 3, 2)), head_pool=-1),
    "resnet34_large": ArchSpec(7, 128, 2, (StageSpec("basic", 128, 3, 2),
                                           StageSpec("basic", 256, 4, 2),
                                           StageSpec("basic", 512, 6, 2),
                                           StageSpec("basic", 1024, 3, 2)), head_pool=-1),
    "resnet50": ArchSpec(7, 64, 2, (StageSpec("bottleneck", 64, 3, 2),
                                    StageSpec("bottleneck", 128, 4, 2),
                                    StageSpec("bottleneck", 256, 6, 2),
                                    StageSpec("bottleneck", 512, 3, 2)), head_pool=-1),
}


def _normalized_conv(net, name, source, in_channels, out_channels, kernel_size, stride, lif_hyper,
                     eps, momentum, role="main", fire=True):
    """conv -> tdBN (-> LIF). Returns the name of the last node added."""
    conv = ConvParams(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2)
    net.add_node(name, ConvNode(conv, role=role), [source])
    bn = TdBnParams(out_channels, v_th=lif_hyper.v_th, eps=eps, momentum=momentum)
    net.add_node(name + "_bn", TdBnNode(bn, role=role), [name])
    if not fire:
        return name + "_bn"
    net.add_node(name + "_lif", LifNode(lif_hyper, role=role), [name + "_bn"])
    return name + "_lif"


def _junction(net, main, in_channels, out_channels, stride, lif_hyper, eps, momentum):
    if stride != 1 or in_channels != out_channels:
        shortcut = _normalized_conv(net, "shortcut", INPUT, in_channels, out_channels, 1, stride, lif_hyper,
                                    eps, momentum, role="shortcut", fire=False)
        net.add_node("add", AddNode(), [main, shortcut])
    else:
        net.add_node("add", AddNode(identity=(1,)), [main, INPUT])
    net.add_node("lif", LifNode(lif_hyper), ["add"])
    assign_alpha(net)
    return net


def build_basic_block(in_channels, out_channels, stride=1, lif_hyper=None, eps=1e-5, momentum=0.1):
    """
    Two 3x3 normalized convolutions plus a shortcut that is the identity, or a
    1x1 normalized projection when the block changes width or resolution.
    """
    lif_hyper = lif_hyper or LifHyper()
    net = NetworkGraph()
    out = _normalized_conv(net, "conv1", INPUT, in_channels, out_channels, 3, stride, lif_hyper, eps, momentum)
    main = _normalized_conv(net, "conv2", out, out_channels, out_channels, 3, 1, lif_hyper, eps, momentum, fire=False)
    return _junction(net, main, in_channels, out_channels, stride, lif_hyper, eps, momentum)


def build_bottleneck_block(in_channels, mid_channels, stride=1, lif_hyper=None, eps=1e-5, momentum=0.1):
    lif_hyper = lif_hyper or LifHyper()
    out_channels = mid_channels * BOTTLENECK_EXPANSION
    net = NetworkGraph()
    out = _normalized_conv(net, "conv1", INPUT, in_channels, mid_channels, 1, 1, lif_hyper, eps, momentum)
    out = _normalized_conv(net, "conv2", out, mid_channels, mid_channels, 3, stride, lif_hyper, eps, momentum)
    main = _normalized_conv(net, "conv3", out, mid_channels, out_channels, 1, 1, lif_hyper, eps, momentum, fire=False)
    return _junction(net, main, in_channels, out_channels, stride, lif_hyper, eps, momentum)


def _scaled(channels, width_divisor):
    return max(1, channels // width_divisor)


def _strided(size, kernel_size, stride):
    return (size + 2 * (kernel_size // 2) - kernel_size) // stride + 1


def build_resnet(name, input_channels, classes, input_size, lif_hyper=None, eps=1e-5, momentum=0.1,
                 width_divisor=1):
    """
    Build one of ARCHITECTURES as a NetworkGraph. `input_size` is the (square)
    spatial extent of the input frames, needed to size the flattening layers.
    """
    if name not in ARCHITECTURES:
        raise ConfigurationError("unknown architecture %r, choose from %s" % (name, ", ".join(sorted(ARCHITECTURES))))
    if width_divisor < 1:
        raise ConfigurationError("width_divisor must be >= 1")
    spec = ARCHITECTURES[name]
    lif_hyper = lif_hyper or LifHyper()
    net = NetworkGraph()

    channels = _scaled(spec.stem_channels, width_divisor)
    out = _normalized_conv(net, "conv1", INPUT, input_channels, channels, spec.stem_kernel, spec.stem_stride,
                           lif_hyper, eps, momentum)
    size = _strided(input_size, spec.stem_kernel, spec.stem_stride)

    for stage_id, stage in enumerate(spec.stages):
        for block_id in range(stage.repeats):
            stride = stage.stride if block_id == 0 else 1
            width = _scaled(stage.channels, width_divisor)
            if stage.block == "basic":
                block = build_basic_block(channels, width, stride, lif_hyper, eps, momentum)
                channels = width
            else:
                block = build_bottleneck_block(channels, width, stride, lif_hyper, eps, momentum)
                channels = width * BOTTLENECK_EXPANSION
            out = net.attach(block, "layer%d_%d" % (stage_id + 1, block_id), out)
            size = _strided(size, 3, stride)
    if size < 1:
        raise ConfigurationError("input size %d is too small for %s" % (input_size, name))

    if spec.head_pool == -1:
        out = net.add_node("pool", PoolNode(), [out])
        size = 1
    elif spec.head_pool > 0:
        if size % spec.head_pool != 0:
            raise ConfigurationError("feature map of size %d cannot be pooled by %d" % (size, spec.head_pool))
        out = net.add_node("pool", PoolNode(spec.head_pool), [out])
        size //= spec.head_pool
    features = channels * size * size

    if spec.head_fc:
        width = _scaled(spec.head_fc, width_divisor)
        net.add_node("fc1", FcNode(LinearParams(features, width)), [out])
        net.add_node("fc1_bn", TdBnNode(TdBnParams(width, v_th=lif_hyper.v_th, eps=eps, momentum=momentum)), ["fc1"])
        out = net.add_node("fc1_lif", LifNode(lif_hyper), ["fc1_bn"])
        features = width

    net.set_output(out)
    net.decoder = LinearParams(features, classes)
    net.validate()
    logger.info("built %s: %d weighted layers, %d parameters", name, count_weighted_layers(net),
                sum(p.numel() for p in net.parameters()))
    return net


def build_plain(depth, input_channels, channels, classes, input_size, lif_hyper=None, use_tdbn=True,
                eps=1e-5, momentum=0.1):
    """
    Shortcut-free stack of `depth` weighted layers: an encoding 3x3 conv,
    depth - 2 hidden 3x3 convs and the decoder.
    """
    if depth < 3:
        raise ConfigurationError("a plain network needs depth >= 3, got %d" % depth)
    lif_hyper = lif_hyper or LifHyper()
    net = NetworkGraph()
    out = INPUT
    in_channels = input_channels
    for layer in range(1, depth):
        name = "conv%d" % layer
        if use_tdbn:
            out = _normalized_conv(net, name, out, in_channels, channels, 3, 1, lif_hyper, eps, momentum)
        else:
            net.add_node(name, ConvNode(ConvParams(in_channels, channels, 3, padding=1)), [out])
            out = net.add_node(name + "_lif", LifNode(lif_hyper), [name])
        in_channels = channels
    net.set_output(out)
    net.decoder = LinearParams(channels * input_size * input_size, classes)
    net.validate(require_tdbn=use_tdbn)
    return net


def count_weighted_layers(net):
    return len(net.weighted_nodes()) + (1 if net.decoder is not None else 0) - \
        sum(1 for n in net.weighted_nodes() if net.nodes[n].role == "shortcut")


def init_weights(net, seed):
    """
    Kaiming-normal init, N(0, 2 / fan_in) for every conv, fc and decoder weight,
    zero biases, lam = 1 and beta = 0. Same seed, same weights.
    """
    generator = torch.Generator().manual_seed(seed)
    layers = [net.nodes[name] for name in net.topological_order()]
    with torch.no_grad():
        for node in layers:
            if isinstance(node, ConvNode):
                _kaiming(node.conv.kernel, node.conv.fan_in, generator)
                node.conv.bias.zero_()
            elif isinstance(node, FcNode):
                _kaiming(node.fc.weight, node.fc.fan_in, generator)
                node.fc.bias.zero_()
            elif isinstance(node, TdBnNode):
                node.bn.lam.fill_(1.0)
                node.bn.beta.zero_()
        if net.decoder is None:
            raise GraphError("network has no decoder")
        _kaiming(net.decoder.weight, net.decoder.fan_in, generator)
        net.decoder.bias.zero_()
    return net


def _kaiming(weight, fan_in, generator):
    std = math.sqrt(2.0 / fan_in)
    weight.copy_(torch.randn(weight.shape, generator=generator, dtype=torch.float64).to(weight.dtype) * std)


def build_network(config, input_channels, classes, input_size):
    hyper = LifHyper(config.tau_decay, config.v_th, config.surrogate_width, config.detach_reset)
    net = build_resnet(config.arch, input_channels, classes, input_size, lif_hyper=hyper, eps=config.tdbn_eps,
                       momentum=config.tdbn_momentum, width_divisor=config.width_divisor)
    return init_weights(net, config.seed)
