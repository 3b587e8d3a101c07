import copy
import math
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import torch

from generic import ConfigurationError, GraphError, StateError
from layers import conv2d, conv2d_backward, linear, linear_backward, \
    avg_pool2d, avg_pool2d_backward, decode, decode_backward
from neuron import lif_forward, lif_backward, firing_rate
from tdbn import tdbn_forward_train, tdbn_forward_infer, tdbn_backward, fuse_into_weights

logger = logging.getLogger(__name__)

INPUT = "input"
MODES = ("train", "infer")


def accumulate_grad(param, grad):
    if param.grad is None:
        param.grad = grad.detach().clone()
    else:
        param.grad = param.grad + grad


class Node(torch.nn.Module):
    """
    One vertex of the network graph. `run` maps the list of input tensors to an
    output tensor plus the cache `backprop` needs; `backprop` writes parameter
    gradients to `.grad` and returns one gradient per input.
    """
    kind = None

    def __init__(self, role="main"):
        super(Node, self).__init__()
        if role not in ("main", "shortcut"):
            raise GraphError("node role must be 'main' or 'shortcut', got %r" % role)
        self.role = role

    def run(self, inputs, mode, smooth=False, update_stats=True):
        raise NotImplementedError

    def backprop(self, grad, cache):
        raise NotImplementedError


class ConvNode(Node):
    kind = "conv"

    def __init__(self, conv, role="main"):
        super(ConvNode, self).__init__(role)
        self.conv = conv

    def run(self, inputs, mode, smooth=False, update_stats=True):
        return conv2d(inputs[0], self.conv), inputs[0]

    def backprop(self, grad, cache):
        grad_input, grad_kernel, grad_bias = conv2d_backward(grad, cache, self.conv)
        accumulate_grad(self.conv.kernel, grad_kernel)
        accumulate_grad(self.conv.bias, grad_bias)
        return [grad_input]

    def fused_with(self, bn):
        return ConvNode(fuse_into_weights(self.conv, bn), role=self.role)


class FcNode(Node):
    kind = "fc"

    def __init__(self, fc, role="main"):
        super(FcNode, self).__init__(role)
        self.fc = fc

    def run(self, inputs, mode, smooth=False, update_stats=True):
        return linear(inputs[0], self.fc), inputs[0]

    def backprop(self, grad, cache):
        grad_input, grad_weight, grad_bias = linear_backward(grad, cache, self.fc)
        accumulate_grad(self.fc.weight, grad_weight)
        accumulate_grad(self.fc.bias, grad_bias)
        return [grad_input]

    def fused_with(self, bn):
        return FcNode(fuse_into_weights(self.fc, bn), role=self.role)


class TdBnNode(Node):
    kind = "tdbn"

    def __init__(self, bn, role="main"):
        super(TdBnNode, self).__init__(role)
        self.bn = bn

    def run(self, inputs, mode, smooth=False, update_stats=True):
        if mode == "infer":
            return tdbn_forward_infer(inputs[0], self.bn), None
        return tdbn_forward_train(inputs[0], self.bn, update_stats=update_stats)

    def backprop(self, grad, cache):
        grad_x, grad_lam, grad_beta = tdbn_backward(grad, cache, self.bn)
        accumulate_grad(self.bn.lam, grad_lam)
        accumulate_grad(self.bn.beta, grad_beta)
        return [grad_x]


class LifNode(Node):
    kind = "lif"

    def __init__(self, hyper, role="main"):
        super(LifNode, self).__init__(role)
        self.hyper = hyper

    def run(self, inputs, mode, smooth=False, update_stats=True):
        spikes, potentials = lif_forward(inputs[0], self.hyper, smooth=smooth)
        return spikes, (potentials, spikes)

    def backprop(self, grad, cache):
        potentials, spikes = cache
        return [lif_backward(grad, potentials, spikes, self.hyper)]

    def extra_repr(self):
        return "tau_decay=%g, v_th=%g, a=%g" % (self.hyper.tau_decay, self.hyper.v_th, self.hyper.a)


class PoolNode(Node):
    """Average pooling; window=None pools globally over the (square) spatial extent."""
    kind = "pool"

    def __init__(self, window=None, role="main"):
        super(PoolNode, self).__init__(role)
        self.window = window

    def run(self, inputs, mode, smooth=False, update_stats=True):
        x = inputs[0]
        window = self.window
        if window is None:
            if x.shape[-1] != x.shape[-2]:
                raise GraphError("global pooling needs a square feature map, got %s" % (tuple(x.shape),))
            window = x.shape[-1]
        return avg_pool2d(x, window), window

    def backprop(self, grad, cache):
        return [avg_pool2d_backward(grad, cache)]


class AddNode(Node):
    """
    Residual junction. `identity` lists the input positions that are identity
    shortcuts; every other input must come straight out of a tdBN.
    """
    kind = "add"

    def __init__(self, identity=(), role="main"):
        super(AddNode, self).__init__(role)
        self.identity = tuple(identity)

    def run(self, inputs, mode, smooth=False, update_stats=True):
        if len(inputs) < 2:
            raise GraphError("add node needs at least two inputs")
        out = inputs[0]
        for x in inputs[1:]:
            if x.shape != out.shape:
                raise GraphError("add node inputs differ in shape: %s vs %s" % (tuple(out.shape), tuple(x.shape)))
            out = out + x
        return out, len(inputs)

    def backprop(self, grad, cache):
        return [grad] * cache


class NetworkGraph(torch.nn.Module):
    """
    Directed acyclic graph of nodes feeding a rate-coded decoder. The graph
    input is named `input`; node names may not contain dots.
    """

    def __init__(self, decoder=None):
        super(NetworkGraph, self).__init__()
        self.nodes = torch.nn.ModuleDict()
        self.inputs = OrderedDict()
        self.output = INPUT
        self.decoder = decoder
        self.fused = False

    def add_node(self, name, node, inputs):
        if name == INPUT or "." in name or not name:
            raise GraphError("invalid node name %r" % name)
        if name in self.nodes:
            raise GraphError("duplicate node name %r" % name)
        if isinstance(inputs, str):
            inputs = [inputs]
        if isinstance(node, AddNode):
            if len(inputs) < 2:
                raise GraphError("add node %r needs at least two inputs" % name)
        elif len(inputs) != 1:
            raise GraphError("node %r takes exactly one input, got %d" % (name, len(inputs)))
        self.nodes[name] = node
        self.inputs[name] = list(inputs)
        self.output = name
        return name

    def set_output(self, name):
        if name != INPUT and name not in self.nodes:
            raise GraphError("unknown output node %r" % name)
        self.output = name

    def attach(self, fragment, prefix, source):
        """Copy the nodes of `fragment` under `prefix_`, wiring its input to `source`. Returns the new output name."""
        rename = {INPUT: source}
        for name in fragment.topological_order():
            new_name = "%s_%s" % (prefix, name)
            rename[name] = new_name
            self.add_node(new_name, fragment.nodes[name], [rename[i] for i in fragment.inputs[name]])
        return rename[fragment.output]

    def consumers(self, name):
        return [n for n, ins in self.inputs.items() if name in ins]

    def topological_order(self):
        """Kahn's algorithm, ties broken by insertion order."""
        names = list(self.nodes.keys())
        position = {n: i for i, n in enumerate(names)}
        indegree = {}
        for name in names:
            for src in self.inputs[name]:
                if src != INPUT and src not in self.nodes:
                    raise GraphError("node %r reads from unknown node %r" % (name, src))
            indegree[name] = sum(1 for src in self.inputs[name] if src != INPUT)
        ready = sorted([n for n in names if indegree[n] == 0], key=position.get)
        order = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            released = []
            for consumer in names:
                count = self.inputs[consumer].count(name)
                if count:
                    indegree[consumer] -= count
                    if indegree[consumer] == 0:
                        released.append(consumer)
            ready = sorted(ready + released, key=position.get)
        if len(order) != len(names):
            stuck = [n for n in names if n not in order]
            raise GraphError("network graph has a cycle through %s" % ", ".join(stuck))
        return order

    def nodes_of_kind(self, kind):
        return [name for name in self.topological_order() if self.nodes[name].kind == kind]

    def weighted_nodes(self):
        return [name for name in self.topological_order() if self.nodes[name].kind in ("conv", "fc")]

    def validate(self, require_tdbn=True):
        order = self.topological_order()
        if self.decoder is None:
            raise GraphError("network has no decoder")
        for name in order:
            node = self.nodes[name]
            sources = [self.nodes[s] if s != INPUT else None for s in self.inputs[name]]
            if isinstance(node, LifNode) and require_tdbn and not self.fused:
                if not isinstance(sources[0], (TdBnNode, AddNode)):
                    raise GraphError("LIF node %r must follow a tdBN or a residual junction" % name)
            if isinstance(node, AddNode):
                for index, (src, src_node) in enumerate(zip(self.inputs[name], sources)):
                    if index in node.identity:
                        continue
                    expected = (ConvNode, FcNode) if self.fused else (TdBnNode,)
                    if not isinstance(src_node, expected):
                        raise GraphError("junction %r: branch %r is neither normalized nor tagged identity" % (name, src))
        return order


def assign_alpha(net):
    """
    alpha = 1/sqrt(n) for the n normalized branches meeting at an n-way junction
    (identity shortcuts count toward n), alpha = 1 for every other tdBN.
    """
    for node in net.nodes.values():
        if isinstance(node, TdBnNode):
            node.bn.alpha = 1.0
    for name, node in net.nodes.items():
        if not isinstance(node, AddNode):
            continue
        fan = len(net.inputs[name])
        for index, src in enumerate(net.inputs[name]):
            if index in node.identity:
                continue
            src_node = net.nodes[src] if src != INPUT else None
            if not isinstance(src_node, TdBnNode):
                raise GraphError("junction %r: branch %r is neither normalized nor tagged identity" % (name, src))
            src_node.bn.alpha = 1.0 / math.sqrt(fan)
    return net


def check_alpha_invariant(net, tol=1e-6):
    """
    Per junction, the summed pre-synaptic variance budget: alpha^2 over the
    normalized branches plus 1/n per identity branch. Raises GraphError unless
    every budget is 1.
    """
    budget = OrderedDict()
    for name, node in net.nodes.items():
        if not isinstance(node, AddNode):
            continue
        fan = len(net.inputs[name])
        total = 0.0
        for index, src in enumerate(net.inputs[name]):
            if index in node.identity:
                total += 1.0 / fan
            else:
                total += net.nodes[src].bn.alpha ** 2
        if abs(total - 1.0) > tol:
            raise GraphError("junction %r: branch variances sum to %.6f instead of 1" % (name, total))
        budget[name] = total
    return budget


@dataclass
class NetworkCache:
    mode: str
    order: list
    node_caches: dict = field(default_factory=dict)
    node_inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    decoder_input: torch.Tensor = None
    # filled by backward_pass when keep_grads=True
    output_grads: dict = field(default_factory=dict)
    edge_grads: dict = field(default_factory=dict)
    consumed: bool = False


def forward_pass(net, x, mode="train", smooth=False, update_stats=True):
    """
    Run the graph on a [T, N, C, H, W] input and decode to class scores.

    Returns (Q, caches); Q has shape (N, classes).
    """
    if mode not in MODES:
        raise ConfigurationError("mode must be one of %s, got %r" % (MODES, mode))
    if net.decoder is None:
        raise GraphError("network has no decoder")
    order = net.topological_order()
    caches = NetworkCache(mode=mode, order=order)
    values = {INPUT: x}
    for name in order:
        node = net.nodes[name]
        inputs = [values[src] for src in net.inputs[name]]
        out, cache = node.run(inputs, mode, smooth=smooth, update_stats=update_stats)
        values[name] = out
        caches.node_inputs[name] = inputs
        caches.outputs[name] = out
        if mode == "train":
            caches.node_caches[name] = cache
    caches.decoder_input = values[net.output]
    return decode(caches.decoder_input, net.decoder), caches


def backward_pass(net, grad_q, caches, keep_grads=False):
    """
    Reverse-topological sweep. Gradients reaching a node from several
    consumers are summed. Parameter gradients land in `.grad` and are
    returned keyed by parameter name; the caches are released.
    """
    if caches is None or caches.mode != "train":
        raise StateError("backward_pass needs the caches of a train-mode forward_pass")
    if caches.consumed:
        raise StateError("forward caches were already consumed by a backward pass")
    net.zero_grad(set_to_none=True)
    grad_input, grad_weight, grad_bias = decode_backward(grad_q, caches.decoder_input, net.decoder)
    accumulate_grad(net.decoder.weight, grad_weight)
    accumulate_grad(net.decoder.bias, grad_bias)
    pending = {net.output: grad_input}
    for name in reversed(caches.order):
        if name not in pending:
            continue
        if name not in caches.node_caches:
            raise StateError("no forward cache for node %r" % name)
        grad = pending.pop(name)
        if keep_grads:
            caches.output_grads[name] = grad
        input_grads = net.nodes[name].backprop(grad, caches.node_caches[name])
        for src, g in zip(net.inputs[name], input_grads):
            if keep_grads:
                caches.edge_grads[(src, name)] = g
            pending[src] = pending[src] + g if src in pending else g
    caches.node_caches.clear()
    caches.consumed = True
    return OrderedDict((name, p.grad) for name, p in net.named_parameters() if p.grad is not None)


def fuse_network(net):
    """
    Copy of `net` with every tdBN folded into the conv or fc layer feeding it.
    The running statistics of every tdBN must be populated.
    """
    if net.fused:
        raise StateError("network is already fused")
    fused = NetworkGraph(decoder=copy.deepcopy(net.decoder))
    fused.fused = True
    alias = {INPUT: INPUT}
    for name in net.topological_order():
        node = net.nodes[name]
        if isinstance(node, TdBnNode):
            src = net.inputs[name][0]
            producer = net.nodes[src] if src != INPUT else None
            if not isinstance(producer, (ConvNode, FcNode)) or len(net.consumers(src)) != 1:
                raise GraphError("tdBN %r must be the only consumer of a conv or fc layer to be fused" % name)
            fused.nodes[alias[src]] = producer.fused_with(node.bn)
            alias[name] = alias[src]
            continue
        fused.add_node(name, copy.deepcopy(node), [alias[src] for src in net.inputs[name]])
        alias[name] = name
    fused.set_output(alias[net.output])
    logger.debug("folded %d tdBN layers, %d nodes remain", len(net.nodes_of_kind("tdbn")), len(fused.nodes))
    return fused


def network_firing_rates(net, caches):
    rates = OrderedDict()
    for name in caches.order:
        if net.nodes[name].kind == "lif":
            rates[name] = firing_rate(caches.outputs[name])
    return rates


def running_stats_populated(net):
    return all(node.bn.populated for node in net.nodes.values() if isinstance(node, TdBnNode))
