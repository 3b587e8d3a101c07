import csv
import math
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from generic import ConfigurationError, StateError, to_np
from layers import fold_time, is_spike_tensor, softmax_ce, to_one_hot
from model import forward_pass, backward_pass, running_stats_populated, ConvNode, FcNode
from neuron import LifHyper, lif_forward, firing_rate
from resnet import build_plain, init_weights

logger = logging.getLogger(__name__)

# 45nm energy per operation, picojoules
ENERGY_MAC_PJ = 4.6
ENERGY_AC_PJ = 0.9


def _normal_cdf(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def isometric_surrogate_width(v_th=1.0, sigma=None, tol=1e-10):
    """
    Surrogate width that keeps back-propagated gradient energy constant across
    layers of a tdBN-normalized stack. With pre-activations ~ N(0, sigma^2) and
    firing rate r = P(u > v_th), solve

        (Phi((v_th + a/2)/sigma) - Phi((v_th - a/2)/sigma)) / a^2 = r * (1 - r)

    for a. For sigma = v_th this gives a ~= 1.8 * v_th.
    """
    sigma = v_th if sigma is None else sigma
    if v_th <= 0.0 or sigma <= 0.0:
        raise ConfigurationError("v_th and sigma must be positive")
    rate = 1.0 - _normal_cdf(v_th / sigma)
    target = rate * (1.0 - rate)

    def excess(a):
        mass = _normal_cdf((v_th + a / 2.0) / sigma) - _normal_cdf((v_th - a / 2.0) / sigma)
        return mass / (a * a) - target

    low, high = 1e-3 * sigma, 20.0 * sigma
    while high - low > tol * sigma:
        mid = 0.5 * (low + high)
        if excess(mid) > 0.0:
            low = mid
        else:
            high = mid
    return 0.5 * (low + high)


def resolve_surrogate_width(choice, neuron_width, v_th=1.0):
    """`neuron` keeps the configured neuron width, `auto` picks the isometric one, anything else is a number."""
    if choice == "neuron":
        return float(neuron_width)
    if choice == "auto":
        return isometric_surrogate_width(v_th)
    width = float(choice)
    if width <= 0.0:
        raise ConfigurationError("surrogate width must be positive, got %r" % choice)
    return width


@dataclass
class GradNormProfile:
    depth: int
    tau_decay: float
    use_tdbn: bool
    surrogate_width: float
    layers: list
    norms: np.ndarray

    @property
    def ratio(self):
        """max / min layer norm; inf when some layer receives no gradient at all."""
        low = float(np.min(self.norms))
        if low <= 0.0 or not np.all(np.isfinite(self.norms)):
            return math.inf
        return float(np.max(self.norms)) / low

    def within(self, band):
        return 1.0 / band <= self.ratio <= band


def grad_norm_profile(depth, tau_decay, batch_size=8, seed=0, use_tdbn=True, channels=16, image_size=8,
                      timesteps=4, classes=10, v_th=1.0, surrogate_width=None, repeats=4):
    """
    Mean L2 norm of the weight gradient of every hidden layer of a plain
    depth-`depth` spiking stack at initialization. The encoding conv and the
    decoder are left out of the profile.
    """
    width = isometric_surrogate_width(v_th) if surrogate_width is None else surrogate_width
    hyper = LifHyper(tau_decay=tau_decay, v_th=v_th, a=width)
    net = build_plain(depth, 3, channels, classes, image_size, lif_hyper=hyper, use_tdbn=use_tdbn)
    init_weights(net, seed)
    hidden = [n for n in net.weighted_nodes()][1:]
    generator = torch.Generator().manual_seed(seed + 1)
    totals = np.zeros(len(hidden))
    for _ in range(repeats):
        images = torch.randn(batch_size, 3, image_size, image_size, generator=generator)
        labels = torch.randint(classes, (batch_size,), generator=generator)
        x = images.unsqueeze(0).expand(timesteps, *images.shape).contiguous()
        q, caches = forward_pass(net, x, mode="train")
        _, grad_q = softmax_ce(q, to_one_hot(labels, classes))
        grads = backward_pass(net, grad_q, caches)
        for i, name in enumerate(hidden):
            grad = grads.get("nodes.%s.conv.kernel" % name)
            totals[i] += 0.0 if grad is None else float(grad.norm())
    profile = GradNormProfile(depth=depth, tau_decay=tau_decay, use_tdbn=use_tdbn, surrogate_width=width,
                              layers=hidden, norms=totals / repeats)
    logger.info("gradient norm profile depth=%d tau=%g tdbn=%s a=%.4g: ratio %.4g", depth, tau_decay, use_tdbn, width,
                profile.ratio)
    return profile


@dataclass
class VariancePoint:
    sigma_in_sq: float
    measured_in_var: float
    sigma_out_sq: float
    firing_rate: float


def membrane_variance_scan(sigma_in_list, tau_decay=0.25, v_th=None, samples=4096, timesteps=64, burn_in=None,
                           seed=0):
    """
    Drive independent LIF neurons with i.i.d. N(0, sigma^2) currents and measure
    the steady-state variance of the membrane potential. The same standard
    normal draw is scaled for every sigma. v_th=None puts the threshold at
    10 sigma, which keeps the neurons silent.
    """
    burn_in = timesteps // 2 if burn_in is None else burn_in
    if not 0 <= burn_in < timesteps:
        raise ConfigurationError("burn_in must lie in [0, timesteps)")
    generator = torch.Generator().manual_seed(seed)
    z = torch.randn(timesteps, samples, 1, 1, 1, generator=generator, dtype=torch.float64)
    points = []
    for sigma in sigma_in_list:
        threshold = 10.0 * sigma if v_th is None else v_th
        x = sigma * z
        spikes, potentials = lif_forward(x, LifHyper(tau_decay=tau_decay, v_th=threshold, a=1.0))
        points.append(VariancePoint(sigma_in_sq=float(sigma) ** 2,
                                    measured_in_var=float(x[burn_in:].var(unbiased=False)),
                                    sigma_out_sq=float(potentials[burn_in:].var(unbiased=False)),
                                    firing_rate=firing_rate(spikes[burn_in:])))
    return points


def fit_proportionality(points):
    """Least-squares line through (sigma_in^2, sigma_out^2); returns (slope, intercept, r_squared)."""
    x = np.array([p.sigma_in_sq for p in points])
    y = np.array([p.sigma_out_sq for p in points])
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 - np.sum(residual ** 2) / total if total > 0 else 1.0
    return float(slope), float(intercept), float(r_squared)


@dataclass
class FiringRatePoint:
    sigma_in_sq: float
    mean_rate: float
    histogram: np.ndarray


def firing_rate_scan(sigma_in_list, tau_decay=0.25, v_th=1.0, timesteps=8, samples=4096, seed=0, bins=10):
    """Per-timestep firing rate of free LIF neurons under N(0, sigma^2) drive, common random numbers across sigma."""
    generator = torch.Generator().manual_seed(seed)
    z = torch.randn(timesteps, samples, 1, 1, 1, generator=generator, dtype=torch.float64)
    hyper = LifHyper(tau_decay=tau_decay, v_th=v_th, a=1.0)
    points = []
    for sigma in sigma_in_list:
        spikes, _ = lif_forward(sigma * z, hyper)
        per_neuron = to_np(spikes.mean(dim=0)).reshape(-1)
        histogram, _ = np.histogram(per_neuron, bins=bins, range=(0.0, 1.0))
        points.append(FiringRatePoint(sigma_in_sq=float(sigma) ** 2, mean_rate=firing_rate(spikes),
                                      histogram=histogram))
    return points


@dataclass
class SpikeProfileEntry:
    layer: str
    spikes_per_neuron: float
    rate_per_timestep: float


def calibrate_running_stats(net, x):
    """Set every tdBN's running statistics to the batch statistics it sees on `x`."""
    with torch.no_grad():
        _, caches = forward_pass(net, x, mode="train", update_stats=False)
    for name in caches.order:
        node = net.nodes[name]
        if node.kind == "tdbn":
            inp = caches.node_inputs[name][0]
            node.bn.set_running_stats(inp.mean(dim=(0, 1, 3, 4)), inp.var(dim=(0, 1, 3, 4), unbiased=False))
    return net


def spike_profile(net, x):
    """Spikes per neuron and per-timestep rate of every LIF layer for one batch."""
    # untrained statistics: normalize with the batch but leave the running stats alone
    mode = "infer" if net.fused or running_stats_populated(net) else "train"
    with torch.no_grad():
        _, caches = forward_pass(net, x, mode=mode, update_stats=False)
    entries = []
    for name in caches.order:
        if net.nodes[name].kind != "lif":
            continue
        spikes = caches.outputs[name]
        entries.append(SpikeProfileEntry(layer=name,
                                         spikes_per_neuron=float(spikes.sum(dim=0).mean()),
                                         rate_per_timestep=firing_rate(spikes)))
    return entries


@dataclass
class LayerOps:
    layer: str
    kind: str
    binary_input: bool
    additions: int
    multiplications: int


@dataclass
class OpCountReport:
    mode: str
    layers: list = field(default_factory=list)
    firing_rates: dict = field(default_factory=OrderedDict)

    @property
    def additions(self):
        return sum(layer.additions for layer in self.layers)

    @property
    def multiplications(self):
        return sum(layer.multiplications for layer in self.layers)

    def hidden_additions(self):
        return sum(layer.additions for layer in self.layers[1:-1])

    def energy_pj(self, e_mac=ENERGY_MAC_PJ, e_ac=ENERGY_AC_PJ):
        """Multiplications priced as MACs, the remaining additions as accumulates."""
        return self.multiplications * e_mac + (self.additions - self.multiplications) * e_ac


def dense_macs(node, x):
    timesteps, batch_size = x.shape[:2]
    if isinstance(node, ConvNode):
        conv = node.conv
        out_h, out_w = conv.output_size(x.shape[-2], x.shape[-1])
        return timesteps * batch_size * conv.out_channels * out_h * out_w * conv.fan_in
    fc = node.fc if isinstance(node, FcNode) else node
    return timesteps * batch_size * fc.out_features * fc.in_features


def event_additions(node, spikes):
    """One addition per (input spike, weight) pair that lands on a valid output position."""
    if isinstance(node, ConvNode):
        conv = node.conv
        ones = torch.ones(1, conv.in_channels, conv.kernel_size, conv.kernel_size, dtype=torch.float64)
        fanout = F.conv2d(fold_time(spikes).double(), ones, stride=conv.stride, padding=conv.padding)
        return int(round(float(fanout.sum()))) * conv.out_channels
    fc = node.fc if isinstance(node, FcNode) else node
    return int(round(float(spikes.double().sum()))) * fc.out_features


def count_ops(net, x, mode="snn"):
    """
    Operation count of one inference on a fused network.

    snn: layers fed by binary spikes cost one addition per synaptic event and
    no multiplications; the encoding layer and layers fed by real values cost
    one MAC (an addition and a multiplication) per weight application; the
    decoder costs one multiplication per output for the 1/T rate scaling.
    ann: every layer dense at every timestep.
    """
    if mode not in ("snn", "ann"):
        raise ConfigurationError("op count mode must be 'snn' or 'ann', got %r" % mode)
    if not net.fused:
        raise StateError("count_ops needs a fused network, call fuse_network first")
    with torch.no_grad():
        _, caches = forward_pass(net, x, mode="infer")
    report = OpCountReport(mode=mode)
    weighted = net.weighted_nodes()
    for index, name in enumerate(weighted):
        node = net.nodes[name]
        inp = caches.node_inputs[name][0]
        binary = index > 0 and is_spike_tensor(inp)
        dense = dense_macs(node, inp)
        if mode == "snn" and binary:
            report.layers.append(LayerOps(name, node.kind, True, event_additions(node, inp), 0))
        else:
            report.layers.append(LayerOps(name, node.kind, binary, dense, dense))
    spikes = caches.decoder_input
    batch_size = spikes.shape[1]
    binary = is_spike_tensor(spikes)
    dense = dense_macs(net.decoder, spikes)
    if mode == "snn" and binary:
        report.layers.append(LayerOps("decoder", "fc", True, event_additions(net.decoder, spikes),
                                      batch_size * net.decoder.out_features))
    else:
        report.layers.append(LayerOps("decoder", "fc", binary, dense, dense))
    for name in caches.order:
        if net.nodes[name].kind == "lif":
            report.firing_rates[name] = firing_rate(caches.outputs[name])
    return report


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    logger.info("wrote %d rows to %s", len(rows), path)
