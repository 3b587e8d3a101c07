import logging
from dataclasses import dataclass

import torch

from generic import ConfigurationError, DimensionError, StateError
from layers import check_spatio_temporal

logger = logging.getLogger(__name__)


@dataclass
class LifHyper:
    """Iterative LIF hyper-parameters: leak, firing threshold, surrogate window width."""
    tau_decay: float = 0.25
    v_th: float = 1.0
    a: float = 1.0
    detach_reset: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau_decay < 1.0:
            raise ConfigurationError("tau_decay must lie in [0, 1), got %r" % self.tau_decay)
        if self.v_th <= 0.0:
            raise ConfigurationError("v_th must be positive, got %r" % self.v_th)
        if self.a <= 0.0:
            raise ConfigurationError("surrogate width a must be positive, got %r" % self.a)


def surrogate_grad(u, hyper):
    """Rectangular surrogate of dO/du: 1/a inside |u - v_th| < a/2, zero elsewhere."""
    if isinstance(u, (int, float)):
        return 1.0 / hyper.a if abs(u - hyper.v_th) < hyper.a / 2.0 else 0.0
    inside = torch.abs(u - hyper.v_th) < hyper.a / 2.0
    return inside.to(u.dtype) / hyper.a


def smooth_fire(u, hyper):
    # ramp whose slope is exactly the rectangular surrogate, for finite-difference checks
    return ((u - hyper.v_th) / hyper.a + 0.5).clamp(0.0, 1.0)


def lif_forward(x, hyper, smooth=False):
    """
    u_t = tau * u_{t-1} * (1 - o_{t-1}) + x_t,  o_t = [u_t > v_th]

    Returns (spikes, potentials), potentials taken before the reset.

    Shape:
        x: (T, N, C, H, W)
    """
    check_spatio_temporal(x)
    spikes = torch.empty_like(x)
    potentials = torch.empty_like(x)
    u = torch.zeros_like(x[0])
    o = torch.zeros_like(x[0])
    for t in range(x.shape[0]):
        u = hyper.tau_decay * u * (1.0 - o) + x[t]
        if smooth:
            o = smooth_fire(u, hyper)
        else:
            o = (u > hyper.v_th).to(x.dtype)
        potentials[t] = u
        spikes[t] = o
    return spikes, potentials


def lif_backward(grad_spikes, potentials, spikes, hyper, grad_potentials=None, temporal=True):
    """
    Reverse-time recursion for dL/dx, x being the LIF input current.

    dL/du_t = dL/do_t * sg(u_t)
              + dL/du_{t+1} * tau * (1 - o_t)
              - dL/du_{t+1} * tau * u_t * sg(u_t)    (dropped when hyper.detach_reset)

    `temporal=False` drops the two dL/du_{t+1} terms.
    """
    if potentials is None or spikes is None:
        raise StateError("lif_backward needs the potentials and spikes cached by lif_forward")
    if grad_spikes.shape != potentials.shape or spikes.shape != potentials.shape:
        raise DimensionError("lif_backward: gradient %s does not match cached state %s"
                             % (tuple(grad_spikes.shape), tuple(potentials.shape)))
    tau = hyper.tau_decay
    grad_x = torch.empty_like(potentials)
    grad_next = torch.zeros_like(potentials[0])
    for t in reversed(range(potentials.shape[0])):
        sg = surrogate_grad(potentials[t], hyper)
        grad_u = grad_spikes[t] * sg
        if grad_potentials is not None:
            grad_u = grad_u + grad_potentials[t]
        if temporal and tau > 0.0:
            grad_u = grad_u + grad_next * tau * (1.0 - spikes[t])
            if not hyper.detach_reset:
                grad_u = grad_u - grad_next * tau * potentials[t] * sg
        grad_x[t] = grad_u
        grad_next = grad_u
    return grad_x


def firing_rate(spikes):
    """Mean spikes per neuron per timestep."""
    return float(spikes.mean(dtype=torch.float64))
