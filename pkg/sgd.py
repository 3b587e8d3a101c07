import logging
from collections import OrderedDict

import torch

from generic import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)


class OptimState:
    """
    Momentum SGD with step-wise learning-rate decay, wrapping torch.optim.SGD
    and StepLR. The parameters never carry autograd graphs; gradients are
    handed over explicitly by `sgd_step`.
    """

    def __init__(self, named_parameters, learning_rate=0.1, momentum=0.9, decay_every=35, decay_factor=0.1):
        if learning_rate <= 0.0:
            raise ConfigurationError("learning rate must be positive, got %r" % learning_rate)
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1), got %r" % momentum)
        if decay_every < 1 or not 0.0 < decay_factor < 1.0:
            raise ConfigurationError("decay_every must be >= 1 and decay_factor in (0, 1), got %r and %r"
                                     % (decay_every, decay_factor))
        self.parameters = OrderedDict(named_parameters)
        self.momentum = momentum
        self.optimizer = torch.optim.SGD(list(self.parameters.values()), lr=learning_rate, momentum=momentum)
        self.scheduler = torch.optim.lr_scheduler.StepLR(self.optimizer, step_size=decay_every, gamma=decay_factor)
        self.epoch = 0

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    def end_epoch(self):
        self.scheduler.step()
        self.epoch += 1
        logger.debug("epoch %d done, learning rate now %g", self.epoch, self.lr)

    def momentum_buffers(self):
        buffers = OrderedDict()
        for name, p in self.parameters.items():
            buffer = self.optimizer.state.get(p, {}).get("momentum_buffer")
            if buffer is not None:
                buffers[name] = buffer
        return buffers

    def restore(self, epoch, lr, buffers):
        """Resume at `epoch` with the exact learning rate and momentum buffers that were saved."""
        for name, buffer in buffers.items():
            if name not in self.parameters:
                raise DimensionError("momentum buffer for unknown parameter %r" % name)
            p = self.parameters[name]
            if buffer.shape != p.shape:
                raise DimensionError("momentum buffer %r has shape %s, parameter has %s"
                                     % (name, tuple(buffer.shape), tuple(p.shape)))
            self.optimizer.state[p]["momentum_buffer"] = buffer.to(p.dtype).clone()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.scheduler.last_epoch = epoch
        self.scheduler._last_lr = [lr for _ in self.optimizer.param_groups]
        self.epoch = epoch


def sgd_step(grads, opt):
    """
    v <- momentum * v + g;  W <- W - lr * v

    `grads` maps parameter names to gradients; parameters without a gradient are left untouched.
    """
    for name, p in opt.parameters.items():
        g = grads.get(name)
        if g is None:
            p.grad = None
            continue
        if g.shape != p.shape:
            raise DimensionError("gradient for %r has shape %s, parameter has %s" % (name, tuple(g.shape), tuple(p.shape)))
        p.grad = g
    opt.optimizer.step()
    return opt.parameters
