import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from generic import StateError, HistoryScoreCache
from layers import softmax_ce, to_one_hot
from model import forward_pass, network_firing_rates, running_stats_populated

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    count: int
    firing_rates: OrderedDict = field(default_factory=OrderedDict)

    @property
    def mean_firing_rate(self):
        if not self.firing_rates:
            return 0.0
        return float(np.mean(list(self.firing_rates.values())))


def evaluate(net, loader, classes):
    """Inference-mode accuracy, mean loss and per-layer firing rates over a loader."""
    if not net.fused and not running_stats_populated(net):
        raise StateError("evaluation needs populated tdBN running statistics or a fused network")
    losses = HistoryScoreCache(capacity=max(len(loader), 1))
    rate_sums = OrderedDict()
    correct, seen = 0, 0
    with torch.no_grad():
        for frames, labels in loader:
            q, caches = forward_pass(net, frames, mode="infer")
            loss, _ = softmax_ce(q, to_one_hot(labels, classes))
            losses.push(loss)
            correct += int((q.argmax(dim=-1) == labels).sum())
            batch_size = labels.shape[0]
            seen += batch_size
            for name, rate in network_firing_rates(net, caches).items():
                rate_sums[name] = rate_sums.get(name, 0.0) + rate * batch_size
    rates = OrderedDict((name, total / max(seen, 1)) for name, total in rate_sums.items())
    result = EvalResult(accuracy=correct / max(seen, 1), loss=losses.get_avg(), count=seen, firing_rates=rates)
    logger.info("evaluated %d items: accuracy %.4f", seen, result.accuracy)
    return result
