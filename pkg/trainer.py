import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
from tqdm import tqdm

from generic import RunConfig, HistoryScoreCache, DataError, set_random_seed
from checkpoint import Checkpoint
from layers import softmax_ce, to_one_hot
from model import forward_pass, backward_pass, fuse_network, network_firing_rates, TdBnNode
from resnet import build_network
from sgd import OptimState, sgd_step

logger = logging.getLogger(__name__)


@dataclass
class EpochStats:
    train_loss: float
    train_acc: float
    mean_firing_rate: float
    lr: float


class Trainer:
    """
    STBP training of a tdBN-normalized spiking ResNet: train-mode forward,
    hand-derived backward, momentum SGD, per-epoch lr decay.
    """

    def __init__(self, config, input_channels, classes, input_size):
        self.config = config
        self.load_config()
        set_random_seed(self.random_seed)
        self.input_channels = input_channels
        self.classes = classes
        self.input_size = input_size
        self.net = build_network(config, input_channels, classes, input_size)
        self.optim = OptimState(self.net.named_parameters(), learning_rate=self.learning_rate,
                                momentum=self.momentum, decay_every=self.decay_every,
                                decay_factor=self.decay_factor)
        self.channel_stats = None
        logger.info("trainer ready: %s, T=%d, %d classes", config.arch, config.timesteps, classes)

    def load_config(self):
        self.random_seed = self.config.seed
        self.timesteps = self.config.timesteps
        self.learning_rate = self.config.learning_rate
        self.momentum = self.config.momentum
        self.decay_every = self.config.lr_decay_every
        self.decay_factor = self.config.decay_factor
        self.experiment_tag = self.config.experiment_tag

    @property
    def epoch(self):
        return self.optim.epoch

    @property
    def lr(self):
        return self.optim.lr

    def train_step(self, frames, labels):
        q, caches = forward_pass(self.net, frames, mode="train")
        rates = network_firing_rates(self.net, caches)
        loss, grad_q = softmax_ce(q, to_one_hot(labels, self.classes))
        grads = backward_pass(self.net, grad_q, caches)
        sgd_step(grads, self.optim)
        correct = int((q.argmax(dim=-1) == labels).sum())
        return loss, correct, float(np.mean(list(rates.values()))) if rates else 0.0

    def train_epoch(self, loader):
        running_loss = HistoryScoreCache(capacity=len(loader))
        firing = HistoryScoreCache(capacity=len(loader))
        correct, seen = 0, 0
        lr = self.lr
        for frames, labels in tqdm(loader, desc="epoch %d" % (self.epoch + 1), leave=False):
            loss, batch_correct, rate = self.train_step(frames, labels)
            running_loss.push(loss)
            firing.push(rate)
            correct += batch_correct
            seen += labels.shape[0]
        return EpochStats(train_loss=running_loss.get_avg(), train_acc=correct / max(seen, 1),
                          mean_firing_rate=firing.get_avg(), lr=lr)

    def end_epoch(self):
        self.optim.end_epoch()

    def to_checkpoint(self):
        tensors = OrderedDict(("model." + k, v) for k, v in self.net.state_dict().items())
        for name, buffer in self.optim.momentum_buffers().items():
            tensors["optim.%s.momentum_buffer" % name] = buffer
        add_data_tensors(tensors, self.channel_stats)
        return Checkpoint(config=self.config.to_dict(), tensors=tensors, epoch=self.epoch, fused=False, lr=self.lr,
                          meta=self.meta())

    def meta(self):
        return {"input_channels": self.input_channels, "classes": self.classes, "input_size": self.input_size}

    def restore(self, checkpoint):
        if checkpoint.fused:
            raise DataError("cannot resume training from a fused checkpoint")
        load_model_tensors(self.net, checkpoint)
        buffers = OrderedDict()
        for key, tensor in checkpoint.section("optim").items():
            buffers[key[:-len(".momentum_buffer")]] = tensor
        self.optim.restore(checkpoint.epoch, checkpoint.lr, buffers)
        logger.info("resumed from epoch %d, lr %g", checkpoint.epoch, checkpoint.lr)


def add_data_tensors(tensors, channel_stats):
    if channel_stats is not None:
        tensors["data.channel_mean"] = torch.from_numpy(np.asarray(channel_stats[0], dtype=np.float32))
        tensors["data.channel_std"] = torch.from_numpy(np.asarray(channel_stats[1], dtype=np.float32))
    return tensors


def channel_stats_from_checkpoint(checkpoint):
    data = checkpoint.section("data")
    if "channel_mean" not in data:
        return None
    return data["channel_mean"].numpy(), data["channel_std"].numpy()


def load_model_tensors(net, checkpoint):
    try:
        net.load_state_dict(checkpoint.section("model"), strict=True)
    except RuntimeError as e:
        raise DataError("checkpoint tensors do not match the network: %s" % e)
    return net


def network_from_checkpoint(checkpoint):
    """Rebuild the (possibly fused) network a checkpoint was written from."""
    config = RunConfig.from_dict(checkpoint.config)
    meta = checkpoint.meta
    net = build_network(config, meta["input_channels"], meta["classes"], meta["input_size"])
    if checkpoint.fused:
        for node in net.nodes.values():
            if isinstance(node, TdBnNode):
                node.bn.num_batches_tracked.fill_(1)
        net = fuse_network(net)
    return load_model_tensors(net, checkpoint), config
