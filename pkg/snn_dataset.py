import os
import logging

import numpy as np
import torch
from torch.utils.data import Dataset, DataLoader
from tqdm import tqdm

from generic import DataError, to_pt
from event_dataset import load_event_file, events_to_frames
from static_dataset import channel_statistics, normalize_image, encode_static, augment_image
from toy_dataset import TOY_KINDS, read_manifest, manifest_path, write_toy_dataset

logger = logging.getLogger(__name__)


class SNNDataset(Dataset):
    """
    Items of a manifest as [T, C, H, W] float tensors. Static images are
    normalized per channel and replicated over time; event streams are
    accumulated into polarity frames.
    """

    def __init__(self, manifest, timesteps, slice_ms=30.0, frame_size=None, augment=False, seed=0,
                 channel_stats=None):
        self.manifest = manifest
        self.timesteps = timesteps
        self.slice_ms = slice_ms
        self.frame_size = frame_size
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        self.channel_stats = None
        if manifest.encoding == "static":
            self.channel_stats = channel_stats or self._compute_channel_stats()

    def _compute_channel_stats(self):
        images = [self._load_image(i) for i in tqdm(range(len(self)), desc="channel stats", leave=False)]
        return channel_statistics(np.stack(images))

    def _load_image(self, index):
        path = self.manifest.path_of(index)
        if not os.path.exists(path):
            raise DataError("dataset item %s does not exist" % path)
        try:
            image = np.load(path)
        except ValueError as e:
            raise DataError("cannot read %s: %s" % (path, e))
        if image.ndim != 3:
            raise DataError("%s: expected a [C, H, W] image, got shape %s" % (path, image.shape))
        return image.astype(np.float32)

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return self.manifest.item_count

    def __getitem__(self, index):
        label = self.manifest.entries[index][1]
        if self.manifest.encoding == "static":
            image = normalize_image(self._load_image(index), *self.channel_stats)
            if self.augment:
                rng = np.random.default_rng([self.seed, self.epoch, index])
                image = augment_image(image, rng)
            frames = encode_static(image, self.timesteps)
        else:
            stream = load_event_file(self.manifest.path_of(index), label=label)
            frame_dims = (self.frame_size, self.frame_size) if self.frame_size else None
            frames = events_to_frames(stream, self.timesteps, self.slice_ms, frame_dims)
        return frames[:, 0], label

    @property
    def sample_shape(self):
        frames, _ = self[0]
        return tuple(frames.shape[1:])


def collate_time_major(batch):
    """[(T, C, H, W), label] items -> ([T, N, C, H, W], labels)."""
    frames = torch.stack([item[0] for item in batch], dim=1)
    labels = to_pt(np.array([item[1] for item in batch]), type="long")
    return frames, labels


def make_loader(dataset, batch_size, shuffle=False, seed=0, epoch=0, num_workers=0):
    """Batches in manifest order, or in a permutation fixed by (seed, epoch)."""
    dataset.set_epoch(epoch)
    generator = torch.Generator().manual_seed(seed * 100003 + epoch)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator,
                      num_workers=num_workers, collate_fn=collate_time_major)


def prepare_manifests(config):
    """Materialise the configured toy set if needed and return the (train, test) manifests."""
    root = config.dataset_root
    if config.dataset_kind in TOY_KINDS:
        write_toy_dataset(root, config.dataset_kind, config.n_per_class, config.n_test_per_class, config.seed,
                          image_size=config.image_size, sensor_size=config.sensor_size,
                          frame_size=config.frame_size, timesteps=config.timesteps, slice_ms=config.slice_ms)
    elif config.dataset_kind != "manifest":
        raise DataError("unknown dataset kind %r" % config.dataset_kind)
    return read_manifest(manifest_path(root, "train")), read_manifest(manifest_path(root, "test"))


def build_datasets(config):
    train_manifest, test_manifest = prepare_manifests(config)
    if train_manifest.class_count != test_manifest.class_count:
        raise DataError("train and test manifests disagree on the class count")
    train_set = SNNDataset(train_manifest, config.timesteps, config.slice_ms, config.frame_size,
                           augment=config.augment, seed=config.seed)
    test_set = SNNDataset(test_manifest, config.timesteps, config.slice_ms, config.frame_size,
                          channel_stats=train_set.channel_stats)
    return train_set, test_set
