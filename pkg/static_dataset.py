import logging

import numpy as np
import torch

from generic import DataError, DimensionError

logger = logging.getLogger(__name__)


def channel_statistics(images):
    """Per-channel mean and std over a [N, C, H, W] stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError("expected a non-empty [N, C, H, W] image stack, got shape %s" % (images.shape,))
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std[std == 0.0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def normalize_image(image, mean, std):
    image = np.asarray(image, dtype=np.float32)
    return (image - mean[:, None, None]) / std[:, None, None]


def encode_static(image, timesteps):
    """
    Replicate one [C, H, W] image over `timesteps`.

    Shape:
        output: (T, 1, C, H, W)
    """
    if timesteps < 1:
        raise DimensionError("timesteps must be >= 1")
    image = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if image.dim() != 3:
        raise DimensionError("encode_static expects a [C, H, W] image, got shape %s" % (tuple(image.shape),))
    return image.unsqueeze(0).unsqueeze(0).expand(timesteps, 1, *image.shape).contiguous()


def augment_image(image, rng, pad=None, flip=True):
    """Random crop from a zero-padded copy, then a random horizontal flip."""
    channels, height, width = image.shape
    pad = max(1, height // 8) if pad is None else pad
    padded = np.zeros((channels, height + 2 * pad, width + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + height, pad:pad + width] = image
    top = rng.integers(0, 2 * pad + 1)
    left = rng.integers(0, 2 * pad + 1)
    out = padded[:, top:top + height, left:left + width]
    if flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
