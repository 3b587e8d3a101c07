import os
import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from generic import DataError, ConfigurationError
from event_dataset import EventStream, make_events, save_event_file

logger = logging.getLogger(__name__)

ENCODINGS = ("static", "events")
TOY_KINDS = {
    "two_gaussians": "static",
    "xor_patches": "static",
    "moving_bar": "events",
}


@dataclass
class DatasetManifest:
    root: str
    split: str
    class_count: int
    encoding: str
    entries: list = field(default_factory=list)  # (relative path, label)

    @property
    def item_count(self):
        return len(self.entries)

    @property
    def labels(self):
        return [label for _, label in self.entries]

    def path_of(self, index):
        return os.path.join(self.root, self.entries[index][0])

    def validate(self):
        if self.encoding not in ENCODINGS:
            raise DataError("manifest encoding must be one of %s, got %r" % (ENCODINGS, self.encoding))
        if self.item_count == 0:
            raise DataError("manifest %s/%s lists no items" % (self.root, self.split))
        bad = [label for label in self.labels if not 0 <= label < self.class_count]
        if bad:
            raise DataError("label %d out of range for %d classes" % (bad[0], self.class_count))
        return self


def manifest_path(root, split):
    return os.path.join(root, "%s.tsv" % split)


def write_manifest(manifest):
    os.makedirs(manifest.root, exist_ok=True)
    path = manifest_path(manifest.root, manifest.split)
    with open(path, "w") as f:
        f.write("# class_count=%d\n" % manifest.class_count)
        f.write("# encoding=%s\n" % manifest.encoding)
        for rel_path, label in manifest.entries:
            f.write("%s\t%d\n" % (rel_path, label))
    return path


def read_manifest(path, validate=True):
    """Parse `relative/path<TAB>label` lines; `# key=value` lines carry class_count and encoding."""
    if not os.path.exists(path):
        raise DataError("manifest %s does not exist" % path)
    meta, entries = {}, []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError("%s:%d: expected 'path<TAB>label'" % (path, line_no))
            try:
                entries.append((parts[0], int(parts[1])))
            except ValueError:
                raise DataError("%s:%d: label %r is not an integer" % (path, line_no, parts[1]))
    labels = [label for _, label in entries]
    class_count = int(meta.get("class_count", (max(labels) + 1) if labels else 0))
    encoding = meta.get("encoding")
    if encoding is None:
        encoding = "events" if entries and entries[0][0].endswith(".evs") else "static"
    split = os.path.splitext(os.path.basename(path))[0]
    manifest = DatasetManifest(root=os.path.dirname(path), split=split, class_count=class_count,
                               encoding=encoding, entries=entries)
    return manifest.validate() if validate else manifest


def _two_gaussians(n, rng, image_size, separation=4.0, margin=0.5):
    """Two isotropic unit Gaussians `separation` sigmas apart along a random direction."""
    dims = image_size * image_size
    direction = rng.standard_normal(dims)
    direction /= np.linalg.norm(direction)
    items, labels = [], []
    for label, sign in ((0, 1.0), (1, -1.0)):
        count = 0
        while count < n:
            x = sign * separation / 2.0 * direction + rng.standard_normal(dims)
            if sign * float(x @ direction) < margin:
                continue
            items.append(x.reshape(1, image_size, image_size).astype(np.float32))
            labels.append(label)
            count += 1
    return items, labels


def _xor_patches(n, rng, image_size, noise=0.3):
    """Label is the XOR of the signs of two opposite quadrant patches."""
    half = image_size // 2
    items, labels = [], []
    for label in (0, 1):
        for _ in range(n):
            s1 = rng.choice((-1.0, 1.0))
            s2 = s1 if label == 0 else -s1
            image = noise * rng.standard_normal((1, image_size, image_size))
            image[0, :half, :half] += s1
            image[0, half:, half:] += s2
            items.append(image.astype(np.float32))
            labels.append(label)
    return items, labels


def _moving_bar(n, rng, sensor_size, frame_size, timesteps, slice_ms):
    """
    A vertical bar sweeping right (label 0) or left (label 1), wrapping around
    the sensor, one frame column per slice. Start column and per-event polarity
    are random, so a single frame says nothing about the direction.
    """
    if sensor_size % frame_size != 0:
        raise ConfigurationError("sensor_size must be a multiple of frame_size")
    block = sensor_size // frame_size
    slice_us = int(round(slice_ms * 1000))
    rows = np.arange(sensor_size)
    items, labels = [], []
    for label, step in ((0, 1), (1, -1)):
        for _ in range(n):
            start = rng.integers(0, frame_size) * block
            t, x, y = [], [], []
            for s in range(timesteps):
                column = (start + step * s * block) % sensor_size
                for dx in range(block):
                    t.append(s * slice_us + rng.integers(0, slice_us, size=sensor_size))
                    x.append(np.full(sensor_size, column + dx))
                    y.append(rows)
            t, x, y = np.concatenate(t), np.concatenate(x), np.concatenate(y)
            p = rng.integers(0, 2, size=len(t))
            order = np.argsort(t, kind="stable")
            events = make_events(t[order], x[order], y[order], p[order])
            items.append(EventStream(events=events, sensor_dims=(sensor_size, sensor_size), label=label))
            labels.append(label)
    return items, labels


def make_toy_dataset(kind, n, seed, image_size=8, sensor_size=32, frame_size=16, timesteps=8, slice_ms=30.0,
                     split="train"):
    """
    Deterministic synthetic data, `n` items per class, items interleaved by a
    seeded permutation. Returns (manifest, items); the manifest root is empty
    until the items are written out.
    """
    if kind not in TOY_KINDS:
        raise ConfigurationError("unknown toy dataset %r, choose from %s" % (kind, ", ".join(TOY_KINDS)))
    if n < 2:
        raise ConfigurationError("toy datasets need at least 2 items per class")
    rng = np.random.default_rng(seed)
    if kind == "two_gaussians":
        items, labels = _two_gaussians(n, rng, image_size)
    elif kind == "xor_patches":
        items, labels = _xor_patches(n, rng, image_size)
    else:
        items, labels = _moving_bar(n, rng, sensor_size, frame_size, timesteps, slice_ms)
    order = rng.permutation(len(items))
    items = [items[i] for i in order]
    encoding = TOY_KINDS[kind]
    suffix = ".npy" if encoding == "static" else ".evs"
    entries = [(os.path.join(split, "%05d%s" % (i, suffix)), int(labels[j])) for i, j in enumerate(order)]
    manifest = DatasetManifest(root="", split=split, class_count=2, encoding=encoding, entries=entries)
    return manifest, items


def write_toy_dataset(root, kind, n_train, n_test, seed, **kwargs):
    """Materialise train and test splits under `root`; returns {split: manifest}."""
    manifests = {}
    for split, n, split_seed in (("train", n_train, seed), ("test", n_test, seed + 1)):
        manifest, items = make_toy_dataset(kind, n, split_seed, split=split, **kwargs)
        manifest.root = root
        os.makedirs(os.path.join(root, split), exist_ok=True)
        for index, item in enumerate(tqdm(items, desc="writing %s/%s" % (kind, split), leave=False)):
            path = manifest.path_of(index)
            if manifest.encoding == "static":
                np.save(path, item)
            else:
                save_event_file(path, item)
        write_manifest(manifest)
        manifests[split] = manifest.validate()
    logger.info("wrote %s to %s: %d train / %d test items", kind, root,
                manifests["train"].item_count, manifests["test"].item_count)
    return manifests
