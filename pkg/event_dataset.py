import os
import struct
import logging
from dataclasses import dataclass

import numpy as np
import torch

from generic import DataError, DimensionError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"EVS1"
VERSION = 1
# magic, version, sensor height, sensor width, event count
HEADER = struct.Struct("<4sIHHI")
EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")])


@dataclass
class EventStream:
    """Events sorted by timestamp (microseconds) on a sensor of `sensor_dims` = (H, W)."""
    events: np.ndarray
    sensor_dims: tuple
    label: int = -1

    def __len__(self):
        return len(self.events)

    def validate(self):
        height, width = self.sensor_dims
        ev = self.events
        if len(ev) == 0:
            return self
        if np.any(ev["x"] >= width) or np.any(ev["y"] >= height):
            raise DataError("event coordinates fall outside the %dx%d sensor" % (height, width))
        if np.any(ev["p"] > 1):
            raise DataError("event polarity must be 0 or 1")
        if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise DataError("event timestamps must be sorted")
        return self


def make_events(t, x, y, p):
    events = np.zeros(len(t), dtype=EVENT_DTYPE)
    events["t"], events["x"], events["y"], events["p"] = t, x, y, p
    return events


def save_event_file(path, stream):
    stream.validate()
    height, width = stream.sensor_dims
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, height, width, len(stream.events)))
        f.write(stream.events.astype(EVENT_DTYPE, copy=False).tobytes())


def load_event_file(path, label=-1):
    """Parse an EVS1 file. Events come back stably sorted by timestamp."""
    if not os.path.exists(path):
        raise DataError("event file %s does not exist" % path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER.size:
        raise FormatError("%s: truncated header" % path, offset=len(raw))
    magic, version, height, width, count = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError("%s: bad magic %r" % (path, magic), offset=0)
    if version != VERSION:
        raise FormatError("%s: unsupported event format version %d" % (path, version), offset=4)
    expected = HEADER.size + count * EVENT_DTYPE.itemsize
    if len(raw) < expected:
        complete = (len(raw) - HEADER.size) // EVENT_DTYPE.itemsize
        raise FormatError("%s: header announces %d events, file holds %d" % (path, count, complete),
                          offset=HEADER.size + complete * EVENT_DTYPE.itemsize)
    events = np.frombuffer(raw, dtype=EVENT_DTYPE, count=count, offset=HEADER.size).copy()
    events = events[np.argsort(events["t"], kind="stable")]
    stream = EventStream(events=events, sensor_dims=(height, width), label=label)
    try:
        return stream.validate()
    except DataError as e:
        raise FormatError("%s: %s" % (path, e), offset=HEADER.size)


def events_to_frames(stream, timesteps, slice_ms, frame_dims=None):
    """
    Accumulate events into `timesteps` frames of `slice_ms` each. Polarity
    selects the channel, space is block-summed down to `frame_dims`, and
    events past the last slice are dropped.

    Shape:
        output: (T, 1, 2, H', W')
    """
    if timesteps < 1 or slice_ms <= 0:
        raise DimensionError("need timesteps >= 1 and a positive slice length")
    stream.validate()
    height, width = stream.sensor_dims
    frame_h, frame_w = frame_dims or (height, width)
    if frame_h < 1 or frame_w < 1 or height % frame_h != 0 or width % frame_w != 0:
        raise DimensionError("frame dims %s must evenly divide sensor dims %s" % ((frame_h, frame_w), (height, width)))
    frames = np.zeros((timesteps, 2, frame_h, frame_w), dtype=np.float32)
    ev = stream.events
    if len(ev):
        index = (ev["t"].astype(np.int64) // int(round(slice_ms * 1000))).astype(np.int64)
        keep = index < timesteps
        np.add.at(frames, (index[keep],
                           ev["p"][keep].astype(np.int64),
                           ev["y"][keep].astype(np.int64) // (height // frame_h),
                           ev["x"][keep].astype(np.int64) // (width // frame_w)), 1.0)
    return torch.from_numpy(frames).unsqueeze(1)
