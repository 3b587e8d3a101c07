import os
import struct
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml

from generic import FormatError, DataError

logger = logging.getLogger(__name__)

MAGIC = b"STBN"
VERSION = 1
F32_CODE = 1
F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    """
    Everything needed to resume a run: config snapshot, model tensors (named
    `model.<state_dict key>`), momentum buffers (`optim.<param>.momentum_buffer`),
    extra tensors such as input normalization, and a small metadata mapping.
    Integer scalars (tdBN batch counters) travel in the header as `counters`.
    """
    config: dict
    tensors: OrderedDict = field(default_factory=OrderedDict)
    epoch: int = 0
    fused: bool = False
    lr: float = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def section(self, prefix):
        prefix = prefix + "."
        return OrderedDict((k[len(prefix):], v) for k, v in self.tensors.items() if k.startswith(prefix))


def _split_tensors(tensors):
    records, counters = OrderedDict(), OrderedDict()
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu()
        if tensor.dtype == torch.float32:
            records[name] = tensor
        elif not tensor.is_floating_point() and tensor.dtype != torch.bool and tensor.dim() == 0:
            counters[name] = int(tensor)
        else:
            raise DataError("cannot store tensor %s of dtype %s and shape %s; records are float32"
                            % (name, tensor.dtype, tuple(tensor.shape)))
    return records, counters


def save_checkpoint(path, checkpoint):
    """
    Layout, little endian: b"STBN", u32 version, u32 header length, YAML header,
    then records {u16 name_len, name, u8 dtype (1 = f32), u8 ndim, u32 dims[], payload} up to EOF.
    """
    records, counters = _split_tensors(checkpoint.tensors)
    header = yaml.safe_dump({"config": checkpoint.config, "epoch": checkpoint.epoch, "fused": checkpoint.fused,
                             "lr": checkpoint.lr, "meta": checkpoint.meta, "counters": dict(counters)},
                            sort_keys=False).encode("utf-8")
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", checkpoint.version, len(header)))
        f.write(header)
        for name, tensor in records.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", F32_CODE, tensor.dim()))
            f.write(struct.pack("<%dI" % tensor.dim(), *tensor.shape))
            f.write(tensor.contiguous().numpy().astype(F32, copy=False).tobytes())
    os.replace(tmp_path, path)
    logger.info("saved checkpoint %s (epoch %d, %d tensors)", path, checkpoint.epoch, len(records))


class _Reader:

    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.raw):
            raise FormatError("%s: truncated while reading %s" % (self.path, what), offset=self.offset)
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def at_end(self):
        return self.offset == len(self.raw)


def load_checkpoint(path):
    if not os.path.exists(path):
        raise DataError("checkpoint %s does not exist" % path)
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("%s: not a checkpoint file" % path, offset=0)
    version, header_len = reader.unpack("<II", "header")
    if version != VERSION:
        raise FormatError("%s: unsupported checkpoint version %d" % (path, version), offset=4)
    header_offset = reader.offset
    try:
        header = yaml.safe_load(reader.take(header_len, "config").decode("utf-8"))
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise FormatError("%s: unreadable config header: %s" % (path, e), offset=header_offset)
    if not isinstance(header, dict) or "config" not in header:
        raise FormatError("%s: config header is missing its config section" % path, offset=header_offset)
    tensors = OrderedDict()
    while not reader.at_end():
        record_offset = reader.offset
        (name_len,) = reader.unpack("<H", "tensor name")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        code, ndim = reader.unpack("<BB", "tensor %s" % name)
        if code != F32_CODE:
            raise FormatError("%s: tensor %s has unknown dtype code %d" % (path, name, code), offset=record_offset)
        shape = reader.unpack("<%dI" % ndim, "tensor %s" % name)
        size = int(np.prod(shape, dtype=np.int64)) * F32.itemsize
        payload = np.frombuffer(reader.take(size, "tensor %s" % name), dtype=F32).reshape(shape)
        tensors[name] = torch.from_numpy(payload.copy())
    for name, value in (header.get("counters") or {}).items():
        tensors[name] = torch.tensor(int(value), dtype=torch.long)
    return Checkpoint(config=header["config"], tensors=tensors, epoch=header.get("epoch", 0),
                      fused=bool(header.get("fused", False)), lr=header.get("lr"), meta=header.get("meta") or {},
                      version=version)
