import struct
from collections import OrderedDict

import pytest
import torch
import yaml

from generic import DataError, FormatError, RunConfig
from checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from trainer import Trainer, network_from_checkpoint, channel_stats_from_checkpoint


def sample_checkpoint():
    g = torch.Generator().manual_seed(0)
    tensors = OrderedDict([
        ("model.nodes.conv1.conv.kernel", torch.randn(4, 2, 3, 3, generator=g)),
        ("model.nodes.conv1_bn.bn.num_batches_tracked", torch.tensor(7)),
        ("optim.decoder.weight.momentum_buffer", torch.randn(3, 5, generator=g)),
        ("data.empty", torch.zeros(0, 3)),
    ])
    return Checkpoint(config=RunConfig().to_dict(), tensors=tensors, epoch=3, lr=0.01,
                      meta={"input_channels": 2, "classes": 3, "input_size": 8})


def write_single(tmp_path):
    path = str(tmp_path / "single.ckpt")
    save_checkpoint(path, Checkpoint(config={}, tensors=OrderedDict(t=torch.ones(2))))
    with open(path, "rb") as f:
        return path, bytearray(f.read())


def rewrite(path, raw):
    with open(path, "wb") as f:
        f.write(bytes(raw))
    return path


def test_round_trip_is_bit_exact(tmp_path):
    path = str(tmp_path / "a.ckpt")
    original = sample_checkpoint()
    save_checkpoint(path, original)
    with open(path, "rb") as f:
        assert f.read(4) == b"STBN"
    loaded = load_checkpoint(path)
    assert set(loaded.tensors) == set(original.tensors)
    for name, tensor in original.tensors.items():
        assert loaded.tensors[name].dtype == tensor.dtype, name
        assert torch.equal(loaded.tensors[name], tensor), name
    assert (loaded.epoch, loaded.lr, loaded.fused) == (3, 0.01, False)
    assert loaded.meta == original.meta
    assert RunConfig.from_dict(loaded.config) == RunConfig()
    assert list(loaded.section("optim")) == ["decoder.weight.momentum_buffer"]


def test_records_are_float32_to_the_end_of_file(tmp_path):
    path, raw = write_single(tmp_path)
    (header_len,) = struct.unpack_from("<I", raw, 8)
    header = bytes(raw[12:12 + header_len])
    expected = (b"STBN" + struct.pack("<II", 1, header_len) + header + struct.pack("<H", 1) + b"t"
                + struct.pack("<BB", 1, 1) + struct.pack("<I", 2) + struct.pack("<2f", 1.0, 1.0))
    assert bytes(raw) == expected


def test_batch_counters_travel_in_the_header(tmp_path):
    path = str(tmp_path / "counters.ckpt")
    save_checkpoint(path, sample_checkpoint())
    with open(path, "rb") as f:
        raw = f.read()
    (header_len,) = struct.unpack_from("<I", raw, 8)
    header = yaml.safe_load(raw[12:12 + header_len].decode("utf-8"))
    assert header["counters"] == {"model.nodes.conv1_bn.bn.num_batches_tracked": 7}
    assert b"num_batches_tracked" not in raw[12 + header_len:]
    restored = load_checkpoint(path).tensors["model.nodes.conv1_bn.bn.num_batches_tracked"]
    assert restored.dtype == torch.long and restored.dim() == 0 and int(restored) == 7


def test_format_errors(tmp_path):
    path, raw = write_single(tmp_path)
    (header_len,) = struct.unpack_from("<I", raw, 8)
    record_offset = 12 + header_len

    bad_magic = bytearray(raw)
    bad_magic[:4] = b"NOPE"
    with pytest.raises(FormatError) as info:
        load_checkpoint(rewrite(path, bad_magic))
    assert info.value.offset == 0

    bad_version = bytearray(raw)
    struct.pack_into("<I", bad_version, 4, 2)
    with pytest.raises(FormatError) as info:
        load_checkpoint(rewrite(path, bad_version))
    assert info.value.offset == 4

    bad_dtype = bytearray(raw)
    bad_dtype[record_offset + 2 + 1] = 9
    with pytest.raises(FormatError) as info:
        load_checkpoint(rewrite(path, bad_dtype))
    assert info.value.offset == record_offset

    with pytest.raises(FormatError):
        load_checkpoint(rewrite(path, raw[:-3]))

    with pytest.raises(FormatError) as info:
        load_checkpoint(rewrite(path, raw + b"\x00"))
    assert info.value.offset == len(raw)


def test_missing_and_unsupported(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path / "missing.ckpt"))
    with pytest.raises(DataError):
        save_checkpoint(str(tmp_path / "bool.ckpt"), Checkpoint(config={}, tensors={"b": torch.ones(2).bool()}))
    with pytest.raises(DataError):
        save_checkpoint(str(tmp_path / "f64.ckpt"), Checkpoint(config={}, tensors={"d": torch.ones(2).double()}))
    with pytest.raises(DataError):
        save_checkpoint(str(tmp_path / "steps.ckpt"), Checkpoint(config={}, tensors={"s": torch.arange(3)}))


def small_config(**kwargs):
    return RunConfig(arch="resnet8", width_divisor=8, timesteps=2, **kwargs)


def batch(seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(2, 4, 1, 8, 8, generator=g), torch.tensor([0, 1, 1, 0])


def test_trainer_checkpoint_contents(tmp_path):
    trainer = Trainer(small_config(), 1, 2, 8)
    trainer.channel_stats = (torch.tensor([0.5]).numpy(), torch.tensor([2.0]).numpy())
    trainer.train_step(*batch(0))
    trainer.end_epoch()
    checkpoint = trainer.to_checkpoint()
    assert set(checkpoint.section("model")) == set(trainer.net.state_dict())
    assert set(checkpoint.section("optim")) == {name + ".momentum_buffer" for name, _ in
                                                trainer.net.named_parameters()}
    assert checkpoint.epoch == 1
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(path, checkpoint)
    mean, std = channel_stats_from_checkpoint(load_checkpoint(path))
    assert (float(mean[0]), float(std[0])) == (0.5, 2.0)


def test_trainer_resumes_exactly(tmp_path):
    original = Trainer(small_config(), 1, 2, 8)
    original.train_step(*batch(0))
    original.end_epoch()
    path = str(tmp_path / "resume.ckpt")
    save_checkpoint(path, original.to_checkpoint())

    resumed = Trainer(small_config(), 1, 2, 8)
    resumed.restore(load_checkpoint(path))
    assert resumed.epoch == 1
    assert resumed.lr == original.lr
    for trainer in (original, resumed):
        trainer.train_step(*batch(1))
    for (name, a), (_, b) in zip(original.net.state_dict().items(), resumed.net.state_dict().items()):
        assert torch.equal(a, b), name


def test_rebuild_network_from_checkpoint(tmp_path):
    trainer = Trainer(small_config(), 1, 2, 8)
    trainer.train_step(*batch(0))
    path = str(tmp_path / "net.ckpt")
    save_checkpoint(path, trainer.to_checkpoint())
    net, config = network_from_checkpoint(load_checkpoint(path))
    assert config.width_divisor == 8
    for (name, a), (_, b) in zip(trainer.net.state_dict().items(), net.state_dict().items()):
        assert torch.equal(a, b), name

    fused = Checkpoint(config=trainer.config.to_dict(), tensors=trainer.to_checkpoint().tensors, fused=True,
                       meta=trainer.meta())
    with pytest.raises(DataError):
        Trainer(small_config(), 1, 2, 8).restore(fused)
