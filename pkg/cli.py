import os
import sys
import csv
import logging
import argparse
import datetime

import torch

from generic import SnnError, UsageError, DataError, load_config, add_config_arguments, resolve_output_dir
from checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from diagnostics import grad_norm_profile, membrane_variance_scan, fit_proportionality, firing_rate_scan, \
    count_ops, calibrate_running_stats, write_csv, resolve_surrogate_width
from evaluate import evaluate
from model import fuse_network
from resnet import build_network
from snn_dataset import SNNDataset, build_datasets, make_loader
from toy_dataset import read_manifest
from trainer import Trainer, network_from_checkpoint, channel_stats_from_checkpoint, add_data_tensors

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "eval_acc", "lr", "mean_firing_rate"]
DIAGNOSTICS = ("gradnorm", "variance", "firing", "opcount")


def _read_metrics(path, up_to_epoch):
    if not os.path.exists(path):
        return []
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return [row for row in rows if int(row[0]) <= up_to_epoch]


def _write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def _plot(viz, windows, tag, epoch, values):
    for name, value in values.items():
        if name not in windows:
            windows[name] = viz.line(X=[epoch], Y=[value], opts=dict(title=tag + "_" + name), name=name)
        else:
            viz.line(X=[epoch], Y=[value], opts=dict(title=tag + "_" + name), win=windows[name],
                     update='append', name=name)


def cmd_train(config_file, params=()):
    config = load_config(config_file, params)
    output_dir = resolve_output_dir(config)
    train_set, test_set = build_datasets(config)
    channels, height, width = train_set.sample_shape
    trainer = Trainer(config, channels, train_set.manifest.class_count, height)
    trainer.channel_stats = train_set.channel_stats

    tag = config.experiment_tag.replace(" ", "_")
    metrics_path = os.path.join(output_dir, tag + "_metrics.csv")
    rows = []
    if config.resume_from:
        trainer.restore(load_checkpoint(config.resume_from))
        rows = _read_metrics(metrics_path, trainer.epoch)
    _write_metrics(metrics_path, rows)

    if config.visdom:
        import visdom
        viz = visdom.Visdom()
        windows = {}

    time_1 = datetime.datetime.now()
    try:
        for epoch in range(trainer.epoch + 1, config.epochs + 1):
            loader = make_loader(train_set, config.batch_size, shuffle=True, seed=config.seed, epoch=epoch,
                                 num_workers=config.num_workers)
            stats = trainer.train_epoch(loader)
            result = evaluate(trainer.net, make_loader(test_set, config.batch_size, num_workers=config.num_workers),
                              trainer.classes)
            trainer.end_epoch()

            checkpoint = trainer.to_checkpoint()
            save_checkpoint(os.path.join(output_dir, "%s_epoch%03d.ckpt" % (tag, epoch)), checkpoint)
            save_checkpoint(os.path.join(output_dir, "%s_last.ckpt" % tag), checkpoint)
            row = [epoch, repr(stats.train_loss), repr(stats.train_acc), repr(result.accuracy), repr(stats.lr),
                   repr(stats.mean_firing_rate)]
            with open(metrics_path, "a", newline="") as f:
                csv.writer(f).writerow(row)

            time_2 = datetime.datetime.now()
            print("Epoch: {:3d} | time spent: {:s} | loss: {:2.4f} | train acc: {:2.3f} | eval acc: {:2.3f} | "
                  "lr: {:g} | firing rate: {:2.3f}".format(epoch, str(time_2 - time_1).rsplit(".")[0],
                                                           stats.train_loss, stats.train_acc, result.accuracy,
                                                           stats.lr, stats.mean_firing_rate))
            if config.visdom:
                _plot(viz, windows, tag, epoch, {"train_loss": stats.train_loss, "train_acc": stats.train_acc,
                                                 "eval_acc": result.accuracy})
    except KeyboardInterrupt:
        print('--------------------------------------------')
        print('Exiting from training early...')
    return 0


def cmd_eval(checkpoint_path, manifest_file, batch_size=32):
    checkpoint = load_checkpoint(checkpoint_path)
    net, config = network_from_checkpoint(checkpoint)
    manifest = read_manifest(manifest_file, validate=False)
    if manifest.item_count == 0:
        raise UsageError("dataset %s lists no items" % manifest_file)
    manifest.validate()
    dataset = SNNDataset(manifest, config.timesteps, config.slice_ms, config.frame_size,
                         channel_stats=channel_stats_from_checkpoint(checkpoint))
    if dataset.sample_shape[0] != checkpoint.meta["input_channels"]:
        raise DataError("dataset items have %d channels, the network expects %d"
                        % (dataset.sample_shape[0], checkpoint.meta["input_channels"]))
    result = evaluate(net, make_loader(dataset, batch_size), checkpoint.meta["classes"])
    print("accuracy: %.4f (%d items, %s)" % (result.accuracy, result.count, "fused" if checkpoint.fused else "unfused"))
    for name, rate in result.firing_rates.items():
        print("firing rate %s: %.4f" % (name, rate))
    return 0


def cmd_fuse(checkpoint_in, checkpoint_out):
    checkpoint = load_checkpoint(checkpoint_in)
    if checkpoint.fused:
        raise UsageError("%s is already fused" % checkpoint_in)
    net, _ = network_from_checkpoint(checkpoint)
    fused = fuse_network(net)
    tensors = add_data_tensors({"model." + k: v for k, v in fused.state_dict().items()},
                               channel_stats_from_checkpoint(checkpoint))
    save_checkpoint(checkpoint_out, Checkpoint(config=checkpoint.config, tensors=tensors, epoch=checkpoint.epoch,
                                               fused=True, lr=checkpoint.lr, meta=checkpoint.meta))
    print("fused %d tdBN layers into %s" % (len(net.nodes_of_kind("tdbn")), checkpoint_out))
    return 0


def _diagnose_gradnorm(config, path):
    width = resolve_surrogate_width(config.diag_surrogate_width, config.surrogate_width, config.v_th)
    profile = grad_norm_profile(config.diag_depth, config.tau_decay, batch_size=config.diag_batch_size,
                                seed=config.seed, use_tdbn=config.diag_use_tdbn, channels=config.diag_channels,
                                image_size=config.diag_image_size, timesteps=config.diag_timesteps,
                                v_th=config.v_th, surrogate_width=width)
    write_csv(path, ["index", "layer", "grad_norm", "surrogate_width"],
              [[i, name, repr(float(norm)), repr(width)]
               for i, (name, norm) in enumerate(zip(profile.layers, profile.norms))])
    band = 3.0 if config.tau_decay == 0.0 else 10.0
    passed = profile.within(band) if config.diag_use_tdbn else not profile.within(10.0)
    return passed, "ratio=%.4g (band 1/%g..%g, tdBN %s, surrogate width %.4g)" % (
        profile.ratio, band, band, "on" if config.diag_use_tdbn else "off", width)


def _diagnose_variance(config, path):
    points = membrane_variance_scan(config.diag_sigma_in, tau_decay=config.tau_decay, samples=config.diag_samples,
                                    seed=config.seed)
    write_csv(path, ["sigma_in_sq", "measured_in_var", "sigma_out_sq", "firing_rate"],
              [[p.sigma_in_sq, p.measured_in_var, p.sigma_out_sq, p.firing_rate] for p in points])
    slope, intercept, r_squared = fit_proportionality(points)
    expected = 1.0 / (1.0 - config.tau_decay ** 2)
    close = all(abs(p.sigma_out_sq / p.measured_in_var - expected) <= 0.1 * expected for p in points)
    return close and r_squared > 0.99, "slope %.4f (expected %.4f), intercept %.4g, R^2 %.5f" % (
        slope, expected, intercept, r_squared)


def _diagnose_firing(config, path):
    sigmas = sorted(config.diag_sigma_in)
    points = firing_rate_scan(sigmas, tau_decay=config.tau_decay, v_th=config.v_th,
                              timesteps=config.timesteps, samples=config.diag_samples, seed=config.seed)
    write_csv(path, ["sigma_in_sq", "mean_rate"] + ["hist_%d" % i for i in range(len(points[0].histogram))],
              [[p.sigma_in_sq, p.mean_rate] + p.histogram.tolist() for p in points])
    rates = [p.mean_rate for p in points]
    monotone = all(b >= a for a, b in zip(rates, rates[1:]))
    return monotone, "firing rates %s" % ", ".join("%.4f" % r for r in rates)


def _diagnose_opcount(config, path):
    size = config.diag_image_size
    generator = torch.Generator().manual_seed(config.seed)
    if config.diag_checkpoint:
        checkpoint = load_checkpoint(config.diag_checkpoint)
        net, _ = network_from_checkpoint(checkpoint)
        channels, size = checkpoint.meta["input_channels"], checkpoint.meta["input_size"]
    else:
        channels = 3
        net = build_network(config, channels, 10, size)
        images = torch.randn(config.diag_batch_size, channels, size, size, generator=generator)
        calibrate_running_stats(net, images.unsqueeze(0).expand(config.timesteps, *images.shape).contiguous())
    if not net.fused:
        net = fuse_network(net)
    if config.diag_zero_input:
        x = torch.zeros(config.timesteps, config.diag_batch_size, channels, size, size)
    else:
        images = torch.randn(config.diag_batch_size, channels, size, size, generator=generator)
        x = images.unsqueeze(0).expand(config.timesteps, *images.shape).contiguous()
    snn = count_ops(net, x, mode="snn")
    ann = count_ops(net, x, mode="ann")
    write_csv(path, ["layer", "kind", "binary_input", "snn_additions", "snn_multiplications", "ann_additions",
                     "ann_multiplications"],
              [[s.layer, s.kind, int(s.binary_input), s.additions, s.multiplications, a.additions, a.multiplications]
               for s, a in zip(snn.layers, ann.layers)])
    print("snn: %d additions, %d multiplications (hidden additions %d)" % (
        snn.additions, snn.multiplications, snn.hidden_additions()))
    print("ann: %d additions, %d multiplications" % (ann.additions, ann.multiplications))
    return snn.additions <= ann.additions, "addition ratio snn/ann %.4f, energy ratio %.4f" % (
        snn.additions / max(ann.additions, 1), snn.energy_pj() / max(ann.energy_pj(), 1e-12))


def cmd_diagnose(kind, config_file, params=()):
    runners = {"gradnorm": _diagnose_gradnorm, "variance": _diagnose_variance, "firing": _diagnose_firing,
               "opcount": _diagnose_opcount}
    if kind not in runners:
        raise UsageError("unknown diagnostic %r, choose from %s" % (kind, ", ".join(DIAGNOSTICS)))
    config = load_config(config_file, params)
    output_dir = resolve_output_dir(config)
    path = os.path.join(output_dir, "%s_%s.csv" % (config.experiment_tag.replace(" ", "_"), kind))
    passed, summary = runners[kind](config, path)
    print("%s %s: %s" % ("PASS" if passed else "FAIL", kind, summary))
    return 0 if passed else 1


def build_parser():
    parser = argparse.ArgumentParser(description="STBP-tdBN spiking network training and diagnostics")
    subparsers = parser.add_subparsers(dest="command")
    subparsers.required = True

    train = subparsers.add_parser("train", help="train a spiking ResNet")
    add_config_arguments(train)

    eval_parser = subparsers.add_parser("eval", help="evaluate a checkpoint on a dataset manifest")
    eval_parser.add_argument("checkpoint")
    eval_parser.add_argument("manifest")
    eval_parser.add_argument("--batch-size", type=int, default=32)

    fuse = subparsers.add_parser("fuse", help="fold tdBN into the preceding weights")
    fuse.add_argument("checkpoint_in")
    fuse.add_argument("checkpoint_out")

    diagnose = subparsers.add_parser("diagnose", help="run a diagnostic: " + ", ".join(DIAGNOSTICS))
    diagnose.add_argument("kind")
    add_config_arguments(diagnose)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config_file, args.params)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.manifest, args.batch_size)
        if args.command == "fuse":
            return cmd_fuse(args.checkpoint_in, args.checkpoint_out)
        return cmd_diagnose(args.kind, args.config_file, args.params)
    except SnnError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception:
        logger.exception("unexpected error")
        return 1


if __name__ == '__main__':
    sys.exit(main())
