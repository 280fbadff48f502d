"""Command-line surface: generate, train, predict, eval, tune-threshold, plot.

Configuration is a flat key=value namespace: defaults below, optionally
overridden by a config file (--config) and then by KEY=VALUE arguments on
the command line (later wins).  The effective merged config is echoed to
<out_dir>/config.txt so a run can be reproduced from that single file.

Exit codes: 0 success, 2 config error, 3 I/O or format error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import augment as aug
from . import data as D
from . import detect
from . import models as M
from . import train as T

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out_dir": "runs/run",
    "checkpoint": "",  # defaults to <out_dir>/model.ckpt
    # synthetic data generation
    "gen.n": 1000,
    "gen.ratios": "0.7,0.2,0.1",
    "gen.length": 175,
    "gen.trace_channels": 7,
    "gen.meta_channels": 2,
    "gen.p_pos": 0.5,
    "gen.sigma_min": 2.0,
    "gen.sigma_max": 6.0,
    "gen.amp_min": 0.5,
    "gen.amp_max": 20.0,
    "gen.noise_floor": 0.5,
    "gen.noise_scale": 1.5,
    "gen.p_interferent": 0.6,
    "gen.interferent_fraction": 0.5,
    "gen.label_halfwidth": 2.0,
    # data files
    "data.train": "",
    "data.val": "",
    "data.test": "",
    "data.unlabeled": "",
    # architecture
    "arch.kind": "conformer",
    "arch.blocks": 6,
    "arch.d_model": 64,
    "arch.dropout": 0.1,
    "arch.ffn_mult": 4,
    "arch.conv_kernels": "3,15",
    "arch.cnn_filters": "256,128,64,32,16,8",
    "arch.cnn_kernels": "13,11,9,7,5,3",
    # training
    "train.mode": "supervised",
    "train.epochs": 30,
    "train.batch_size": 32,
    "train.eval_every": 0,
    "train.labeled_fraction": 1.0,
    "train.lr_max": 0.003,
    "train.weight_decay": 0.3,
    "train.warmup_fraction": 0.05,
    "focal.gamma": 2.0,
    "focal.alpha": 0.25,
    "fixmatch.confidence": 0.95,
    "fixmatch.unlabeled_weight": 1.0,
    "fixmatch.unlabeled_ratio": 3,
    "fixmatch.cowmix_probability": 0.5,
    "cow.proportion_min": 0.3,
    "cow.proportion_max": 0.7,
    "cow.smoothing_scale": 8.0,
    # augmentation
    "aug.scale_min": 0.5,
    "aug.scale_max": 2.0,
    "aug.jitter": 0.05,
    "aug.time_mask_fraction": 0.2,
    "aug.channel_mask_fraction": 0.2,
    "aug.op_probability": 0.5,
    # prediction / evaluation
    "predict.input": "",
    "predict.out": "",
    "eval.input": "",
    "eval.detections": "",
    "eval.theta": 0.5,
    "eval.top1": False,
    "eval.interpolation": "all",
    "eval.out": "",
    "tune.input": "",
    "tune.grid": "0.05:0.95:0.05",
    "tune.top1": False,
    # plotting
    "plot.metrics": "",
    "plot.input": "",
    "plot.ids": "",
    "plot.max_xics": 4,
}

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    pass


def _convert(key, raw):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected true/false, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected number, got {raw!r}") from exc
    return raw


def parse_assignment(text, config):
    if "=" not in text:
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    config[key] = _convert(key, raw.strip())


def load_config(path=None, overrides=()):
    config = dict(DEFAULTS)
    if path:
        try:
            with open(path) as f:
                lines = f.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                parse_assignment(line, config)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{n}: {exc}") from exc
    for item in overrides:
        parse_assignment(item, config)
    return config


def echo_config(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.txt")
    with open(path, "w") as f:
        for key in sorted(config):
            f.write(f"{key} = {config[key]}\n")
    return path


def _int_tuple(raw):
    return tuple(int(v) for v in str(raw).split(",") if v != "")


def _float_tuple(raw):
    return tuple(float(v) for v in str(raw).split(",") if v != "")


def synth_config(cfg):
    return D.SynthConfig(
        length=cfg["gen.length"], trace_channels=cfg["gen.trace_channels"],
        meta_channels=cfg["gen.meta_channels"], p_pos=cfg["gen.p_pos"],
        sigma_min=cfg["gen.sigma_min"], sigma_max=cfg["gen.sigma_max"],
        amp_min=cfg["gen.amp_min"], amp_max=cfg["gen.amp_max"],
        noise_floor=cfg["gen.noise_floor"], noise_scale=cfg["gen.noise_scale"],
        p_interferent=cfg["gen.p_interferent"],
        interferent_fraction=cfg["gen.interferent_fraction"],
        label_halfwidth=cfg["gen.label_halfwidth"], seed=cfg["seed"],
    )


def arch_spec(cfg, in_channels):
    return M.ArchSpec(
        kind=cfg["arch.kind"], in_channels=in_channels, blocks=cfg["arch.blocks"],
        d_model=cfg["arch.d_model"], dropout=cfg["arch.dropout"],
        ffn_mult=cfg["arch.ffn_mult"], conv_kernels=_int_tuple(cfg["arch.conv_kernels"]),
        cnn_filters=_int_tuple(cfg["arch.cnn_filters"]),
        cnn_kernels=_int_tuple(cfg["arch.cnn_kernels"]),
    )


def train_config(cfg):
    return T.TrainConfig(
        mode=cfg["train.mode"], epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"], eval_every=cfg["train.eval_every"],
        seed=cfg["seed"], lr_max=cfg["train.lr_max"],
        weight_decay=cfg["train.weight_decay"],
        warmup_fraction=cfg["train.warmup_fraction"],
        focal=T.FocalLossParams(gamma=cfg["focal.gamma"], alpha=cfg["focal.alpha"]),
        fixmatch=T.FixMatchParams(
            confidence=cfg["fixmatch.confidence"],
            unlabeled_weight=cfg["fixmatch.unlabeled_weight"],
            unlabeled_ratio=cfg["fixmatch.unlabeled_ratio"],
            cowmix_probability=cfg["fixmatch.cowmix_probability"],
            cow_mask=aug.CowMaskParams(
                proportion_min=cfg["cow.proportion_min"],
                proportion_max=cfg["cow.proportion_max"],
                smoothing_scale=cfg["cow.smoothing_scale"],
            ),
        ),
        weak_policy=_policy(cfg, "weak"),
        strong_policy=_policy(cfg, "strong"),
        eval_theta=cfg["eval.theta"],
    )


def _policy(cfg, kind):
    return aug.AugPolicy(
        kind=kind, scale_min=cfg["aug.scale_min"], scale_max=cfg["aug.scale_max"],
        jitter_amplitude=cfg["aug.jitter"],
        time_mask_fraction=cfg["aug.time_mask_fraction"],
        channel_mask_fraction=cfg["aug.channel_mask_fraction"],
        op_probability=cfg["aug.op_probability"],
    )


def _checkpoint_path(cfg):
    return cfg["checkpoint"] or os.path.join(cfg["out_dir"], "model.ckpt")


def cmd_generate(cfg):
    ratios = _float_tuple(cfg["gen.ratios"])
    if len(ratios) != 3:
        raise ConfigError(f"gen.ratios must have 3 entries, got {cfg['gen.ratios']!r}")
    scfg = synth_config(cfg)
    samples = D.synth_generate(scfg, cfg["gen.n"])
    splits = D.split_dataset(samples, ratios=ratios, seed=cfg["seed"])
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    for ds in splits:
        path = os.path.join(out_dir, f"{ds.split}.xic")
        D.write_xic_file(path, list(ds.labeled))
        D.write_annotation_sidecar(path + ".annotations.jsonl", list(ds.labeled))
        print(f"{ds.split}: {len(ds.labeled)} samples -> {path}")
    echo_config(cfg, out_dir)
    return 0


def _load_samples(path, what):
    if not path:
        raise ConfigError(f"no {what} file configured")
    try:
        return D.read_xic_file(path)
    except OSError as exc:
        raise IOError(f"cannot read {what} file {path}: {exc}") from exc


def cmd_train(cfg):
    train_samples = _load_samples(cfg["data.train"], "data.train")
    val_samples = _load_samples(cfg["data.val"], "data.val") if cfg["data.val"] else []
    labeled = [(x, m) for x, m in train_samples if m is not None]
    unlabeled = [x for x, m in train_samples if m is None]

    fraction = cfg["train.labeled_fraction"]
    if not 0 < fraction <= 1:
        raise ConfigError("train.labeled_fraction must be in (0, 1]")
    if fraction < 1:
        keep = max(1, round(fraction * len(labeled)))
        order = np.random.default_rng(cfg["seed"]).permutation(len(labeled))
        kept = set(order[:keep].tolist())
        unlabeled = unlabeled + [labeled[i][0] for i in range(len(labeled)) if i not in kept]
        labeled = [labeled[i] for i in sorted(kept)]
    if cfg["data.unlabeled"]:
        unlabeled = unlabeled + [x for x, _ in _load_samples(cfg["data.unlabeled"], "data.unlabeled")]

    tcfg = train_config(cfg)
    if tcfg.mode == "fixmatch" and not unlabeled:
        raise ConfigError("semisupervised mode needs unlabeled samples "
                          "(data.unlabeled or train.labeled_fraction < 1)")
    if not labeled:
        raise ConfigError("training file has no labeled samples")

    in_channels = labeled[0][0].n_channels
    model = M.build_model(arch_spec(cfg, in_channels), seed=cfg["seed"])
    train_set = D.Dataset(labeled=tuple(labeled), unlabeled=tuple(unlabeled), split="train")
    val_set = D.Dataset(labeled=tuple((x, m) for x, m in val_samples if m is not None), split="val")

    result = T.train(model, train_set, val_set, tcfg)
    result.restore_best()
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt = _checkpoint_path(cfg)
    M.save_checkpoint(model, ckpt, step=len(result.log_rows))
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w") as f:
        f.write(T.log_to_csv(result.log_rows))
    echo_config(cfg, out_dir)
    print(f"best validation mean AP: {result.best_val_ap:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    return 0


def _predict_probs(cfg, input_key, default_key="data.test"):
    path = cfg[input_key] or cfg[default_key]
    samples = _load_samples(path, input_key)
    model, _, _ = M.load_checkpoint(_checkpoint_path(cfg))
    probs = T.predict_probs(model, samples)
    return samples, probs


def cmd_predict(cfg):
    samples, probs = _predict_probs(cfg, "predict.input")
    theta = cfg["eval.theta"]
    dets = {xic_id: detect.extract_detections(p, theta) for xic_id, p in probs.items()}
    csv_text = detect.detections_to_csv(dets)
    out = cfg["predict.out"]
    if out:
        with open(out, "w") as f:
            f.write(csv_text)
        print(f"detections: {out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_eval(cfg):
    path = cfg["eval.input"] or cfg["data.test"]
    samples = _load_samples(path, "eval.input")
    truths = {x.id: m for x, m in samples if m is not None}
    theta, top1 = cfg["eval.theta"], cfg["eval.top1"]
    if cfg["eval.detections"]:
        with open(cfg["eval.detections"]) as f:
            dets = detect.detections_from_csv(f.read())
        for xic_id in truths:
            dets.setdefault(xic_id, [])
        if top1:
            dets = {k: ([max(v, key=lambda d: (d.score, -d.start))] if v else [])
                    for k, v in dets.items()}
        n_det = sum(len(v) for v in dets.values())
        truth_anns = detect._normalize_truths(truths)
        ap, recall = {}, {}
        for iou_t in detect.IOU_THRESHOLDS:
            flags, _, n_truths, matched = detect.match_detections(dets, truth_anns, iou_t)
            ap[iou_t] = detect.average_precision(flags, n_truths)
            recall[iou_t] = detect.average_recall(matched, n_truths, n_det)
        report = detect.EvalReport(detect.IOU_THRESHOLDS, ap, recall,
                                   float(np.mean(list(ap.values()))),
                                   float(np.mean(list(recall.values()))), theta, top1)
    else:
        model, _, _ = M.load_checkpoint(_checkpoint_path(cfg))
        probs = T.predict_probs(model, samples)
        probs = {k: v for k, v in probs.items() if k in truths}
        report = detect.evaluate(probs, truths, theta=theta, top1=top1,
                                 interpolation=cfg["eval.interpolation"])
    text = report.to_json()
    if cfg["eval.out"]:
        with open(cfg["eval.out"], "w") as f:
            f.write(text + "\n")
        print(f"report: {cfg['eval.out']}")
    print(f"mean AP: {report.mean_ap:.4f}  mean AR: {report.mean_ar:.4f}")
    return 0


def cmd_tune_threshold(cfg):
    start, stop, step = (float(v) for v in cfg["tune.grid"].split(":"))
    grid = tuple(np.round(np.arange(start, stop + step / 2, step), 6))
    path = cfg["tune.input"] or cfg["data.val"]
    samples = _load_samples(path, "tune.input")
    truths = {x.id: m for x, m in samples if m is not None}
    model, _, _ = M.load_checkpoint(_checkpoint_path(cfg))
    probs = T.predict_probs(model, samples)
    probs = {k: v for k, v in probs.items() if k in truths}
    theta = detect.tune_threshold(probs, truths, grid=grid, top1=cfg["tune.top1"])
    print(f"{theta}")
    return 0


def cmd_plot(cfg):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    made = []
    if cfg["plot.metrics"]:
        import csv as csvmod
        with open(cfg["plot.metrics"]) as f:
            rows = list(csvmod.DictReader(f))
        steps = [int(r["step"]) for r in rows]
        losses = [float(r["loss_labeled"]) for r in rows]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(steps, losses, label="labeled loss")
        val = [(int(r["step"]), float(r["val_ap"])) for r in rows if r["val_ap"]]
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), color="tab:green", marker="o", label="val mean AP")
            ax2.set_ylabel("validation mean AP")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        path = os.path.join(out_dir, "metrics.svg")
        fig.savefig(path)
        plt.close(fig)
        made.append(path)
    if cfg["plot.input"]:
        samples, probs = _predict_probs(cfg, "plot.input", default_key="plot.input")
        wanted = [s for s in cfg["plot.ids"].split(",") if s]
        chosen = [(x, m) for x, m in samples if not wanted or x.id in wanted]
        chosen = chosen[: cfg["plot.max_xics"]]
        theta = cfg["eval.theta"]
        for x, mask in chosen:
            p = probs[x.id]
            t_axis = np.arange(x.length)
            fig, (ax_tr, ax_p) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
            for c in range(x.trace_channels):
                ax_tr.plot(t_axis, x.values[c], linewidth=0.8)
            ax_tr.set_ylabel("intensity")
            ax_p.plot(t_axis, p, color="black", label="model probability")
            ax_p.axhline(theta, color="gray", linestyle=":")
            if mask is not None:
                for ann in D.mask_to_annotations(mask):
                    for edge in (ann.left, ann.right):
                        ax_p.axvline(edge, color="tab:blue", linestyle="-", alpha=0.7)
            for det in detect.extract_detections(p, theta):
                for edge in (det.start, det.end):
                    ax_p.axvline(edge, color="tab:red", linestyle="--", alpha=0.7)
            ax_p.set_xlabel("time index")
            ax_p.set_ylabel("probability")
            path = os.path.join(out_dir, f"{x.id}.svg")
            fig.savefig(path)
            plt.close(fig)
            made.append(path)
            csv_path = os.path.join(out_dir, f"{x.id}.csv")
            with open(csv_path, "w") as f:
                f.write("t,probability," + ",".join(f"trace{c}" for c in range(x.trace_channels)) + "\n")
                for t in t_axis:
                    vals = ",".join(f"{x.values[c, t]:.6g}" for c in range(x.trace_channels))
                    f.write(f"{t},{p[t]:.6f},{vals}\n")
            made.append(csv_path)
    if not made:
        raise ConfigError("plot needs plot.metrics or plot.input")
    for path in made:
        print(path)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "tune-threshold": cmd_tune_threshold,
    "plot": cmd_plot,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="xicpeak", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                       help="config overrides; applied after the file")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if cfg["threads"] == 1:
            os.environ.setdefault("OMP_NUM_THREADS", "1")
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, D.FormatError, M.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
