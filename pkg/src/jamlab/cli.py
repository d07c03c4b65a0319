"""``jamlab gen|train|eval|render|flops``.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config, 3 non-finite
loss, 4 checkpoint/data architecture mismatch, 5 missing sample.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, dataset, metrics, plotting
from .jamgen import CLASS_NAMES, class_id, generate, tier
from .moe.model import EXPERT_NAMES, ModelConfig, ModelError, MoEModel
from .moe.train import TrainingError, fit, predict, split_indices
from .specfeat import PROFILES, extract_features, mtm_psd, dpss_tapers, spectrogram
from .tensor_nn import TrainConfig

log = logging.getLogger("jamlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NONFINITE, EXIT_ARCH, EXIT_MISSING = 0, 1, 2, 3, 4, 5

# Desk runs are short, so they use a larger step and a shorter schedule than
# the full-fidelity defaults carried by TrainConfig().
DESK_TRAIN = TrainConfig(
    lr=1e-3, weight_decay=0.05, warmup_epochs=5, max_epochs=30, batch_size=16, patience=15, seed=0, aux_weight=0.3
)
TRAIN_DEFAULTS = {"desk": DESK_TRAIN, "full": TrainConfig()}


class ConfigError(ValueError):
    pass


def load_json(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def build(cls, data, base=None):
    """Dataclass from a dict, rejecting unknown keys; missing keys come from ``base``."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    merged = dataclasses.asdict(base) if base is not None else {}
    merged.update(data)
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(merged)
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def model_for_profile(profile, seed):
    return ModelConfig(
        image_h=profile.stft.out_h, image_w=profile.stft.out_w, psd_bins=profile.psd_bins, seed=seed
    )


def check_arch(model, fs):
    want = model_for_profile(fs.profile, model.config.seed)
    got = model.config
    if (got.image_h, got.image_w, got.psd_bins) != (want.image_h, want.image_w, want.psd_bins):
        raise ModelError(
            f"checkpoint expects {got.image_h}x{got.image_w} / {got.psd_bins} bins, "
            f"dataset profile {fs.profile.name!r} provides {want.image_h}x{want.image_w} / {want.psd_bins}"
        )


# commands


def cmd_gen(args):
    raw = load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.profile is not None:
        raw["profile"] = args.profile
    cfg = build(dataset.GenConfig, raw)
    out = Path(args.out)
    m = dataset.generate_dataset(cfg, out, workers=args.workers)
    print(f"wrote {len(m['records'])} samples in {len(m['shards'])} shards to {out}")
    return EXIT_OK


def cmd_train(args):
    fs = dataset.load_dataset(args.data)
    raw = load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    profile = args.profile or fs.profile.name
    cfg = build(TrainConfig, raw, TRAIN_DEFAULTS.get(profile, DESK_TRAIN))
    model = MoEModel(model_for_profile(fs.profile, cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = []

    def report(row):
        print(
            f"epoch {row['epoch']:3d}  lr {row['lr']:.3e}  ce {row['ce']:.4f}  "
            f"aux {row['aux']:.4f}  val_oa {row['val_oa']:.2f}",
            flush=True,
        )

    history = fit(model, fs.arrays(), cfg, on_epoch=report, trace=trace)
    best = int(np.argmax([h["val_oa"] for h in history]))
    meta = {"train": cfg.to_dict(), "profile": fs.profile.to_dict(), "best_epoch": best}
    container.save_checkpoint(out / "checkpoint.jlt", model, meta)
    write_json(out / "history.json", {"config": cfg.to_dict(), "best_epoch": best, "epochs": history})
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "batch", "ce", "aux", "total"])
        w.writerows([e, b, repr(c), repr(a), repr(t)] for e, b, c, a, t in trace)
    print(f"best epoch {best}: val_oa {history[best]['val_oa']:.2f}; checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args):
    fs = dataset.load_dataset(args.data)
    model, meta = container.load_checkpoint(args.checkpoint)
    check_arch(model, fs)
    seed = meta.get("train", {}).get("seed", 0) if args.seed is None else args.seed
    tr, va = split_indices(len(fs), seed)
    idx = {"val": va, "train": tr, "all": np.arange(len(fs))}[args.split]
    sub = fs.subset(idx)
    pred, chosen, flops, _, gates = predict(model, sub.tf, sub.psd)
    names = [CLASS_NAMES[c] for c in range(1, model.config.n_classes + 1)]
    report = metrics.build_report(sub.labels, pred + 1, chosen, flops, sub.tiers, names, model.config.n_classes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    cm = metrics.ConfusionMatrix(np.array(report.confusion))
    (out / "confusion.csv").write_text(cm.to_csv(names))
    with open(out / "usage.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tier"] + list(EXPERT_NAMES))
        for t, row in zip(metrics.TIER_NAMES, report.usage):
            w.writerow([t] + [f"{v:.6f}" for v in row])
    with open(out / "samples.jsonl", "w") as fh:
        for n in range(len(sub)):
            rec = {
                "id": sub.ids[n],
                "true": int(sub.labels[n]),
                "predicted": int(pred[n] + 1),
                "gate": [float(g) for g in gates[n]],
                "expert": EXPERT_NAMES[chosen[n]],
                "flops": int(flops[n]),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    present = sorted(set(int(c) for c in sub.labels) | set(int(p) + 1 for p in pred))
    sub_counts = cm.counts[np.ix_([c - 1 for c in present], [c - 1 for c in present])]
    plotting.confusion_figure(sub_counts, [CLASS_NAMES[c] for c in present], out / "confusion.png")
    plotting.usage_figure(report.usage, out / "usage.png")
    print(f"OA {report.oa:.2f}% over {report.n_samples} samples; mean charged FLOPs {report.flops_mean:.0f}")
    for t, row in zip(metrics.TIER_NAMES, report.usage):
        print(f"  {t:6s} " + "  ".join(f"{e} {v * 100:5.1f}%" for e, v in zip(EXPERT_NAMES, row)))
    return EXIT_OK


def _signal_for(args):
    if args.sample is not None:
        m = dataset.read_manifest(args.data)
        rec = dataset.find_record(m, args.sample)
        return args.sample, m["root_seed"], rec["class_id"], rec["jnr"], rec["index"], m["profile"]["name"]
    if args.class_name is None:
        raise ConfigError("render needs --sample or --class")
    try:
        cid = int(args.class_name)
    except ValueError:
        cid = class_id(args.class_name)
    if cid not in CLASS_NAMES:
        raise ConfigError(f"unknown class {args.class_name}")
    sid = f"c{cid:02d}-{args.index:06d}"
    return sid, args.seed or 0, cid, args.jnr, args.index, args.profile or "desk"


def cmd_render(args):
    try:
        sid, seed, cid, jnr, index, profile_name = _signal_for(args)
    except KeyError:
        return EXIT_MISSING
    profile = PROFILES[args.profile or profile_name]
    _, x, _ = generate(seed, cid, jnr, index)
    spec = spectrogram(x, profile.stft)
    psd = mtm_psd(x, dpss_tapers(x.config.n_samples, profile.nw, profile.n_tapers), profile.psd_nfft)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = profile.image_shape
    plotting.render_image(spec.image, out / f"{sid}_stft.png", colormap=args.colormap, size=size)
    plotting.render_image(np.fft.fftshift(psd.log_values), out / f"{sid}_psd.png", kind="psd", size=size)
    print(f"rendered {CLASS_NAMES[cid]} at {jnr} dB to {out}")
    return EXIT_OK


def cmd_flops(args):
    if args.checkpoint:
        model, _ = container.load_checkpoint(args.checkpoint)
    else:
        model = MoEModel(model_for_profile(PROFILES[args.profile or "desk"], 0))
    ledger = metrics.flops_of_model(model)
    print(f"total parameters {model.num_params()}")
    for part in ledger.parts:
        print(f"  {part:7s} flops {ledger.total(part):>12d}  params {ledger.params(part):>9d}")
    usage = np.full(len(ledger.experts), 1 / len(ledger.experts))
    if args.usage:
        try:
            usage = np.array([float(v) for v in args.usage.split(",")])
            cost = ledger.expected_cost(usage)
        except ValueError as exc:
            raise ConfigError(f"--usage: {exc}") from None
    else:
        cost = ledger.expected_cost(usage)
    print(f"hard-route expected FLOPs under usage {np.round(usage, 4).tolist()}: {cost:.0f}")
    print(f"always-heavy FLOPs: {ledger.hard_route_cost('heavy')}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.csv").write_text(ledger.to_csv())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="jamlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--profile", choices=sorted(PROFILES))

    g = sub.add_parser("gen", help="synthesize signals and write feature shards")
    common(g)
    g.add_argument("--workers", type=int, help="worker processes (default: JAMLAB_THREADS or CPU count)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the mixture on a generated dataset")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="hard-gated evaluation with report, CSVs and figures")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="write spectrogram and PSD images for one signal")
    common(r)
    r.add_argument("--data", help="dataset directory (with --sample)")
    r.add_argument("--sample", help="sample id from the manifest")
    r.add_argument("--class", dest="class_name", help="class id or name, e.g. LFM+Pulse")
    r.add_argument("--jnr", type=float, default=10.0)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--colormap", default="viridis")
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("flops", help="parameter and FLOPs ledger")
    common(f, out_required=False)
    f.add_argument("--checkpoint")
    f.add_argument("--usage", help="comma-separated expert usage, e.g. 0.2,0.3,0.5")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, dataset.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARCH
    except dataset.MissingSample as exc:
        print(f"error: missing sample {exc}", file=sys.stderr)
        return EXIT_MISSING
    except container.ContainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
