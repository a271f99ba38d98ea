"""Command-line entry point: ``noisyseg <subcommand> ...``.

Exit status is 0 on success, 2 for usage errors (bad flags, missing inputs,
invalid configuration) and 1 when a processing stage fails.  Error messages
name the subcommand or pipeline stage that failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from noisyseg import evaluation
from noisyseg.attention import (
    DEFAULT_LAMBDA_BACKWARD,
    DEFAULT_LAMBDA_FORWARD,
    attention_maps,
)
from noisyseg.config import PipelineConfig, load_config, parse_value
from noisyseg.convnet.checkpoint import load_network, save_network
from noisyseg.convnet.network import CLASSIFIER, SEGMENTER, build_classifier, build_segmenter
from noisyseg.convnet.train import TrainSchedule, train_classifier, train_segmenter
from noisyseg.curation import (
    DEFAULT_MU,
    SegmentParams,
    build_finetune_set,
    filter_cascade,
    segment_all,
)
from noisyseg.data.imageio import load_image, load_mask, save_map_grayscale, save_map_raw, save_mask
from noisyseg.data.manifest import ATTENTION_TRAIN, EVAL, FINETUNE_POOL, SPLITS, Manifest, read_pairs, write_pairs
from noisyseg.data.synth import SynthSpec, synth_generate
from noisyseg.errors import ConfigurationError, StageError, UsageError
from noisyseg.pseudolabel import DELTA_HIGH, DELTA_LOW, mean_iou, smooth, trimap
from noisyseg.report import fmt, write_curation, write_decisions, write_finetune, write_metrics
from noisyseg.seeding import subseed
from noisyseg.tensor import minmax_normalize

log = logging.getLogger("noisyseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


# -- shared argument groups ---------------------------------------------------

def _add_schedule(p, lr=0.01, iterations=2000):
    g = p.add_argument_group("training schedule")
    g.add_argument("--learning-rate", type=float, default=lr)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--iterations", type=int, default=iterations)
    g.add_argument("--weight-decay", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)


def _schedule(args, name: str) -> TrainSchedule:
    return TrainSchedule(args.learning_rate, args.momentum, args.batch_size, args.iterations,
                         args.weight_decay, subseed(args.seed, "schedule", name))


def _add_segments(p):
    g = p.add_argument_group("superpixels")
    g.add_argument("--segments", type=int, default=64)
    g.add_argument("--compactness", type=float, default=0.3)
    g.add_argument("--segment-iterations", type=int, default=10)


def _segment_params(args) -> SegmentParams:
    return SegmentParams(args.segments, args.compactness, args.segment_iterations, subseed(args.seed, "segment-params"))


def _add_trimap(p):
    p.add_argument("--delta-high", type=float, default=DELTA_HIGH, help="class above this value")
    p.add_argument("--delta-low", type=float, default=DELTA_LOW, help="background at or below this value")


def _widths(text: str):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input not found: {p}")
    return p


def _manifest_split(args) -> Manifest:
    m = Manifest.read(_existing(args.manifest))
    return m.split(args.split) if args.split else m


def _load_model(path, head: str):
    net = load_network(_existing(path))
    if net.head != head:
        raise UsageError(f"{path} holds a {net.head} network, expected a {head}")
    return net


# -- subcommands ----------------------------------------------------------------

def cmd_synth_data(args):
    counts = dict(zip((ATTENTION_TRAIN, FINETUNE_POOL, EVAL), args.counts))
    spec = SynthSpec(class_count=args.classes, image_size=args.size, noise_rate=args.noise_rate,
                     distractor_rate=args.distractor_rate, counts=counts, seed=args.seed)
    m = synth_generate(spec, args.out)
    print(f"wrote {len(m)} records to {Path(args.out) / 'manifest.tsv'}")


def cmd_train_classifier(args):
    m = _manifest_split(args).without_truth()
    if len(m) == 0:
        raise UsageError("no records to train on")
    images = m.load_images()
    net = build_classifier(args.classes, images.shape[1], args.widths, seed=subseed(args.seed, "classifier-init"))
    net = train_classifier(net, (images, m.tags), _schedule(args, "classifier"))
    save_network(args.out, net)
    print(f"saved classifier to {args.out}")


def cmd_filter(args):
    full = Manifest.read(_existing(args.manifest))
    m = full.split(args.split) if args.split else full
    res = filter_cascade(m.without_truth(), _schedule(args, "cascade"), widths=args.widths,
                         init_seed=subseed(args.seed, "classifier-init"),
                         thresholds={1: args.filter_low, 3: args.filter_high}, top=args.filter_top,
                         class_count=args.classes)
    if m.has_truth:
        current = m
        for rep in res.reports:
            rep.purity_in = evaluation.tag_purity(current)
            keep = set(rep.kept_images())
            current = current.subset([r for r in current.records if r.image in keep])
            rep.purity_kept = evaluation.tag_purity(current)
    out = Path(args.out)
    m.subset(res.manifest.records).write(out / "kept.tsv")
    write_curation(out / "curation.tsv", res.reports)
    write_decisions(out / "decisions.tsv", res.reports)
    save_network(out / "classifier.nsn", res.classifier)
    for rep in res.reports:
        print(f"stage {rep.stage} rule {rep.rule}: input {rep.input} kept {rep.kept} dropped {rep.dropped}"
              f" purity {fmt(rep.purity_in)} -> {fmt(rep.purity_kept)}")


def cmd_attention(args):
    net = _load_model(args.model, CLASSIFIER)
    image = load_image(_existing(args.image))
    if not 1 <= args.cls <= net.class_count:
        raise UsageError(f"--class must lie in 1..{net.class_count}")
    res = attention_maps(net, image[None], [args.cls], args.lambda_forward, args.lambda_backward)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = {"forward": res.forward[0], "backward_shallow": res.shallow[0], "backward_deep": res.deep[0],
            "fused": res.fused[0]}
    for name, amap in maps.items():
        save_map_grayscale(out / f"{name}.png", minmax_normalize(amap))
        save_map_raw(out / f"{name}.npy", amap)
    print(f"wrote {', '.join(maps)} to {out}")


def cmd_pseudo_gt(args):
    m = _manifest_split(args).without_truth()
    net = _load_model(args.model, CLASSIFIER)
    images = m.load_images()
    res = attention_maps(net, images, m.tags, args.lambda_forward, args.lambda_backward)
    segs = segment_all(images, [r.image for r in m.records], _segment_params(args))
    out = Path(args.out)
    pairs = []
    for r, a, s in zip(m.records, res.fused, segs):
        mask = trimap(smooth(a, s), r.tag, args.delta_high, args.delta_low)
        mpath = out / "masks" / Path(r.image).name
        save_mask(mpath, mask)
        if args.palette:
            save_mask(out / "palette" / Path(r.image).name, mask, palette=True)
        pairs.append((m.image_path(r), mpath))
    write_pairs(out / "pairs.tsv", pairs)
    print(f"wrote {len(pairs)} pseudo masks; pair list {out / 'pairs.tsv'}")


def _load_pairs(path):
    pairs = read_pairs(_existing(path))
    if not pairs:
        return None, None
    images = np.stack([load_image(i) for i, _ in pairs])
    masks = np.stack([load_mask(m) for _, m in pairs])
    return images, masks


def cmd_train_seg(args):
    images, masks = _load_pairs(args.pairs)
    if images is None:
        raise UsageError("pair list is empty")
    trunk = _load_model(args.init_from, CLASSIFIER) if args.init_from else None
    net = build_segmenter(args.classes, images.shape[1], args.widths, seed=subseed(args.seed, "segmenter-init"),
                          trunk=trunk, output_stride=args.output_stride)
    net = train_segmenter(net, (images, masks), _schedule(args, "segmenter"))
    save_network(args.out, net)
    print(f"saved segmenter to {args.out}")


def cmd_finetune(args):
    seg = _load_model(args.segmenter, SEGMENTER)
    cls = _load_model(args.classifier, CLASSIFIER)
    pool = _manifest_split(args).without_truth()
    images = pool.load_images()
    fs = build_finetune_set(pool, seg, cls, args.mu, _segment_params(args), args.delta_high, args.delta_low,
                            images=images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for r, mask in zip(fs.records, fs.masks):
        mpath = out / "masks" / Path(r.image).name
        save_mask(mpath, mask)
        pairs.append((pool.image_path(r), mpath))
    write_pairs(out / "pairs.tsv", pairs)
    write_finetune(out / "finetune.tsv", [fs])
    data_x, data_y = fs.images, fs.masks
    if args.augment:
        ax, ay = _load_pairs(args.augment)
        if ax is not None:
            data_x, data_y = np.concatenate([data_x, ax]), np.concatenate([data_y, ay])
    if len(data_x):
        seg = train_segmenter(seg, (data_x, data_y), _schedule(args, "finetune-0"))
    save_network(out / "segmenter.nsn", seg)
    print(f"accepted {len(fs)} of {len(pool)} pool images; saved {out / 'segmenter.nsn'}")


def cmd_eval(args):
    metrics = {}
    if args.pred:
        pred_dir, gt_dir = _existing(args.pred), _existing(args.gt)
        names = sorted(p.name for p in pred_dir.iterdir() if p.is_file() and not p.name.endswith(".part"))
        if not names:
            raise UsageError(f"no prediction files in {pred_dir}")
        missing = [n for n in names if not (gt_dir / n).exists()]
        if missing:
            raise UsageError(f"no ground truth for {missing[0]} (and {len(missing) - 1} more)")
        preds = [load_mask(pred_dir / n) for n in names]
        gts = [load_mask(gt_dir / n) for n in names]
        k = args.classes or int(max(max(p.max(), g.max()) for p, g in zip(preds, gts)))
        miou, per = mean_iou(preds, gts, k)
        metrics["images"] = len(names)
    else:
        if not (args.model and args.manifest):
            raise UsageError("give --pred and --gt, or --model and --manifest")
        net = _load_model(args.model, SEGMENTER)
        m = Manifest.read(_existing(args.manifest)).split(args.split or EVAL)
        miou, per = evaluation.evaluate_segmenter(net, m)
        k = net.class_count
        metrics["images"] = len(m)
    metrics["miou"] = miou
    for c in range(k + 1):
        metrics[f"iou.class{c}"] = None if np.isnan(per[c]) else float(per[c])
    if args.out:
        write_metrics(args.out, metrics)
    for key, v in metrics.items():
        print(f"{key}\t{fmt(v)}")


def cmd_run_all(args):
    from noisyseg.pipeline import run_pipeline

    config = load_config(_existing(args.config)) if args.config else PipelineConfig()
    changes = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        changes[key.strip()] = parse_value(key.strip(), value)
    for f in fields(PipelineConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            changes[f.name] = parse_value(f.name, v)
    config = config.replace(**changes)
    result = run_pipeline(config, args.out)
    for key in ("filter.purity_in", "filter.purity_kept", "miou.initial", "miou.finetuned"):
        print(f"{key}\t{fmt(result.metrics.get(key))}")
    print(f"outputs in {args.out}")


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisyseg", description="Pseudo ground truth and segmenters from noisily tagged images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the synthetic noisy benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise-rate", type=float, default=0.3)
    p.add_argument("--distractor-rate", type=float, default=0.2)
    p.add_argument("--counts", type=_widths, default=(2000, 500, 500),
                   help="attention-train,finetune-pool,eval record counts")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    def manifest_args(p, split):
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", choices=SPLITS, default=split)

    def net_args(p):
        p.add_argument("--classes", type=int, default=5)
        p.add_argument("--widths", type=_widths, default=(8, 16, 32))

    p = sub.add_parser("train-classifier", help="train a classifier on noisy tags")
    manifest_args(p, ATTENTION_TRAIN)
    net_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_schedule(p, iterations=1000)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("filter", help="three-round train-then-filter cascade")
    manifest_args(p, ATTENTION_TRAIN)
    net_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--filter-low", type=float, default=0.1)
    p.add_argument("--filter-top", type=int, default=3)
    p.add_argument("--filter-high", type=float, default=0.6)
    _add_schedule(p, iterations=1000)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("attention", help="attention maps of one image")
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lambda-forward", type=float, default=DEFAULT_LAMBDA_FORWARD)
    p.add_argument("--lambda-backward", type=float, default=DEFAULT_LAMBDA_BACKWARD)
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("pseudo-gt", help="trimap pseudo masks from attention")
    manifest_args(p, ATTENTION_TRAIN)
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lambda-forward", type=float, default=DEFAULT_LAMBDA_FORWARD)
    p.add_argument("--lambda-backward", type=float, default=DEFAULT_LAMBDA_BACKWARD)
    p.add_argument("--palette", action="store_true", help="also write colour-palette copies")
    p.add_argument("--seed", type=int, default=0)
    _add_trimap(p)
    _add_segments(p)
    p.set_defaults(func=cmd_pseudo_gt)

    p = sub.add_parser("train-seg", help="train a segmenter on image/mask pairs")
    p.add_argument("--pairs", required=True, help="pair list written by pseudo-gt or finetune")
    net_args(p)
    p.add_argument("--init-from", help="classifier checkpoint whose trunk initialises the segmenter")
    p.add_argument("--output-stride", type=int, default=4)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_schedule(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("finetune", help="gate a pool, build pseudo masks, fine-tune the segmenter")
    manifest_args(p, FINETUNE_POOL)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mu", type=float, default=DEFAULT_MU)
    p.add_argument("--augment", help="pair list added to the accepted set")
    _add_trimap(p)
    _add_segments(p)
    _add_schedule(p, lr=0.003, iterations=500)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="mIoU of predicted masks or of a segmenter")
    p.add_argument("--pred", help="directory of predicted mask files")
    p.add_argument("--gt", help="directory of true mask files (same names)")
    p.add_argument("--model", help="segmenter checkpoint (with --manifest)")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--classes", type=int, help="K (default: largest label seen)")
    p.add_argument("--out", help="metrics file to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-all", help="the whole pipeline")
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    g = p.add_argument_group("config overrides")
    for f in fields(PipelineConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    prog = f"noisyseg {args.command}"
    try:
        if args.command == "eval" and bool(args.pred) != bool(args.gt):
            raise UsageError("--pred and --gt go together")
        args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"{prog}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"{prog}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any other failure is reported against the subcommand
        print(f"{prog}: stage '{args.command}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
