"""Whole-system orchestration: noisy tags in, segmenters and metrics out.

Stages run in a fixed order and every failure is re-raised as a
:class:`~noisyseg.errors.StageError` naming the stage.  All randomness is
derived from ``config.seed`` through named sub-seeds.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from noisyseg import evaluation
from noisyseg.attention import attention_maps
from noisyseg.config import FINETUNE_AUGMENT, PipelineConfig, write_config
from noisyseg.convnet.checkpoint import save_network
from noisyseg.convnet.network import Network, build_classifier, build_segmenter, predict_in_batches
from noisyseg.convnet.train import TrainSchedule, train_classifier, train_segmenter
from noisyseg.curation import (
    CascadeResult,
    CurationReport,
    PseudoLabelSet,
    SegmentParams,
    build_finetune_set,
    filter_cascade,
    segment_all,
)
from noisyseg.data.manifest import ATTENTION_TRAIN, EVAL, FINETUNE_POOL, Manifest
from noisyseg.data.synth import SynthSpec, synth_generate
from noisyseg.errors import StageError
from noisyseg.pseudolabel import binarize, smooth, trimap
from noisyseg.seeding import subseed

log = logging.getLogger(__name__)


@contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class PipelineResult:
    config: PipelineConfig
    classifier: Network
    initial_segmenter: Network
    finetuned_segmenter: Network | None
    reports: list[CurationReport]
    finetune_sets: list[PseudoLabelSet]
    metrics: dict = field(default_factory=dict)


def _schedule(config: PipelineConfig, prefix: str, name: str) -> TrainSchedule:
    s = config.schedule(prefix)
    return TrainSchedule(s.learning_rate, s.momentum, s.batch_size, s.iterations, s.weight_decay,
                         subseed(config.seed, "schedule", name))


def segment_params(config: PipelineConfig) -> SegmentParams:
    return SegmentParams(config.segments, config.compactness, config.segment_iterations,
                         subseed(config.seed, "segment-params"))


def synth_spec(config: PipelineConfig) -> SynthSpec:
    return SynthSpec(
        class_count=config.class_count,
        image_size=config.image_size,
        distractor_rate=config.distractor_rate,
        noise_rate=config.noise_rate,
        counts={ATTENTION_TRAIN: config.n_attention_train, FINETUNE_POOL: config.n_finetune_pool,
                EVAL: config.n_eval},
        seed=subseed(config.seed, "synth"),
    )


def attention_pseudo_gt(classifier: Network, images, tags, names, config: PipelineConfig, segments=None):
    """Fused attention -> segment smoothing -> trimap masks; also returns the attention result."""
    res = attention_maps(classifier, images, tags, config.lambda_forward, config.lambda_backward)
    if segments is None:
        segments = segment_all(images, names, segment_params(config))
    masks = np.stack([trimap(smooth(a, s), int(t), config.delta_high, config.delta_low)
                      for a, s, t in zip(res.fused, segments, tags)])
    return masks, res, segments


def ablation_masks(res, segments, tags, config: PipelineConfig) -> dict:
    """Pseudo masks from each attention variant, keyed by row name."""
    th = config.ablation_threshold
    fused_smooth = [smooth(a, s) for a, s in zip(res.fused, segments)]
    sources = {
        "forward": res.upsampled("forward"),
        "backward": res.backward_product(),
        "fused": res.fused,
        "fused+segment": fused_smooth,
    }
    out = {name: np.stack([binarize(a, int(t), th) for a, t in zip(maps, tags)]) for name, maps in sources.items()}
    out["fused+segment+trimap"] = np.stack([trimap(a, int(t), config.delta_high, config.delta_low)
                                            for a, t in zip(fused_smooth, tags)])
    return out


def _finetune(segmenter, classifier, pool, pool_images, initial: PseudoLabelSet, config: PipelineConfig):
    sets = []
    seg_params = segment_params(config)
    pool_segments = segment_all(pool_images, [r.image for r in pool.records], seg_params)
    for rnd in range(config.finetune_rounds):
        fs = build_finetune_set(pool, segmenter, classifier, config.mu, seg_params, config.delta_high,
                                config.delta_low, images=pool_images, segments=pool_segments)
        log.info("fine-tuning round %d: accepted %d of %d pool images", rnd + 1, len(fs), len(pool))
        sets.append(fs)
        data = initial.concat(fs) if config.finetune_mode == FINETUNE_AUGMENT else fs
        if len(data) == 0:
            continue
        segmenter = train_segmenter(segmenter, (data.images, data.masks),
                                    _schedule(config, "ft", f"finetune-{rnd}"))
    return segmenter, sets


def curate(config: PipelineConfig, full: Manifest, train_m: Manifest, train_x) -> CascadeResult:
    """Filter cascade over the attention-train records; purity is filled in when ``full`` carries truth."""
    cascade = filter_cascade(train_m, _schedule(config, "cls", "cascade"), widths=config.widths,
                             init_seed=subseed(config.seed, "classifier-init"), images=train_x,
                             thresholds={1: config.filter_low, 3: config.filter_high},
                             top=config.filter_top, class_count=config.class_count)
    if full.has_truth:
        current = full.split(ATTENTION_TRAIN)
        for rep in cascade.reports:
            rep.purity_in = evaluation.tag_purity(current)
            keep = set(rep.kept_images())
            current = current.subset([r for r in current.records if r.image in keep])
            rep.purity_kept = evaluation.tag_purity(current)
    return cascade


def run_pipeline(config: PipelineConfig, out_dir) -> PipelineResult:
    """Run every stage, writing models, reports, metrics and figures under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.cfg", config)

    with stage("data"):
        if config.manifest:
            full = Manifest.read(config.manifest)
        else:
            full = synth_generate(synth_spec(config), out / "data")
        train_m = full.split(ATTENTION_TRAIN).without_truth()
        pool_m = full.split(FINETUNE_POOL).without_truth()
        eval_m = full.split(EVAL)
        if len(train_m) == 0 or len(eval_m) == 0:
            raise ValueError("manifest needs attention-train and eval records")
        train_x = train_m.load_images()
        pool_x = pool_m.load_images()
        eval_x = eval_m.load_images()
        k = config.class_count

    with stage("filter"):
        cascade = curate(config, full, train_m, train_x)
        reports = cascade.reports

    with stage("train-classifier"):
        net = build_classifier(k, train_x.shape[1], config.widths, seed=subseed(config.seed, "classifier-init"))
        classifier = train_classifier(net, (cascade.images, cascade.manifest.tags),
                                      _schedule(config, "cls", "final"))
        save_network(out / "models" / "classifier.nsn", classifier)

    with stage("pseudo-gt"):
        kept = cascade.manifest
        masks, _, _ = attention_pseudo_gt(classifier, cascade.images, kept.tags,
                                          [r.image for r in kept.records], config)
        initial_set = PseudoLabelSet(list(kept.records), cascade.images, masks, "attention")

    with stage("train-seg"):
        trunk = classifier if config.seg_init == "classifier" else None
        seg0 = build_segmenter(k, train_x.shape[1], config.widths, seed=subseed(config.seed, "segmenter-init"),
                               trunk=trunk, output_stride=config.seg_output_stride)
        initial = train_segmenter(seg0, (initial_set.images, initial_set.masks), _schedule(config, "seg", "initial"))
        save_network(out / "models" / "segmenter_initial.nsn", initial)

    finetuned, ft_sets = None, []
    if config.finetune:
        with stage("finetune"):
            finetuned, ft_sets = _finetune(initial, classifier, pool_m, pool_x, initial_set, config)
            save_network(out / "models" / "segmenter_finetuned.nsn", finetuned)

    with stage("eval"):
        metrics = _evaluate(config, classifier, initial, finetuned, reports, ft_sets, full, eval_m, eval_x)

    result = PipelineResult(config, classifier, initial, finetuned, reports, ft_sets, metrics)
    with stage("report"):
        from noisyseg import report

        report.write_outputs(result, out)
    return result


def _evaluate(config, classifier, initial, finetuned, reports, ft_sets, full, eval_m, eval_x) -> dict:
    k = config.class_count
    metrics = {"class_count": k, "seed": config.seed}
    metrics["input_records"] = reports[0].input
    for rep in reports:
        p = f"filter.stage{rep.stage}"
        metrics[f"{p}.rule"] = rep.rule
        metrics[f"{p}.input"] = rep.input
        metrics[f"{p}.kept"] = rep.kept
        metrics[f"{p}.dropped"] = rep.dropped
        metrics[f"{p}.purity_in"] = rep.purity_in
        metrics[f"{p}.purity_kept"] = rep.purity_kept
    metrics["filter.retention"] = reports[-1].kept / reports[0].input
    metrics["filter.purity_in"] = reports[0].purity_in
    metrics["filter.purity_kept"] = reports[-1].purity_kept

    miou0, per0 = evaluation.evaluate_segmenter(initial, eval_m, eval_x)
    metrics["miou.initial"] = miou0
    for c, v in enumerate(per0):
        metrics[f"iou.initial.class{c}"] = None if np.isnan(v) else float(v)
    if finetuned is not None:
        miou1, per1 = evaluation.evaluate_segmenter(finetuned, eval_m, eval_x)
        metrics["miou.finetuned"] = miou1
        for c, v in enumerate(per1):
            metrics[f"iou.finetuned.class{c}"] = None if np.isnan(v) else float(v)
        metrics["miou.gain"] = miou1 - miou0
        for i, fs in enumerate(ft_sets, start=1):
            metrics[f"finetune.round{i}.accepted"] = len(fs)
    else:
        metrics["miou.finetuned"] = "absent"

    # Ablation: pseudo masks built on eval images the final classifier accepts
    # under the strictest filter rule, each scored against the true masks.
    probs = predict_in_batches(classifier, eval_x)
    tags = eval_m.tags
    confident = probs[np.arange(len(tags)), tags - 1] > config.filter_high
    sub = eval_m.subset([r for r, c in zip(eval_m.records, confident) if c])
    metrics["ablation.images"] = len(sub)
    if len(sub):
        sub_x = eval_x[confident]
        names = [r.image for r in sub.records]
        _, res, segs = attention_pseudo_gt(classifier, sub_x, sub.tags, names, config)
        truths = evaluation.load_truths(sub)
        for name, masks in ablation_masks(res, segs, sub.tags, config).items():
            metrics[f"ablation.{name}"] = evaluation.mean_iou(list(masks), truths, k)[0]
    return metrics
