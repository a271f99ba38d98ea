"""Noisy-data curation: the train-then-filter cascade and the fine-tuning selection loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from noisyseg.convnet.network import CLASSIFIER, SEGMENTER, Network, build_classifier, predict_in_batches
from noisyseg.convnet.train import TrainSchedule, train_classifier
from noisyseg.data.manifest import Manifest, Record
from noisyseg.errors import ConfigurationError, DataExhaustionError, UsageError
from noisyseg.pseudolabel import DELTA_HIGH, DELTA_LOW, generate_segments, smooth, trimap
from noisyseg.seeding import subseed
from noisyseg.tensor import argsort_descending

log = logging.getLogger(__name__)

RULE_LOW_CONFIDENCE = 1  # P(tag) <= 0.1
RULE_NOT_TOP = 2  # tag outside the top 3
RULE_NOT_CONFIDENT = 3  # P(tag) <= 0.6

DEFAULT_THRESHOLDS = {RULE_LOW_CONFIDENCE: 0.1, RULE_NOT_CONFIDENT: 0.6}
DEFAULT_TOP = 3
DEFAULT_MU = 0.4


@dataclass(frozen=True)
class Decision:
    image: str
    tag: int
    p_tag: float
    rank: int  # 0-based position of the tag in the descending class order
    kept: bool
    rule: int


@dataclass
class CurationReport:
    """Outcome of one filter stage.  ``purity_*`` stay ``None`` unless truth was available."""

    stage: int
    rule: int
    decisions: list[Decision] = field(default_factory=list)
    purity_in: float | None = None
    purity_kept: float | None = None

    @property
    def input(self) -> int:
        return len(self.decisions)

    @property
    def kept(self) -> int:
        return sum(d.kept for d in self.decisions)

    @property
    def dropped(self) -> int:
        return self.input - self.kept

    def kept_images(self) -> list[str]:
        return [d.image for d in self.decisions if d.kept]


def _rule_keeps(probs, tags, rule, thresholds, top):
    """Per-image keep flags and tag ranks for one rule."""
    k = probs.shape[1]
    idx = np.asarray(tags) - 1
    p_tag = probs[np.arange(len(probs)), idx]
    ranks = np.array([int(np.nonzero(argsort_descending(p) == t)[0][0]) for p, t in zip(probs, idx)],
                     dtype=np.int64)
    if rule == RULE_LOW_CONFIDENCE:
        keep = p_tag > thresholds[RULE_LOW_CONFIDENCE]
    elif rule == RULE_NOT_TOP:
        if k < top:
            raise ConfigurationError(f"the top-{top} rule needs at least {top} classes, got {k}")
        keep = ranks < top
    elif rule == RULE_NOT_CONFIDENT:
        keep = p_tag > thresholds[RULE_NOT_CONFIDENT]
    else:
        raise ConfigurationError(f"unknown filter rule {rule}")
    return keep, p_tag, ranks


def filter_stage(manifest: Manifest, classifier: Network, rule: int, images=None, stage: int | None = None,
                 thresholds=None, top: int = DEFAULT_TOP, batch_size: int = 64):
    """Apply one filter rule with ``classifier``; returns ``(kept manifest, report)``.

    ``images`` may carry the already-loaded manifest images (same order).
    """
    if classifier.head != CLASSIFIER:
        raise UsageError("filtering needs a classifier-headed network")
    thresholds = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    if images is None:
        images = manifest.load_images()
    report = CurationReport(stage if stage is not None else rule, rule)
    if len(manifest) == 0:
        return manifest, report
    probs = predict_in_batches(classifier, images, batch_size)
    keep, p_tag, ranks = _rule_keeps(probs, manifest.tags, rule, thresholds, top)
    for r, kp, p, rk in zip(manifest.records, keep, p_tag, ranks):
        report.decisions.append(Decision(r.image, r.tag, float(p), int(rk), bool(kp), rule))
    kept = manifest.subset([r for r, kp in zip(manifest.records, keep) if kp])
    return kept, report


@dataclass
class CascadeResult:
    manifest: Manifest
    classifier: Network  # the model trained before the last filter
    reports: list[CurationReport]
    images: np.ndarray  # images of the surviving records


def filter_cascade(manifest: Manifest, schedule: TrainSchedule = TrainSchedule(), rules=(1, 2, 3),
                   widths=(8, 16, 32), init_seed: int = 0, images=None, thresholds=None,
                   top: int = DEFAULT_TOP, class_count: int | None = None) -> CascadeResult:
    """Train a fresh classifier on the current data, filter with the next rule, repeat.

    Every round starts from the same initialisation and schedule; only the
    data differ.  ``class_count`` defaults to the largest tag present.
    """
    if images is None:
        images = manifest.load_images()
    images = np.asarray(images)
    if len(manifest) == 0:
        raise DataExhaustionError("cannot filter an empty manifest")
    k = class_count or int(manifest.tags.max())
    reports, classifier = [], None
    for stage, rule in enumerate(rules, start=1):
        net = build_classifier(k, images.shape[1], widths, seed=init_seed)
        classifier = train_classifier(net, (images, manifest.tags), schedule)
        kept, report = filter_stage(manifest, classifier, rule, images, stage, thresholds, top)
        log.info("filter stage %d (rule %d): kept %d of %d", stage, rule, report.kept, report.input)
        reports.append(report)
        if len(kept) == 0:
            raise DataExhaustionError(f"filter stage {stage} (rule {rule}) removed every image")
        keep = np.array([d.kept for d in report.decisions])
        manifest, images = kept, images[keep]
    return CascadeResult(manifest, classifier, reports, images)


# -- fine-tuning selection ----------------------------------------------------

def compute_mask(seg_probs, tag: int) -> np.ndarray:
    """1 where the tag channel is at least as probable as every other channel (background included).

    ``seg_probs`` is ``(K+1) x H x W`` or batched ``N x (K+1) x H x W`` with
    one tag per image.
    """
    p = np.asarray(seg_probs, dtype=np.float64)
    batched = p.ndim == 4
    if not batched:
        p = p[None]
    tags = np.broadcast_to(np.asarray(tag, dtype=np.int64), (p.shape[0],))
    if np.any(tags < 1) or np.any(tags >= p.shape[1]):
        raise UsageError(f"tag must lie in 1..{p.shape[1] - 1} (background is never a tag)")
    n = np.arange(p.shape[0])
    p_tag = p[n, tags]
    others = p.copy()
    others[n, tags] = -np.inf
    m = (p_tag >= others.max(axis=1)).astype(np.int64)
    return m if batched else m[0]


def masked_tag_probability(classifier: Network, images, masks, tags, batch_size: int = 64) -> np.ndarray:
    """``P(tag | image * mask)`` per image, the mask applied to every channel."""
    images = np.asarray(images, dtype=np.float64)
    masked = images * np.asarray(masks)[:, None]
    probs = predict_in_batches(classifier, masked, batch_size)
    return probs[np.arange(len(probs)), np.asarray(tags) - 1]


def finetune_gate(classifier: Network, image, mask, tag: int, mu: float = DEFAULT_MU) -> bool:
    """Accept iff the classifier still believes ``tag`` (strictly above ``mu``) on the masked image."""
    p = masked_tag_probability(classifier, np.asarray(image)[None], np.asarray(mask)[None], [tag])[0]
    return bool(p > mu)


@dataclass(frozen=True)
class SegmentParams:
    target_count: int = 64
    compactness: float = 0.3
    iterations: int = 10
    seed: int = 0


def segment_all(images, names, params: SegmentParams) -> list[np.ndarray]:
    """Superpixels per image, each seeded from ``params.seed`` and the image name."""
    return [generate_segments(img, params.target_count, params.compactness, params.iterations,
                              seed=subseed(params.seed, "segments", name))
            for img, name in zip(images, names)]


@dataclass
class PseudoLabelSet:
    """Images paired with pseudo masks, plus where the masks came from."""

    records: list[Record]
    images: np.ndarray
    masks: np.ndarray
    provenance: str
    # gate inputs and outcomes over the whole candidate pool (empty when no gate ran)
    pool: list[str] = field(default_factory=list)
    pool_tags: list[int] = field(default_factory=list)
    scores: np.ndarray | None = None

    def __len__(self):
        return len(self.records)

    def concat(self, other: "PseudoLabelSet") -> "PseudoLabelSet":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return PseudoLabelSet(self.records + other.records, np.concatenate([self.images, other.images]),
                              np.concatenate([self.masks, other.masks]), f"{self.provenance}+{other.provenance}")


def build_finetune_set(pool: Manifest, segmenter: Network, classifier: Network, mu: float = DEFAULT_MU,
                       segment_params: SegmentParams = SegmentParams(), delta_high: float = DELTA_HIGH,
                       delta_low: float = DELTA_LOW, images=None, segments=None,
                       batch_size: int = 64) -> PseudoLabelSet:
    """Gate every pool image and turn the accepted ones' tag-channel maps into trimap masks.

    Only record images and tags are consulted; true masks are never read.
    """
    if segmenter.head != SEGMENTER or classifier.head != CLASSIFIER:
        raise UsageError("build_finetune_set needs a segmenter and a classifier")
    if images is None:
        images = pool.load_images()
    images = np.asarray(images, dtype=np.float64)
    if len(pool) == 0:
        return PseudoLabelSet([], images[:0], np.zeros((0,) + images.shape[2:], dtype=np.int64), "finetune")
    tags = pool.tags
    probs = predict_in_batches(segmenter, images, batch_size)
    masks = compute_mask(probs, tags)
    scores = masked_tag_probability(classifier, images, masks, tags, batch_size)
    accept = np.nonzero(scores > mu)[0]
    if segments is None:
        segments = segment_all(images[accept], [pool.records[i].image for i in accept], segment_params)
    else:
        segments = [segments[i] for i in accept]
    out = []
    for i, segs in zip(accept, segments):
        out.append(trimap(smooth(probs[i, tags[i]], segs), int(tags[i]), delta_high, delta_low))
    shape = (0,) + images.shape[2:]
    return PseudoLabelSet([pool.records[i] for i in accept], images[accept],
                          np.stack(out) if out else np.zeros(shape, dtype=np.int64), "finetune",
                          [r.image for r in pool.records], [int(t) for t in tags], scores)
