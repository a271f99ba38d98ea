"""Pipeline configuration: a flat key-value text file with a version line.

Example::

    noisyseg-config 1
    # comments and blank lines are ignored
    seed = 7
    delta_high = 0.65
    widths = 8,16,32

Keys are the field names of :class:`PipelineConfig`; unknown keys are an
error.  Every key can also be overridden from the command line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from noisyseg.convnet.train import TrainSchedule
from noisyseg.errors import ConfigurationError

MAGIC = "noisyseg-config"
VERSION = 1

FINETUNE_REPLACE = "replace"
FINETUNE_AUGMENT = "augment"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # data: an existing manifest, or empty to synthesise one under the output directory
    manifest: str = ""
    class_count: int = 5
    image_size: int = 64
    noise_rate: float = 0.3
    distractor_rate: float = 0.2
    n_attention_train: int = 2000
    n_finetune_pool: int = 500
    n_eval: int = 500
    widths: tuple = (8, 16, 32)
    # classifier training (each cascade round and the final model)
    cls_learning_rate: float = 0.01
    cls_momentum: float = 0.9
    cls_batch_size: int = 16
    cls_iterations: int = 1000
    cls_weight_decay: float = 0.0
    # filter cascade
    filter_low: float = 0.1
    filter_top: int = 3
    filter_high: float = 0.6
    # attention and pseudo labels
    lambda_forward: float = 1.0
    lambda_backward: float = 1.0
    segments: int = 64
    compactness: float = 0.3
    segment_iterations: int = 10
    delta_high: float = 0.65
    delta_low: float = 0.5
    # segmenter
    seg_init: str = "classifier"
    seg_output_stride: int = 4
    seg_learning_rate: float = 0.01
    seg_momentum: float = 0.9
    seg_batch_size: int = 16
    seg_iterations: int = 2000
    # online fine-tuning
    finetune: bool = True
    finetune_mode: str = FINETUNE_REPLACE
    finetune_rounds: int = 1
    mu: float = 0.4
    ft_learning_rate: float = 0.003
    ft_momentum: float = 0.9
    ft_batch_size: int = 16
    ft_iterations: int = 500
    # ablation: threshold for the two-way labelling of non-trimap rows
    ablation_threshold: float = 0.5

    def __post_init__(self):
        if not self.delta_high > self.delta_low:
            raise ConfigurationError("delta_high must exceed delta_low")
        if not 0.0 < self.mu < 1.0:
            raise ConfigurationError("mu must lie in (0, 1)")
        if self.finetune_mode not in (FINETUNE_REPLACE, FINETUNE_AUGMENT):
            raise ConfigurationError(f"finetune_mode must be {FINETUNE_REPLACE!r} or {FINETUNE_AUGMENT!r}")
        if self.seg_init not in ("classifier", "random"):
            raise ConfigurationError("seg_init must be 'classifier' or 'random'")
        if self.finetune_rounds < 0:
            raise ConfigurationError("finetune_rounds must be >= 0")

    def schedule(self, prefix: str, seed_offset: int = 0) -> TrainSchedule:
        g = lambda name: getattr(self, f"{prefix}_{name}")  # noqa: E731
        return TrainSchedule(g("learning_rate"), g("momentum"), g("batch_size"), g("iterations"),
                             getattr(self, f"{prefix}_weight_decay", 0.0), self.seed + seed_offset)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"{MAGIC} {VERSION}"]
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


FIELD_TYPES = {f.name: type(f.default) for f in fields(PipelineConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(x) for x in text.split(",") if x.strip())
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values = {}
    header_seen = False
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not header_seen:
            if line.split() != [MAGIC, str(VERSION)]:
                raise ConfigurationError(f"line {n}: expected '{MAGIC} {VERSION}' header")
            header_seen = True
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    if not header_seen:
        raise ConfigurationError(f"missing '{MAGIC} {VERSION}' header")
    return (base or PipelineConfig()).replace(**values)


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def write_config(path, config: PipelineConfig) -> None:
    Path(path).write_text(config.to_text())
