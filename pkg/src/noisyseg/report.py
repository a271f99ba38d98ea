"""Structured text reports and matplotlib figures for a pipeline run.

Every text file starts with ``<magic><TAB><version>``; the next line names
the tab-separated columns (metrics files are ``key<TAB>value`` pairs).
Missing values are written as ``-``.  Figures go to ``figures/`` next to
the text outputs and are rendered with the non-interactive Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMAT_VERSION = 1
METRICS_MAGIC = "noisyseg-metrics"
CURATION_MAGIC = "noisyseg-curation"
DECISIONS_MAGIC = "noisyseg-decisions"
FINETUNE_MAGIC = "noisyseg-finetune"
ABLATION_ROWS = ("forward", "backward", "fused", "fused+segment", "fused+segment+trimap")


def fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return str(v)


def _write_table(path: Path, magic: str, columns, rows) -> None:
    lines = [f"{magic}\t{FORMAT_VERSION}", "\t".join(columns)]
    lines += ["\t".join(fmt(v) for v in row) for row in rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def write_metrics(path, metrics: dict) -> None:
    _write_table(Path(path), METRICS_MAGIC, ("key", "value"), metrics.items())


def read_metrics(path) -> dict:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"{METRICS_MAGIC}\t{FORMAT_VERSION}":
        raise ValueError(f"{path}: not a metrics file")
    out = {}
    for line in lines[2:]:
        key, value = line.split("\t", 1)
        out[key] = value
    return out


def write_curation(path, reports) -> None:
    rows = [(r.stage, r.rule, r.input, r.kept, r.dropped, r.purity_in, r.purity_kept) for r in reports]
    _write_table(Path(path), CURATION_MAGIC,
                 ("stage", "rule", "input", "kept", "dropped", "purity_in", "purity_kept"), rows)


def write_decisions(path, reports) -> None:
    rows = [(r.stage, d.rule, d.image, d.tag, d.p_tag, d.rank + 1, d.kept) for r in reports for d in r.decisions]
    _write_table(Path(path), DECISIONS_MAGIC, ("stage", "rule", "image", "tag", "p_tag", "tag_rank", "kept"), rows)


def write_finetune(path, sets) -> None:
    rows = []
    for rnd, fs in enumerate(sets, start=1):
        accepted = {r.image: m for r, m in zip(fs.records, fs.masks)}
        for image, tag, score in zip(fs.pool, fs.pool_tags, fs.scores):
            m = accepted.get(image)
            fg = None if m is None else int(np.count_nonzero(m > 0))
            ign = None if m is None else int(np.count_nonzero(m < 0))
            rows.append((rnd, image, tag, score, m is not None, fg, ign))
    _write_table(Path(path), FINETUNE_MAGIC,
                 ("round", "image", "tag", "p_tag_masked", "accepted", "fg_pixels", "ignore_pixels"), rows)


# -- figures -----------------------------------------------------------------

def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_retention(path, reports) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    counts = [reports[0].input] + [r.kept for r in reports]
    labels = ["input"] + [f"rule {r.rule}" for r in reports]
    ax.bar(labels, counts, color="#4477aa")
    ax.set_ylabel("images")
    purity = [reports[0].purity_in] + [r.purity_kept for r in reports]
    if all(p is not None for p in purity):
        ax2 = ax.twinx()
        ax2.plot(labels, purity, "o-", color="#cc6677")
        ax2.set_ylim(0, 1.05)
        ax2.set_ylabel("tag purity")
    ax.set_title("filter cascade")
    fig.tight_layout()
    _save(fig, Path(path))


def plot_ablation(path, metrics: dict) -> None:
    rows = [r for r in ABLATION_ROWS if isinstance(metrics.get(f"ablation.{r}"), float)]
    vals = [metrics[f"ablation.{r}"] for r in rows]
    for key, label in (("miou.initial", "initial model"), ("miou.finetuned", "fine-tuned")):
        if isinstance(metrics.get(key), float):
            rows.append(label)
            vals.append(metrics[key])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.barh(rows[::-1], vals[::-1], color="#228833")
    ax.set_xlim(0, 1)
    ax.set_xlabel("mIoU")
    ax.set_title("pseudo masks and segmenters on eval")
    fig.tight_layout()
    _save(fig, Path(path))


def plot_class_iou(path, metrics: dict, class_count: int) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(class_count + 1)
    for offset, name in ((-0.2, "initial"), (0.2, "finetuned")):
        vals = [metrics.get(f"iou.{name}.class{c}") for c in x]
        if all(v is None for v in vals):
            continue
        ax.bar(x + offset, [0.0 if v is None else v for v in vals], width=0.4, label=name)
    ax.set_xticks(x, ["bg"] + [str(c) for c in x[1:]])
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend()
    fig.tight_layout()
    _save(fig, Path(path))


def write_outputs(result, out_dir) -> None:
    """Text reports, metrics and figures for a :class:`~noisyseg.pipeline.PipelineResult`."""
    out = Path(out_dir)
    write_metrics(out / "metrics.tsv", result.metrics)
    write_curation(out / "reports" / "curation.tsv", result.reports)
    write_decisions(out / "reports" / "decisions.tsv", result.reports)
    if result.finetune_sets:
        write_finetune(out / "reports" / "finetune.tsv", result.finetune_sets)
    plot_retention(out / "figures" / "retention.png", result.reports)
    plot_ablation(out / "figures" / "ablation.png", result.metrics)
    plot_class_iou(out / "figures" / "class_iou.png", result.metrics, result.config.class_count)
