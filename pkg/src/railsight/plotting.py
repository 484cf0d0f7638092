"""PNG figures written next to the evaluation tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from railsight.evaluate import TAG_LABELS, EvalReport  # noqa: E402
from railsight.synth_gen import TAGS  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_report(report: EvalReport, path: str | Path) -> Path:
    fig, (ax_c, ax_t) = plt.subplots(1, 2, figsize=(10, 4), gridspec_kw={"width_ratios": [1, 2]})
    c = report.counts
    ax_c.bar(["TP", "FN", "FP"], [c.tp, c.fn, c.fp], color=["#3a7d44", "#c0392b", "#e67e22"])
    acc = f"{100 * report.accuracy:.1f}%"
    prec = "NA" if report.precision is None else f"{100 * report.precision:.1f}%"
    ax_c.set_title(f"accuracy {acc}, precision {prec}")
    ax_c.set_ylabel("assets")
    labels = [TAG_LABELS[t] for t in TAGS]
    ax_t.barh(labels, [report.per_tag[t] for t in TAGS], color="#34495e")
    ax_t.invert_yaxis()
    ax_t.set_xlabel("missed or false assets")
    ax_t.set_title("errors by scene tag")
    ax_t.xaxis.set_major_locator(MaxNLocator(integer=True))
    return _save(fig, Path(path))


def plot_comparison(reports: dict[str, EvalReport], path: str | Path) -> Path:
    names = list(reports)
    fig, (ax_a, ax_t) = plt.subplots(1, 2, figsize=(11, 4), gridspec_kw={"width_ratios": [1, 2]})
    ax_a.bar(names, [100 * reports[n].accuracy for n in names], color="#2c7fb8")
    ax_a.set_ylim(0, 100)
    ax_a.set_ylabel("asset accuracy (%)")
    x = np.arange(len(TAGS))
    width = 0.8 / len(names)
    for k, n in enumerate(names):
        ax_t.bar(x + k * width, [reports[n].per_tag[t] for t in TAGS], width, label=n)
    ax_t.set_xticks(x + 0.4 - width / 2)
    ax_t.set_xticklabels([TAG_LABELS[t] for t in TAGS], rotation=30, ha="right")
    ax_t.set_ylabel("errors")
    ax_t.yaxis.set_major_locator(MaxNLocator(integer=True))
    ax_t.legend()
    return _save(fig, Path(path))
