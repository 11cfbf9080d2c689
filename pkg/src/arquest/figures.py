"""Chart rendering for evaluation reports.

Writes static PNG files next to the tabular outputs; headless backend
so the CLI works without a display server.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .evaluation import EvalReport  # noqa: E402

_DPI = 120


def _bar_panel(ax, labels, values, title, fmt="{:.2f}"):
    present = [(label, v) for label, v in zip(labels, values) if v is not None]
    if not present:
        ax.set_axis_off()
        ax.set_title(f"{title} (no data)")
        return
    names = [p[0] for p in present]
    numbers = [p[1] for p in present]
    bars = ax.bar(names, numbers, color=plt.rcParams["axes.prop_cycle"].by_key()["color"])
    ax.bar_label(bars, fmt=fmt.format, padding=2, fontsize=8)
    ax.set_title(title)
    ax.tick_params(axis="x", labelrotation=15)
    ax.margins(y=0.15)


def question_count_figure(report: EvalReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    labels = [a.approach for a in report.aggregates]
    _bar_panel(ax, labels, [a.mean_questions for a in report.aggregates],
               "Mean questions per session")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def score_scatter_figure(report: EvalReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 4.5))
    by_approach: dict[str, list] = {}
    for record in report.records:
        if not record.failed:
            by_approach.setdefault(record.approach, []).append(record)
    lo, hi = 0, 1
    for label, rows in by_approach.items():
        xs = [r.true_score for r in rows]
        ys = [r.raw_score for r in rows]
        ax.scatter(xs, ys, s=18, alpha=0.7, label=label)
        lo = min([lo, *xs, *ys])
        hi = max([hi, *xs, *ys])
    ax.plot([lo, hi], [lo, hi], linestyle="--", linewidth=1, color="gray")
    ax.set_xlabel("true score")
    ax.set_ylabel("session score")
    ax.set_title("Session score against ground truth")
    if by_approach:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def agreement_figure(report: EvalReport, path: Path) -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(8.0, 3.5))
    labels = [a.approach for a in report.aggregates]
    _bar_panel(left, labels, [a.mae for a in report.aggregates],
               "Mean absolute error")
    _bar_panel(right, labels, [a.pearson_r for a in report.aggregates],
               "Pearson correlation", fmt="{:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def render_figures(report: EvalReport, out_dir: str | Path) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        question_count_figure(report, out / "question_counts.png"),
        score_scatter_figure(report, out / "score_scatter.png"),
        agreement_figure(report, out / "agreement_metrics.png"),
    ]
