"""Figure rendering. Deterministic output: fixed geometry, no timestamps."""

from __future__ import annotations

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .reader import RelPerfFrame, SweepFrame  # noqa: E402

FIGSIZE = (6.4, 4.2)
DPI = 110
# how far the chart label may drift from re-derived rel-perf before warning;
# covers rounding of the metric columns the label was derived from
LABEL_TOLERANCE_PCT = 0.5


def _save(fig, out_path) -> None:
    fig.savefig(out_path, dpi=DPI, metadata={"Software": "sweepplot"})
    plt.close(fig)


def plot_sweep(frame: SweepFrame, out_path) -> None:
    """One metric-versus-savings line per sweep mode, baseline as a dashline."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for mode in frame.modes:
        rows = sorted(frame.by_mode(mode),
                      key=lambda r: (r.flops_savings is None, r.flops_savings or 0.0))
        xs = [r.flops_savings if r.flops_savings is not None else 0.0 for r in rows]
        ys = [r.mrr_at_10 for r in rows]
        ax.plot(xs, ys, marker="o", label=mode)
    if frame.baseline is not None:
        ax.axhline(frame.baseline.mrr_at_10, linestyle="--", color="0.4")
    ax.set_xlabel("compute savings (fraction of full-scale multiply-adds)")
    ax.set_ylabel("MRR@10")
    ax.set_title("re-ranking precision vs. compute savings")
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, out_path)


def plot_relperf(frame: RelPerfFrame, out_path, warn="stderr") -> None:
    """One bar per variant, labeled with the harness's rel-perf column.

    The label is cross-checked against a re-derivation from the metric
    columns; disagreement beyond rounding prints a warning but still renders
    the harness's number (the harness owns the computation). ``warn=None``
    silences the cross-check.
    """
    if warn == "stderr":
        warn = sys.stderr
    fig, ax = plt.subplots(figsize=FIGSIZE)
    names = [v.variant for v in frame.variants]
    values = [v.rel_perf_pct for v in frame.variants]
    bars = ax.bar(names, values, color="tab:blue")
    for bar, row in zip(bars, frame.variants):
        derived = 100.0 * (row.mrr_at_10 - frame.baseline.mrr_at_10) / (
            frame.upperbound.mrr_at_10 - frame.baseline.mrr_at_10)
        if abs(derived - row.rel_perf_pct) > LABEL_TOLERANCE_PCT and warn is not None:
            print(f"warning: {row.variant}: chart label {row.rel_perf_pct:.1f}% differs "
                  f"from re-derived {derived:.1f}%", file=warn)
        ax.annotate(f"{row.rel_perf_pct:.1f}%",
                    (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom")
    ax.axhline(100.0, linestyle="--", color="0.4")
    ax.set_ylabel("relative performance (% of upper bound's gain)")
    ax.set_title("ablation: share of the upper bound's improvement retained")
    ax.set_ylim(0, max(105.0, max(values) * 1.1 if values else 105.0))
    fig.autofmt_xdate(rotation=20)
    _save(fig, out_path)
