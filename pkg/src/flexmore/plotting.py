"""Figures written next to the analysis report."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import AVG_GROUP, Report, ScoreTable, rank_series, is_mixture  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across runs
PNG_METADATA = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _grid(n: int) -> tuple[int, int]:
    cols = min(3, n)
    return math.ceil(n / cols), cols


def plot_rank_sensitivity(table: ScoreTable, report: Report, path: str) -> None:
    """Mean score against log2 rank per group, with the fitted line dashed."""
    groups = report.groups + [AVG_GROUP]
    fits = {(r["model"], r["group"]): r for r in report.regression}
    models = table.experts()
    nrows, ncols = _grid(len(groups))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows), squeeze=False)
        for ax, g in zip(axes.flat, groups):
            for m in models:
                pts = rank_series(table, m).get(g, [])
                if not pts:
                    continue
                xs = [math.log2(r) for r, _ in pts]
                ys = [s for _, s in pts]
                (line,) = ax.plot(xs, ys, marker="o", ms=2.5, lw=1.0,
                                  ls="-" if not is_mixture(m) else "-.", label=m)
                fit = fits.get((m, g))
                if fit is not None:
                    ax.plot([xs[0], xs[-1]],
                            [fit["alpha"] + fit["beta"] * xs[0], fit["alpha"] + fit["beta"] * xs[-1]],
                            ls="--", lw=0.7, color=line.get_color())
            ax.set_title(g)
            ax.set_xlabel(r"$\log_2$ rank")
            ax.set_ylabel("score")
        for ax in list(axes.flat)[len(groups):]:
            ax.axis("off")
        handles, labels = axes.flat[0].get_legend_handles_labels()
        if handles:
            fig.legend(handles, labels, loc="lower center", ncol=min(len(labels), 5), frameon=False)
        fig.tight_layout(rect=(0, 0.08, 1, 1))
        fig.savefig(path, dpi=120, metadata=PNG_METADATA)
        plt.close(fig)


def plot_peak_ranks(report: Report, path: str) -> None:
    """Median log2 peak rank per group with the interquartile range as error bars."""
    rows = report.peak_summary
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        if rows:
            ys = list(range(len(rows)))
            med = [r["median"] for r in rows]
            lo = [r["median"] - r["q25"] for r in rows]
            hi = [r["q75"] - r["median"] for r in rows]
            ax.errorbar(med, ys, xerr=[lo, hi], fmt="o", ms=4, capsize=3, color="k", lw=1)
            ax.set_yticks(ys)
            ax.set_yticklabels([r["group"] for r in rows])
        ax.set_xlabel(r"peak $\log_2$ rank (median, IQR)")
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=PNG_METADATA)
        plt.close(fig)


def render_figures(table: ScoreTable, report: Report, outdir: str) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    paths = [os.path.join(outdir, "rank_sensitivity.png"), os.path.join(outdir, "peak_ranks.png")]
    plot_rank_sensitivity(table, report, paths[0])
    plot_peak_ranks(report, paths[1])
    return paths
