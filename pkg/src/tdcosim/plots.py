"""SVG plot generation for scenario artifacts (headless matplotlib)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .runner import RunReport
from .sequencer import DelayStats

_LABELS = {
    "v_pcc": "V-PCC (p.u.)",
    "p_dx_mw": "P-Dx (MW)",
    "q_dx_mvar": "Q-Dx (MVAr)",
    "freq_hz": "frequency (Hz)",
    "v_angle": "PCC angle (rad)",
}


def plot_signal_comparison(
    reports: dict[str, RunReport],
    signals: list[str],
    path: str,
    title: str = "",
) -> None:
    """Stacked per-signal comparison of several runs (co-sim vs monolithic)."""
    fig, axes = plt.subplots(len(signals), 1, figsize=(8, 2.6 * len(signals)), sharex=True)
    if len(signals) == 1:
        axes = [axes]
    for ax, signal in zip(axes, signals):
        for label, report in reports.items():
            ax.plot(report.times_s, report.signal(signal), label=label, linewidth=1.1)
        ax.set_ylabel(_LABELS.get(signal, signal))
        ax.grid(True, alpha=0.3)
    axes[0].legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("time (s)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_delay_histogram(stats: DelayStats, path: str, title: str = "closed-loop delay") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    edges_ms = [e * 1e3 for e in stats.bin_edges_s]
    widths = [edges_ms[i + 1] - edges_ms[i] for i in range(len(stats.counts))]
    ax.bar(edges_ms[:-1], stats.counts, width=widths, align="edge", edgecolor="black", alpha=0.8)
    ax.axvline(stats.mean_s * 1e3, color="red", linestyle="--", label=f"mean {stats.mean_s * 1e3:.1f} ms")
    ax.axvline(stats.max_s * 1e3, color="orange", linestyle=":", label=f"max {stats.max_s * 1e3:.1f} ms")
    ax.set_xlabel("delay (ms)")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
