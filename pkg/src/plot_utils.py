"""
Per-series SVG plots: ground truth, EQR band, conformalized band and the two
anomaly scores as bars.
"""

from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable element ids so identical inputs give identical files
plt.rcParams['svg.hashsalt'] = 'cocai'


def plot_report(report, path, channel_name=None, threshold=None):
    """Write one SVG for an AnomalyReport that still carries its region and target."""
    region, y = report.region, np.asarray(report.y, dtype=float)
    steps = np.arange(y.size)
    threshold = report.threshold if threshold is None else threshold

    fig, (ax, bars) = plt.subplots(1, 2, figsize=(10, 4), gridspec_kw={'width_ratios': [4, 1]})
    ax.fill_between(steps, region.lower[:, 0], region.upper[:, 0], color='tab:blue', alpha=0.2,
                    label='conformalized')
    ax.plot(steps, region.eqr_lower[:, 0], color='tab:blue', linestyle='--', linewidth=1, label='EQR')
    ax.plot(steps, region.eqr_upper[:, 0], color='tab:blue', linestyle='--', linewidth=1)
    ax.plot(steps, y, color='black', marker='o', markersize=2, linewidth=1, label='observed')
    ax.set_title(f"{report.series_id} / {channel_name or report.channel}"
                 f"{' (' + report.group_label + ')' if report.group_label else ''}")
    ax.set_xlabel('target step')
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)

    scores = [report.a_gaussian, report.a_student]
    colors = ['tab:red' if s > threshold else 'tab:gray' for s in scores]
    bars.bar(['a_G', 'a_S'], scores, color=colors)
    bars.axhline(threshold, color='black', linestyle=':', linewidth=1)
    bars.set_ylim(0, 1)
    bars.set_title('anomaly score')

    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return path
