"""Rate figure for grid runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import RateReport  # noqa: E402


def plot_rates(reports: Sequence[RateReport], path: str | Path) -> Path:
    """Measured rate, capacity and the independent-message baseline per configuration."""
    labels = [f"{r.N},{r.K},{r.M}" for r in reports]
    x = range(len(reports))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.45 * len(reports)), 4.0))
    ax.plot(x, [float(r.pc_capacity) for r in reports], "s", mfc="none", ms=9, label="capacity")
    ax.plot(x, [float(r.rate) for r in reports], "o", ms=4, label="measured")
    pir1 = [(i, float(r.pir1_rate)) for i, r in enumerate(reports) if r.pir1_rate is not None]
    if pir1:
        ax.plot(*zip(*pir1), "x", label="independent messages")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_xlabel("(N, K, M)")
    ax.set_ylabel("rate (desired symbols per download)")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
