"""DET curve rendering (normal-deviate axes)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

_TICKS = np.array([0.0001, 0.001, 0.01, 0.05, 0.2, 0.5, 0.8, 0.95, 0.99])
_CLIP = (1e-5, 1 - 1e-5)


def _deviate(p):
    return norm.ppf(np.clip(np.asarray(p, dtype=np.float64), *_CLIP))


def det_figure(curves: dict[str, Sequence[tuple[float, float, float]]], path, title: str = "DET",
               operating_points: dict[str, tuple[float, float]] | None = None) -> None:
    """Save a DET plot.

    ``curves`` maps a label to ``(threshold, p_miss, p_fa)`` points;
    ``operating_points`` maps a label to one ``(p_fa, p_miss)`` marker.
    """
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, pts in curves.items():
        if not pts:
            continue
        arr = np.asarray(pts, dtype=np.float64)
        order = np.argsort(arr[:, 2])
        ax.plot(_deviate(arr[order, 2]), _deviate(arr[order, 1]), label=label)
    for label, (pfa, pmiss) in (operating_points or {}).items():
        ax.plot(_deviate(pfa), _deviate(pmiss), "o", label=label)
    ticks = _deviate(_TICKS)
    names = [f"{100 * t:g}" for t in _TICKS]
    ax.set_xticks(ticks, names)
    ax.set_yticks(ticks, names)
    ax.set_xlim(ticks[0], ticks[-1])
    ax.set_ylim(ticks[0], ticks[-1])
    ax.set_xlabel("false alarm probability (%)")
    ax.set_ylabel("miss probability (%)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, format="png")
    plt.close(fig)
