"""Figures written next to the delimited outputs (headless Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ErrorStats  # noqa: E402


def error_histogram(stats: ErrorStats, path, title: str = "mesh to reference error",
                    compare: ErrorStats = None, labels=("raw", "regularized")) -> None:
    """Bar chart of the 1 cm error histogram; overflow counts sit in the last bar."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6), dpi=120)
    series = [(stats, labels[0])] if compare is None else [(stats, labels[0]), (compare, labels[1])]
    width = 0.8 / len(series)
    for k, (s, label) in enumerate(series):
        frac = s.histogram / max(s.sample_count, 1)
        ax.bar(s.bin_centers_cm + (k - (len(series) - 1) / 2) * width, frac, width=width, label=label,
               alpha=0.85)
    limit = max(float(np.percentile(s.bin_centers_cm[s.histogram > 0], 99)) if s.histogram.any() else 1.0
                for s, _ in series)
    ax.set_xlim(-1, min(limit + 3, stats.bin_centers_cm[-1] + 1))
    ax.set_xlabel("error (cm)")
    ax.set_ylabel("fraction of samples")
    ax.set_title(title)
    for s, label in series:
        ax.axvline(s.median_cm, ls="--", lw=0.8, color="k")
    if compare is not None:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def disparity_image(disparity: np.ndarray, path, d_min: float = None, d_max: float = None) -> None:
    """False-color disparity, invalid pixels drawn black."""
    d = np.asarray(disparity, np.float64)
    finite = np.isfinite(d)
    lo = np.nanmin(d) if d_min is None and finite.any() else (d_min or 0.0)
    hi = np.nanmax(d) if d_max is None and finite.any() else (d_max or 1.0)
    norm = np.clip((np.where(finite, d, lo) - lo) / max(hi - lo, 1e-9), 0, 1)
    rgb = matplotlib.colormaps["turbo"](norm)[..., :3]
    rgb[~finite] = 0.0
    plt.imsave(path, rgb)
