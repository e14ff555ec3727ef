"""PNG figures for ``stochep eval --plot``.

Uses the Agg backend and strips the software metadata from PNGs so that
reruns give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_DPI = 120
_LOG_METRICS = {"kl", "mean_fnorm", "cov_fnorm", "trace_cov"}
_TITLES = {
    "kl": "calibration KL",
    "mean_fnorm": "mean F-norm error",
    "cov_fnorm": "covariance F-norm error",
    "test_ll": "test log-likelihood",
    "test_err": "test error",
    "trace_cov": "trace of covariance",
}


def plot_comparison(header, body, labels, stem) -> list[Path]:
    """One figure per metric, one line per run, iteration on the x axis.

    Metrics that are all-NaN (for example test metrics without a test set)
    are skipped.  Returns the written paths.
    """
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    col = {h: i for i, h in enumerate(header)}
    iters = data[:, 0]
    stem = Path(stem)
    written = []
    for metric, title in _TITLES.items():
        series = [(lab, data[:, col[f"{lab}.{metric}"]]) for lab in labels]
        if all(np.all(np.isnan(y)) for _, y in series):
            continue
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        for lab, y in series:
            ok = ~np.isnan(y)
            ax.plot(iters[ok], y[ok], marker=".", lw=1.2, label=lab)
        positive = all(np.all(y[~np.isnan(y)] > 0) for _, y in series)
        if metric in _LOG_METRICS and positive:
            ax.set_yscale("log")
        ax.set_xlabel("datapoint visits")
        ax.set_title(title)
        ax.legend(frameon=False, fontsize="small")
        fig.tight_layout()
        path = stem.with_name(f"{stem.name}_{metric}.png")
        fig.savefig(path, dpi=_DPI, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
