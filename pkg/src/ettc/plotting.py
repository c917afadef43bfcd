"""Figures for the evaluation report (rendered off-screen)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_ttc_report(t_ref, ttc_est, ttc_gt, err_pct, path: str | Path, title: str | None = None) -> Path:
    """Estimated vs ground-truth TTC over time, with the relative error below."""
    t_ref = np.asarray(t_ref, dtype=float)
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 5.5), sharex=True,
                                   gridspec_kw={"height_ratios": [2, 1]})
    ax0.plot(t_ref, ttc_gt, "-", color="0.3", label="ground truth")
    ax0.plot(t_ref, ttc_est, "o", ms=4, label="estimate")
    ax0.set_ylabel("TTC [s]")
    ax0.legend(loc="best")
    ax0.grid(alpha=0.3)
    finite = np.isfinite(err_pct)
    ax1.bar(t_ref[finite], np.asarray(err_pct)[finite], width=0.6 * np.min(np.diff(t_ref)) if len(t_ref) > 1 else 0.01)
    ax1.set_ylabel("e_TTC [%]")
    ax1.set_xlabel("t_ref [s]")
    ax1.grid(alpha=0.3)
    if finite.any():
        ax1.axhline(float(np.mean(np.asarray(err_pct)[finite])), color="C3", lw=1, ls="--", label="mean")
        ax1.legend(loc="best")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
