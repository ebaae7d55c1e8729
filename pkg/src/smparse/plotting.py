"""Report figures rendered to files: AP vs IoU threshold, loss curves, benchmark timings."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_TERMS = ("center", "part", "dice", "offset", "total")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ap_curve(metrics: dict, path) -> Path:
    """AP^p against the IoU threshold from an ``evaluate`` payload."""
    per = metrics["per_threshold"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p["threshold"] for p in per], [p["ap"] for p in per], "o-", color="tab:blue")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"AP50 {metrics['ap_p_50']:.3f}  vol {metrics['ap_p_vol']:.3f}  PCP50 {metrics['pcp_50']:.3f}",
                 fontsize=9)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_losses(records: Sequence[dict], path) -> Path:
    """Loss terms per iteration from training-log records, log scale."""
    recs = [r for r in records if "iter" in r]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    its = [r["iter"] for r in recs]
    for k in LOSS_TERMS:
        ax.plot(its, [max(r[k], 1e-8) for r in recs], label=k, lw=2 if k == "total" else 1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_bench(report: dict, path) -> Path:
    """Per-scene forward and post-processing latency against decoded humans."""
    rows = [r for d in report["datasets"] for r in d["per_scene"]]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter([r["humans"] for r in rows], [1e3 * r["forward"] for r in rows], label="forward", s=12)
    ax.scatter([r["humans"] for r in rows], [1e3 * r["post"] for r in rows], label="post-processing", s=12)
    ax.set_xlabel("decoded humans")
    ax.set_ylabel("ms")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)
