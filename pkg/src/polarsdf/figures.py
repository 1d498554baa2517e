"""Report figures rendered next to the delimited outputs.

Matplotlib (Agg backend) for loss curves and evaluation summaries; the AoP
visualization PNG is written pixel-exact (hue encodes twice the angle, black
where polarization is degenerate)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def aop_to_rgb(aop: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """HSV encoding with hue = 2 * aop, full saturation/value inside the
    validity mask, black elsewhere; returns float RGB in [0, 1]."""
    hue = np.mod(2.0 * np.asarray(aop, dtype=np.float64), 2.0 * np.pi) / (2.0 * np.pi)
    h6 = hue * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = np.zeros_like(hue)
    q = 1.0 - f
    t = f
    one = np.ones_like(hue)
    lut = [
        (one, t, p), (q, one, p), (p, one, t),
        (p, q, one), (t, p, one), (one, p, q),
    ]
    rgb = np.zeros(hue.shape + (3,))
    for k, (r, g, b) in enumerate(lut):
        sel = i == k
        rgb[sel, 0] = r[sel]
        rgb[sel, 1] = g[sel]
        rgb[sel, 2] = b[sel]
    rgb[~np.asarray(valid, dtype=bool)] = 0.0
    return rgb


def plot_loss_curves(rows, path):
    """Loss-curve figure from training log rows."""
    rows = list(rows)
    its = [r[0] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    labels = ["L_p", "L_g", "L_m", "L_e", "total"]
    for col, label in zip(range(1, 6), labels):
        series = [r[col] for r in rows]
        if any(v > 0 for v in series):
            ax1.semilogy(its, np.maximum(series, 1e-12), label=label, lw=1)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("training losses")
    ax2.plot(its, [r[6] for r in rows], lw=1)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("s_sharp")
    ax2.set_title("opacity sharpness")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_eval_report(report, path):
    """Bar chart of per-view normal MAE annotated with the Chamfer distance."""
    fig, ax = plt.subplots(figsize=(6, 4))
    mae = report.normal_mae_deg
    if mae:
        ax.bar(range(len(mae)), mae, color="#4878cf")
        ax.set_xlabel("view")
        ax.set_ylabel("normal MAE (deg)")
        ax.set_xticks(range(len(mae)))
    else:
        ax.text(0.5, 0.5, "no normal maps", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_title(f"chamfer (sym) = {report.chamfer:.5f} scene units "
                 f"({report.chamfer * 1e3:.2f} x1e-3)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
