"""Figure rendering for the CLI report path.

Every figure is written as a PNG next to the delimited outputs. Rendering is
headless (Agg) and intentionally plain: these are working diagnostics, not
publication art.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .stream import CORRUPTION_KINDS


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_norm_trajectories(report, path):
    """Mean feature l2-norm per batch, one panel per corruption kind."""
    kinds = [k for k in CORRUPTION_KINDS if any(b.corruption == k for b in report.batches)]
    fig, axes = plt.subplots(1, max(len(kinds), 1), figsize=(3.0 * max(len(kinds), 1), 2.8),
                             sharey=True, squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        rows = [b for b in report.batches if b.corruption == kind]
        xs = [b.batch_index for b in rows]
        ax.plot(xs, [b.feat_l2_csid for b in rows], label="csID")
        if any(b.feat_l2_csood is not None for b in rows):
            ax.plot(xs, [b.feat_l2_csood for b in rows], label="csOOD")
        ax.set_title(kind, fontsize=8)
        ax.set_xlabel("batch")
    axes[0][0].set_ylabel("mean feature l2-norm")
    axes[0][0].legend(fontsize=7)
    _save(fig, path)


def save_logit_curves(report, path):
    """Final-batch mean sorted-logit curves per domain, per corruption kind."""
    kinds = [k for k in CORRUPTION_KINDS if any(b.corruption == k for b in report.batches)]
    fig, axes = plt.subplots(1, max(len(kinds), 1), figsize=(3.0 * max(len(kinds), 1), 2.8),
                             sharey=True, squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        last = [b for b in report.batches if b.corruption == kind][-1]
        if last.logits_sorted_csid is not None:
            ax.plot(last.logits_sorted_csid, label="csID")
        if last.logits_sorted_csood is not None:
            ax.plot(last.logits_sorted_csood, label="csOOD")
        ax.set_title(kind, fontsize=8)
        ax.set_xlabel("rank position")
    axes[0][0].set_ylabel("mean sorted logit")
    axes[0][0].legend(fontsize=7)
    _save(fig, path)


def save_training_curve(log, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    epochs = [e["epoch"] for e in log]
    ax.plot(epochs, [e["cross_entropy"] for e in log], label="cross entropy")
    ax2 = ax.twinx()
    ax2.plot(epochs, [e["accuracy"] for e in log], color="tab:green", label="accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross entropy")
    ax2.set_ylabel("accuracy")
    _save(fig, path)


def save_ablation_bars(rows_by_label, path):
    labels = list(rows_by_label)
    accs = [rows_by_label[l].mean.acc or 0.0 for l in labels]
    aurocs = [rows_by_label[l].mean.auroc or 0.0 for l in labels]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    ax.bar(x - 0.2, np.array(accs) * 100, width=0.4, label="Acc")
    ax.bar(x + 0.2, np.array(aurocs) * 100, width=0.4, label="AUROC")
    ax.set_xticks(x, labels, rotation=20, fontsize=7)
    ax.set_ylabel("percent")
    ax.legend(fontsize=7)
    _save(fig, path)


def save_tau_curves(cells, path):
    taus = [c["tau"] for c in cells]
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(taus, [(c["report"].acc or 0.0) * 100 for c in cells], marker="o", label="Acc")
    ax.plot(taus, [(c["report"].auroc or 0.0) * 100 for c in cells], marker="s", label="AUROC")
    ax.set_xlabel("OOD loss scale tau")
    ax.set_ylabel("percent")
    ax.legend(fontsize=8)
    _save(fig, path)


def save_gamma_heatmap(cells, path):
    g1s = sorted({c["gamma1"] for c in cells})
    g2s = sorted({c["gamma2"] for c in cells})
    grid = np.full((len(g1s), len(g2s)), np.nan)
    for c in cells:
        grid[g1s.index(c["gamma1"]), g2s.index(c["gamma2"])] = (c["report"].oscr or 0.0) * 100
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(g2s)), [f"{v:g}" for v in g2s], fontsize=7)
    ax.set_yticks(range(len(g1s)), [f"{v:g}" for v in g1s], fontsize=7)
    ax.set_xlabel("gamma2")
    ax.set_ylabel("gamma1")
    for i in range(len(g1s)):
        for j in range(len(g2s)):
            ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", fontsize=7, color="w")
    fig.colorbar(im, ax=ax, label="OSCR")
    _save(fig, path)


def save_detector_bars(table, path):
    labels = list(table)
    means = [table[l]["mean"] * 100 for l in labels]
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    ax.bar(range(len(labels)), means)
    ax.set_xticks(range(len(labels)), labels, rotation=20, fontsize=7)
    ax.set_ylabel("detector accuracy")
    ax.axhline(100.0, color="grey", linestyle=":", linewidth=1)
    _save(fig, path)
