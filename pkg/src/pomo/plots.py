"""Bar charts of report rows: one panel per dataset, gap when an oracle is present."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_report(rows, path) -> None:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r.dataset_sha256, []).append(r)
    n = len(groups)
    height = 0.6 + sum(0.8 + 0.35 * len(g) for g in groups.values())
    fig, axes = plt.subplots(n, 1, figsize=(7, height), squeeze=False)
    for ax, (sha, group) in zip(axes[:, 0], groups.items()):
        with_gap = all(r.gap is not None for r in group)
        values = [r.gap if with_gap else r.mean_score for r in group]
        labels = [r.method for r in group]
        ax.barh(range(len(group)), values, color="0.55", edgecolor="0.2", height=0.6)
        ax.set_yticks(range(len(group)))
        ax.set_yticklabels(labels, fontsize=8)
        ax.invert_yaxis()
        first = group[0]
        if with_gap:
            unit = "gap [%]" if first.gap_unit == "%" else "gap [abs]"
            ax.set_xlabel(f"{unit} vs {first.oracle}")
        else:
            ax.set_xlabel("mean score")
        ax.set_title(f"{first.kind}{first.size}, n={first.n_instances} ({sha[:10]})", fontsize=9)
        for i, v in enumerate(values):
            ax.annotate(f"{v:.3g}", (v, i), xytext=(3, 0), textcoords="offset points", va="center", fontsize=7)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
