"""Figures rendered next to the CSV/JSON outputs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
# PNG metadata without a timestamp keeps reruns byte-identical.
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def _sigma_columns(rows: list[dict]) -> list[str]:
    return sorted((c for c in rows[0] if c.startswith("sigma_") and c[6:].isdigit()), key=lambda c: int(c[6:]))


def plot_singular_values(ax, rows: list[dict], label: str = "", style: str = "-") -> None:
    steps = [r["step"] for r in rows]
    for c in _sigma_columns(rows):
        ax.plot(steps, [r[c] for r in rows], style, label=f"{label}σ{c[6:]}".strip())
    ax.set_xlabel("step")
    ax.set_ylabel("mean singular value")


def plot_run(result, out: Path) -> None:
    rows = result.trajectory
    k = result.config.synthetic.k
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        plot_singular_values(ax, rows)
        ax.axhline(math.sqrt(k), color="0.6", lw=0.8, ls=":")
        ax.set_title(f"{result.config.objective}: singular values")
        ax.legend(fontsize=7)
        _save(fig, out / "singular_values.png")

        fig, ax = plt.subplots()
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["u1_offdiag_similarity"] for r in rows], label="leading-direction similarity")
        ax.plot(steps, [r["mean_pairwise_cosine"] for r in rows], label="modality cosine")
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
        _save(fig, out / "similarities.png")

        contrib = np.asarray(result.summary["modality_contribution"])
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(contrib, vmin=0.0, vmax=1.0, cmap="Blues")
        ax.set_xticks(range(k), [f"v{j + 1}" for j in range(k)])
        ax.set_yticks(range(k), [f"m{m}" for m in range(k)])
        for (m, j), val in np.ndenumerate(contrib):
            ax.text(j, m, f"{val:.2f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title("mean |V|")
        _save(fig, out / "modality_contribution.png")


def plot_comparison(suite: str, arms: dict, out: Path) -> None:
    """Suite-level figures; ``arms`` maps arm name to the first seed's TrainResult."""
    with plt.rc_context(STYLE):
        if suite == "collapse-demo":
            fig, axes = plt.subplots(1, len(arms), figsize=(4.2 * len(arms), 3.2), sharey=True)
            for ax, (name, res) in zip(np.atleast_1d(axes), arms.items()):
                plot_singular_values(ax, res.trajectory)
                ax.set_title(name)
                ax.legend(fontsize=7)
            _save(fig, out / "singular_value_trends.png")
            return
        key = "auc" if suite == "robustness" else "mean_recall_at_1"
        names = list(arms)
        vals = []
        for name in names:
            s = arms[name].summary
            vals.append(s["classification"]["auc"] if key == "auc" else s[key])
        fig, ax = plt.subplots()
        ax.bar(range(len(names)), vals, color="0.55")
        ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
        ax.set_ylabel("held-out AUC" if key == "auc" else "held-out Recall@1")
        _save(fig, out / f"{suite}.png")
