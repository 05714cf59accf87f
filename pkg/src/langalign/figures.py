"""Figure rendering for experiment reports.

Everything draws through the Agg backend so the CLI works headless. Figures
are a convenience view over the same numbers the CSV carries; nothing reads
them back.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first


def _save(fig, path: Path) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def render_run_figures(report, out_dir) -> list[str]:
    """Loss curves, accuracy bars, and the alignment shift for one run.

    Returns the paths written. The alignment panel is skipped when the run
    had no translation twins to measure.
    """
    out = Path(out_dir)
    written = []
    method = report.config["train"]["method"]

    fig, (ax_src, ax_adapt) = plt.subplots(1, 2, figsize=(10, 4))
    for k, seed_results, _ in report.results:
        for r in seed_results:
            epochs = [e for e, _ in r.source_trajectory]
            values = [v for _, v in r.source_trajectory]
            ax_src.plot(epochs, values, marker="o", label=f"seed {r.seed}")
            if r.adapt_trajectory:
                epochs = [e for e, _ in r.adapt_trajectory]
                values = [v for _, v in r.adapt_trajectory]
                ax_adapt.plot(epochs, values, marker="o", label=f"seed {r.seed}, K={k}")
    ax_src.set_title("source fine-tuning (mean CE)")
    ax_src.set_xlabel("epoch")
    ax_src.set_ylabel("loss")
    ax_adapt.set_title(f"few-shot adaptation ({method})")
    ax_adapt.set_xlabel("epoch")
    ax_adapt.set_ylabel("loss")
    for ax in (ax_src, ax_adapt):
        if ax.has_data():
            ax.legend(fontsize=7)
    fig.suptitle("loss trajectories")
    written.append(_save(fig, out / "figures" / "loss_curves.png"))

    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / (2 * max(1, len(report.results)))
    positions = None
    for ki, (k, seed_results, _) in enumerate(report.results):
        seeds = [r.seed for r in seed_results]
        positions = range(len(seeds))
        offset = ki * 2 * width
        ax.bar(
            [p + offset for p in positions],
            [r.zero_shot_accuracy for r in seed_results],
            width=width,
            label=f"zero-shot (K={k})",
            alpha=0.6,
        )
        ax.bar(
            [p + offset + width for p in positions],
            [r.accuracy for r in seed_results],
            width=width,
            label=f"{method} (K={k})",
        )
    if positions is not None:
        ax.set_xticks(list(positions))
        ax.set_xticklabels([str(r.seed) for r in report.results[0][1]])
    ax.set_xlabel("seed")
    ax.set_ylabel("target-test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("accuracy by seed")
    ax.legend(fontsize=7)
    written.append(_save(fig, out / "figures" / "accuracy_by_seed.png"))

    shift_rows = [
        (k, r)
        for k, seed_results, _ in report.results
        for r in seed_results
        if r.alignment_before is not None and r.alignment_after is not None
    ]
    if shift_rows:
        fig, ax = plt.subplots(figsize=(7, 4))
        for i, (k, r) in enumerate(shift_rows):
            ax.plot(
                [0, 1],
                [r.alignment_before, r.alignment_after],
                marker="o",
                label=f"seed {r.seed}, K={k}",
            )
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["before", "after"])
        ax.set_ylabel("mean pair cosine at the tap layer")
        ax.set_title("alignment shift over adaptation")
        ax.legend(fontsize=7)
        written.append(_save(fig, out / "figures" / "alignment_shift.png"))

    return written


def render_ablation_figure(rows, out_dir) -> str:
    """Mean accuracy against the tap layer; rows are (layer, mean_accuracy)."""
    out = Path(out_dir)
    fig, ax = plt.subplots(figsize=(6, 4))
    layers = [layer for layer, _ in rows]
    accs = [acc for _, acc in rows]
    ax.plot(layers, accs, marker="o")
    ax.set_xlabel("tap layer")
    ax.set_ylabel("mean target-test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_xticks(layers)
    ax.set_title("contrastive tap-layer ablation")
    return _save(fig, out / "figures" / "layer_ablation.png")
