"""Delimited metric output and figure rendering.

CSV layouts are frozen: fixed headers, fixed row order, floats at six decimal
places. Reruns of the same config must produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")  # render to files, never to a display

import matplotlib.pyplot as plt

from flgen.evaluation import RoundRecord

METRIC_COLUMNS = (
    "global_test_acc",
    "avg_local_global_acc",
    "divergence",
    "mean_pairwise_cosine",
    "mean_pairwise_l2",
    "attack_acc",
)

METRICS_HEADER = "round," + ",".join(METRIC_COLUMNS)
PLOTDATA_HEADER = "axis_value,seed,metric,round,value"


def _cell(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def emit_metrics(records: Sequence[RoundRecord], path) -> None:
    """One row per round; attack_acc is empty on rounds without an attack."""
    if not records:
        raise ValueError("no round records to write")
    lines = [METRICS_HEADER]
    for rec in records:
        lines.append(",".join([
            str(rec.round),
            _cell(rec.global_test_acc),
            _cell(rec.avg_local_global_acc),
            _cell(rec.divergence),
            _cell(rec.mean_pairwise_cosine),
            _cell(rec.mean_pairwise_l2),
            _cell(rec.attack_acc),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def emit_plotdata(
    results: Sequence[tuple[str, int, Sequence[RoundRecord]]], path
) -> None:
    """Long-form sweep table: axis_value,seed,metric,round,value.

    Axis values keep their first-seen order; within a value seeds ascend,
    within a seed metrics follow METRIC_COLUMNS, rounds ascend. Rounds with
    no attack contribute no attack_acc row.
    """
    if not results:
        raise ValueError("no sweep results to write")
    order: list[str] = []
    grouped: dict[str, list[tuple[int, Sequence[RoundRecord]]]] = {}
    for axis_value, seed, records in results:
        if axis_value not in grouped:
            grouped[axis_value] = []
            order.append(axis_value)
        grouped[axis_value].append((seed, records))

    lines = [PLOTDATA_HEADER]
    for axis_value in order:
        for seed, records in sorted(grouped[axis_value], key=lambda sr: sr[0]):
            for metric in METRIC_COLUMNS:
                for rec in sorted(records, key=lambda r: r.round):
                    value = getattr(rec, metric)
                    if value is None:
                        continue
                    lines.append(f"{axis_value},{seed},{metric},{rec.round},{value:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_run_figures(records: Sequence[RoundRecord], out_dir) -> list[Path]:
    """Accuracy, divergence, and heterogeneity curves; attack curve when the
    run attacked at least once. Returns the written paths."""
    if not records:
        raise ValueError("no round records to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rounds = [r.round for r in records]
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, [r.global_test_acc for r in records], label="global test acc")
    ax.plot(rounds, [r.avg_local_global_acc for r in records], label="avg local acc", alpha=0.7)
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    written.append(_save(fig, out / "fig_accuracy.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, [r.divergence for r in records], color="tab:red")
    ax.set_xlabel("round")
    ax.set_ylabel("mean client-global L2 divergence")
    fig.tight_layout()
    written.append(_save(fig, out / "fig_divergence.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, [r.mean_pairwise_cosine for r in records], label="mean pairwise cosine")
    ax.set_xlabel("round")
    ax.set_ylabel("cosine similarity")
    ax2 = ax.twinx()
    ax2.plot(rounds, [r.mean_pairwise_l2 for r in records], color="tab:orange", label="mean pairwise L2")
    ax2.set_ylabel("L2 distance")
    lines1, labels1 = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines1 + lines2, labels1 + labels2, loc="best")
    fig.tight_layout()
    written.append(_save(fig, out / "fig_heterogeneity.png"))

    attacked = [(r.round, r.attack_acc) for r in records if r.attack_acc is not None]
    if attacked:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([a for a, _ in attacked], [b for _, b in attacked], marker="o")
        ax.axhline(0.5, linestyle="--", color="gray", linewidth=1)
        ax.set_xlabel("round")
        ax.set_ylabel("membership attack accuracy")
        fig.tight_layout()
        written.append(_save(fig, out / "fig_attack.png"))

    return written


def render_sweep_figures(
    results: Sequence[tuple[str, int, Sequence[RoundRecord]]], out_dir
) -> list[Path]:
    """Final-round accuracy vs axis value, plus per-value accuracy curves
    (seed-averaged). Returns the written paths."""
    if not results:
        raise ValueError("no sweep results to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    order: list[str] = []
    grouped: dict[str, list[Sequence[RoundRecord]]] = {}
    for axis_value, _, records in results:
        if axis_value not in grouped:
            grouped[axis_value] = []
            order.append(axis_value)
        grouped[axis_value].append(records)

    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    positions = list(range(len(order)))
    means = []
    for i, value in enumerate(order):
        finals = [recs[-1].global_test_acc for recs in grouped[value]]
        means.append(sum(finals) / len(finals))
        ax.scatter([i] * len(finals), finals, color="tab:blue", alpha=0.5, s=18)
    ax.plot(positions, means, color="tab:blue", marker="s", label="seed mean")
    ax.set_xticks(positions)
    ax.set_xticklabels(order)
    ax.set_xlabel("axis value")
    ax.set_ylabel("final global test acc")
    ax.legend()
    fig.tight_layout()
    written.append(_save(fig, out / "fig_sweep_final_accuracy.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    for value in order:
        runs = grouped[value]
        rounds = [r.round for r in runs[0]]
        mean_curve = [
            sum(recs[i].global_test_acc for recs in runs) / len(runs)
            for i in range(len(rounds))
        ]
        ax.plot(rounds, mean_curve, label=str(value))
    ax.set_xlabel("round")
    ax.set_ylabel("global test acc (seed mean)")
    ax.legend(title="axis value")
    fig.tight_layout()
    written.append(_save(fig, out / "fig_sweep_curves.png"))

    return written
