"""Report rendering: delimited tables, JSON dumps, and matplotlib figures.

Every report path emits a machine-readable CSV (and a JSON mirror where the
payload is nested) plus PNG figures rendered with the Agg backend, so runs on
headless machines produce the same artifacts. Figure metadata is pinned to
keep repeated renders byte-stable.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

PNG_METADATA = {"Software": "semsearch"}


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def render_training_report(stage_reports: list[dict], out_dir) -> list[str]:
    """Stage-by-stage CSV + JSON + loss figure from ``run_stage`` reports."""
    rows = []
    for rep in stage_reports:
        for entry in rep["epochs"]:
            rows.append([rep["stage"], entry["epoch"], f"{entry['loss']:.10g}",
                        f"{entry.get('recall_at_10', float('nan')):.10g}",
                        f"{entry.get('pnr', float('nan')):.10g}"])
    csv_path = os.path.join(out_dir, "training_report.csv")
    write_csv(csv_path, ["stage", "epoch", "loss", "recall_at_10", "pnr"], rows)
    json_path = os.path.join(out_dir, "training_report.json")
    write_json(json_path, stage_reports)

    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in stage_reports:
        losses = [e["loss"] for e in rep["epochs"]]
        ax.plot(range(len(losses)), losses, marker="o", label=rep["stage"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("Training loss per stage")
    ax.legend()
    fig_path = os.path.join(out_dir, "training_loss.png")
    _save(fig, fig_path)
    return [csv_path, json_path, fig_path]


def render_eval_report(metrics: dict, out_dir) -> list[str]:
    """Flat metric dict -> CSV + JSON + bar figure."""
    items = sorted((k, v) for k, v in metrics.items() if isinstance(v, (int, float)))
    csv_path = os.path.join(out_dir, "eval_report.csv")
    write_csv(csv_path, ["metric", "value"], [[k, f"{v:.10g}"] for k, v in items])
    json_path = os.path.join(out_dir, "eval_report.json")
    write_json(json_path, metrics)

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [k for k, _ in items]
    ax.bar(range(len(items)), [v for _, v in items])
    ax.set_xticks(range(len(items)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_title("Evaluation metrics")
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "eval_metrics.png")
    _save(fig, fig_path)
    return [csv_path, json_path, fig_path]


def render_ablation_report(rows: list[dict], out_dir) -> list[str]:
    """Configuration-comparison table (one row per ablation arm) + figure."""
    metric_names = sorted({k for r in rows for k in r if k != "label"})
    csv_path = os.path.join(out_dir, "ablation.csv")
    write_csv(csv_path, ["label"] + metric_names,
              [[r["label"]] + [f"{r.get(m, float('nan')):.10g}" for m in metric_names]
               for r in rows])
    json_path = os.path.join(out_dir, "ablation.json")
    write_json(json_path, rows)

    fig, ax = plt.subplots(figsize=(6, 4))
    x = range(len(rows))
    width = 0.8 / max(1, len(metric_names))
    for i, m in enumerate(metric_names):
        ax.bar([xi + i * width for xi in x], [r.get(m, float("nan")) for r in rows],
               width=width, label=m)
    ax.set_xticks([xi + 0.4 - width / 2 for xi in x])
    ax.set_xticklabels([r["label"] for r in rows], rotation=20, ha="right")
    ax.set_title("Ablation comparison")
    ax.legend()
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "ablation.png")
    _save(fig, fig_path)
    return [csv_path, json_path, fig_path]
