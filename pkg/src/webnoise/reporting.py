"""Aggregation of run artifacts into mean ± std tables and curve CSVs.

Report generation only ever reads logged JSON/CSV artifacts; it never
re-runs training.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import stats


def mean_std_cell(values) -> str:
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return "-"
    if arr.size == 1:
        return f"{arr[0]:.2f}"
    return f"{arr.mean():.2f} ± {arr.std(ddof=1):.2f}"


def welch_p(sample_a, sample_b) -> float:
    """Two-sided Welch t-test p-value."""
    a = np.asarray(list(sample_a), dtype=float)
    b = np.asarray(list(sample_b), dtype=float)
    if len(a) < 2 or len(b) < 2:
        return float("nan")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else str(v) for v in row) + "\n")


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _collect(out_root: Path, command: str) -> dict[str, list[dict]]:
    """result.json payloads grouped by config hash."""
    grouped: dict[str, list[dict]] = {}
    for result_path in sorted(Path(out_root).glob(f"*/{command}/seed*/result_*.json")):
        payload = json.loads(result_path.read_text())
        payload["_path"] = str(result_path.parent)
        grouped.setdefault(payload["config_hash"], []).append(payload)
    return grouped


def train_table(out_root: Path) -> tuple[list[str], list[list]]:
    header = ["config_hash", "strategy", "noise_ratio", "seeds", "best_accuracy", "final_accuracy"]
    rows = []
    for chash, runs in sorted(_collect(out_root, "train").items()):
        rows.append(
            [
                chash,
                runs[0].get("strategy", "?"),
                runs[0].get("noise_ratio", ""),
                len(runs),
                mean_std_cell(r["best_accuracy"] for r in runs),
                mean_std_cell(r["final_accuracy"] for r in runs),
            ]
        )
    return header, rows


def detect_table(out_root: Path) -> tuple[list[str], list[list]]:
    header = ["config_hash", "metric", "seeds", "auroc", "recall_clean", "recall_noise", "accuracy"]
    rows = []
    for chash, runs in sorted(_collect(out_root, "detect").items()):
        metrics = runs[0].get("table", [])
        names = [m["metric"] for m in metrics]
        for name in names:
            per_seed = [next(m for m in r["table"] if m["metric"] == name) for r in runs]

            def cell(key):
                vals = [m[key] for m in per_seed if m.get(key) is not None]
                return mean_std_cell(vals) if vals else "-"

            rows.append([chash, name, len(runs), cell("auroc"), cell("recall_clean"), cell("recall_noise"), cell("accuracy")])
    return header, rows


def cotrain_table(out_root: Path) -> tuple[list[str], list[list]]:
    """Ensemble and individual accuracies per strategy plus Welch p-values
    against the INDEP runs, when present."""
    header = [
        "config_hash",
        "strategy",
        "seeds",
        "ensemble",
        "individual",
        "p_ensemble_vs_indep",
        "p_individual_vs_indep",
    ]
    grouped = _collect(out_root, "cotrain")
    indep_ens, indep_ind = [], []
    for runs in grouped.values():
        for r in runs:
            if r.get("strategy") == "INDEP":
                indep_ens.append(r["best_accuracy"]["ensemble"])
                indep_ind.extend([r["best_accuracy"]["net_a"], r["best_accuracy"]["net_b"]])
    rows = []
    for chash, runs in sorted(grouped.items()):
        ens = [r["best_accuracy"]["ensemble"] for r in runs]
        ind = [acc for r in runs for acc in (r["best_accuracy"]["net_a"], r["best_accuracy"]["net_b"])]
        strategy = runs[0].get("strategy", "?")
        if strategy == "INDEP":
            p_e, p_i = 1.0, 1.0
        elif indep_ens:
            p_e, p_i = welch_p(ens, indep_ens), welch_p(ind, indep_ind)
        else:
            p_e = p_i = None
        rows.append([chash, strategy, len(runs), mean_std_cell(ens), mean_std_cell(ind), p_e, p_i])
    return header, rows


def retrieval_curves(out_root: Path) -> tuple[list[str], list[list]]:
    """Per-epoch counts of clean samples missed by the separator and how many
    of those the loss- or distance-based detectors retrieve."""
    header = ["config_hash", "epoch", "missed_clean_by_w", "retrieved_by_z", "retrieved_by_knn"]
    rows = []
    for metrics_path in sorted(Path(out_root).glob("*/train/seed*/metrics_*.jsonl")):
        chash = metrics_path.parent.parent.parent.name
        by_epoch: dict[int, list] = {}
        for rec in read_jsonl(metrics_path):
            if rec.get("missed_clean_by_w") is None:
                continue
            by_epoch.setdefault(rec["epoch"], []).append(rec)
        for epoch, recs in sorted(by_epoch.items()):
            rows.append(
                [
                    chash,
                    epoch,
                    np.mean([r["missed_clean_by_w"] for r in recs]),
                    np.mean([r["missed_w_retrieved_by_z"] for r in recs]),
                    np.mean([r["missed_w_retrieved_by_knn"] for r in recs]),
                ]
            )
    return header, rows


def generate_report(out_root, report_dir) -> list[str]:
    out_root = Path(out_root)
    report_dir = Path(report_dir)
    written = []
    for name, builder in (
        ("train_table.csv", train_table),
        ("detect_table.csv", detect_table),
        ("cotrain_table.csv", cotrain_table),
        ("retrieval_curves.csv", retrieval_curves),
    ):
        header, rows = builder(out_root)
        if rows:
            write_csv(report_dir / name, header, rows)
            written.append(name)
    return written
