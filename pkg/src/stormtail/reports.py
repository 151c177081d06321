"""Report emission: versioned CSV/JSON tables and static charts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .metrics import SCORE_NAMES
from .training import aggregate_over_seeds

CSV_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1

CSV_FIELDS = (
    "schema_version", "variant", "seed", "threshold", "aggregation", "metric",
    "value", "ci_lo", "ci_hi",
)


def metrics_rows(variant: str, seed, summary: dict) -> list[dict]:
    """Flatten an evaluation summary into one row per threshold x metric."""
    rows = []
    for thr, entry in summary["thresholds"].items():
        for agg in ("pooled", "mean"):
            for metric, value in entry[agg].items():
                ci = entry.get("ci", {}).get(metric) if agg == "pooled" else None
                rows.append({
                    "schema_version": CSV_SCHEMA_VERSION,
                    "variant": variant, "seed": seed, "threshold": thr,
                    "aggregation": agg, "metric": metric,
                    "value": "" if value is None else f"{value:.10g}",
                    "ci_lo": "" if not ci else f"{ci[0]:.10g}",
                    "ci_hi": "" if not ci else f"{ci[1]:.10g}",
                })
        rows.append({
            "schema_version": CSV_SCHEMA_VERSION,
            "variant": variant, "seed": seed, "threshold": thr,
            "aggregation": "pooled", "metric": "fss",
            "value": f"{entry['fss']:.10g}", "ci_lo": "", "ci_hi": "",
        })
    return rows


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _delta_sedi(summary_by_variant: dict[str, dict], threshold: str, reference: str) -> dict:
    out = {}
    ref = summary_by_variant.get(reference)
    ref_sedi = None
    if ref is not None:
        ref_sedi = ref["thresholds"][threshold]["pooled"].get("sedi")
    for variant, summary in summary_by_variant.items():
        sedi = summary["thresholds"][threshold]["pooled"].get("sedi")
        if variant == reference or sedi is None or ref_sedi is None:
            out[variant] = None
        else:
            out[variant] = sedi - ref_sedi
    return out


def consolidated_report(
    eval_docs: list[dict],
    reference_variant: str = "raw_nwp",
) -> dict:
    """Merge per-variant/per-seed evaluation summaries into one report.

    Multi-seed runs of the same variant are averaged metric-wise; delta
    SEDI is reported relative to the reference variant when present.
    """
    if not eval_docs:
        raise ValidationError("no evaluation outputs to merge")
    by_variant: dict[str, list[dict]] = {}
    for doc in eval_docs:
        if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValidationError(
                f"evaluation schema version {doc.get('schema_version')} unsupported"
            )
        by_variant.setdefault(doc["variant"], []).append(doc)

    merged: dict[str, dict] = {}
    for variant, docs in sorted(by_variant.items()):
        thresholds = docs[0]["summary"]["thresholds"].keys()
        agg: dict = {"thresholds": {}, "seeds": sorted(d.get("seed", 0) for d in docs)}
        for thr in thresholds:
            pooled = aggregate_over_seeds(
                [d["summary"]["thresholds"][thr]["pooled"] for d in docs]
            )
            mean = aggregate_over_seeds(
                [d["summary"]["thresholds"][thr]["mean"] for d in docs]
            )
            fss_val = float(np.mean([d["summary"]["thresholds"][thr]["fss"] for d in docs]))
            agg["thresholds"][thr] = {"pooled": pooled, "mean": mean, "fss": fss_val}
        merged[variant] = agg

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "variants": merged,
        "reference_variant": reference_variant,
        "delta_sedi": {},
    }
    sample_variant = next(iter(merged.values()))
    for thr in sample_variant["thresholds"]:
        report["delta_sedi"][thr] = _delta_sedi(
            {v: m for v, m in merged.items()}, thr, reference_variant
        )
    return report


def comparison_table_rows(report: dict, threshold: str) -> list[dict]:
    """Method-comparison table at one threshold (one row per variant)."""
    rows = []
    for variant, entry in report["variants"].items():
        pooled = entry["thresholds"][threshold]["pooled"]
        row = {"variant": variant, "threshold": threshold}
        for m in SCORE_NAMES:
            v = pooled.get(m)
            row[m] = "" if v is None else f"{v:.10g}"
        row["fss"] = f"{entry['thresholds'][threshold]['fss']:.10g}"
        d = report["delta_sedi"].get(threshold, {}).get(variant)
        row["delta_sedi"] = "" if d is None else f"{d:.10g}"
        rows.append(row)
    return rows


def write_comparison_csv(path: str | Path, report: dict) -> None:
    fields = ["variant", "threshold", *SCORE_NAMES, "fss", "delta_sedi"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for thr in sorted(
            next(iter(report["variants"].values()))["thresholds"], key=float
        ):
            writer.writerows(comparison_table_rows(report, thr))


def plot_csi_by_threshold(report: dict, out_path: str | Path) -> None:
    """Grouped bar chart of CSI per variant across thresholds."""
    variants = sorted(report["variants"])
    thresholds = sorted(
        next(iter(report["variants"].values()))["thresholds"], key=float
    )
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    xs = np.arange(len(thresholds))
    for i, variant in enumerate(variants):
        vals = [
            report["variants"][variant]["thresholds"][t]["pooled"].get("csi") or 0.0
            for t in thresholds
        ]
        ax.bar(xs + i * width, vals, width=width, label=variant)
    ax.set_xticks(xs + width * (len(variants) - 1) / 2)
    ax.set_xticklabels([f">= {t} mm/6h" for t in thresholds])
    ax.set_ylabel("CSI")
    ax.set_title("CSI by rainfall threshold")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Date": None})
    plt.close(fig)


def plot_channel_importance(views: dict, channel_names, out_path: str | Path) -> None:
    """Bar chart of normalized channel importance (the "all" view)."""
    allview = views.get("all", {})
    vals = [allview.get(name, 0.0) for name in channel_names]
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.bar(range(len(channel_names)), vals)
    ax.set_xticks(range(len(channel_names)))
    ax.set_xticklabels(channel_names, rotation=90, fontsize=7)
    ax.set_ylabel("relative importance")
    ax.set_title("Channel attribution (normalized)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Date": None})
    plt.close(fig)
