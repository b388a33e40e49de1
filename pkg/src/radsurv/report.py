"""Rendering of study results: CSV, aligned text, manifest, and figures.

The CSV is the machine-readable artifact and must be byte-stable for a
fixed seed, so floats are written with repr (shortest round-trip) and no
timestamps or timings appear in it.  Timings and environment go into the
run manifest instead.  Figures are rendered with the Agg backend straight
to files next to the CSV.
"""

from __future__ import annotations

import hashlib
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import __version__  # noqa: E402
from .errors import ArgumentError  # noqa: E402
from .lasso import SelectionResult  # noqa: E402
from .study import StudyResult  # noqa: E402

__all__ = [
    "RESULT_COLUMNS",
    "format_table",
    "plot_cv_curve",
    "plot_exclusions",
    "plot_study",
    "results_csv_text",
    "write_manifest",
    "write_report",
]

RESULT_COLUMNS = (
    "combo",
    "mask_variant",
    "n_patients",
    "n_excluded_patients",
    "n_selected_features",
    "c_index_train",
    "c_index_test",
    "exclusions",
    "annotation",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _row_record(row) -> dict:
    exclusions = ";".join(f"{pid}:{err}" for pid, err in row.exclusions)
    return {
        "combo": row.spec.combo_label,
        "mask_variant": row.spec.mask_variant.label if row.spec.needs_imaging
        else "",
        "n_patients": row.n_patients,
        "n_excluded_patients": row.n_excluded_patients,
        "n_selected_features": row.n_selected_features,
        "c_index_train": row.c_index_train,
        "c_index_test": row.c_index_test,
        "exclusions": exclusions,
        "annotation": row.annotation,
    }


def results_csv_text(result: StudyResult) -> str:
    """The results table as CSV text, one line per cell, fixed row order."""
    lines = [",".join(RESULT_COLUMNS)]
    for row in result.rows:
        record = _row_record(row)
        lines.append(",".join(_cell(record[c]) for c in RESULT_COLUMNS))
    return "\n".join(lines) + "\n"


def format_table(result: StudyResult) -> str:
    """Human-readable aligned table of the same rows."""
    header = ("combo", "mask", "sel", "excl", "c-index train", "c-index test",
              "note")
    body = []
    for row in result.rows:
        record = _row_record(row)
        body.append((
            record["combo"],
            record["mask_variant"] or "-",
            str(record["n_selected_features"]),
            str(record["n_excluded_patients"]),
            "-" if row.c_index_train is None else f"{row.c_index_train:.3f}",
            "-" if row.c_index_test is None else f"{row.c_index_test:.3f}",
            record["annotation"],
        ))
    widths = [max(len(h), *(len(r[i]) for r in body))
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def config_digest(config: dict) -> str:
    """Stable digest of a configuration mapping."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(result: StudyResult, path: str, extra: dict | None = None):
    """Run manifest: everything needed to reproduce plus observed timings."""
    doc = {
        "seed": result.seed,
        "radii": list(result.radii),
        "n_patients": result.n_patients,
        "config": result.config,
        "config_sha256": config_digest(result.config),
        "version": __version__,
        "timings_s": {k: round(v, 3) for k, v in sorted(result.timings.items())},
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


_VARIANT_TITLES = {"ground_truth": "ground truth"}


def _variant_name(label: str) -> str:
    return _VARIANT_TITLES.get(label, label.replace("_r", " r="))


def plot_study(result: StudyResult, path: str):
    """Concordance against mask perturbation, one line per feature combo."""
    variants = []
    for row in result.rows:
        if row.spec.needs_imaging:
            lab = row.spec.mask_variant.label
            if lab not in variants:
                variants.append(lab)
    combos = []
    for row in result.rows:
        if row.spec.needs_imaging and row.spec.combo_label not in combos:
            combos.append(row.spec.combo_label)

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    x = range(len(variants))
    for combo in combos:
        by_variant = {r.spec.mask_variant.label: r for r in result.rows
                      if r.spec.needs_imaging and r.spec.combo_label == combo}
        y = [by_variant[v].c_index_train for v in variants]
        ax.plot(x, y, marker="o", label=combo)
    clinical = result.rows[0]
    if not clinical.spec.needs_imaging and clinical.c_index_train is not None:
        ax.axhline(clinical.c_index_train, color="gray", linestyle="--",
                   linewidth=1, label="clinical only")
    ax.set_xticks(list(x))
    ax.set_xticklabels([_variant_name(v) for v in variants])
    ax.set_ylabel("train c-index")
    ax.set_xlabel("mask variant")
    ax.set_title("Segmentation perturbation study")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_exclusions(result: StudyResult, path: str):
    """Excluded patients per mask variant (identical across combos)."""
    seen = {}
    for row in result.rows:
        if row.spec.needs_imaging:
            seen.setdefault(row.spec.mask_variant.label,
                            row.n_excluded_patients)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    labels = list(seen)
    ax.bar(range(len(labels)), [seen[v] for v in labels], color="#b55")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels([_variant_name(v) for v in labels])
    ax.set_ylabel("patients excluded")
    ax.set_title(f"Extraction failures out of {result.n_patients} patients")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cv_curve(selection: SelectionResult, path: str):
    """Cross-validation curve over the penalty grid with the chosen point."""
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.plot(selection.lambdas, selection.cv_curve, marker=".", linewidth=1)
    ax.axvline(selection.chosen_lambda, color="#b55", linestyle="--",
               linewidth=1,
               label=f"chosen λ = {selection.chosen_lambda:.4g}")
    ax.set_xscale("log")
    ax.invert_xaxis()
    ax.set_xlabel("λ")
    ax.set_ylabel("mean validation c-index")
    ax.set_title("Cross-validated penalty selection")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(result: StudyResult, out_dir: str,
                 extra_manifest: dict | None = None) -> dict:
    """Write CSV, manifest, and figures into a directory; return the paths."""
    if not result.rows:
        raise ArgumentError("cannot report an empty study")
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "results_csv": os.path.join(out_dir, "results.csv"),
        "manifest": os.path.join(out_dir, "manifest.json"),
        "figure_cindex": os.path.join(out_dir, "c_index_by_variant.png"),
        "figure_exclusions": os.path.join(out_dir, "exclusions.png"),
    }
    with open(paths["results_csv"], "w") as fh:
        fh.write(results_csv_text(result))
    write_manifest(result, paths["manifest"], extra=extra_manifest)
    plot_study(result, paths["figure_cindex"])
    plot_exclusions(result, paths["figure_exclusions"])
    return paths
