"""Run configuration: one flat key-value mapping shared by every subcommand.

The schema below is the single source of truth for keys, types and defaults.
A config file is a JSON object using exactly these keys; anything else is an
error.  Command-line flags override file values, which override defaults, and
the fully resolved mapping is echoed into each run's manifest so a run can be
reproduced from the manifest alone.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

from .errors import ArgumentError, DataError
from .study import GROUND_TRUTH, MaskVariant, PipelineOptions

# key -> (kind, default); kinds are checked and canonicalized by _coerce
SCHEMA = {
    "cohort": ("optional_str", None),
    "out": ("optional_str", None),
    "model": ("optional_str", None),
    "patient": ("optional_str", None),
    "seed": ("int", 0),
    "jobs": ("int", 1),
    "n": ("int", 100),
    "gtvn_probability": ("float", 0.3),
    "fragile_fraction": ("float", 0.0),
    "fragile_semi_axes": ("float", 2.0),
    "target_spacing": ("float", 2.0),
    "ct_bin_width": ("float", 25.0),
    "pet_bin_width": ("float", 0.25),
    "glcm_distance": ("int", 1),
    "tag_tolerance": ("float", 0.0),
    "k_folds": ("int", 8),
    "n_lambdas": ("int", 100),
    "lambda_ratio": ("float", 0.01),
    "cv_rule": ("str", "1se"),
    "split_ratios": ("ratios", (0.85, 0.075, 0.075)),
    "radii": ("int_list", (1, 2)),
    "modality": ("str", "ct"),
    "blocks": ("str_list", ("ct", "pet", "clinical")),
    "mask": ("str", "ground_truth"),
    "split": ("str", "test"),
}


def defaults() -> dict:
    return {key: default for key, (_, default) in SCHEMA.items()}


def _coerce(key: str, value):
    kind, _ = SCHEMA[key]
    if kind == "optional_str":
        if value is None or isinstance(value, str):
            return value
        raise ArgumentError(f"config key {key!r} must be a string")
    if kind == "str":
        if isinstance(value, str):
            return value
        raise ArgumentError(f"config key {key!r} must be a string")
    if kind == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ArgumentError(f"config key {key!r} must be an integer")
    if kind == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ArgumentError(f"config key {key!r} must be a number")
    if kind == "int_list":
        if (isinstance(value, (list, tuple)) and value
                and all(isinstance(v, int) and not isinstance(v, bool)
                        for v in value)):
            return tuple(value)
        raise ArgumentError(f"config key {key!r} must be a non-empty "
                            "list of integers")
    if kind == "ratios":
        if (isinstance(value, (list, tuple)) and len(value) == 3
                and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                        for v in value)):
            return tuple(float(v) for v in value)
        raise ArgumentError(f"config key {key!r} must be a list of "
                            "three numbers")
    if kind == "str_list":
        if (isinstance(value, (list, tuple)) and value
                and all(isinstance(v, str) for v in value)):
            return tuple(value)
        raise ArgumentError(f"config key {key!r} must be a non-empty "
                            "list of strings")
    raise AssertionError(f"unhandled kind {kind!r}")


def _check_keys(mapping: dict, source: str) -> None:
    unknown = sorted(set(mapping) - set(SCHEMA))
    if unknown:
        raise ArgumentError(f"unknown config keys in {source}: {unknown}; "
                            f"known keys: {sorted(SCHEMA)}")


def load_config(path) -> dict:
    """Read and validate a JSON config file (a flat object of known keys)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a JSON object")
    _check_keys(doc, str(path))
    return {key: _coerce(key, value) for key, value in doc.items()}


def resolve(file_config: dict | None = None,
            overrides: dict | None = None) -> dict:
    """Defaults, overlaid by a config file, overlaid by explicit flags."""
    cfg = defaults()
    for source, name in ((file_config, "config file"), (overrides, "flags")):
        if not source:
            continue
        _check_keys(source, name)
        for key, value in source.items():
            cfg[key] = _coerce(key, value)
    return cfg


# where a run reads and writes, and how many workers it uses: none of these
# change computed values, so data artifacts must not embed them
_RUNTIME_KEYS = ("cohort", "out", "model", "patient", "jobs")


def modelling_config(cfg: dict) -> dict:
    """The subset of a resolved configuration that determines outputs."""
    return {key: value for key, value in cfg.items()
            if key not in _RUNTIME_KEYS}


def pipeline_options(cfg: dict) -> PipelineOptions:
    """The extraction and modelling knobs of a resolved configuration."""
    return PipelineOptions(
        target_spacing=cfg["target_spacing"],
        ct_bin_width=cfg["ct_bin_width"],
        pet_bin_width=cfg["pet_bin_width"],
        glcm_distance=cfg["glcm_distance"],
        tag_tolerance=cfg["tag_tolerance"],
        k_folds=cfg["k_folds"],
        n_lambdas=cfg["n_lambdas"],
        lambda_ratio=cfg["lambda_ratio"],
        cv_rule=cfg["cv_rule"],
    )


_MASK_LABEL = re.compile(r"^(eroded|dilated)_r([0-9]+)$")


def parse_mask_label(label: str) -> MaskVariant:
    """Inverse of MaskVariant.label: 'ground_truth', 'eroded_rN', 'dilated_rN'."""
    if label == "ground_truth":
        return GROUND_TRUTH
    m = _MASK_LABEL.match(label)
    if not m:
        raise ArgumentError("mask must be 'ground_truth', 'eroded_rN' or "
                            f"'dilated_rN', got {label!r}")
    return MaskVariant(m.group(1), int(m.group(2)))
