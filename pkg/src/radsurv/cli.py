"""Command-line interface: each pipeline stage as a subcommand.

All randomness flows from the seed, every worker reduces its results in
patient-id order, and float cells are written with repr, so repeating an
invocation with the same configuration (at any --jobs count) produces
byte-identical CSV and JSON data files.  Manifests additionally record
observed timings and are the one artifact allowed to differ between runs.
Exit codes: 0 on success, 1 for a typed pipeline error (message on stderr),
2 for a usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import StandardizationParams, apply_standardization, \
    tag_modalities, write_feature_csv
from .config import SCHEMA, load_config, modelling_config, \
    parse_mask_label, pipeline_options, resolve
from .errors import ArgumentError, DataError, DegenerateTextureError, \
    EmptyRoiError, PipelineError
from .lasso import select_features_cv
from .phantom import PhantomParams, write_cohort
from .radiomics import FEATURE_NAMES, ExtractionParams, extract_all
from .report import config_digest, format_table, plot_cv_curve, write_report
from .study import ExperimentSpec, load_cohort, prepare_cell, \
    preprocess_patient, run_perturbation_study
from .survival import CoxModel, concordance_index, cox_fit, load_model_json, \
    predict_scores, save_model_json


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _csv_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, "
                                         f"got {text!r}")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, "
                                         f"got {text!r}")


def _csv_strs(text: str) -> list[str]:
    return [part for part in text.split(",") if part]


def _resolved(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicitly passed flags."""
    file_cfg = load_config(args.config) if args.config else None
    overrides = {key: value for key, value in vars(args).items()
                 if key in SCHEMA and value is not None}
    return resolve(file_cfg, overrides)


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg[k] is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ArgumentError(f"missing required settings: {flags} "
                            "(flag or config key)")


def _write_manifest(path, command: str, cfg: dict, **extra) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_sha256": config_digest(cfg),
    }
    doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sidecar_manifest(out_path) -> str:
    """Manifest path for a single-file artifact: drop the extension."""
    return os.path.splitext(os.fspath(out_path))[0] + ".manifest.json"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    cfg = _resolved(args)
    _require(cfg, "out")
    params = PhantomParams(
        n_patients=cfg["n"], seed=cfg["seed"],
        gtvn_probability=cfg["gtvn_probability"],
        fragile_fraction=cfg["fragile_fraction"],
        fragile_semi_axes=cfg["fragile_semi_axes"],
    )
    truth = write_cohort(params, cfg["out"], jobs=cfg["jobs"])
    _write_manifest(os.path.join(cfg["out"], "manifest.json"),
                    "simulate", cfg)
    events = sum(1 for p in truth["patients"].values() if p["event"])
    print(f"wrote {cfg['n']} patients ({events} events) to {cfg['out']}")
    return 0


def _modality_params(cfg, options, modality) -> ExtractionParams:
    if modality not in ("ct", "pet"):
        raise ArgumentError(f"modality must be 'ct' or 'pet', got {modality!r}")
    width = options.ct_bin_width if modality == "ct" else options.pet_bin_width
    return ExtractionParams(bin_width=width,
                            glcm_distance=options.glcm_distance,
                            modality_tag=modality.upper())


def _cmd_extract(args) -> int:
    cfg = _resolved(args)
    _require(cfg, "cohort", "out")
    options = pipeline_options(cfg)
    variant = parse_mask_label(cfg["mask"])
    params = _modality_params(cfg, options, cfg["modality"])
    _, outcomes = load_cohort(cfg["cohort"])
    ids = [r.patient_id for r in outcomes]

    def work(pid):
        ct, pet, mask = preprocess_patient(cfg["cohort"], pid, options)
        img = ct if cfg["modality"] == "ct" else pet
        try:
            return extract_all(img, variant.apply(mask), params)
        except (EmptyRoiError, DegenerateTextureError) as exc:
            return type(exc).__name__

    if cfg["jobs"] == 1:
        results = [work(pid) for pid in ids]
    else:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(work, ids))

    kept, vectors, excluded = [], [], []
    for pid, res in zip(ids, results):
        if isinstance(res, str):
            excluded.append((pid, res))
            print(f"excluded {pid}: {res}", file=sys.stderr)
        else:
            kept.append(pid)
            vectors.append(res)
    if not kept:
        raise DataError("every patient failed extraction")
    write_feature_csv(cfg["out"], kept, vectors)
    _write_manifest(_sidecar_manifest(cfg["out"]), "extract", cfg,
                    excluded=[list(e) for e in excluded])
    print(f"wrote {len(kept)} rows x {1 + len(FEATURE_NAMES)} columns "
          f"to {cfg['out']}")
    return 0


def _cmd_features_compare(args) -> int:
    cfg = _resolved(args)
    _require(cfg, "cohort", "patient")
    options = pipeline_options(cfg)
    variant = parse_mask_label(cfg["mask"])
    _, outcomes = load_cohort(cfg["cohort"])
    ids = {r.patient_id for r in outcomes}
    pid = cfg["patient"]
    if pid not in ids:
        raise ArgumentError(f"unknown patient id {pid!r}")
    ct, pet, mask = preprocess_patient(cfg["cohort"], pid, options)
    roi = variant.apply(mask)
    ct_fv = extract_all(ct, roi, _modality_params(cfg, options, "ct"))
    pet_fv = extract_all(pet, roi, _modality_params(cfg, options, "pet"))
    tagged = tag_modalities(ct_fv, pet_fv, tol=options.tag_tolerance)
    common = {name.split(".", 1)[1] for name in tagged.names
              if name.startswith("common.")}

    rows = [(name, repr(float(c)), repr(float(p)),
             "common" if name in common else "modality_specific")
            for name, c, p in zip(ct_fv.names, ct_fv.values, pet_fv.values)]
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write("feature,ct,pet,tag\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
        _write_manifest(_sidecar_manifest(cfg["out"]), "features compare", cfg)
        print(f"wrote {len(rows)} feature comparisons to {cfg['out']}")
    else:
        width = max(len(r[0]) for r in rows)
        print(f"{'feature'.ljust(width)}  {'ct':>24}  {'pet':>24}  tag")
        for name, c, p, tag in rows:
            print(f"{name.ljust(width)}  {c:>24}  {p:>24}  {tag}")
    print(f"{len(common)} of {len(rows)} features agree across modalities")
    return 0


def _cell(cfg, jobs):
    spec = ExperimentSpec(blocks=tuple(cfg["blocks"]),
                          mask_variant=parse_mask_label(cfg["mask"]),
                          seed=cfg["seed"],
                          split_ratios=tuple(cfg["split_ratios"]))
    options = pipeline_options(cfg)
    return spec, options, prepare_cell(cfg["cohort"], spec, options, jobs=jobs)


def _select(cell, spec, options):
    return select_features_cv(cell.std_train, cell.records(cell.train_ids),
                              k=options.k_folds, seed=spec.seed,
                              n_lambdas=options.n_lambdas,
                              ratio=options.lambda_ratio,
                              rule=options.cv_rule)


def _cmd_select(args) -> int:
    cfg = _resolved(args)
    _require(cfg, "cohort", "out")
    spec, options, cell = _cell(cfg, cfg["jobs"])
    sel = _select(cell, spec, options)

    os.makedirs(cfg["out"], exist_ok=True)
    doc = {
        "selected": list(sel.selected),
        "chosen_lambda": float(sel.chosen_lambda),
        "n_train": len(cell.train_ids),
        "exclusions": [list(e) for e in cell.exclusions],
    }
    sel_path = os.path.join(cfg["out"], "selection.json")
    Path(sel_path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    curve_path = os.path.join(cfg["out"], "cv_curve.csv")
    with open(curve_path, "w") as fh:
        fh.write("lambda,mean_cv_c_index\n")
        for lam, c in zip(sel.lambdas, sel.cv_curve):
            fh.write(f"{repr(float(lam))},{repr(float(c))}\n")
    plot_cv_curve(sel, os.path.join(cfg["out"], "cv_curve.png"))
    _write_manifest(os.path.join(cfg["out"], "manifest.json"), "select", cfg)
    names = ", ".join(sel.selected) if sel.selected else "none"
    print(f"selected {len(sel.selected)} features "
          f"at lambda={sel.chosen_lambda:.6g}: {names}")
    return 0


def _cmd_fit(args) -> int:
    cfg = _resolved(args)
    _require(cfg, "cohort", "out")
    spec, options, cell = _cell(cfg, cfg["jobs"])
    sel = _select(cell, spec, options)
    recs_train = cell.records(cell.train_ids)
    if sel.selected:
        model = cox_fit(cell.std_train.columns(sel.selected), recs_train)
        scores = predict_scores(model, cell.std_train.columns(sel.selected))
    else:
        # the penalty kept nothing: a null model scoring everyone equally
        model = CoxModel(beta=np.zeros(0), covariate_names=(),
                         converged=True, log_partial_likelihood=0.0,
                         n_iterations=0)
        scores = np.zeros(len(cell.train_ids))
    c_train = concordance_index(scores, recs_train)

    sp = cell.standardization
    save_model_json(model, cfg["out"], extra={
        "standardization": {
            "column_names": list(sp.column_names),
            "mean": [float(v) for v in sp.mean],
            "std": [float(v) for v in sp.std],
            "dropped": list(sp.dropped),
        },
        "chosen_lambda": float(sel.chosen_lambda),
        "blocks": list(spec.blocks),
        "mask": spec.mask_variant.label,
        "seed": spec.seed,
        "split_ratios": list(spec.split_ratios),
        "exclusions": [list(e) for e in cell.exclusions],
        "run_config": modelling_config(cfg),
    })
    _write_manifest(_sidecar_manifest(cfg["out"]), "fit", cfg)
    print(f"fit {len(sel.selected)}-feature model "
          f"(train c-index {c_train:.3f}) -> {cfg['out']}")
    return 0


_MODEL_CONTEXT = ("standardization", "blocks", "mask", "seed",
                  "split_ratios", "run_config")


def _cmd_eval(args) -> int:
    cfg = _resolved(args)
    _require(cfg, "cohort", "model")
    try:
        doc = json.loads(Path(cfg["model"]).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{cfg['model']}: not valid JSON ({exc})") from exc
    missing = [k for k in _MODEL_CONTEXT if k not in doc]
    if missing:
        raise DataError(f"{cfg['model']}: missing pipeline context {missing}")
    model = load_model_json(cfg["model"])

    # rebuild features with the settings the model was trained under
    run_cfg = resolve(doc["run_config"])
    spec = ExperimentSpec(blocks=tuple(doc["blocks"]),
                          mask_variant=parse_mask_label(doc["mask"]),
                          seed=int(doc["seed"]),
                          split_ratios=tuple(doc["split_ratios"]))
    options = pipeline_options(run_cfg)
    cell = prepare_cell(cfg["cohort"], spec, options, jobs=cfg["jobs"])
    ids = list(cell.split_ids(cfg["split"]))

    std = doc["standardization"]
    sp = StandardizationParams(column_names=tuple(std["column_names"]),
                               mean=np.array(std["mean"], dtype=np.float64),
                               std=np.array(std["std"], dtype=np.float64),
                               dropped=tuple(std["dropped"]))
    if model.covariate_names:
        z = apply_standardization(cell.dm.rows(ids), sp)
        scores = predict_scores(model, z.columns(model.covariate_names))
    else:
        scores = np.zeros(len(ids))
    c = concordance_index(scores, cell.records(ids))
    print(f"{cfg['split']} c-index: {c:.6f} "
          f"({len(ids)} patients, {len(cell.exclusions)} excluded)")
    if cfg["out"]:
        result = {"c_index": float(c), "split": cfg["split"],
                  "n_patients": len(ids),
                  "n_excluded": len(cell.exclusions)}
        Path(cfg["out"]).write_text(
            json.dumps(result, indent=1, sort_keys=True) + "\n")
        _write_manifest(_sidecar_manifest(cfg["out"]), "eval", cfg)
    return 0


def _cmd_perturb(args) -> int:
    cfg = _resolved(args)
    _require(cfg, "cohort", "out")
    result = run_perturbation_study(cfg["cohort"], radii=tuple(cfg["radii"]),
                                    seed=cfg["seed"],
                                    options=pipeline_options(cfg),
                                    jobs=cfg["jobs"])
    print(format_table(result), end="")
    paths = write_report(result, cfg["out"], extra_manifest={
        "command": "perturb",
        "run_config": cfg,
        "run_config_sha256": config_digest(cfg),
    })
    print(f"report written to {cfg['out']} "
          f"({', '.join(sorted(os.path.basename(p) for p in paths.values()))})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _flag(parser, key: str, **kwargs) -> None:
    parser.add_argument("--" + key.replace("_", "-"), dest=key,
                        default=None, **kwargs)


def _add_common(parser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="JSON config file; explicit flags override it")
    _flag(parser, "jobs", type=int, metavar="N",
          help="worker threads (output is identical for every N)")


def _add_extraction_flags(parser) -> None:
    _flag(parser, "mask", metavar="LABEL",
          help="ground_truth (default), eroded_rN or dilated_rN")
    _flag(parser, "target_spacing", type=float, metavar="MM")
    _flag(parser, "ct_bin_width", type=float, metavar="HU")
    _flag(parser, "pet_bin_width", type=float, metavar="SUV")
    _flag(parser, "glcm_distance", type=int, metavar="VOX")
    _flag(parser, "tag_tolerance", type=float, metavar="TOL")


def _add_model_flags(parser) -> None:
    _flag(parser, "blocks", type=_csv_strs, metavar="B1,B2",
          help="feature blocks: subset of ct,pet,clinical")
    _flag(parser, "seed", type=int, metavar="S")
    _flag(parser, "split_ratios", type=_csv_floats, metavar="TR,VA,TE")
    _flag(parser, "k_folds", type=int, metavar="K")
    _flag(parser, "n_lambdas", type=int, metavar="N")
    _flag(parser, "lambda_ratio", type=float, metavar="R")
    _flag(parser, "cv_rule", metavar="RULE", help="1se (default) or max")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radsurv",
        description="CT/PET radiomics survival pipeline with a "
                    "segmentation-perturbation study harness.")
    parser.add_argument("--version", action="version",
                        version=f"radsurv {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                required=True)

    p = sub.add_parser("simulate", help="generate a synthetic cohort directory")
    _add_common(p)
    _flag(p, "n", type=int, metavar="N", help="number of patients")
    _flag(p, "seed", type=int, metavar="S")
    _flag(p, "out", metavar="DIR", help="cohort directory to create")
    _flag(p, "gtvn_probability", type=float, metavar="P")
    _flag(p, "fragile_fraction", type=float, metavar="F",
          help="fraction of patients given tiny erosion-fragile tumours")
    _flag(p, "fragile_semi_axes", type=float, metavar="VOX")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("extract",
                       help="write one modality's feature table as CSV")
    _add_common(p)
    _flag(p, "cohort", metavar="DIR")
    _flag(p, "modality", metavar="M", help="ct or pet")
    _flag(p, "out", metavar="CSV")
    _add_extraction_flags(p)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("features", help="feature-table utilities")
    fsub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND",
                            required=True)
    fc = fsub.add_parser("compare",
                         help="one patient's CT/PET values with agreement tags")
    _add_common(fc)
    _flag(fc, "cohort", metavar="DIR")
    _flag(fc, "patient", metavar="ID")
    _flag(fc, "out", metavar="CSV", help="write CSV instead of a table")
    _add_extraction_flags(fc)
    fc.set_defaults(func=_cmd_features_compare)

    p = sub.add_parser("select",
                       help="cross-validated feature selection on one cell")
    _add_common(p)
    _flag(p, "cohort", metavar="DIR")
    _flag(p, "out", metavar="DIR", help="directory for selection artifacts")
    _add_extraction_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("fit", help="select, refit and save a survival model")
    _add_common(p)
    _flag(p, "cohort", metavar="DIR")
    _flag(p, "out", metavar="JSON", help="model file to write")
    _add_extraction_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("eval", help="score a saved model on a cohort split")
    _add_common(p)
    _flag(p, "cohort", metavar="DIR")
    _flag(p, "model", metavar="JSON")
    _flag(p, "split", metavar="NAME", help="train, val, test (default) or all")
    _flag(p, "out", metavar="JSON", help="optionally write the result")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("perturb",
                       help="run the full mask-perturbation study grid")
    _add_common(p)
    _flag(p, "cohort", metavar="DIR")
    _flag(p, "radii", type=_csv_ints, metavar="R1,R2",
          help="perturbation radii in voxels, e.g. 1,2")
    _flag(p, "seed", type=int, metavar="S")
    _flag(p, "out", metavar="DIR", help="report directory")
    _add_extraction_flags(p)
    _flag(p, "k_folds", type=int, metavar="K")
    _flag(p, "n_lambdas", type=int, metavar="N")
    _flag(p, "lambda_ratio", type=float, metavar="R")
    _flag(p, "cv_rule", metavar="RULE")
    p.set_defaults(func=_cmd_perturb)

    return parser


def dispatch(argv=None) -> int:
    """Parse and run; returns the process exit code instead of raising."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, int):
            return exc.code
        return 0 if exc.code is None else 2
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
