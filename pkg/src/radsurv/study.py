"""Experiment orchestration: feature-block sweeps over mask variants.

One experiment runs the full pipeline on a cohort directory: preprocess,
perturb the merged tumour mask, extract CT and PET features, tag them by
modality agreement, assemble a design matrix with the clinical block,
standardize on the training split, select features by cross-validated
penalized Cox, refit, and score train and held-out test concordance.  The
perturbation study sweeps mask variants against feature combinations and
emits the 13-row results grid with per-patient failure accounting.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .cohort import (
    BLOCK_ORDER,
    DesignMatrix,
    StandardizationParams,
    apply_standardization,
    assemble_design_matrix,
    encode_cohort,
    read_clinical_csv,
    standardize,
    tag_modalities,
)
from .errors import (
    ArgumentError,
    CohortError,
    DataError,
    DegenerateTextureError,
    EmptyRoiError,
    UndefinedCindexError,
)
from .lasso import select_features_cv
from .morphology import ball_element, dilate, erode
from .phantom import CLINICAL_CSV, LABELS_DIR, OUTCOMES_CSV, VOLUMES_DIR
from .radiomics import ExtractionParams, extract_all
from .survival import (
    concordance_index,
    cox_fit,
    predict_scores,
    read_outcome_csv,
    split_cohort,
)
from .volume import (
    CT_PAD,
    PET_PAD,
    as_label_map,
    crop,
    merge_labels,
    read_volume,
    resample,
    union_bounding_box,
)

# block sets behind each reported feature combination; common features belong
# to both modalities, so any imaging combination includes them
COMBO_BLOCKS = {
    "clinical": ("clinical",),
    "ct_clinical": ("clinical", "ct", "common"),
    "pet_clinical": ("clinical", "pet", "common"),
    "ct_pet_clinical": ("clinical", "ct", "pet", "common"),
}
COMBO_ORDER = ("clinical", "ct_clinical", "pet_clinical", "ct_pet_clinical")
IMAGING_COMBOS = COMBO_ORDER[1:]

# a grid cell reports numbers only when at least 80% of patients survive
# feature extraction; beyond that the cell is annotated instead
FAILURE_THRESHOLD = 0.2

_EXTRACTION_ERRORS = (EmptyRoiError, DegenerateTextureError, DataError)


@dataclass(frozen=True)
class MaskVariant:
    """Ground-truth mask or its morphological perturbation."""

    kind: str  # "ground_truth" | "eroded" | "dilated"
    radius: int = 0

    def __post_init__(self):
        if self.kind not in ("ground_truth", "eroded", "dilated"):
            raise ArgumentError(f"unknown mask variant kind {self.kind!r}")
        if self.kind == "ground_truth" and self.radius != 0:
            raise ArgumentError("ground truth takes no radius")
        if self.kind != "ground_truth" and self.radius < 1:
            raise ArgumentError("morphological variants need radius >= 1")

    @property
    def label(self) -> str:
        if self.kind == "ground_truth":
            return "ground_truth"
        return f"{self.kind}_r{self.radius}"

    def apply(self, mask):
        if self.kind == "ground_truth":
            return mask
        op = erode if self.kind == "eroded" else dilate
        return op(mask, ball_element(self.radius))


GROUND_TRUTH = MaskVariant("ground_truth")


@dataclass(frozen=True)
class ExperimentSpec:
    """One cell: which feature blocks on which mask, split how."""

    blocks: tuple[str, ...]
    mask_variant: MaskVariant = GROUND_TRUTH
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.85, 0.075, 0.075)

    def __post_init__(self):
        blocks = set(self.blocks)
        unknown = blocks - set(BLOCK_ORDER)
        if unknown:
            raise ArgumentError(f"unknown feature blocks {sorted(unknown)}")
        if not blocks:
            raise ArgumentError("at least one feature block is required")
        if blocks & {"ct", "pet"}:
            blocks.add("common")
        object.__setattr__(self, "blocks",
                           tuple(b for b in BLOCK_ORDER if b in blocks))
        if self.seed < 0:
            raise ArgumentError("seed must be non-negative")

    @property
    def needs_imaging(self) -> bool:
        return any(b != "clinical" for b in self.blocks)

    @property
    def combo_label(self) -> str:
        parts = [b for b in ("ct", "pet") if b in self.blocks]
        if "clinical" in self.blocks:
            parts.append("clinical")
        return "_".join(parts) if parts else "common"


@dataclass(frozen=True)
class ResultRow:
    """Outcome of one cell; all floats are exact model outputs."""

    spec: ExperimentSpec
    n_patients: int
    n_selected_features: int
    c_index_train: float | None
    c_index_test: float | None
    exclusions: tuple[tuple[str, str], ...]  # (patient id, error name)
    annotation: str = ""

    def __post_init__(self):
        for c in (self.c_index_train, self.c_index_test):
            if c is not None and not 0.0 <= c <= 1.0:
                raise ArgumentError(f"c-index {c} outside [0, 1]")
        if not 0 <= len(self.exclusions) <= self.n_patients:
            raise ArgumentError("exclusion count exceeds cohort size")
        if self.n_selected_features < 0:
            raise ArgumentError("negative selection count")

    @property
    def n_excluded_patients(self) -> int:
        return len(self.exclusions)

    @property
    def key(self) -> str:
        if not self.spec.needs_imaging:
            return self.spec.combo_label
        return f"{self.spec.combo_label}@{self.spec.mask_variant.label}"


@dataclass(frozen=True, eq=False)
class PipelineOptions:
    """Resolved knobs shared by every cell of a run."""

    target_spacing: float = 2.0
    ct_bin_width: float = 25.0
    pet_bin_width: float = 0.25
    glcm_distance: int = 1
    tag_tolerance: float = 0.0
    k_folds: int = 8
    n_lambdas: int = 100
    lambda_ratio: float = 0.01
    cv_rule: str = "1se"

    def __post_init__(self):
        if self.target_spacing <= 0:
            raise ArgumentError("target_spacing must be positive")
        if self.ct_bin_width <= 0 or self.pet_bin_width <= 0:
            raise ArgumentError("bin widths must be positive")
        if self.glcm_distance < 1:
            raise ArgumentError("glcm_distance must be at least 1")
        if self.k_folds < 2:
            raise ArgumentError("k_folds must be at least 2")


@dataclass(frozen=True, eq=False)
class StudyResult:
    rows: tuple[ResultRow, ...]
    seed: int
    radii: tuple[int, ...]
    n_patients: int
    config: dict
    timings: dict  # row key or "extraction" -> seconds

    def row(self, key: str) -> ResultRow:
        for r in self.rows:
            if r.key == key:
                return r
        raise ArgumentError(f"no result row {key!r}")


def load_cohort(cohort_dir):
    """Read the cohort's clinical and outcome tables, aligned by patient id."""
    clinical = read_clinical_csv(os.path.join(cohort_dir, CLINICAL_CSV))
    outcomes = read_outcome_csv(os.path.join(cohort_dir, OUTCOMES_CSV))
    clinical = sorted(clinical, key=lambda r: r.patient_id)
    outcomes = sorted(outcomes, key=lambda r: r.patient_id)
    c_ids = [r.patient_id for r in clinical]
    o_ids = [r.patient_id for r in outcomes]
    if c_ids != o_ids:
        raise CohortError("clinical and outcome tables list different patients")
    return clinical, outcomes


def preprocess_patient(cohort_dir, pid: str, options: PipelineOptions):
    """Load, resample to the target spacing, crop to the shared box, merge."""
    ct = read_volume(os.path.join(cohort_dir, VOLUMES_DIR, f"{pid}_ct.nii"))
    pet = read_volume(os.path.join(cohort_dir, VOLUMES_DIR, f"{pid}_pet.nii"))
    labels = as_label_map(
        read_volume(os.path.join(cohort_dir, LABELS_DIR, f"{pid}.nii")))
    t = options.target_spacing
    ct = resample(ct, t, mode="spline")
    pet = resample(pet, t, mode="spline")
    labels = resample(labels, t, mode="nearest")
    box = union_bounding_box(ct, pet)
    ct = crop(ct, box, pad=CT_PAD)
    pet = crop(pet, box, pad=PET_PAD)
    mask = crop(merge_labels(labels), box, pad=0.0)
    return ct, pet, mask


def extract_tagged(ct, pet, mask, options: PipelineOptions):
    """Extract both modalities over one mask and tag by agreement."""
    ct_fv = extract_all(ct, mask, ExtractionParams(
        bin_width=options.ct_bin_width, glcm_distance=options.glcm_distance,
        modality_tag="CT"))
    pet_fv = extract_all(pet, mask, ExtractionParams(
        bin_width=options.pet_bin_width, glcm_distance=options.glcm_distance,
        modality_tag="PET"))
    return tag_modalities(ct_fv, pet_fv, tol=options.tag_tolerance)


def build_variant_tables(cohort_dir, ids, variants, options: PipelineOptions,
                         jobs: int = 1):
    """Per-variant map patient id -> tagged features or failure name.

    Each patient is preprocessed once and every mask variant is extracted from
    that shared preprocessing.  Work is per-patient parallel; results are
    reduced in id order, so the tables are identical for any job count.
    """
    labels = [v.label for v in variants]

    def work(pid):
        ct, pet, mask = preprocess_patient(cohort_dir, pid, options)
        out = {}
        for v in variants:
            try:
                out[v.label] = extract_tagged(ct, pet, v.apply(mask), options)
            except _EXTRACTION_ERRORS as exc:
                out[v.label] = type(exc).__name__
        return out

    if jobs == 1:
        per_patient = [work(pid) for pid in ids]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_patient = list(pool.map(work, ids))
    return {lab: {pid: res[lab] for pid, res in zip(ids, per_patient)}
            for lab in labels}


def _columns(dm: DesignMatrix, names) -> DesignMatrix:
    idx = [dm.column_names.index(n) for n in names]
    return DesignMatrix(X=dm.X[:, idx], column_names=tuple(names),
                        patient_ids=dm.patient_ids)


def _variant_exclusions(spec: ExperimentSpec, tables, ids_all):
    """Partition ids into extraction failures and survivors for one cell."""
    if not spec.needs_imaging:
        return (), list(ids_all)
    table = tables[spec.mask_variant.label]
    exclusions = tuple((pid, table[pid]) for pid in ids_all
                       if isinstance(table[pid], str))
    survivors = [pid for pid in ids_all if not isinstance(table[pid], str)]
    return exclusions, survivors


def _survivor_design(spec: ExperimentSpec, tables, clinical_by_id,
                     survivors) -> DesignMatrix:
    entries = [(pid, clinical_by_id[pid],
                tables[spec.mask_variant.label][pid] if spec.needs_imaging
                else None)
               for pid in survivors]
    return assemble_design_matrix(entries, set(spec.blocks))


def _run_cell(spec: ExperimentSpec, tables, clinical_by_id, outcomes_by_id,
              split, options: PipelineOptions,
              failure_threshold: float | None = None) -> ResultRow:
    ids_all = sorted(outcomes_by_id)
    train_ids, _, test_ids = split
    exclusions, survivors = _variant_exclusions(spec, tables, ids_all)

    n = len(ids_all)
    if failure_threshold is not None and len(exclusions) > failure_threshold * n:
        return ResultRow(spec=spec, n_patients=n, n_selected_features=0,
                         c_index_train=None, c_index_test=None,
                         exclusions=exclusions, annotation="extraction failed")
    if not survivors:
        raise CohortError("every patient failed extraction")

    alive = set(survivors)
    dm = _survivor_design(spec, tables, clinical_by_id, survivors)
    tr = [pid for pid in train_ids if pid in alive]
    te = [pid for pid in test_ids if pid in alive]
    if not tr:
        raise CohortError("the training split lost every patient to exclusions")

    recs_train = [outcomes_by_id[p] for p in tr]
    recs_test = [outcomes_by_id[p] for p in te]
    std_train, sp = standardize(dm.rows(tr))
    selection = select_features_cv(std_train, recs_train, k=options.k_folds,
                                   seed=spec.seed, n_lambdas=options.n_lambdas,
                                   ratio=options.lambda_ratio,
                                   rule=options.cv_rule)
    selected = selection.selected
    if selected:
        model = cox_fit(_columns(std_train, selected), recs_train,
                        compute_baseline=False)
        scores_train = predict_scores(model, _columns(std_train, selected))
    else:
        # nothing survived the penalty: an uninformative constant score
        scores_train = np.zeros(len(tr))

    notes = []
    try:
        c_train = concordance_index(scores_train, recs_train)
    except UndefinedCindexError:
        c_train, notes = None, notes + ["train c-index undefined"]
    # a test split reduced below 2 patients has no comparable pairs either
    c_test = None
    if len(te) >= 2:
        if selected:
            std_test = apply_standardization(dm.rows(te), sp)
            scores_test = predict_scores(model, _columns(std_test, selected))
        else:
            scores_test = np.zeros(len(te))
        try:
            c_test = concordance_index(scores_test, recs_test)
        except UndefinedCindexError:
            pass
    if c_test is None:
        notes.append("test c-index undefined")
    return ResultRow(spec=spec, n_patients=n,
                     n_selected_features=len(selected),
                     c_index_train=c_train, c_index_test=c_test,
                     exclusions=exclusions, annotation="; ".join(notes))


def run_experiment(cohort_dir, spec: ExperimentSpec,
                   options: PipelineOptions = PipelineOptions(),
                   jobs: int = 1) -> ResultRow:
    """Run one full pipeline cell on a cohort directory."""
    clinical, outcomes = load_cohort(cohort_dir)
    ids = [r.patient_id for r in outcomes]
    clin_fvs, _ = encode_cohort(clinical)
    clinical_by_id = dict(zip(ids, clin_fvs))
    outcomes_by_id = {r.patient_id: r for r in outcomes}
    split = split_cohort(outcomes, ratios=spec.split_ratios, seed=spec.seed)
    tables = {}
    if spec.needs_imaging:
        tables = build_variant_tables(cohort_dir, ids, [spec.mask_variant],
                                      options, jobs=jobs)
    return _run_cell(spec, tables, clinical_by_id, outcomes_by_id, split,
                     options)


@dataclass(frozen=True, eq=False)
class CellData:
    """One cell's assembled data, stopping right before any model fitting.

    This is the shared stem of the selection, fitting and evaluation stages:
    the raw design matrix over extraction survivors, the split id lists
    intersected with those survivors, and the training-split standardization.
    """

    dm: DesignMatrix
    std_train: DesignMatrix
    standardization: StandardizationParams
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    records_by_id: dict
    exclusions: tuple[tuple[str, str], ...]

    def records(self, ids) -> list:
        return [self.records_by_id[pid] for pid in ids]

    def split_ids(self, name: str) -> tuple[str, ...]:
        parts = {"train": self.train_ids, "val": self.val_ids,
                 "test": self.test_ids, "all": self.dm.patient_ids}
        if name not in parts:
            raise ArgumentError(f"split must be one of {sorted(parts)}, "
                                f"got {name!r}")
        return parts[name]


def prepare_cell(cohort_dir, spec: ExperimentSpec,
                 options: PipelineOptions = PipelineOptions(),
                 jobs: int = 1) -> CellData:
    """Load, extract, assemble, split and standardize one cell."""
    clinical, outcomes = load_cohort(cohort_dir)
    ids = [r.patient_id for r in outcomes]
    clin_fvs, _ = encode_cohort(clinical)
    clinical_by_id = dict(zip(ids, clin_fvs))
    records_by_id = {r.patient_id: r for r in outcomes}
    split = split_cohort(outcomes, ratios=spec.split_ratios, seed=spec.seed)
    tables = {}
    if spec.needs_imaging:
        tables = build_variant_tables(cohort_dir, ids, [spec.mask_variant],
                                      options, jobs=jobs)
    exclusions, survivors = _variant_exclusions(spec, tables, sorted(ids))
    if not survivors:
        raise CohortError("every patient failed extraction")
    dm = _survivor_design(spec, tables, clinical_by_id, survivors)
    alive = set(survivors)
    tr, va, te = ([pid for pid in part if pid in alive] for part in split)
    if not tr:
        raise CohortError("the training split lost every patient to exclusions")
    std_train, params = standardize(dm.rows(tr))
    return CellData(dm=dm, std_train=std_train, standardization=params,
                    train_ids=tuple(tr), val_ids=tuple(va), test_ids=tuple(te),
                    records_by_id=records_by_id, exclusions=exclusions)


def study_variants(radii) -> list[MaskVariant]:
    """The mask-variant sweep for a radii set.

    Dilation runs at every radius but erosion only at the smallest one:
    deeper erosion destroys small tumours cohort-wide, which is why
    reference tables omit those rows.  Requesting only larger radii still
    exercises deep erosion (and typically ends in annotated cells).
    """
    radii = sorted(set(int(r) for r in radii))
    if not radii:
        raise ArgumentError("at least one radius is required")
    if any(r < 1 for r in radii):
        raise ArgumentError("radii must be >= 1")
    variants = [GROUND_TRUTH, MaskVariant("eroded", radii[0])]
    variants.extend(MaskVariant("dilated", r) for r in radii)
    return variants


def run_perturbation_study(cohort_dir, radii=(1, 2), seed: int = 0,
                           options: PipelineOptions = PipelineOptions(),
                           jobs: int = 1) -> StudyResult:
    """Sweep mask variants against feature combinations.

    Emits the clinical-only baseline plus every variant crossed with the
    three imaging combinations (13 rows for radii {1, 2}), in fixed row
    order regardless of scheduling.  Cells where more than 20% of patients
    fail extraction are annotated instead of reported.
    """
    variants = study_variants(radii)
    clinical, outcomes = load_cohort(cohort_dir)
    ids = [r.patient_id for r in outcomes]
    clin_fvs, _ = encode_cohort(clinical)
    clinical_by_id = dict(zip(ids, clin_fvs))
    outcomes_by_id = {r.patient_id: r for r in outcomes}
    split = split_cohort(outcomes, seed=seed)

    timings = {}
    t0 = time.perf_counter()
    tables = build_variant_tables(cohort_dir, ids, variants, options,
                                  jobs=jobs)
    timings["extraction"] = time.perf_counter() - t0

    cells = [ExperimentSpec(blocks=COMBO_BLOCKS["clinical"], seed=seed)]
    for variant in variants:
        for combo in IMAGING_COMBOS:
            cells.append(ExperimentSpec(blocks=COMBO_BLOCKS[combo],
                                        mask_variant=variant, seed=seed))
    rows = []
    for spec in cells:
        t0 = time.perf_counter()
        row = _run_cell(spec, tables, clinical_by_id, outcomes_by_id, split,
                        options, failure_threshold=FAILURE_THRESHOLD)
        timings[row.key] = time.perf_counter() - t0
        rows.append(row)
    return StudyResult(rows=tuple(rows), seed=seed,
                       radii=tuple(sorted(set(int(r) for r in radii))),
                       n_patients=len(ids), config=asdict(options),
                       timings=timings)
