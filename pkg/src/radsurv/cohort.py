"""Clinical encoding, PET/CT feature tagging and design-matrix assembly.

Clinical variables follow the challenge encoding: the five status fields
(tobacco, alcohol, HPV, surgery, chemotherapy) become ternary values with
missing mapped to 0 and negative to -1; missing weight becomes 75 kg.  Gender
is coded M=0 / F=1 (0.5 when missing) and missing age is filled with the
cohort median.

CT and PET features extracted from the same merged mask agree exactly on the
mask-only (shape) features; those are deduplicated as ``common.<name>`` while
differing features are emitted per modality as ``ct.<name>`` / ``pet.<name>``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, CohortError, DataError
from .radiomics import FeatureVector

__all__ = [
    "ClinicalRecord",
    "DesignMatrix",
    "StandardizationParams",
    "CLINICAL_NAMES",
    "BLOCK_ORDER",
    "encode_clinical",
    "encode_cohort",
    "tag_modalities",
    "assemble_design_matrix",
    "standardize",
    "apply_standardization",
    "read_clinical_csv",
    "write_clinical_csv",
    "read_feature_csv",
    "write_feature_csv",
]

log = logging.getLogger(__name__)

CLINICAL_NAMES = (
    "clinical.gender",
    "clinical.age",
    "clinical.weight",
    "clinical.tobacco",
    "clinical.alcohol",
    "clinical.hpv",
    "clinical.surgery",
    "clinical.chemotherapy",
)

#: Fixed column-block order of assembled design matrices.
BLOCK_ORDER = ("clinical", "ct", "pet", "common")

_STATUS_FIELDS = ("tobacco", "alcohol", "hpv", "surgery", "chemotherapy")

#: Age fill-in when a record is encoded outside any cohort (no median known).
DEFAULT_AGE = 60.0
DEFAULT_WEIGHT = 75.0


@dataclass(frozen=True)
class ClinicalRecord:
    """One patient's clinical variables; ``None`` marks a missing value.

    ``performance_status`` and ``center_id`` are carried through file I/O but
    never encoded into features.
    """

    patient_id: str
    gender: str | None = None  # "M" / "F"
    age: float | None = None
    weight: float | None = None
    tobacco: bool | None = None  # True = positive status
    alcohol: bool | None = None
    hpv: bool | None = None
    surgery: bool | None = None
    chemotherapy: bool | None = None
    performance_status: str = ""
    center_id: str = ""

    def __post_init__(self):
        if not self.patient_id:
            raise ArgumentError("patient_id must be nonempty")
        if self.gender not in (None, "M", "F"):
            raise ArgumentError(f"gender must be 'M', 'F' or None, got {self.gender!r}")


def _ternary(status: bool | None) -> float:
    if status is None:
        return 0.0
    return 1.0 if status else -1.0


def encode_clinical(r: ClinicalRecord, age_fill: float = DEFAULT_AGE) -> FeatureVector:
    """Encode one record into the 8 clinical covariates.

    Total: every combination of present/missing fields encodes without error.
    ``age_fill`` substitutes for a missing age; :func:`encode_cohort` passes
    the cohort median here.
    """
    gender = {None: 0.5, "M": 0.0, "F": 1.0}[r.gender]
    values = [
        gender,
        float(r.age) if r.age is not None else float(age_fill),
        float(r.weight) if r.weight is not None else DEFAULT_WEIGHT,
    ] + [_ternary(getattr(r, f)) for f in _STATUS_FIELDS]
    return FeatureVector(CLINICAL_NAMES, np.array(values))


def encode_cohort(records: list[ClinicalRecord]) -> tuple[list[FeatureVector], list[str]]:
    """Encode all records, filling missing ages with the cohort median.

    Returns the encoded vectors in input order plus the ids of patients whose
    age was imputed.
    """
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise CohortError(f"duplicate patient ids in cohort: {dupes}")
    ages = [r.age for r in records if r.age is not None]
    median_age = float(np.median(ages)) if ages else DEFAULT_AGE
    flagged = [r.patient_id for r in records if r.age is None]
    if flagged:
        log.warning("imputed median age %.1f for %d patients: %s",
                    median_age, len(flagged), flagged)
    return [encode_clinical(r, age_fill=median_age) for r in records], flagged


# ---------------------------------------------------------------------------
# Modality tagging
# ---------------------------------------------------------------------------

def tag_modalities(ct: FeatureVector, pet: FeatureVector, tol: float = 0.0) -> FeatureVector:
    """Deduplicate per-modality features that carry the same value.

    A feature equal in CT and PET (exactly by default; within ``tol`` for
    resampled pipelines) is emitted once as ``common.<name>``; otherwise both
    ``ct.<name>`` and ``pet.<name>`` appear.  Output order follows the input
    name order.
    """
    if ct.names != pet.names:
        raise ArgumentError("ct and pet feature vectors must share the same name list")
    names: list[str] = []
    values: list[float] = []
    for i, name in enumerate(ct.names):
        a = float(ct.values[i])
        b = float(pet.values[i])
        same = a == b if tol == 0.0 else abs(a - b) <= tol
        if same:
            names.append(f"common.{name}")
            values.append(a)
        else:
            names.append(f"ct.{name}")
            values.append(a)
            names.append(f"pet.{name}")
            values.append(b)
    return FeatureVector(tuple(names), np.array(values))


def _split_tag(name: str) -> tuple[str, str]:
    prefix, base = name.split(".", 1)
    return prefix, base


def _modality_value(tagged: FeatureVector, modality: str, base: str) -> float:
    """Value of feature ``base`` for ``modality``, reading through common tags."""
    if f"common.{base}" in tagged.names:
        return tagged[f"common.{base}"]
    return tagged[f"{modality}.{base}"]


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignMatrix:
    """Aligned covariate matrix: one row per patient, named columns."""

    X: np.ndarray
    column_names: tuple[str, ...]
    patient_ids: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ArgumentError(f"X must be 2D, got ndim={X.ndim}")
        if X.shape != (len(self.patient_ids), len(self.column_names)):
            raise ArgumentError(
                f"X shape {X.shape} does not match {len(self.patient_ids)} patients "
                f"x {len(self.column_names)} columns"
            )
        if len(set(self.column_names)) != len(self.column_names):
            raise ArgumentError("column names must be unique")
        if len(set(self.patient_ids)) != len(self.patient_ids):
            raise ArgumentError("patient ids must be unique")
        if not np.all(np.isfinite(X)):
            raise DataError("design matrix contains non-finite values")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "patient_ids", tuple(self.patient_ids))

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.column_names.index(name)]

    def rows(self, ids: list[str]) -> "DesignMatrix":
        """Row subset in the given id order."""
        index = {pid: i for i, pid in enumerate(self.patient_ids)}
        missing = [pid for pid in ids if pid not in index]
        if missing:
            raise ArgumentError(f"unknown patient ids: {missing}")
        sel = [index[pid] for pid in ids]
        return DesignMatrix(self.X[sel], self.column_names, tuple(ids))

    def columns(self, names) -> "DesignMatrix":
        """Column subset in the given name order."""
        missing = [n for n in names if n not in self.column_names]
        if missing:
            raise ArgumentError(f"unknown columns: {missing}")
        sel = [self.column_names.index(n) for n in names]
        return DesignMatrix(self.X[:, sel], tuple(names), self.patient_ids)


def assemble_design_matrix(
    cohort: list[tuple[str, FeatureVector, FeatureVector | None]],
    blocks: set[str],
) -> DesignMatrix:
    """Build the covariate matrix for the requested feature blocks.

    ``cohort`` holds ``(patient_id, clinical, tagged_imaging)`` per patient;
    ``tagged_imaging`` is ``None`` when extraction failed for that patient.
    Blocks are any subset of {clinical, ct, pet, common}.  Rows are sorted by
    patient id; patients lacking a requested imaging block are excluded.

    A feature counts as cohort-common only when it tagged common for every
    included patient; features common for some patients only are emitted per
    modality for everyone, so columns stay rectangular.
    """
    blocks = set(blocks)
    unknown = blocks - set(BLOCK_ORDER)
    if unknown:
        raise ArgumentError(f"unknown blocks {sorted(unknown)}; valid: {BLOCK_ORDER}")
    if not blocks:
        raise ArgumentError("at least one feature block is required")
    needs_imaging = bool(blocks - {"clinical"})

    entries = sorted(cohort, key=lambda e: e[0])
    if needs_imaging:
        excluded = [pid for pid, _, tagged in entries if tagged is None]
        if excluded:
            log.warning("excluding %d patients without imaging features: %s",
                        len(excluded), excluded)
        entries = [e for e in entries if e[2] is not None]
    if not entries:
        raise CohortError("no patients left after excluding extraction failures")

    base_order: list[str] = []
    common_bases: set[str] = set()
    if needs_imaging:
        first = entries[0][2]
        for tag in first.names:
            prefix, base = _split_tag(tag)
            if base not in base_order and prefix in ("common", "ct"):
                base_order.append(base)
        per_patient_common = [
            {b for t in tagged.names for p, b in [_split_tag(t)] if p == "common"}
            for _, _, tagged in entries
        ]
        for _, _, tagged in entries:
            bases = {_split_tag(t)[1] for t in tagged.names}
            if bases != set(base_order):
                raise ArgumentError("patients carry different imaging feature sets")
        common_bases = set.intersection(*per_patient_common)

    columns: list[str] = []
    specific = [b for b in base_order if b not in common_bases]
    if "clinical" in blocks:
        columns.extend(CLINICAL_NAMES)
    if "ct" in blocks:
        columns.extend(f"ct.{b}" for b in specific)
    if "pet" in blocks:
        columns.extend(f"pet.{b}" for b in specific)
    if "common" in blocks:
        columns.extend(f"common.{b}" for b in base_order if b in common_bases)

    rows = np.zeros((len(entries), len(columns)))
    for i, (pid, clinical, tagged) in enumerate(entries):
        vals: list[float] = []
        if "clinical" in blocks:
            if clinical.names != CLINICAL_NAMES:
                raise ArgumentError(f"{pid}: clinical vector has unexpected names")
            vals.extend(clinical.values)
        if "ct" in blocks:
            vals.extend(_modality_value(tagged, "ct", b) for b in specific)
        if "pet" in blocks:
            vals.extend(_modality_value(tagged, "pet", b) for b in specific)
        if "common" in blocks:
            vals.extend(tagged[f"common.{b}"] for b in base_order if b in common_bases)
        rows[i] = vals
    return DesignMatrix(rows, tuple(columns), tuple(pid for pid, _, _ in entries))


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationParams:
    """Per-column centering/scale learned on one split, reusable on others."""

    column_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    dropped: tuple[str, ...]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (len(self.column_names),) or std.shape != mean.shape:
            raise ArgumentError("mean/std must align with column_names")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "dropped", tuple(self.dropped))


def standardize(dm: DesignMatrix) -> tuple[DesignMatrix, StandardizationParams]:
    """Z-score columns with population standard deviation.

    Constant columns carry no information and break the scaling, so they are
    dropped (and recorded on the returned params).
    """
    mean = dm.X.mean(axis=0)
    std = dm.X.std(axis=0)  # population (ddof=0)
    keep = std > 0
    dropped = tuple(n for n, k in zip(dm.column_names, keep) if not k)
    if dropped:
        log.warning("dropping %d constant columns: %s", len(dropped), list(dropped))
    params = StandardizationParams(
        column_names=tuple(n for n, k in zip(dm.column_names, keep) if k),
        mean=mean[keep],
        std=std[keep],
        dropped=dropped,
    )
    return apply_standardization(dm, params), params


def apply_standardization(dm: DesignMatrix, params: StandardizationParams) -> DesignMatrix:
    """Apply stored parameters to another matrix over the same columns."""
    missing = [n for n in params.column_names if n not in dm.column_names]
    if missing:
        raise ArgumentError(f"matrix lacks columns required by params: {missing}")
    sel = [dm.column_names.index(n) for n in params.column_names]
    Z = (dm.X[:, sel] - params.mean) / params.std
    return DesignMatrix(Z, params.column_names, dm.patient_ids)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

_CLINICAL_HEADER = [
    "patient_id", "gender", "age", "weight", "tobacco", "alcohol", "hpv",
    "surgery", "chemotherapy", "performance_status", "center_id",
]


def _parse_binary(cell: str, field: str, path) -> bool | None:
    if cell == "":
        return None
    if cell == "1":
        return True
    if cell == "0":
        return False
    raise DataError(f"{path}: {field} must be 0, 1 or empty, got {cell!r}")


def read_clinical_csv(path) -> list[ClinicalRecord]:
    """Read clinical records; empty cells are missing, binaries are 0/1."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _CLINICAL_HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        records = []
        for row in reader:
            if len(row) != len(_CLINICAL_HEADER):
                raise DataError(f"{path}: row has {len(row)} cells, expected "
                                f"{len(_CLINICAL_HEADER)}: {row}")
            cells = dict(zip(_CLINICAL_HEADER, row))
            gender = cells["gender"]
            if gender not in ("", "M", "F"):
                raise DataError(f"{path}: gender must be M, F or empty, got {gender!r}")
            records.append(ClinicalRecord(
                patient_id=cells["patient_id"],
                gender=gender or None,
                age=float(cells["age"]) if cells["age"] else None,
                weight=float(cells["weight"]) if cells["weight"] else None,
                tobacco=_parse_binary(cells["tobacco"], "tobacco", path),
                alcohol=_parse_binary(cells["alcohol"], "alcohol", path),
                hpv=_parse_binary(cells["hpv"], "hpv", path),
                surgery=_parse_binary(cells["surgery"], "surgery", path),
                chemotherapy=_parse_binary(cells["chemotherapy"], "chemotherapy", path),
                performance_status=cells["performance_status"],
                center_id=cells["center_id"],
            ))
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate patient ids")
    return records


def write_clinical_csv(records: list[ClinicalRecord], path) -> None:
    def binary(v: bool | None) -> str:
        return "" if v is None else ("1" if v else "0")

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CLINICAL_HEADER)
        for r in records:
            writer.writerow([
                r.patient_id,
                r.gender or "",
                repr(float(r.age)) if r.age is not None else "",
                repr(float(r.weight)) if r.weight is not None else "",
                binary(r.tobacco), binary(r.alcohol), binary(r.hpv),
                binary(r.surgery), binary(r.chemotherapy),
                r.performance_status, r.center_id,
            ])


def read_feature_csv(path) -> tuple[list[str], tuple[str, ...], np.ndarray]:
    """Read a per-patient feature table: (patient ids, names, values)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "patient_id":
            raise DataError(f"{path}: first column must be patient_id")
        names = tuple(header[1:])
        ids = []
        rows = []
        for row in reader:
            if len(row) != len(header):
                raise DataError(f"{path}: ragged row for {row[:1]}")
            ids.append(row[0])
            rows.append([float(c) for c in row[1:]])
    return ids, names, np.array(rows, dtype=np.float64).reshape(len(ids), len(names))


def write_feature_csv(path, ids: list[str], vectors: list[FeatureVector]) -> None:
    """Write one row per patient; float cells use repr for byte-stable output."""
    if len(ids) != len(vectors):
        raise ArgumentError(f"{len(ids)} ids but {len(vectors)} vectors")
    if not vectors:
        raise ArgumentError("nothing to write")
    names = vectors[0].names
    for pid, fv in zip(ids, vectors):
        if fv.names != names:
            raise ArgumentError(f"{pid}: feature names differ from first patient")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", *names])
        for pid, fv in zip(ids, vectors):
            writer.writerow([pid, *(repr(float(v)) for v in fv.values)])
