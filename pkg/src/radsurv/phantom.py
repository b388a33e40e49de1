"""Synthetic CT/PET cohorts with known survival ground truth.

Generates textured ellipsoid tumours on desk-scale grids together with
outcomes drawn from a proportional-hazards model whose coefficients act on
features the extraction pipeline can actually measure (tumour volume, PET
intensity mean and variance, age).  Everything is driven by counter-based
per-patient RNG streams, so generation is bit-reproducible under any
scheduling of patients.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .cohort import ClinicalRecord, DesignMatrix, write_clinical_csv
from .errors import ArgumentError
from .survival import SurvivalRecord, write_outcome_csv
from .volume import LabelMap, VoxelGrid, write_volume

CT_AIR = -1000.0
CT_SOFT_TISSUE = 40.0
CT_TUMOUR = 60.0
CT_BACKGROUND_NOISE = 3.0
PET_BACKGROUND = 0.5
PET_BACKGROUND_NOISE = 0.05
PET_TEXTURE_SCALE = 0.12  # PET texture sd per unit of the patient noise sigma

VOLUMES_DIR = "volumes"
LABELS_DIR = "labels"
CLINICAL_CSV = "clinical.csv"
OUTCOMES_CSV = "outcomes.csv"
TRUTH_JSON = "truth.json"

# design-matrix names of the features the hazard acts on, in beta order
INFORMATIVE_FEATURES = (
    "common.shape.voxel_volume",
    "pet.firstorder.variance",
    "pet.firstorder.mean",
)

_CENTER_JITTER = 3.0  # voxels
_TABULAR_STREAM = 1 << 32  # outside any valid patient index


@dataclass(frozen=True, eq=False)
class PhantomParams:
    """Cohort-level generation parameters; all lengths below are voxels."""

    n_patients: int
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 2.0
    semi_axes_range: tuple[float, float] = (3.0, 8.0)
    noise_sigma_range: tuple[float, float] = (1.0, 9.0)
    uptake_range: tuple[float, float] = (2.0, 8.0)
    beta: tuple[float, float, float] = (1.0, -0.5, 0.8)
    beta_age: float = 0.5
    h0_per_day: float = 0.002
    horizon_days: float = 1500.0
    seed: int = 0
    gtvn_probability: float = 0.3
    fragile_fraction: float = 0.0
    fragile_semi_axes: float = 2.0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ArgumentError("n_patients must be at least 1")
        if len(self.dims) != 3 or any(int(n) < 16 for n in self.dims):
            raise ArgumentError("dims must be three extents of at least 16 voxels")
        if self.spacing_mm <= 0.0:
            raise ArgumentError("spacing_mm must be positive")
        lo, hi = self.semi_axes_range
        if not (0.0 < lo <= hi):
            raise ArgumentError("semi_axes_range must be 0 < lo <= hi")
        if lo < 3.0:
            raise ArgumentError("semi-axes under 3 voxels erode away; use "
                                "fragile_fraction to generate fragile cases")
        if hi > 0.25 * min(self.dims):
            raise ArgumentError("largest semi-axis must fit inside the body")
        s_lo, s_hi = self.noise_sigma_range
        if not (0.0 <= s_lo <= s_hi):
            raise ArgumentError("noise_sigma_range must be 0 <= lo <= hi")
        u_lo, u_hi = self.uptake_range
        if not (0.0 < u_lo <= u_hi):
            raise ArgumentError("uptake_range must be 0 < lo <= hi")
        if len(self.beta) != 3:
            raise ArgumentError("beta must have one entry per informative feature")
        if self.h0_per_day <= 0.0:
            raise ArgumentError("h0_per_day must be positive")
        if self.horizon_days <= 0.0:
            raise ArgumentError("horizon_days must be positive")
        if self.seed < 0:
            raise ArgumentError("seed must be non-negative")
        if not 0.0 <= self.gtvn_probability <= 1.0:
            raise ArgumentError("gtvn_probability must lie in [0, 1]")
        if not 0.0 <= self.fragile_fraction <= 1.0:
            raise ArgumentError("fragile_fraction must lie in [0, 1]")
        if self.fragile_semi_axes <= 0.0:
            raise ArgumentError("fragile_semi_axes must be positive")


@dataclass(frozen=True)
class GeneratingFeatures:
    """True per-patient quantities the hazard acts on."""

    volume_mm3: float
    sigma: float
    amplitude: float

    def vector(self) -> np.ndarray:
        # the measurable counterparts, in INFORMATIVE_FEATURES order: the PET
        # texture sd is PET_TEXTURE_SCALE * sigma, its variance the square
        return np.array([self.volume_mm3,
                         (PET_TEXTURE_SCALE * self.sigma) ** 2,
                         self.amplitude])


@dataclass(frozen=True)
class _PatientDraw:
    # every scalar sampled for one patient, in stream order
    u_survival: float
    fragile: bool
    semi_axes: np.ndarray
    center: np.ndarray
    sigma: float
    amplitude: float
    has_gtvn: bool
    gtvn_axis: int
    gtvn_sign: float
    clinical: ClinicalRecord


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, index]))


def patient_id(index: int) -> str:
    return f"P{index:03d}"


def _draw_ternary(rng: np.random.Generator, p_missing: float = 0.12,
                  p_positive: float = 0.45):
    u_missing, u_value = rng.uniform(size=2)
    if u_missing < p_missing:
        return None
    return bool(u_value < p_positive)


def _draw_patient(params: PhantomParams, index: int,
                  rng: np.random.Generator) -> _PatientDraw:
    """All scalar draws for one patient, in a fixed order.

    The survival uniform comes first so simulate_survival and generate_case
    read the same value from the same per-patient stream.
    """
    u_survival = float(rng.uniform())
    fragile = index < round(params.fragile_fraction * params.n_patients)
    if fragile:
        semi = np.full(3, params.fragile_semi_axes)
        rng.uniform(size=3)  # keep the stream aligned with the normal branch
    else:
        semi = rng.uniform(*params.semi_axes_range, size=3)
    center = (np.asarray(params.dims) - 1) / 2.0 \
        + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER, size=3)
    sigma = float(rng.uniform(*params.noise_sigma_range))
    amplitude = float(rng.uniform(*params.uptake_range))
    u_gtvn = float(rng.uniform())
    gtvn_axis = int(rng.integers(3))
    gtvn_sign = float(rng.choice((-1.0, 1.0)))
    has_gtvn = (not fragile) and u_gtvn < params.gtvn_probability

    gender = "M" if rng.uniform() < 0.5 else "F"
    age = float(np.clip(rng.normal(61.0, 9.0), 25.0, 90.0))
    if rng.uniform() < 0.05:
        age = None
    weight = float(np.clip(rng.normal(78.0, 13.0), 40.0, 140.0))
    if rng.uniform() < 0.05:
        weight = None
    clinical = ClinicalRecord(
        patient_id=patient_id(index),
        gender=gender,
        age=age,
        weight=weight,
        tobacco=_draw_ternary(rng),
        alcohol=_draw_ternary(rng),
        hpv=_draw_ternary(rng, p_positive=0.6),
        surgery=_draw_ternary(rng, p_missing=0.05),
        chemotherapy=_draw_ternary(rng, p_missing=0.05, p_positive=0.7),
        performance_status=str(int(rng.integers(0, 3))),
        center_id=f"C{int(rng.integers(1, 5))}",
    )
    return _PatientDraw(u_survival, fragile, semi, center, sigma, amplitude,
                        has_gtvn, gtvn_axis, gtvn_sign, clinical)


def _ellipsoid(dims, center, semi) -> np.ndarray:
    # strict interior membership of voxel centers; the boundary surface itself
    # carries no volume, and the open form lets a radius-2 tumour erode to
    # nothing under a radius-2 structuring element
    ax = [(np.arange(n) - c) / s for n, c, s in zip(dims, center, semi)]
    q = (ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2
         + ax[2][None, None, :] ** 2)
    return q < 1.0


def generate_case(params: PhantomParams, index: int):
    """Synthesize one patient: (ct, pet, labels, generating_features).

    CT holds air around a soft-tissue body with the tumour 20 HU above it;
    PET holds a faint background with tumour uptake at the patient amplitude.
    Texture noise inside the tumour uses the patient sigma (CT) and its
    PET-scaled version (PET).
    """
    if not 0 <= index < params.n_patients:
        raise ArgumentError(f"patient index {index} outside cohort of "
                            f"{params.n_patients}")
    rng = _stream(params.seed, index)
    draw = _draw_patient(params, index, rng)
    dims = tuple(int(n) for n in params.dims)
    spacing = (params.spacing_mm,) * 3
    origin = (0.0, 0.0, 0.0)

    primary = _ellipsoid(dims, draw.center, draw.semi_axes)
    lab = np.zeros(dims, dtype=np.uint8)
    lab[primary] = 1
    if draw.has_gtvn:
        gtvn_semi = np.maximum(0.45 * draw.semi_axes, 2.5)
        offset = np.zeros(3)
        offset[draw.gtvn_axis] = draw.gtvn_sign * (
            draw.semi_axes[draw.gtvn_axis] + gtvn_semi[draw.gtvn_axis] + 1.0)
        nodal = _ellipsoid(dims, draw.center + offset, gtvn_semi)
        lab[nodal & (lab == 0)] = 2
    tumour = lab > 0
    n_tumour = int(tumour.sum())

    body_semi = 0.42 * np.asarray(dims)
    body = _ellipsoid(dims, (np.asarray(dims) - 1) / 2.0, body_semi)

    ct = rng.normal(CT_AIR, CT_BACKGROUND_NOISE, size=dims)
    ct[body] = rng.normal(CT_SOFT_TISSUE, CT_BACKGROUND_NOISE, size=int(body.sum()))
    ct[tumour] = CT_TUMOUR + rng.normal(0.0, draw.sigma, size=n_tumour)

    pet = rng.normal(PET_BACKGROUND, PET_BACKGROUND_NOISE, size=dims)
    np.clip(pet, 0.0, None, out=pet)
    pet[tumour] = draw.amplitude + rng.normal(
        0.0, PET_TEXTURE_SCALE * draw.sigma, size=n_tumour)

    volume_mm3 = float((lab == 1).sum() + (lab == 2).sum()) * params.spacing_mm ** 3
    feats = GeneratingFeatures(volume_mm3=volume_mm3, sigma=draw.sigma,
                               amplitude=draw.amplitude)
    ct_grid = VoxelGrid(values=ct, spacing=spacing, origin=origin)
    pet_grid = VoxelGrid(values=pet, spacing=spacing, origin=origin)
    labels = LabelMap(values=lab, spacing=spacing, origin=origin)
    return ct_grid, pet_grid, labels, feats


def simulate_survival(features, beta, h0_per_day: float, horizon_days: float,
                      seed: int, patient_index: int = 0,
                      pid: str | None = None) -> SurvivalRecord:
    """Draw one outcome from h(t) = h0 * exp(beta . z) by inversion.

    ``features`` must already be standardized.  T = -ln(U) / (h0 exp(beta.z));
    the record is censored at the horizon.  Reads the first uniform of the
    per-patient stream, the same value cohort generation uses.
    """
    z = np.asarray(features, dtype=float)
    b = np.asarray(beta, dtype=float)
    if z.shape != b.shape:
        raise ArgumentError("features and beta must have matching shapes")
    if h0_per_day <= 0.0 or horizon_days <= 0.0:
        raise ArgumentError("h0_per_day and horizon_days must be positive")
    u = float(_stream(seed, patient_index).uniform())
    with np.errstate(divide="ignore"):
        t = -np.log(u) / (h0_per_day * np.exp(float(z @ b)))
    event = bool(t <= horizon_days)
    return SurvivalRecord(patient_id=pid if pid is not None
                          else patient_id(patient_index),
                          time=float(min(t, horizon_days)), event=event)


def _standardize_columns(z: np.ndarray) -> np.ndarray:
    sd = z.std(axis=0)
    sd[sd == 0.0] = 1.0
    return (z - z.mean(axis=0)) / sd


def write_cohort(params: PhantomParams, out_dir: str, jobs: int = 1) -> dict:
    """Write the full cohort directory and return its truth record.

    Layout: volumes/<id>_ct.nii, volumes/<id>_pet.nii, labels/<id>.nii,
    clinical.csv, outcomes.csv, truth.json.  truth.json records the generating
    features, hazard and per-patient draws; the pipeline never reads it.
    """
    if jobs < 1:
        raise ArgumentError("jobs must be at least 1")
    vol_dir = os.path.join(out_dir, VOLUMES_DIR)
    lab_dir = os.path.join(out_dir, LABELS_DIR)
    os.makedirs(vol_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)

    def build(index: int):
        ct, pet, labels, feats = generate_case(params, index)
        pid = patient_id(index)
        write_volume(ct, os.path.join(vol_dir, f"{pid}_ct.nii"))
        write_volume(pet, os.path.join(vol_dir, f"{pid}_pet.nii"))
        write_volume(labels, os.path.join(lab_dir, f"{pid}.nii"), dtype="u8")
        return feats

    if jobs == 1:
        features = [build(i) for i in range(params.n_patients)]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            features = list(pool.map(build, range(params.n_patients)))

    clinical = []
    ages = []
    for i in range(params.n_patients):
        draw = _draw_patient(params, i, _stream(params.seed, i))
        clinical.append(draw.clinical)
        ages.append(draw.clinical.age)
    known = [a for a in ages if a is not None]
    age_fill = float(np.median(known)) if known else 60.0
    age_col = np.array([age_fill if a is None else a for a in ages])

    z = np.array([f.vector() for f in features])
    z_full = np.column_stack([z, age_col])
    z_std = _standardize_columns(z_full)
    beta_full = np.array([*params.beta, params.beta_age])

    records = [simulate_survival(z_std[i], beta_full, params.h0_per_day,
                                 params.horizon_days, params.seed, i)
               for i in range(params.n_patients)]
    write_clinical_csv(clinical, os.path.join(out_dir, CLINICAL_CSV))
    write_outcome_csv(records, os.path.join(out_dir, OUTCOMES_CSV))

    n_fragile = round(params.fragile_fraction * params.n_patients)
    truth = {
        "seed": params.seed,
        "h0_per_day": params.h0_per_day,
        "horizon_days": params.horizon_days,
        "beta": dict(zip((*INFORMATIVE_FEATURES, "clinical.age"),
                         beta_full.tolist())),
        "eta": {patient_id(i): float(z_std[i] @ beta_full)
                for i in range(params.n_patients)},
        "patients": {
            patient_id(i): {
                "volume_mm3": features[i].volume_mm3,
                "sigma": features[i].sigma,
                "amplitude": features[i].amplitude,
                "fragile": i < n_fragile,
                "time": records[i].time,
                "event": records[i].event,
            }
            for i in range(params.n_patients)
        },
    }
    with open(os.path.join(out_dir, TRUTH_JSON), "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    return truth


def simulate_tabular_cohort(n: int, seed: int, n_noise: int = 27,
                            beta_informative=(1.0, -0.5, 0.8),
                            beta_clinical=(0.35, -0.25),
                            h0_per_day: float = 9e-4,
                            horizon_days: float = 2000.0):
    """Image-free cohort: known-hazard outcomes over a plain feature matrix.

    Columns are two weak clinical covariates, the three informative features
    and ``n_noise`` pure-noise columns, all standard normal.  Returns
    (DesignMatrix, records, truth) where truth carries the true risk scores
    and the informative column names.
    """
    if n < 4:
        raise ArgumentError("need at least 4 patients")
    if n_noise < 0:
        raise ArgumentError("n_noise must be non-negative")
    if seed < 0:
        raise ArgumentError("seed must be non-negative")
    rng = _stream(seed, _TABULAR_STREAM)
    names = ("clinical.age", "clinical.gender",
             *INFORMATIVE_FEATURES,
             *(f"noise.{j:02d}" for j in range(n_noise)))
    X = rng.standard_normal((n, len(names)))
    beta = np.array([*beta_clinical, *beta_informative, *np.zeros(n_noise)])
    eta = _standardize_columns(X) @ beta
    u = rng.uniform(size=n)
    with np.errstate(divide="ignore"):
        t = -np.log(u) / (h0_per_day * np.exp(eta))
    ids = tuple(patient_id(i) for i in range(n))
    dm = DesignMatrix(X=X, column_names=names, patient_ids=ids)
    records = [SurvivalRecord(patient_id=ids[i],
                              time=float(min(t[i], horizon_days)),
                              event=bool(t[i] <= horizon_days))
               for i in range(n)]
    truth = {
        "informative": INFORMATIVE_FEATURES,
        "clinical": names[:2],
        "beta": dict(zip(names, beta.tolist())),
        "eta": {ids[i]: float(eta[i]) for i in range(n)},
    }
    return dm, records, truth
