"""Synthetic cohort generator: geometry, hazard inversion, reproducibility."""

import os

import numpy as np
import pytest

from radsurv.cohort import DesignMatrix, read_clinical_csv
from radsurv.errors import ArgumentError
from radsurv.morphology import ball_element, erode
from radsurv.phantom import (
    CT_TUMOUR,
    INFORMATIVE_FEATURES,
    PhantomParams,
    generate_case,
    patient_id,
    simulate_survival,
    simulate_tabular_cohort,
    write_cohort,
)
from radsurv.survival import concordance_index, cox_fit, read_outcome_csv
from radsurv.volume import Mask, merge_labels


def test_params_validation():
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=0)
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=5, semi_axes_range=(2.0, 8.0))
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=5, semi_axes_range=(8.0, 3.0))
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=5, h0_per_day=0.0)
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=5, seed=-1)
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=5, gtvn_probability=1.5)
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=5, dims=(64, 64, 8))
    with pytest.raises(ArgumentError):
        PhantomParams(n_patients=5, semi_axes_range=(3.0, 40.0))
    # small tumours are allowed when asked for deliberately
    PhantomParams(n_patients=5, fragile_fraction=0.5, fragile_semi_axes=2.0)


def test_case_index_bounds():
    p = PhantomParams(n_patients=2)
    with pytest.raises(ArgumentError):
        generate_case(p, 2)
    with pytest.raises(ArgumentError):
        generate_case(p, -1)


def test_spherical_tumour_volume_matches_continuum():
    p = PhantomParams(n_patients=2, semi_axes_range=(10.0, 10.0),
                      gtvn_probability=0.0, seed=4)
    for i in range(2):
        _, _, lab, feats = generate_case(p, i)
        count = int((lab.values == 1).sum())
        ideal = 4.0 / 3.0 * np.pi * 10.0 ** 3
        assert abs(count - ideal) / ideal < 0.05
        assert feats.volume_mm3 == count * p.spacing_mm ** 3


def test_zero_sigma_makes_ct_roi_constant():
    p = PhantomParams(n_patients=1, noise_sigma_range=(0.0, 0.0),
                      gtvn_probability=0.0, seed=2)
    ct, pet, lab, feats = generate_case(p, 0)
    roi = ct.values[lab.values == 1]
    assert np.all(roi == CT_TUMOUR)
    assert feats.sigma == 0.0
    pet_roi = pet.values[lab.values == 1]
    assert np.all(pet_roi == pet_roi[0])  # PET texture also scales with sigma


def test_gtvn_present_and_disjoint():
    p = PhantomParams(n_patients=1, gtvn_probability=1.0, seed=9)
    _, _, lab, _ = generate_case(p, 0)
    assert sorted(np.unique(lab.values).tolist()) == [0, 1, 2]
    merged = merge_labels(lab)
    assert merged.voxel_count() == (lab.values == 1).sum() + (lab.values == 2).sum()


def test_fragile_tumours_erode_to_nothing_at_radius_two():
    p = PhantomParams(n_patients=4, fragile_fraction=1.0, seed=3)
    for i in range(4):
        _, _, lab, _ = generate_case(p, i)
        m = Mask(values=lab.values > 0, spacing=lab.spacing, origin=lab.origin)
        assert 0 < m.voxel_count() < 40
        assert erode(m, ball_element(1)).voxel_count() > 0
        assert erode(m, ball_element(2)).voxel_count() == 0


def test_survival_zero_beta_is_exponential():
    times = [simulate_survival([0.0], [0.0], 0.01, 1e12, seed=77,
                               patient_index=i).time
             for i in range(10000)]
    assert abs(np.mean(times) - 100.0) / 100.0 < 0.05


def test_survival_higher_risk_is_earlier():
    lo = simulate_survival([0.0], [1.0], 0.001, 1e12, seed=5)
    hi = simulate_survival([4.0], [1.0], 0.001, 1e12, seed=5)
    assert hi.time < lo.time  # same uniform, larger hazard


def test_survival_tiny_horizon_censors_everything():
    for i in range(20):
        r = simulate_survival([0.0], [0.0], 1e-9, 0.5, seed=1, patient_index=i)
        assert not r.event and r.time == 0.5


def test_survival_rejects_mismatched_shapes():
    with pytest.raises(ArgumentError):
        simulate_survival([0.0, 1.0], [1.0], 0.01, 100.0, seed=0)
    with pytest.raises(ArgumentError):
        simulate_survival([0.0], [1.0], -0.01, 100.0, seed=0)


def test_generate_case_is_reproducible():
    p = PhantomParams(n_patients=2, seed=21)
    ct1, pet1, lab1, f1 = generate_case(p, 1)
    ct2, pet2, lab2, f2 = generate_case(p, 1)
    assert np.array_equal(ct1.values, ct2.values)
    assert np.array_equal(pet1.values, pet2.values)
    assert np.array_equal(lab1.values, lab2.values)
    assert f1 == f2


def test_write_cohort_layout_and_parallel_determinism(tmp_path):
    p = PhantomParams(n_patients=4, seed=11)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    truth = write_cohort(p, str(d1))
    write_cohort(p, str(d2), jobs=2)
    for rel in ("volumes/P000_ct.nii", "volumes/P002_pet.nii",
                "labels/P003.nii", "clinical.csv", "outcomes.csv",
                "truth.json"):
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()
    clin = read_clinical_csv(d1 / "clinical.csv")
    recs = read_outcome_csv(d1 / "outcomes.csv")
    assert [c.patient_id for c in clin] == [patient_id(i) for i in range(4)]
    assert len(recs) == 4
    for r in recs:
        assert r.event == (r.time < p.horizon_days) or r.time == p.horizon_days
    assert set(truth["beta"]) == set(INFORMATIVE_FEATURES) | {"clinical.age"}
    assert len(os.listdir(d1 / "volumes")) == 8


def test_true_beta_recoverable_from_true_features():
    # refitting on the generating covariates recovers the hazard coefficients
    true = np.array([1.0, -0.5, 0.8])
    ok = 0
    for seed in range(50):
        dm, recs, _ = simulate_tabular_cohort(500, seed=seed)
        sub = dm.X[:, :5]
        z = (sub - sub.mean(axis=0)) / sub.std(axis=0)
        dmz = DesignMatrix(X=z, column_names=dm.column_names[:5],
                           patient_ids=dm.patient_ids)
        model = cox_fit(dmz, recs, compute_baseline=False)
        if np.abs(model.beta[2:5] - true).max() <= 0.15:
            ok += 1
    assert ok >= 45


def test_tabular_truth_scores_are_discriminative():
    dm, recs, truth = simulate_tabular_cohort(400, seed=5)
    eta = np.array([truth["eta"][r.patient_id] for r in recs])
    assert concordance_index(eta, recs) > 0.70


def test_tabular_shapes_names_and_determinism():
    dm, recs, truth = simulate_tabular_cohort(60, seed=3, n_noise=27)
    assert dm.X.shape == (60, 32)
    assert dm.column_names[:2] == ("clinical.age", "clinical.gender")
    assert dm.column_names[2:5] == INFORMATIVE_FEATURES
    assert all(n.startswith("noise.") for n in dm.column_names[5:])
    dm2, recs2, truth2 = simulate_tabular_cohort(60, seed=3, n_noise=27)
    assert np.array_equal(dm.X, dm2.X)
    assert recs == recs2
    assert truth == truth2
    # the recorded risk scores follow from the recorded coefficients
    beta = np.array([truth["beta"][n] for n in dm.column_names])
    z = (dm.X - dm.X.mean(axis=0)) / dm.X.std(axis=0)
    eta = np.array([truth["eta"][pid] for pid in dm.patient_ids])
    assert np.allclose(z @ beta, eta)


def test_tabular_validation():
    with pytest.raises(ArgumentError):
        simulate_tabular_cohort(2, seed=0)
    with pytest.raises(ArgumentError):
        simulate_tabular_cohort(50, seed=0, n_noise=-1)
    with pytest.raises(ArgumentError):
        simulate_tabular_cohort(50, seed=-3)
