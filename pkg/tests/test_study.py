"""Experiment grid: mask variants, cell pipelines, and the 13-row study."""

import numpy as np
import pytest

from radsurv.cohort import (
    DesignMatrix,
    apply_standardization,
    assemble_design_matrix,
    encode_cohort,
    standardize,
)
from radsurv.errors import ArgumentError, CohortError, UndefinedCindexError
from radsurv.lasso import select_features_cv
from radsurv.phantom import PhantomParams, write_cohort
from radsurv.study import (
    ExperimentSpec,
    MaskVariant,
    PipelineOptions,
    build_variant_tables,
    load_cohort,
    run_experiment,
    run_perturbation_study,
    study_variants,
)
from radsurv.survival import (
    concordance_index,
    cox_fit,
    predict_scores,
    split_cohort,
)

# a lighter penalty grid and fewer folds keep the cell fits quick without
# touching any of the structural contracts under test
LIGHT = PipelineOptions(n_lambdas=40, lambda_ratio=0.05, k_folds=4)

STUDY_KEYS = ["clinical"] + [
    f"{combo}@{variant}"
    for variant in ("ground_truth", "eroded_r1", "dilated_r1", "dilated_r2")
    for combo in ("ct_clinical", "pet_clinical", "ct_pet_clinical")
]


@pytest.fixture(scope="module")
def fragile_cohort(tmp_path_factory):
    # semi-axes of 1.3 voxels digitize to a handful of voxels, so radius-1
    # erosion already leaves at most one voxel and extraction fails for
    # exactly the fragile patients
    out = str(tmp_path_factory.mktemp("study") / "fragile")
    params = PhantomParams(n_patients=30, seed=9, fragile_fraction=5 / 30,
                           fragile_semi_axes=1.3)
    truth = write_cohort(params, out, jobs=4)
    return out, truth


@pytest.fixture(scope="module")
def study_result(fragile_cohort):
    out, _ = fragile_cohort
    return run_perturbation_study(out, radii=(1, 2), seed=0, options=LIGHT,
                                  jobs=4)


def _fragile_ids(truth):
    return {pid for pid, rec in truth["patients"].items() if rec["fragile"]}


def _cols(dm, names):
    idx = [dm.column_names.index(n) for n in names]
    return DesignMatrix(X=dm.X[:, idx], column_names=tuple(names),
                        patient_ids=dm.patient_ids)


def test_study_variants_covers_the_grid():
    assert [v.label for v in study_variants((1, 2))] == \
        ["ground_truth", "eroded_r1", "dilated_r1", "dilated_r2"]
    assert [v.label for v in study_variants((2,))] == \
        ["ground_truth", "eroded_r2", "dilated_r2"]
    assert [v.label for v in study_variants([2, 1, 1])] == \
        ["ground_truth", "eroded_r1", "dilated_r1", "dilated_r2"]
    with pytest.raises(ArgumentError):
        study_variants((0,))
    with pytest.raises(ArgumentError):
        study_variants(())


def test_mask_variant_validation():
    with pytest.raises(ArgumentError):
        MaskVariant("shrunk", 1)
    with pytest.raises(ArgumentError):
        MaskVariant("ground_truth", 1)
    with pytest.raises(ArgumentError):
        MaskVariant("eroded", 0)
    assert MaskVariant("dilated", 2).label == "dilated_r2"
    assert MaskVariant("ground_truth").label == "ground_truth"


def test_experiment_spec_normalizes_blocks():
    spec = ExperimentSpec(blocks=("ct", "clinical"))
    assert spec.blocks == ("clinical", "ct", "common")
    assert spec.combo_label == "ct_clinical"
    assert spec.needs_imaging
    clin = ExperimentSpec(blocks=("clinical",))
    assert clin.combo_label == "clinical"
    assert not clin.needs_imaging
    with pytest.raises(ArgumentError):
        ExperimentSpec(blocks=("dna",))
    with pytest.raises(ArgumentError):
        ExperimentSpec(blocks=())


def test_variant_tables_monotone_and_job_invariant(fragile_cohort):
    out, truth = fragile_cohort
    ids = sorted(set(truth["patients"]) - _fragile_ids(truth))[:6]
    variants = study_variants((1, 2))
    t1 = build_variant_tables(out, ids, variants, LIGHT, jobs=1)
    t3 = build_variant_tables(out, ids, variants, LIGHT, jobs=3)
    assert sorted(t1) == ["dilated_r1", "dilated_r2", "eroded_r1", "ground_truth"]
    names = t1["ground_truth"][ids[0]].names

    def vol(fv):
        return float(fv.values[fv.names.index("common.shape.voxel_volume")])

    for pid in ids:
        fvs = {lab: t1[lab][pid] for lab in t1}
        assert all(fv.names == names for fv in fvs.values())
        assert vol(fvs["eroded_r1"]) <= vol(fvs["ground_truth"]) \
            <= vol(fvs["dilated_r1"]) <= vol(fvs["dilated_r2"])
        for lab in t1:
            np.testing.assert_array_equal(t1[lab][pid].values,
                                          t3[lab][pid].values)


def test_study_emits_thirteen_rows_in_fixed_order(study_result):
    assert [r.key for r in study_result.rows] == STUDY_KEYS
    assert study_result.n_patients == 30
    assert study_result.radii == (1, 2)
    assert set(study_result.timings) == {"extraction", *STUDY_KEYS}
    assert study_result.config["n_lambdas"] == 40
    with pytest.raises(ArgumentError):
        study_result.row("ct_only@ground_truth")


def test_study_rows_report_within_bounds(study_result):
    for r in study_result.rows:
        assert r.n_patients == 30
        assert r.annotation != "extraction failed"
        assert r.c_index_train is not None and 0.0 <= r.c_index_train <= 1.0
        if r.c_index_test is not None:
            assert 0.0 <= r.c_index_test <= 1.0
    gt = study_result.row("ct_pet_clinical@ground_truth")
    assert gt.n_selected_features >= 1
    assert gt.c_index_train >= 0.5


def test_exclusions_confined_to_eroded_cells(study_result, fragile_cohort):
    _, truth = fragile_cohort
    fragile = _fragile_ids(truth)
    assert len(fragile) == 5
    for r in study_result.rows:
        if r.spec.needs_imaging and r.spec.mask_variant.label == "eroded_r1":
            assert {pid for pid, _ in r.exclusions} == fragile
            assert {err for _, err in r.exclusions} <= \
                {"DegenerateTextureError", "EmptyRoiError"}
            assert r.n_excluded_patients == 5
        else:
            assert r.exclusions == ()


def test_clinical_row_is_mask_independent(study_result, fragile_cohort):
    out, _ = fragile_cohort
    row = study_result.rows[0]
    assert row.key == "clinical"
    solo = run_experiment(out, ExperimentSpec(blocks=("clinical",), seed=0),
                          options=LIGHT)
    assert solo.n_selected_features == row.n_selected_features
    assert solo.c_index_train == row.c_index_train
    assert solo.c_index_test == row.c_index_test
    assert solo.exclusions == row.exclusions == ()


def test_cell_matches_manual_pipeline(study_result, fragile_cohort):
    # recompute one cell end to end with the library primitives; equality
    # doubles as the audit that excluded patients left both train and test
    out, truth = fragile_cohort
    row = study_result.row("ct_clinical@eroded_r1")
    clinical, outcomes = load_cohort(out)
    ids = [r.patient_id for r in outcomes]
    by_outcome = {r.patient_id: r for r in outcomes}
    clin_fvs, _ = encode_cohort(clinical)
    by_clin = dict(zip(ids, clin_fvs))

    table = build_variant_tables(out, ids, [MaskVariant("eroded", 1)], LIGHT,
                                 jobs=4)["eroded_r1"]
    alive = [pid for pid in ids if not isinstance(table[pid], str)]
    assert sorted(set(ids) - set(alive)) == sorted(_fragile_ids(truth))

    entries = [(pid, by_clin[pid], table[pid]) for pid in alive]
    dm = assemble_design_matrix(entries, {"clinical", "ct", "common"})
    train_ids, _, test_ids = split_cohort(outcomes, seed=0)
    tr = [p for p in train_ids if p in set(alive)]
    te = [p for p in test_ids if p in set(alive)]
    recs_tr = [by_outcome[p] for p in tr]
    recs_te = [by_outcome[p] for p in te]

    std_tr, sp = standardize(dm.rows(tr))
    sel = select_features_cv(std_tr, recs_tr, k=4, seed=0, n_lambdas=40,
                             ratio=0.05)
    assert len(sel.selected) == row.n_selected_features
    if sel.selected:
        model = cox_fit(_cols(std_tr, sel.selected), recs_tr,
                        compute_baseline=False)
        scores_tr = predict_scores(model, _cols(std_tr, sel.selected))
    else:
        scores_tr = np.zeros(len(tr))
    assert concordance_index(scores_tr, recs_tr) == row.c_index_train
    c_te = None
    if len(te) >= 2:
        if sel.selected:
            std_te = apply_standardization(dm.rows(te), sp)
            scores_te = predict_scores(model, _cols(std_te, sel.selected))
        else:
            scores_te = np.zeros(len(te))
        try:
            c_te = concordance_index(scores_te, recs_te)
        except UndefinedCindexError:
            c_te = None
    assert c_te == row.c_index_test


def test_run_experiment_finds_clinical_signal(tmp_path):
    out = str(tmp_path / "cohort")
    write_cohort(PhantomParams(n_patients=60, seed=4, beta_age=1.0), out,
                 jobs=4)
    row = run_experiment(out, ExperimentSpec(blocks=("clinical",), seed=0,
                                             split_ratios=(0.7, 0.1, 0.2)),
                         options=LIGHT)
    assert row.n_selected_features >= 1
    assert row.c_index_test > 0.5


def test_eroding_beyond_tumour_radius_reports_empty_rois(fragile_cohort):
    out, truth = fragile_cohort
    fragile = _fragile_ids(truth)
    row = run_experiment(out, ExperimentSpec(blocks=("ct", "pet", "clinical"),
                                             mask_variant=MaskVariant("eroded", 2),
                                             seed=0),
                         options=LIGHT, jobs=4)
    reasons = dict(row.exclusions)
    assert fragile <= set(reasons)
    assert all(reasons[pid] == "EmptyRoiError" for pid in fragile)
    assert row.c_index_train is not None


def test_cells_annotate_when_extraction_mostly_fails(tmp_path):
    # radius-2 erosion wipes out the dominant fragile subcohort, so those
    # cells report the failure instead of numbers fit on a remnant
    out = str(tmp_path / "tiny")
    write_cohort(PhantomParams(n_patients=12, seed=3, fragile_fraction=0.75),
                 out, jobs=4)
    light = PipelineOptions(n_lambdas=25, lambda_ratio=0.1, k_folds=3)
    result = run_perturbation_study(out, radii=(2,), seed=0, options=light,
                                    jobs=4)
    assert len(result.rows) == 10
    for r in result.rows:
        if r.spec.needs_imaging and r.spec.mask_variant.label == "eroded_r2":
            assert r.annotation == "extraction failed"
            assert r.c_index_train is None and r.c_index_test is None
            assert r.n_selected_features == 0
            assert r.n_excluded_patients >= 9
            assert {e for _, e in r.exclusions} >= {"EmptyRoiError"}
        else:
            assert r.annotation != "extraction failed"


def test_cohort_exhausted_raises(tmp_path):
    out = str(tmp_path / "allfragile")
    write_cohort(PhantomParams(n_patients=6, seed=1, fragile_fraction=1.0),
                 out, jobs=2)
    with pytest.raises(CohortError):
        run_experiment(out, ExperimentSpec(blocks=("ct", "clinical"),
                                           mask_variant=MaskVariant("eroded", 2),
                                           seed=0),
                       options=LIGHT, jobs=2)
