"""Top-level acceptance checks, one per pipeline guarantee.

Each test prints a single PASS/FAIL line with the measured quantities, then
asserts.  Every oracle here is computed independently of the library code it
checks: closed forms, brute-force double loops, finite differences, set
algebra on raw arrays, and known-hazard simulations.
"""

import json
import math
import time

import numpy as np
import pytest

from radsurv.cli import dispatch
from radsurv.cohort import DesignMatrix, apply_standardization, standardize
from radsurv.lasso import lasso_cox_path, select_features_cv
from radsurv.morphology import ball_element, dilate, erode
from radsurv.phantom import (
    PhantomParams,
    simulate_tabular_cohort,
    write_cohort,
)
from radsurv.radiomics import (
    ExtractionParams,
    discretize,
    extract_all,
    first_order_features,
    glcm_features,
    glszm_features,
    shape_features,
)
from radsurv.study import (
    ExperimentSpec,
    MaskVariant,
    PipelineOptions,
    run_experiment,
    run_perturbation_study,
)
from radsurv.survival import (
    SurvivalRecord,
    concordance_index,
    cox_fit,
    partial_likelihood_parts,
    predict_scores,
    split_cohort,
)
from radsurv.volume import Mask, VoxelGrid


def _verdict(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def _records(t, e):
    return [SurvivalRecord(f"p{i:03d}", float(tt), bool(ee))
            for i, (tt, ee) in enumerate(zip(t, e))]


def _design(X):
    X = np.asarray(X, dtype=float)
    return DesignMatrix(X, tuple(f"x{j}" for j in range(X.shape[1])),
                        tuple(f"p{i:03d}" for i in range(X.shape[0])))


# ---------------------------------------------------------------------------
# 1. analytic three-subject Cox oracle
# ---------------------------------------------------------------------------

def test_criterion_1_analytic_cox_oracle():
    # covariates (1, 0, 1) with event times 1 < 2 < 3: the score equation
    # reduces to 2u^2 = 1 for u = exp(beta), so beta = -ln(2)/2
    dm = _design([[1.0], [0.0], [1.0]])
    records = _records([1.0, 2.0, 3.0], [1, 1, 1])
    start = time.perf_counter()
    model = cox_fit(dm, records)
    elapsed = time.perf_counter() - start
    err = abs(float(model.beta[0]) + math.log(2.0) / 2.0)
    ok = model.converged and err < 1e-6 and elapsed < 1.0
    _verdict(1, ok, f"beta off closed form by {err:.2e} in {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# 2. c-index equals an independent brute force on 1000 random instances
# ---------------------------------------------------------------------------

def _brute_force_cindex(scores, t, e):
    num, den = 0.0, 0
    n = len(scores)
    for i in range(n):
        if not e[i]:
            continue
        for j in range(n):
            if i != j and t[i] < t[j]:
                den += 1
                if scores[i] > scores[j]:
                    num += 1.0
                elif scores[i] == scores[j]:
                    num += 0.5
    return None if den == 0 else num / den


def test_criterion_2_cindex_brute_force_equivalence():
    rng = np.random.default_rng(1234)
    start = time.perf_counter()
    checked = 0
    for trial in range(1000):
        n = int(rng.integers(2, 51))
        t = rng.exponential(100.0, size=n)
        e = rng.random(n) > 0.3  # about 30% censoring
        if trial % 2:
            scores = rng.integers(0, 4, size=n).astype(float)  # forces ties
        else:
            scores = rng.normal(size=n)
        expect = _brute_force_cindex(scores, t, e)
        if expect is None:
            continue
        got = concordance_index(scores, _records(t, e))
        assert got == expect, f"trial {trial}: {got} != {expect}"
        checked += 1
    elapsed = time.perf_counter() - start
    ok = checked > 900 and elapsed < 10.0
    _verdict(2, ok, f"exact match on {checked} defined instances "
                    f"in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 3. partial-likelihood gradient and Hessian match finite differences
# ---------------------------------------------------------------------------

def test_criterion_3_gradient_hessian_finite_differences():
    rng = np.random.default_rng(7)
    n, p, h = 50, 5, 1e-5
    worst_g, worst_h = 0.0, 0.0
    for point in range(20):
        X = rng.normal(size=(n, p))
        t = rng.exponential(50.0, size=n)
        e = rng.random(n) < 0.7
        if not e.any():
            e[0] = True
        beta = rng.normal(scale=0.5, size=p)
        _, grad, hess = partial_likelihood_parts(X, t, e, beta)
        grad_fd = np.zeros(p)
        hess_fd = np.zeros((p, p))
        for j in range(p):
            step = np.zeros(p)
            step[j] = h
            Lp, gp, _ = partial_likelihood_parts(X, t, e, beta + step)
            Lm, gm, _ = partial_likelihood_parts(X, t, e, beta - step)
            grad_fd[j] = (Lp - Lm) / (2 * h)
            hess_fd[:, j] = (gp - gm) / (2 * h)
        rel_g = np.linalg.norm(grad_fd - grad) / max(np.linalg.norm(grad), 1e-12)
        rel_h = np.linalg.norm(hess_fd - hess) / max(np.linalg.norm(hess), 1e-12)
        worst_g = max(worst_g, rel_g)
        worst_h = max(worst_h, rel_h)
    ok = worst_g < 1e-5 and worst_h < 1e-5
    _verdict(3, ok, f"worst relative error: gradient {worst_g:.2e}, "
                    f"hessian {worst_h:.2e} over 20 points")


# ---------------------------------------------------------------------------
# 4. penalty path: zero start, near-MLE end, monotone L1 norm
# ---------------------------------------------------------------------------

def test_criterion_4_lasso_path_shape():
    rng = np.random.default_rng(11)
    n, p = 200, 5
    X = rng.normal(size=(n, p))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    beta_true = np.array([1.0, -0.5, 0.8, 0.0, 0.0])
    t = rng.exponential(1.0 / (0.01 * np.exp(X @ beta_true)))
    e = t <= 365.0
    t = np.minimum(t, 365.0)
    dm = _design(X)
    records = _records(t, e)
    path = lasso_cox_path(dm, records, n_lambdas=100, ratio=0.01)
    mle = cox_fit(dm, records, compute_baseline=False)
    start_zero = bool(np.all(path.betas[0] == 0.0))
    end_gap = float(np.abs(path.betas[-1] - mle.beta).max())
    l1 = np.abs(path.betas).sum(axis=1)
    monotone = bool(np.all(np.diff(l1) >= -1e-8))
    ok = start_zero and end_gap < 0.05 and monotone
    _verdict(4, ok, f"beta(lambda_max)=0: {start_zero}, end gap {end_gap:.4f},"
                    f" L1 monotone: {monotone}")


# ---------------------------------------------------------------------------
# 5. morphology laws on random masks; ball(2) offset count
# ---------------------------------------------------------------------------

def _mask(values):
    return Mask(values=values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))


def test_criterion_5_morphology_laws():
    rng = np.random.default_rng(5)
    failures = []
    for trial in range(200):
        dims = tuple(int(d) for d in rng.integers(8, 33, size=3))
        m1 = rng.random(dims) < rng.uniform(0.2, 0.8)
        m2 = m1 | (rng.random(dims) < 0.2)  # superset by construction
        r = 1 + trial % 2
        elem = ball_element(r)
        er1, er2 = erode(_mask(m1), elem).values, erode(_mask(m2), elem).values
        di1, di2 = dilate(_mask(m1), elem).values, dilate(_mask(m2), elem).values
        opened = dilate(_mask(er1), elem).values
        closed = erode(_mask(di1), elem).values
        if not (er1 <= m1).all():
            failures.append((trial, "anti-extensive"))
        if not (m1 <= di1).all():
            failures.append((trial, "extensive"))
        if not ((er1 <= er2).all() and (di1 <= di2).all()):
            failures.append((trial, "monotone"))
        # the boundary rule (out-of-bounds is background) truncates dilation
        # at the faces, so closing and duality are exact on voxels with r
        # voxels of clearance; opening holds everywhere
        core = tuple(slice(r, d - r) for d in dims)
        if not ((opened <= m1).all() and (m1[core] <= closed[core]).all()):
            failures.append((trial, "opening/closing"))
        dual = ~dilate(_mask(~m1), elem).values
        if not (er1[core] == dual[core]).all():
            failures.append((trial, "interior duality"))
    n_offsets = len(ball_element(2).offsets)
    ok = not failures and n_offsets == 33
    _verdict(5, ok, f"laws held on 200 masks ({len(failures)} violations), "
                    f"ball(2) has {n_offsets} offsets")


# ---------------------------------------------------------------------------
# 6. radiomics unit oracles
# ---------------------------------------------------------------------------

def _unit_grid(values, mask=None):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    g = VoxelGrid(values=values, spacing=(1.0, 1.0, 1.0), origin=(0, 0, 0))
    return g, _mask(mask)


def test_criterion_6_radiomics_unit_oracles():
    checks = {}

    # two 2-voxel zones at levels 1 and 2: SAE = mean of 1/2^2 weights = 0.25
    g, m = _unit_grid(np.array([[0.0, 0.0], [25.0, 25.0]]).reshape(1, 2, 2))
    sae = glszm_features(discretize(g, m, 25.0))["glszm.small_area_emphasis"]
    checks["glszm SAE"] = abs(sae - 0.25) < 1e-12

    # alternating stripe: every co-occurring pair differs by one level
    g, m = _unit_grid(np.array([0.0, 25.0, 0.0, 25.0]).reshape(1, 1, 4))
    contrast = glcm_features(discretize(g, m, 25.0))["glcm.contrast"]
    checks["glcm contrast"] = abs(contrast - 1.0) < 1e-12

    # four equally likely levels carry exactly two bits
    g, m = _unit_grid(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
    entropy = first_order_features(g, m, ExtractionParams(bin_width=1.0))[
        "firstorder.entropy"]
    checks["entropy"] = abs(entropy - 2.0) < 1e-12

    # digitized r=15 ball: sphericity within digitization error of 1
    r, margin = 15, 2
    n = 2 * r + 2 * margin + 1
    c = n // 2
    idx = np.indices((n, n, n))
    ball = ((idx - c) ** 2).sum(axis=0) <= r * r
    sph = shape_features(_mask(ball))["shape.sphericity"]
    checks["sphericity"] = 0.95 <= sph <= 1.02

    # adding a constant must not move any discretization-based feature
    rng = np.random.default_rng(26)
    vals = rng.normal(10.0, 30.0, size=(9, 9, 9))
    idx = np.indices((9, 9, 9))
    fg = ((idx - 4) ** 2).sum(axis=0) <= 9
    g, m = _unit_grid(vals, mask=fg)
    shifted = VoxelGrid(values=vals + 93.7, spacing=g.spacing, origin=g.origin)
    a = extract_all(g, m, ExtractionParams())
    b = extract_all(shifted, m, ExtractionParams())
    drift = max(abs(b[name] - a[name]) for name in a.names
                if name.split(".")[0] in ("glcm", "glszm")
                or name in ("firstorder.entropy", "firstorder.uniformity"))
    checks["shift invariance"] = drift < 1e-9

    bad = [k for k, v in checks.items() if not v]
    _verdict(6, not bad,
             f"SAE {sae:.3f}, contrast {contrast:.3f}, entropy {entropy:.3f}, "
             f"sphericity {sph:.4f}, shift drift {drift:.1e}"
             + (f"; failed: {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# 7. end-to-end phantom experiment over 20 seeds
# ---------------------------------------------------------------------------

def _tabular_cell(dm, records_by_id, tr, te, seed):
    """Selection + refit on a column subset; test-split scores and c-index."""
    recs_tr = [records_by_id[p] for p in tr]
    recs_te = [records_by_id[p] for p in te]
    std_tr, sp = standardize(dm.rows(tr))
    sel = select_features_cv(std_tr, recs_tr, k=8, seed=seed)
    if sel.selected:
        model = cox_fit(std_tr.columns(sel.selected), recs_tr,
                        compute_baseline=False)
        std_te = apply_standardization(dm.rows(te), sp)
        scores = predict_scores(model, std_te.columns(sel.selected))
    else:
        scores = np.zeros(len(te))
    return sel.selected, concordance_index(scores, recs_te)


def test_criterion_7_phantom_recovery_and_cindex():
    start = time.perf_counter()
    n_seeds = 20
    recovered = 0
    c_full, c_clin, c_oracle = [], [], []
    for seed in range(n_seeds):
        dm, records, truth = simulate_tabular_cohort(300, seed)
        by_id = {r.patient_id: r for r in records}
        tr, _, te = split_cohort(records, ratios=(0.7, 0.0, 0.3), seed=seed)
        recs_te = [by_id[p] for p in te]

        selected, c = _tabular_cell(dm, by_id, tr, te, seed)
        hits = len(set(selected) & set(truth["informative"]))
        recovered += hits >= 2
        c_full.append(c)

        _, c = _tabular_cell(dm.columns(truth["clinical"]), by_id, tr, te,
                             seed)
        c_clin.append(c)

        eta = np.array([truth["eta"][p] for p in te])
        c_oracle.append(concordance_index(eta, recs_te))
    elapsed = time.perf_counter() - start

    mean_full = float(np.mean(c_full))
    mean_clin = float(np.mean(c_clin))
    mean_oracle = float(np.mean(c_oracle))
    gap = abs(mean_full - mean_oracle)
    ok = (recovered >= 0.8 * n_seeds and gap <= 0.08
          and mean_clin < mean_full and elapsed < 300.0)
    _verdict(7, ok,
             f">=2/3 informative in {recovered}/{n_seeds} seeds; mean test "
             f"c-index {mean_full:.3f} vs oracle {mean_oracle:.3f} "
             f"(gap {gap:.3f}); clinical-only {mean_clin:.3f}; "
             f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8. erosion-fragile cohort: failures reported, grid structure intact
# ---------------------------------------------------------------------------

def test_criterion_8_fragile_cohort_harness(tmp_path):
    cohort = tmp_path / "cohort"
    params = PhantomParams(n_patients=12, seed=21, gtvn_probability=0.0,
                           fragile_fraction=1.0, fragile_semi_axes=2.0)
    write_cohort(params, str(cohort), jobs=4)
    light = PipelineOptions(k_folds=3, n_lambdas=25, lambda_ratio=0.1)

    # eroding at the tumour radius empties every ROI; the sweep that
    # requests only r=2 must report that per patient instead of crashing
    deep = run_perturbation_study(str(cohort), radii=(2,), seed=21,
                                  options=light, jobs=4)
    eroded_rows = [row for row in deep.rows
                   if row.spec.needs_imaging
                   and row.spec.mask_variant == MaskVariant("eroded", 2)]
    per_patient = all(
        row.annotation == "extraction failed"
        and {pid for pid, _ in row.exclusions} == {f"P{i:03d}" for i in range(12)}
        and {err for _, err in row.exclusions} == {"EmptyRoiError"}
        for row in eroded_rows)

    # the standard two-radius sweep keeps the full 13-row grid
    full = run_perturbation_study(str(cohort), radii=(1, 2), seed=21,
                                  options=light, jobs=4)
    grid_ok = len(full.rows) == 13 and len(deep.rows) == 10

    # the clinical-only cell never touches the mask: identical under any
    # variant, and equal to the row the study reports
    def payload(row):
        return (row.n_patients, row.n_selected_features, row.c_index_train,
                row.c_index_test, row.exclusions, row.annotation)

    clinical_rows = [
        run_experiment(str(cohort),
                       ExperimentSpec(blocks=("clinical",), seed=21,
                                      mask_variant=variant),
                       options=light)
        for variant in (MaskVariant("ground_truth"), MaskVariant("eroded", 2),
                        MaskVariant("dilated", 1))]
    baseline = full.row("clinical")
    clinical_ok = all(payload(row) == payload(baseline)
                      for row in clinical_rows)

    ok = per_patient and grid_ok and clinical_ok and len(eroded_rows) == 3
    _verdict(8, ok,
             f"eroded r=2 cells: {len(eroded_rows)} with 12/12 EmptyRoiError "
             f"({per_patient}); rows 13/{len(full.rows)} and 10/{len(deep.rows)}; "
             f"clinical row mask-independent: {clinical_ok}")


# ---------------------------------------------------------------------------
# 9. CLI determinism across reruns and worker counts
# ---------------------------------------------------------------------------

def test_criterion_9_cli_byte_determinism(tmp_path, capsys):
    root = tmp_path
    same = []

    coh = {}
    for jobs in ("1", "4"):
        out = root / f"cohort_j{jobs}"
        assert dispatch(["simulate", "--n", "10", "--seed", "11",
                         "--out", str(out), "--jobs", jobs]) == 0
        coh[jobs] = out
    for name in ("clinical.csv", "outcomes.csv"):
        same.append((coh["1"] / name).read_bytes()
                    == (coh["4"] / name).read_bytes())

    feats = {}
    for jobs in ("1", "4"):
        out = root / f"ct_j{jobs}.csv"
        assert dispatch(["extract", "--cohort", str(coh["1"]), "--modality",
                         "ct", "--out", str(out), "--jobs", jobs]) == 0
        feats[jobs] = out
    same.append(feats["1"].read_bytes() == feats["4"].read_bytes())

    sel = {}
    for jobs in ("1", "4"):
        out = root / f"sel_j{jobs}"
        assert dispatch(["select", "--cohort", str(coh["1"]), "--blocks",
                         "ct,clinical", "--seed", "11", "--out", str(out),
                         "--jobs", jobs, "--k-folds", "3", "--n-lambdas",
                         "15", "--lambda-ratio", "0.2"]) == 0
        sel[jobs] = out
    same.append((sel["1"] / "cv_curve.csv").read_bytes()
                == (sel["4"] / "cv_curve.csv").read_bytes())

    reports = {}
    for tag, jobs in (("a", "4"), ("b", "1"), ("c", "4")):
        out = root / f"report_{tag}"
        assert dispatch(["perturb", "--cohort", str(coh["1"]), "--radii", "1",
                         "--seed", "11", "--out", str(out), "--jobs", jobs,
                         "--k-folds", "2", "--n-lambdas", "12",
                         "--lambda-ratio", "0.2"]) == 0
        reports[tag] = (out / "results.csv").read_bytes()
    same.append(reports["a"] == reports["b"])  # jobs 4 vs 1
    same.append(reports["a"] == reports["c"])  # repeated invocation
    capsys.readouterr()

    ok = all(same)
    _verdict(9, ok, f"{sum(same)}/{len(same)} byte-identity checks held "
                    "(simulate, extract, select, perturb)")
