"""Cox proportional-hazards fitting, risk scoring and Harrell's C-index.

The model is h(t, x) = h0(t)·exp(beta·x).  Coefficients maximize the Breslow
log partial likelihood

    L(beta) = sum over event times t  [ sum_{d in D_t} x_d·beta
                                        - |D_t| · log sum_{j: t_j >= t} exp(x_j·beta) ]

by Newton-Raphson with step-halving.  Risk sets are accumulated in one
descending-time sweep, so a fit costs O(n log n + n p^2) per iteration.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import DesignMatrix
from .errors import ArgumentError, DataError, NoEventsError, UndefinedCindexError

__all__ = [
    "SurvivalRecord",
    "BaselineHazard",
    "CoxModel",
    "cox_fit",
    "risk_score",
    "predict_scores",
    "concordance_index",
    "split_cohort",
    "read_outcome_csv",
    "write_outcome_csv",
    "save_model_json",
    "load_model_json",
]

log = logging.getLogger(__name__)

_TOL = 1e-9
_MAX_ITER = 100
_MAX_HALVINGS = 10


@dataclass(frozen=True)
class SurvivalRecord:
    """Recurrence-free survival outcome: days to event or censoring."""

    patient_id: str
    time: float
    event: bool

    def __post_init__(self):
        if not self.patient_id:
            raise ArgumentError("patient_id must be nonempty")
        if not (np.isfinite(self.time) and self.time > 0):
            raise ArgumentError(f"{self.patient_id}: time must be positive and finite, "
                                f"got {self.time}")


@dataclass(frozen=True)
class BaselineHazard:
    """Breslow step estimate of the cumulative baseline hazard H0(t)."""

    times: np.ndarray
    cumhaz: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        cumhaz = np.asarray(self.cumhaz, dtype=np.float64)
        if times.shape != cumhaz.shape or times.ndim != 1:
            raise ArgumentError("times and cumhaz must be 1D arrays of equal length")
        times.setflags(write=False)
        cumhaz.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "cumhaz", cumhaz)

    def at(self, t: float) -> float:
        """H0(t): right-continuous step function, 0 before the first event."""
        i = int(np.searchsorted(self.times, t, side="right"))
        return 0.0 if i == 0 else float(self.cumhaz[i - 1])


@dataclass(frozen=True)
class CoxModel:
    """Fitted coefficients over named covariates."""

    beta: np.ndarray
    covariate_names: tuple[str, ...]
    converged: bool
    log_partial_likelihood: float
    n_iterations: int
    baseline: BaselineHazard | None = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (len(self.covariate_names),):
            raise ArgumentError(f"beta length {beta.shape} does not match "
                                f"{len(self.covariate_names)} covariate names")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))


def _aligned_outcomes(dm: DesignMatrix, records: list[SurvivalRecord]):
    by_id = {r.patient_id: r for r in records}
    if len(by_id) != len(records):
        raise ArgumentError("duplicate patient ids in outcome records")
    missing = [pid for pid in dm.patient_ids if pid not in by_id]
    if missing:
        raise ArgumentError(f"outcomes missing for patients: {missing[:5]}")
    t = np.array([by_id[pid].time for pid in dm.patient_ids])
    e = np.array([by_id[pid].event for pid in dm.patient_ids], dtype=bool)
    return t, e


def partial_likelihood_parts(X: np.ndarray, t: np.ndarray, e: np.ndarray,
                             beta: np.ndarray):
    """Breslow log partial likelihood with gradient and Hessian.

    One sweep from the latest time downwards keeps running risk-set sums
    S0 = sum exp(eta), S1 = sum exp(eta)·x, S2 = sum exp(eta)·x xT; at each
    distinct event time the group of ties contributes with the current sums.
    """
    n, p = X.shape
    eta = X @ beta
    shift = eta.max()  # exp overflow guard; log S0 regains the shift below
    w = np.exp(eta - shift)

    order = np.argsort(-t, kind="stable")
    L = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    S0 = 0.0
    S1 = np.zeros(p)
    S2 = np.zeros((p, p))

    i = 0
    while i < n:
        j = i
        current = t[order[i]]
        while j < n and t[order[j]] == current:
            k = order[j]
            S0 += w[k]
            S1 += w[k] * X[k]
            S2 += w[k] * np.outer(X[k], X[k])
            j += 1
        group = order[i:j]
        deaths = group[e[group]]
        d = len(deaths)
        if d > 0:
            if S0 > 0.0:
                xsum = X[deaths].sum(axis=0)
                mean = S1 / S0
                L += float(xsum @ beta) - d * (np.log(S0) + shift)
                grad += xsum - d * mean
                hess -= d * (S2 / S0 - np.outer(mean, mean))
            else:
                # every at-risk weight underflowed: beta is far past any
                # useful scale, so report the step as an ascent failure
                L = -np.inf
        i = j
    return L, grad, hess


def cox_fit(dm: DesignMatrix, records: list[SurvivalRecord],
            compute_baseline: bool = True) -> CoxModel:
    """Maximize the Breslow partial likelihood by Newton-Raphson.

    Starts at beta = 0, takes full Newton steps with up to 10 halvings to keep
    L non-decreasing, and stops when |dL| < 1e-9 or after 100 iterations.
    Separating data (L unbounded) ends with ``converged=False`` and the last
    stable coefficients.
    """
    t, e = _aligned_outcomes(dm, records)
    if not e.any():
        raise NoEventsError("all subjects censored; partial likelihood is empty")
    X = dm.X
    n, p = X.shape
    n_events = int(e.sum())
    if p >= n_events:
        log.warning("fitting %d coefficients with only %d events", p, n_events)

    beta = np.zeros(p)
    L, grad, hess = partial_likelihood_parts(X, t, e, beta)
    converged = False
    iterations = 0
    for iterations in range(1, _MAX_ITER + 1):
        try:
            delta = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        if not np.all(np.isfinite(delta)):
            converged = False
            break

        step = 1.0
        accepted = False
        for _ in range(_MAX_HALVINGS + 1):
            candidate = beta + step * delta
            Lc, gc, hc = partial_likelihood_parts(X, t, e, candidate)
            if np.isfinite(Lc) and Lc >= L - 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            log.warning("no ascent step found at iteration %d; stopping", iterations)
            break
        improvement = Lc - L
        beta, L, grad, hess = candidate, Lc, gc, hc
        if abs(improvement) < _TOL:
            converged = True
            break

    if not np.all(np.isfinite(beta)) or not np.isfinite(L):
        raise DataError("Cox fit diverged to non-finite coefficients")
    baseline = _breslow_baseline(X, t, e, beta) if compute_baseline else None
    return CoxModel(beta=beta, covariate_names=dm.column_names, converged=converged,
                    log_partial_likelihood=float(L), n_iterations=iterations,
                    baseline=baseline)


def _breslow_baseline(X: np.ndarray, t: np.ndarray, e: np.ndarray,
                      beta: np.ndarray) -> BaselineHazard:
    eta = X @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    event_times = np.unique(t[e])
    increments = np.empty(len(event_times))
    for i, et in enumerate(event_times):
        d = int((e & (t == et)).sum())
        s0 = float(w[t >= et].sum()) * np.exp(shift)
        increments[i] = d / s0
    return BaselineHazard(times=event_times, cumhaz=np.cumsum(increments))


def risk_score(model: CoxModel, x) -> float:
    """Linear predictor beta·x (log relative hazard)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.beta.shape:
        raise ArgumentError(f"covariate row has shape {x.shape}, "
                            f"model expects {model.beta.shape}")
    return float(model.beta @ x)


def predict_scores(model: CoxModel, dm: DesignMatrix) -> np.ndarray:
    """Linear predictor for every row, matching columns by name."""
    missing = [n for n in model.covariate_names if n not in dm.column_names]
    if missing:
        raise ArgumentError(f"matrix lacks model covariates: {missing}")
    sel = [dm.column_names.index(n) for n in model.covariate_names]
    return dm.X[:, sel] @ model.beta


def concordance_index(scores, records: list[SurvivalRecord]) -> float:
    """Harrell's C over comparable pairs.

    Pair (i, j) is comparable iff t_i < t_j strictly and subject i had the
    event; tied event times are never comparable.  Concordant means the
    earlier-event subject got the higher score; score ties count 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) != len(records):
        raise ArgumentError(f"{len(scores)} scores for {len(records)} records")
    if len(records) < 2:
        raise ArgumentError("need at least 2 subjects")
    t = np.array([r.time for r in records])
    e = np.array([r.event for r in records], dtype=bool)

    comparable = e[:, None] & (t[:, None] < t[None, :])
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise UndefinedCindexError("no comparable pairs (check events and time ties)")
    higher = scores[:, None] > scores[None, :]
    tied = scores[:, None] == scores[None, :]
    concordant = float((comparable & higher).sum()) + 0.5 * float((comparable & tied).sum())
    return concordant / n_comparable


def split_cohort(records: list[SurvivalRecord],
                 ratios: tuple[float, float, float] = (0.85, 0.075, 0.075),
                 seed: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Event-stratified train/validation/test split of patient ids.

    Events and censored subjects are shuffled separately with the seed and
    dealt out by the ratios, so all three splits keep roughly the cohort's
    event rate.  Returned id lists are sorted for determinism.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ArgumentError(f"ratios must be 3 nonnegative reals summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    buckets: tuple[list[str], list[str], list[str]] = ([], [], [])
    for group_flag in (True, False):
        ids = sorted(r.patient_id for r in records if r.event == group_flag)
        if not ids:
            continue
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        n = len(ids)
        n_train = int(round(ratios[0] * n))
        n_val = int(round(ratios[1] * n))
        n_train = min(n_train, n)
        n_val = min(n_val, n - n_train)
        buckets[0].extend(shuffled[:n_train])
        buckets[1].extend(shuffled[n_train:n_train + n_val])
        buckets[2].extend(shuffled[n_train + n_val:])
    return sorted(buckets[0]), sorted(buckets[1]), sorted(buckets[2])


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_OUTCOME_HEADER = ["patient_id", "rfs_days", "event"]


def read_outcome_csv(path) -> list[SurvivalRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _OUTCOME_HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        records = []
        for row in reader:
            if len(row) != 3:
                raise DataError(f"{path}: malformed row {row}")
            pid, days, event = row
            if event not in ("0", "1"):
                raise DataError(f"{path}: event must be 0 or 1, got {event!r}")
            records.append(SurvivalRecord(patient_id=pid, time=float(days),
                                          event=event == "1"))
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate patient ids")
    return records


def write_outcome_csv(records: list[SurvivalRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_OUTCOME_HEADER)
        for r in records:
            writer.writerow([r.patient_id, repr(float(r.time)), int(r.event)])


def save_model_json(model: CoxModel, path, extra: dict | None = None) -> None:
    """Persist everything needed to re-score new patients."""
    doc = {
        "covariate_names": list(model.covariate_names),
        "beta": [float(b) for b in model.beta],
        "converged": model.converged,
        "log_partial_likelihood": model.log_partial_likelihood,
        "n_iterations": model.n_iterations,
    }
    if model.baseline is not None:
        doc["baseline"] = {
            "times": [float(v) for v in model.baseline.times],
            "cumhaz": [float(v) for v in model.baseline.cumhaz],
        }
    if extra:
        overlap = set(extra) & set(doc)
        if overlap:
            raise ArgumentError(f"extra keys collide with model fields: {sorted(overlap)}")
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model_json(path) -> CoxModel:
    doc = json.loads(Path(path).read_text())
    baseline = None
    if "baseline" in doc:
        baseline = BaselineHazard(times=np.array(doc["baseline"]["times"]),
                                  cumhaz=np.array(doc["baseline"]["cumhaz"]))
    return CoxModel(
        beta=np.array(doc["beta"], dtype=np.float64),
        covariate_names=tuple(doc["covariate_names"]),
        converged=bool(doc["converged"]),
        log_partial_likelihood=float(doc["log_partial_likelihood"]),
        n_iterations=int(doc["n_iterations"]),
        baseline=baseline,
    )
