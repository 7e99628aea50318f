"""Target trial emulation from EHR-style treatment records.

The pipeline is: eligibility filter, regimen classification, a logistic
propensity model for the experimental arm, greedy 1:1 matching on the logit
of the score, and per-protocol outcome derivation (follow-up stops at death,
start of second-line therapy or last contact).  A synthetic record
generator with known confounding and Weibull outcomes is included so that
the procedure can be checked end to end.
"""
from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .evidence import IPDStudy, SubjectRecord

__all__ = [
    "EmulationError",
    "SeparationError",
    "EHRRecord",
    "EmulationProtocol",
    "EmulatedTrial",
    "SyntheticEHRConfig",
    "TAXANES",
    "CHEMOTHERAPY",
    "DEFAULT_CLASS_MAP",
    "DAYS_PER_MONTH",
    "UNCLASSIFIED",
    "classify_regimen",
    "filter_eligible",
    "fit_propensity",
    "logistic_irls",
    "match_1to1",
    "derive_outcome",
    "standardized_mean_difference",
    "generate_synthetic_ehr",
    "emulate",
    "emulate_network",
    "matched_log_hr",
    "read_ehr_csv",
    "write_ehr_csv",
    "load_protocol",
]

log = logging.getLogger(__name__)

DAYS_PER_MONTH = 30.4375
UNCLASSIFIED = "unclassified"
TAXANES = ("paclitaxel", "docetaxel")
CHEMOTHERAPY = ("fluorouracil", "epirubicin", "cyclophosphamide", "vinorelbine", "capecitabine", "carboplatin")
DEFAULT_CLASS_MAP: dict[str, str] = {**{d: "taxane" for d in TAXANES}, **{d: "chemo" for d in CHEMOTHERAPY}}
EHR_COLUMNS = ("patient_id", "age", "biomarker", "drugs", "line", "start", "second_line", "death", "last_followup")


class EmulationError(ValueError):
    pass


class SeparationError(EmulationError):
    """Logistic coefficients diverge: the arms are (quasi-)separable."""


@dataclass(frozen=True)
class EHRRecord:
    patient_id: str
    age: float
    biomarker: int
    regimen: tuple[str, ...]
    line_of_therapy: int
    start_date: int
    last_followup: int
    second_line_start: int | None = None
    death_date: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "regimen", tuple(self.regimen))
        if self.biomarker not in (0, 1):
            raise EmulationError(f"{self.patient_id}: biomarker must be 0 or 1")
        if self.line_of_therapy < 1:
            raise EmulationError(f"{self.patient_id}: line of therapy must be positive")
        if self.start_date > self.last_followup:
            raise EmulationError(f"{self.patient_id}: start after last follow-up")
        for name in ("second_line_start", "death_date"):
            v = getattr(self, name)
            if v is not None and v < self.start_date:
                raise EmulationError(f"{self.patient_id}: {name} precedes start")


@dataclass(frozen=True)
class EmulationProtocol:
    """Eligibility, arms and matching settings of one emulated trial.

    ``class_map`` maps drug labels to the two drug families ``"taxane"``
    and ``"chemo"``; regimens are then classed X, C or CX.
    """

    arms: tuple[str, str] = ("X", "C")
    min_age: float = 18.0
    eligible_line: int = 1
    class_map: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_CLASS_MAP))
    covariates: tuple[str, ...] = ("age", "biomarker")
    seed: int = 20240101
    caliper: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if len(self.arms) != 2 or self.arms[0] == self.arms[1]:
            raise EmulationError("protocol needs two distinct arms")
        if not self.covariates:
            raise EmulationError("protocol needs at least one covariate")
        bad = set(self.covariates) - {"age", "biomarker"}
        if bad:
            raise EmulationError(f"unknown covariates {sorted(bad)}")
        if self.caliper is not None and self.caliper <= 0:
            raise EmulationError("caliper must be positive")


@dataclass(frozen=True)
class MatchedPair:
    experimental: SubjectRecord
    control: SubjectRecord
    age_experimental: float
    age_control: float
    distance: float


@dataclass
class EmulatedTrial:
    """Matched cohort with before/after balance (standardised mean differences)."""

    trial_id: str
    arms: tuple[str, str]
    pairs: list[MatchedPair]
    balance: dict[str, tuple[float, float]]
    n_eligible: dict[str, int]

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [p.experimental for p in self.pairs] + [p.control for p in self.pairs]

    def arm_sizes(self) -> tuple[int, int]:
        n = len(self.pairs)
        return n, n

    def to_ipd_study(self, treatment_ids: Mapping[str, int], study_id: str | None = None) -> IPDStudy:
        """Convert to an :class:`IPDStudy`, control arm first (arm 0)."""
        exp, ctrl = self.arms
        return IPDStudy(study_id or self.trial_id, treatment_ids[ctrl], treatment_ids[exp],
                        tuple(self.subjects))


# ---------------------------------------------------------------------------

def classify_regimen(drugs: Iterable[str], class_map: Mapping[str, str] | None = None) -> str:
    """Return ``"CX"``, ``"X"``, ``"C"`` or :data:`UNCLASSIFIED`.

    Drugs not in the map are ignored.
    """
    class_map = DEFAULT_CLASS_MAP if class_map is None else class_map
    families = {class_map.get(d.strip().lower()) for d in drugs}
    has_x, has_c = "taxane" in families, "chemo" in families
    if has_x and has_c:
        return "CX"
    if has_x:
        return "X"
    if has_c:
        return "C"
    return UNCLASSIFIED


def filter_eligible(records: Sequence[EHRRecord], protocol: EmulationProtocol) -> list[tuple[EHRRecord, str]]:
    """Eligible records paired with their arm tag."""
    out = []
    for r in records:
        if r.age < protocol.min_age or r.line_of_therapy != protocol.eligible_line:
            continue
        tag = classify_regimen(r.regimen, protocol.class_map)
        if tag in protocol.arms:
            out.append((r, tag))
    if not out:
        raise EmulationError("no eligible records")
    return out


def logistic_irls(X: np.ndarray, y: np.ndarray, *, tol: float = 1e-8, max_iter: int = 100,
                  max_coef: float = 20.0) -> np.ndarray:
    """Maximum-likelihood logistic regression by Newton (IRLS) steps.

    ``X`` must already contain an intercept column.  Raises
    :class:`SeparationError` when any coefficient exceeds ``max_coef`` in
    magnitude or the weighted normal equations become singular.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        p = 0.5 * (1.0 + np.tanh(0.5 * eta))
        grad = X.T @ (y - p)
        if np.linalg.norm(grad) <= tol:
            break
        w = p * (1.0 - p)
        H = X.T @ (X * w[:, None])
        try:
            beta = beta + np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("singular information matrix; arms separable by covariates") from exc
        if np.any(np.abs(beta) > max_coef) or not np.all(np.isfinite(beta)):
            raise SeparationError(f"coefficients diverge ({np.round(beta, 2).tolist()}); arms separable")
    return beta


def _design(records: Sequence[EHRRecord], covariates: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cols = np.column_stack([[getattr(r, c) for r in records] for c in covariates]).astype(float)
    centre = cols.mean(axis=0)
    scale = cols.std(axis=0)
    scale[scale == 0] = 1.0
    return np.column_stack([np.ones(len(records)), (cols - centre) / scale]), centre, scale


def fit_propensity(cohort: Sequence[tuple[EHRRecord, str]], protocol: EmulationProtocol) -> np.ndarray:
    """Fitted probability of receiving the experimental arm for each cohort member."""
    exp = protocol.arms[0]
    y = np.array([tag == exp for _, tag in cohort], dtype=float)
    if y.min() == y.max():
        raise EmulationError("propensity model needs both arms represented")
    X, _, _ = _design([r for r, _ in cohort], protocol.covariates)
    beta = logistic_irls(X, y)
    return 1.0 / (1.0 + np.exp(-(X @ beta)))


def _logit(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


def match_1to1(scores: Sequence[float], is_experimental: Sequence[bool], ids: Sequence[str] | None = None,
               caliper: float | None = None) -> list[tuple[int, int]]:
    """Greedy nearest-neighbour 1:1 matching on ``logit(score)`` without replacement.

    Experimental subjects are matched in descending logit order; ties in
    that order and among equidistant controls are broken by id.  Returns
    ``(experimental_index, control_index)`` pairs.
    """
    scores = np.asarray(scores, dtype=float)
    is_exp = np.asarray(is_experimental, dtype=bool)
    ids = [str(i) for i in range(len(scores))] if ids is None else [str(i) for i in ids]
    lg = _logit(scores)
    exp_idx = [i for i in range(len(scores)) if is_exp[i]]
    ctrl_idx = [i for i in range(len(scores)) if not is_exp[i]]
    if not exp_idx or not ctrl_idx:
        raise EmulationError("matching needs subjects in both arms")
    exp_idx.sort(key=lambda i: (-lg[i], ids[i]))
    ctrl_idx.sort(key=lambda i: (lg[i], ids[i]))
    c_logit = lg[ctrl_idx]
    available = np.ones(len(ctrl_idx), dtype=bool)
    pairs = []
    for i in exp_idx:
        if not available.any():
            break
        dist = np.where(available, np.abs(c_logit - lg[i]), np.inf)
        best = dist.min()
        if caliper is not None and best > caliper:
            continue
        cands = np.nonzero(dist == best)[0]
        j = min(cands, key=lambda c: ids[ctrl_idx[c]])
        available[j] = False
        pairs.append((i, ctrl_idx[j]))
    if not pairs:
        raise EmulationError("no pairs matched within the caliper")
    return pairs


def derive_outcome(record: EHRRecord) -> tuple[float, bool] | None:
    """Per-protocol follow-up in months and death indicator.

    Returns ``None`` (with a warning) when the derived time is not positive.
    """
    ends = [(record.last_followup, 2)]
    if record.second_line_start is not None:
        ends.append((record.second_line_start, 1))
    if record.death_date is not None:
        ends.append((record.death_date, 0))
    # on a tie, death counts as the event; switching censors before follow-up ends
    end, kind = min(ends)
    days = end - record.start_date
    if days <= 0:
        warnings.warn(f"{record.patient_id}: non-positive follow-up, record dropped", stacklevel=2)
        return None
    return days / DAYS_PER_MONTH, kind == 0


def standardized_mean_difference(a: Sequence[float], b: Sequence[float]) -> float:
    """``(mean_a - mean_b) / sqrt((var_a + var_b) / 2)``; 0 when both are constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pooled = math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2) if len(a) > 1 and len(b) > 1 else 0.0
    diff = float(a.mean() - b.mean())
    if pooled == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return diff / pooled


def _balance(records, is_exp, covariates):
    out = {}
    for c in covariates:
        v = np.array([getattr(r, c) for r in records], dtype=float)
        out[c] = standardized_mean_difference(v[is_exp], v[~is_exp])
    return out


def emulate(records: Sequence[EHRRecord], protocol: EmulationProtocol, trial_id: str = "trial") -> EmulatedTrial:
    """Run one emulated trial on ``records``."""
    cohort = filter_eligible(records, protocol)
    kept = []
    for r, tag in cohort:
        outcome = derive_outcome(r)
        if outcome is not None:
            kept.append((r, tag, outcome))
    if not kept:
        raise EmulationError("no eligible record has positive follow-up")
    cohort = [(r, tag) for r, tag, _ in kept]
    exp = protocol.arms[0]
    is_exp = np.array([tag == exp for _, tag in cohort])
    scores = fit_propensity(cohort, protocol)
    ids = [r.patient_id for r, _ in cohort]
    pairs_idx = match_1to1(scores, is_exp, ids, protocol.caliper)
    lg = _logit(scores)

    def subject(i, arm):
        r, _, (t, e) = kept[i]
        return SubjectRecord(r.patient_id, t, e, r.biomarker, arm)

    pairs = [MatchedPair(subject(i, 1), subject(j, 0), kept[i][0].age, kept[j][0].age, float(abs(lg[i] - lg[j])))
             for i, j in pairs_idx]
    before = _balance([r for r, _ in cohort], is_exp, protocol.covariates)
    matched = [kept[i][0] for i, _ in pairs_idx] + [kept[j][0] for _, j in pairs_idx]
    flag = np.r_[np.ones(len(pairs_idx), bool), np.zeros(len(pairs_idx), bool)]
    after = _balance(matched, flag, protocol.covariates)
    balance = {c: (before[c], after[c]) for c in protocol.covariates}
    n_elig = {protocol.arms[0]: int(is_exp.sum()), protocol.arms[1]: int((~is_exp).sum())}
    log.info("%s: %d eligible, %d pairs", trial_id, len(cohort), len(pairs))
    return EmulatedTrial(trial_id, protocol.arms, pairs, balance, n_elig)


def emulate_network(records: Sequence[EHRRecord], protocol: EmulationProtocol, designs: Sequence[tuple[str, str]],
                    *, prefix: str = "EMU") -> list[EmulatedTrial]:
    """Emulate one trial per design on disjoint folds of the records.

    Records are shuffled with the protocol seed and split into
    ``len(designs)`` folds; fold ``i`` is matched under ``designs[i]``.
    Folds whose matching fails are skipped with a warning.
    """
    if not designs:
        raise EmulationError("no trial designs given")
    rng = np.random.default_rng(protocol.seed)
    order = rng.permutation(len(records))
    folds = np.array_split(order, len(designs))
    seeds = np.random.SeedSequence(protocol.seed).spawn(len(designs))
    trials = []
    for i, (fold, arms) in enumerate(zip(folds, designs)):
        fold_protocol = EmulationProtocol(arms=arms, min_age=protocol.min_age, eligible_line=protocol.eligible_line,
                                          class_map=protocol.class_map, covariates=protocol.covariates,
                                          seed=int(seeds[i].generate_state(1, np.uint64)[0]),
                                          caliper=protocol.caliper)
        fold_records = [records[j] for j in sorted(fold, key=lambda j: records[j].patient_id)]
        try:
            trials.append(emulate(fold_records, fold_protocol, f"{prefix}{i + 1}"))
        except EmulationError as exc:
            warnings.warn(f"fold {i + 1} ({arms[0]} vs {arms[1]}) skipped: {exc}", stacklevel=2)
    return trials


def matched_log_hr(trial: EmulatedTrial) -> tuple[float, float]:
    """Log hazard ratio (experimental vs control) and its standard error
    from a Weibull fit to the matched cohort."""
    from .posterior import weibull_mle

    study = trial.to_ipd_study({trial.arms[1]: 1, trial.arms[0]: 2})
    est, se = weibull_mle(study, "pooled")
    return float(est[2]), float(se[2])


# ---------------------------------------------------------------------------
# synthetic records

@dataclass(frozen=True)
class SyntheticEHRConfig:
    """Generator settings; times are drawn in months and stored as day indices.

    Treatment is assigned among the ``arms`` with
    ``logit P(arms[0]) = assign_intercept + assign_age * (age - age_mean) / age_sd
    + assign_biomarker * biomarker``.  Survival is Weibull with hazard
    ``lambda * gamma * t**(gamma - 1)`` and
    ``log lambda = log_lambda0 + biomarker_effect * X + log_hr[X] * T``.
    """

    n: int = 1000
    arms: tuple[str, str] = ("X", "C")
    p_biomarker: float = 0.75
    age_mean: float = 60.0
    age_sd: float = 12.0
    assign_intercept: float = 0.0
    assign_age: float = 0.0
    assign_biomarker: float = 0.0
    gamma: float = 1.2
    log_lambda0: float = -3.5
    biomarker_effect: float = -0.3
    log_hr_neg: float = 0.0
    log_hr_pos: float = 0.0
    switch_rate: float = 0.01
    follow_up: tuple[float, float] = (12.0, 60.0)
    p_later_line: float = 0.05
    p_minor: float = 0.01
    p_other_regimen: float = 0.02

    def __post_init__(self):
        if self.n < 0:
            raise EmulationError("n must be non-negative")
        if not 0 <= self.p_biomarker <= 1:
            raise EmulationError("p_biomarker must be a probability")
        if self.age_sd <= 0 or self.gamma <= 0:
            raise EmulationError("age_sd and gamma must be positive")
        lo, hi = self.follow_up
        if not 0 < lo <= hi:
            raise EmulationError("follow_up must satisfy 0 < min <= max")
        for p in (self.p_later_line, self.p_minor, self.p_other_regimen):
            if not 0 <= p < 1:
                raise EmulationError("record-mix probabilities must lie in [0, 1)")
        if self.switch_rate < 0:
            raise EmulationError("switch_rate must be non-negative")
        unknown = set(self.arms) - set(_REGIMENS)
        if unknown or self.arms[0] == self.arms[1]:
            raise EmulationError(f"arms must be two distinct tags from {sorted(_REGIMENS)}")


_REGIMENS = {
    "X": (("paclitaxel",), ("docetaxel",)),
    "C": (("fluorouracil", "epirubicin", "cyclophosphamide"), ("capecitabine",), ("vinorelbine",),
          ("carboplatin",)),
    "CX": (("docetaxel", "capecitabine"), ("paclitaxel", "carboplatin"), ("docetaxel", "cyclophosphamide")),
}


def generate_synthetic_ehr(config: SyntheticEHRConfig, seed: int) -> list[EHRRecord]:
    """Simulate treatment records with confounded arm assignment."""
    n = config.n
    if n == 0:
        return []
    rng = np.random.default_rng(seed)
    age = np.clip(rng.normal(config.age_mean, config.age_sd, n), 19.0, 100.0)
    minor = rng.random(n) < config.p_minor
    age[minor] = rng.uniform(14.0, 17.9, minor.sum())
    X = (rng.random(n) < config.p_biomarker).astype(int)
    eta = config.assign_intercept + config.assign_age * (age - config.age_mean) / config.age_sd \
        + config.assign_biomarker * X
    T = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(int)
    log_hr = np.where(X == 1, config.log_hr_pos, config.log_hr_neg)
    log_lam = config.log_lambda0 + config.biomarker_effect * X + log_hr * T
    u = rng.random(n)
    t_death = (-np.log(u) / np.exp(log_lam)) ** (1 / config.gamma)
    t_switch = rng.exponential(1 / config.switch_rate, n) if config.switch_rate > 0 else np.full(n, np.inf)
    t_follow = rng.uniform(*config.follow_up, n)
    later = rng.random(n) < config.p_later_line
    other = rng.random(n) < config.p_other_regimen
    start = rng.integers(0, 3650, n)
    choice = rng.random(n)

    def day(months):
        return int(math.ceil(months * DAYS_PER_MONTH))

    records = []
    for i in range(n):
        arm = config.arms[0] if T[i] else config.arms[1]
        options = _REGIMENS[arm]
        regimen = ("trastuzumab",) if other[i] else options[int(choice[i] * len(options))]
        s = int(start[i])
        last = s + day(t_follow[i])
        death = s + day(t_death[i]) if t_death[i] <= t_follow[i] else None
        switch = s + day(t_switch[i]) if t_switch[i] <= t_follow[i] else None
        if death is not None:
            last = max(last, death)
        records.append(EHRRecord(
            patient_id=f"P{i + 1:06d}", age=round(float(age[i]), 1), biomarker=int(X[i]), regimen=regimen,
            line_of_therapy=2 if later[i] else 1, start_date=s, last_followup=last,
            second_line_start=switch, death_date=death,
        ))
    return records


# ---------------------------------------------------------------------------
# file formats

def _opt_int(text: str, where: str) -> int | None:
    text = text.strip()
    if not text:
        return None
    try:
        return int(text)
    except ValueError as exc:
        raise EmulationError(f"{where}: expected an integer day index, got {text!r}") from exc


def read_ehr_csv(path) -> list[EHRRecord]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    fields = [f.strip() for f in (reader.fieldnames or [])]
    missing = [c for c in EHR_COLUMNS if c not in fields]
    if missing:
        raise EmulationError(f"{path}: missing columns {missing}")
    out = []
    for n, row in enumerate(reader, start=2):
        row = {k.strip(): (v or "").strip() for k, v in row.items()}
        where = f"{path}, row {n}"
        try:
            out.append(EHRRecord(
                patient_id=row["patient_id"], age=float(row["age"]), biomarker=int(row["biomarker"]),
                regimen=tuple(d for d in row["drugs"].split(";") if d.strip()),
                line_of_therapy=int(row["line"]), start_date=int(row["start"]),
                last_followup=int(row["last_followup"]),
                second_line_start=_opt_int(row["second_line"], where), death_date=_opt_int(row["death"], where),
            ))
        except ValueError as exc:
            raise EmulationError(f"{where}: {exc}") from exc
    return out


def write_ehr_csv(records: Iterable[EHRRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EHR_COLUMNS)
        for r in records:
            w.writerow([r.patient_id, r.age, r.biomarker, ";".join(r.regimen), r.line_of_therapy, r.start_date,
                        "" if r.second_line_start is None else r.second_line_start,
                        "" if r.death_date is None else r.death_date, r.last_followup])


def load_protocol(path) -> EmulationProtocol:
    """Read an INI protocol file with a ``[protocol]`` section.

    Keys: ``arms`` (e.g. ``X,C``), ``min_age``, ``eligible_line``,
    ``covariates``, ``seed``, ``caliper``; an optional ``[class_map]``
    section adds drug labels (mapped to ``taxane`` or ``chemo``) to the
    default map.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise EmulationError(f"cannot read protocol file {path}")
    if "protocol" not in cp:
        raise EmulationError(f"{path}: missing [protocol] section")
    sec = cp["protocol"]
    kwargs: dict = {}
    if "arms" in sec:
        kwargs["arms"] = tuple(a.strip() for a in sec["arms"].split(","))
    if "covariates" in sec:
        kwargs["covariates"] = tuple(a.strip() for a in sec["covariates"].split(","))
    for key, conv in (("min_age", float), ("eligible_line", int), ("seed", int), ("caliper", float)):
        if key in sec:
            kwargs[key] = conv(sec[key])
    if "class_map" in cp:
        extra = {k.lower(): v.strip() for k, v in cp["class_map"].items()}
        kwargs["class_map"] = {**DEFAULT_CLASS_MAP, **extra}
    return EmulationProtocol(**kwargs)
