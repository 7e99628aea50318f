"""Study-level and participant-level evidence: types, CSV ingestion and
the deterministic preparation steps applied before any model is fitted.
"""
from __future__ import annotations

import csv
import io
import math
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, TextIO, Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.stats import norm

__all__ = [
    "AD_COLUMNS",
    "IPD_COLUMNS",
    "EvidenceError",
    "ParseError",
    "NetworkError",
    "Treatment",
    "ADStudyRecord",
    "SubjectRecord",
    "IPDStudy",
    "Network",
    "make_treatments",
    "normalize_label",
    "load_class_map",
    "parse_hr_ci",
    "hr_to_loghr",
    "impute_missing_status",
    "ingest_ad",
    "ingest_ipd",
    "write_ipd_csv",
    "build_network",
    "ipd_ppos",
]

AD_COLUMNS = (
    "study_id", "ref_treatment", "exp_treatment", "hr", "ci_low", "ci_high",
    "n_total", "n_pos", "n_neg", "n_unknown",
)
IPD_COLUMNS = ("study_id", "subject_id", "treatment", "biomarker", "time", "event")

Source = Union[str, os.PathLike, TextIO]


class EvidenceError(ValueError):
    """Base class for invalid evidence."""


class ParseError(EvidenceError):
    """A CSV row could not be turned into a valid record."""

    def __init__(self, message: str, source: str = "<input>", row: int | None = None):
        self.source = source
        self.row = row
        where = f"{source}" if row is None else f"{source}, row {row}"
        super().__init__(f"{where}: {message}")


class NetworkError(EvidenceError):
    """The comparison graph is malformed (e.g. disconnected)."""

    def __init__(self, message: str, components: list[list[str]] | None = None):
        self.components = components or []
        super().__init__(message)


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class Treatment:
    id: int
    label: str
    class_tag: str = ""

    def __post_init__(self):
        if self.id < 1:
            raise EvidenceError(f"treatment ids start at 1, got {self.id}")
        if not self.class_tag:
            object.__setattr__(self, "class_tag", self.label)


@dataclass(frozen=True)
class ADStudyRecord:
    """One aggregate-data comparison of ``treatment_l`` against ``treatment_k``.

    ``y``/``sigma`` are the log hazard ratio and its standard deviation;
    they stay ``None`` until :func:`hr_to_loghr` has been applied (see
    :meth:`with_log_scale`).
    """

    study_id: str
    treatment_k: int
    treatment_l: int
    hr: float
    ci_low: float
    ci_high: float
    n_total: int | None = None
    n_pos: int | None = None
    n_neg: int | None = None
    n_unknown: int | None = None
    ppos: float = 0.0
    y: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.treatment_k == self.treatment_l:
            raise EvidenceError(f"{self.study_id}: reference and experimental treatment coincide")
        if not (0.0 < self.ci_low < self.hr < self.ci_high):
            raise EvidenceError(
                f"{self.study_id}: need 0 < ci_low < hr < ci_high, got "
                f"{self.hr} ({self.ci_low}, {self.ci_high})"
            )
        counts = (self.n_pos, self.n_neg, self.n_unknown)
        if self.n_total is not None and None not in counts:
            if sum(counts) != self.n_total:
                raise EvidenceError(
                    f"{self.study_id}: n_pos + n_neg + n_unknown = {sum(counts)} "
                    f"!= n_total = {self.n_total}"
                )
        if not (0.0 <= self.ppos <= 1.0):
            raise EvidenceError(f"{self.study_id}: ppos {self.ppos} outside [0, 1]")
        if self.sigma is not None and not self.sigma > 0:
            raise EvidenceError(f"{self.study_id}: sigma must be positive")

    def with_log_scale(self, level: float = 0.95) -> "ADStudyRecord":
        y, sigma = hr_to_loghr(self.hr, self.ci_low, self.ci_high, level)
        return replace(self, y=y, sigma=sigma)

    def flipped(self) -> "ADStudyRecord":
        """Same evidence expressed as ``treatment_k`` versus ``treatment_l``."""
        return replace(
            self,
            treatment_k=self.treatment_l,
            treatment_l=self.treatment_k,
            hr=1.0 / self.hr,
            ci_low=1.0 / self.ci_high,
            ci_high=1.0 / self.ci_low,
            y=None if self.y is None else -self.y,
        )


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    time: float
    event: bool
    biomarker: int
    arm: int

    def __post_init__(self):
        if not self.time > 0:
            raise EvidenceError(f"{self.subject_id}: time must be positive, got {self.time}")
        if self.biomarker not in (0, 1):
            raise EvidenceError(f"{self.subject_id}: biomarker must be 0 or 1")
        if self.arm not in (0, 1):
            raise EvidenceError(f"{self.subject_id}: arm must be 0 or 1")


@dataclass(frozen=True)
class IPDStudy:
    """Participant-level data from one two-arm study.

    Arm 0 receives ``treatment_k`` and arm 1 receives ``treatment_l``.
    """

    study_id: str
    treatment_k: int
    treatment_l: int
    subjects: tuple[SubjectRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if self.treatment_k == self.treatment_l:
            raise EvidenceError(f"{self.study_id}: both arms receive treatment {self.treatment_k}")
        arms = {s.arm for s in self.subjects}
        if self.subjects and arms != {0, 1}:
            raise EvidenceError(f"{self.study_id}: needs at least one subject in each arm")

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """Column arrays ``time``, ``event``, ``biomarker``, ``arm``."""
        s = self.subjects
        return {
            "time": np.array([r.time for r in s], dtype=float),
            "event": np.array([r.event for r in s], dtype=float),
            "biomarker": np.array([r.biomarker for r in s], dtype=float),
            "arm": np.array([r.arm for r in s], dtype=float),
        }

    def flipped(self) -> "IPDStudy":
        subjects = tuple(replace(s, arm=1 - s.arm) for s in self.subjects)
        return IPDStudy(self.study_id, self.treatment_l, self.treatment_k, subjects)


@dataclass(frozen=True)
class Network:
    treatments: tuple[Treatment, ...]
    ad_studies: tuple[ADStudyRecord, ...] = ()
    ipd_studies: tuple[IPDStudy, ...] = ()

    def __post_init__(self):
        for name in ("treatments", "ad_studies", "ipd_studies"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        ids = sorted(t.id for t in self.treatments)
        if ids != list(range(1, len(ids) + 1)):
            raise EvidenceError(f"treatment ids must be dense 1..n, got {ids}")

    @property
    def n_treatments(self) -> int:
        return len(self.treatments)

    @property
    def contrasts(self) -> tuple[tuple[int, int], ...]:
        pairs = {(min(s.treatment_k, s.treatment_l), max(s.treatment_k, s.treatment_l))
                 for s in (*self.ad_studies, *self.ipd_studies)}
        return tuple(sorted(pairs))

    def treatment(self, key: int | str) -> Treatment:
        for t in self.treatments:
            if key == t.id or key == t.label or key == t.class_tag:
                return t
        raise KeyError(f"unknown treatment {key!r}")

    def label(self, tid: int) -> str:
        return self.treatment(tid).label


def make_treatments(labels: Sequence[str]) -> tuple[Treatment, ...]:
    """Treatments numbered in the given order; the first is the reference."""
    if len(set(labels)) != len(labels):
        raise EvidenceError(f"duplicate treatment labels in {list(labels)}")
    return tuple(Treatment(i + 1, lab, lab) for i, lab in enumerate(labels))


# ---------------------------------------------------------------------------
# transforms

def hr_to_loghr(hr: float, ci_low: float, ci_high: float, level: float = 0.95) -> tuple[float, float]:
    """Log hazard ratio and its standard deviation from a reported HR and CI.

    The SD is the CI width on the log scale divided by ``2 * z`` where ``z``
    is the standard normal quantile at ``(1 + level) / 2``.
    """
    if min(hr, ci_low, ci_high) <= 0:
        raise EvidenceError("hazard ratio and interval limits must be positive")
    if not 0 < level < 1:
        raise EvidenceError(f"level must lie in (0, 1), got {level}")
    if ci_low == ci_high:
        raise EvidenceError("zero-width interval implies zero standard deviation")
    if not ci_low < hr < ci_high:
        raise EvidenceError(f"need ci_low < hr < ci_high, got {hr} ({ci_low}, {ci_high})")
    z = norm.ppf(0.5 + level / 2)
    return math.log(hr), (math.log(ci_high) - math.log(ci_low)) / (2 * z)


def impute_missing_status(n_pos: int, n_neg: int, n_unknown: int, n_total: int) -> tuple[int, float]:
    """Allocate participants of unknown status in proportion to the known ones.

    The imputed positive count is rounded up. Returns the final positive
    count and its share of ``n_total`` (full precision).

    >>> impute_missing_status(131, 49, 29, 209)
    (153, 0.7320574162679426)
    """
    if n_pos + n_neg + n_unknown != n_total:
        raise EvidenceError(f"counts {n_pos}+{n_neg}+{n_unknown} do not add up to {n_total}")
    if min(n_pos, n_neg, n_unknown) < 0:
        raise EvidenceError("counts must be non-negative")
    known = n_pos + n_neg
    if known == 0:
        if n_unknown:
            raise EvidenceError("cannot impute: no participant has known status")
        raise EvidenceError("empty study")
    # integer ceiling of n_unknown * n_pos / known
    final = n_pos + (-(-n_unknown * n_pos // known))
    return final, final / n_total


_HR_CI = re.compile(r"^\s*([0-9.]+)\s*\(\s*([0-9.]+)\s*[,;]\s*([0-9.]+)\s*\)\s*$")


def parse_hr_ci(text: str) -> tuple[float, float, float]:
    """Parse the ``"0.75(0.55,1.02)"`` style used in published tables."""
    m = _HR_CI.match(text)
    if not m:
        raise EvidenceError(f"cannot parse hazard ratio {text!r}")
    return tuple(float(g) for g in m.groups())  # type: ignore[return-value]


def ipd_ppos(study: IPDStudy) -> float:
    """Fraction of biomarker-positive participants."""
    return float(np.mean([s.biomarker for s in study.subjects]))


# ---------------------------------------------------------------------------
# treatment labels

def normalize_label(label: str) -> str:
    s = re.sub(r"\s+", " ", label.strip().lower())
    return re.sub(r"\s*\+\s*", "+", s)


def load_class_map(source: Source) -> dict[str, str]:
    """Read ``label -> class_tag`` lines. Blank lines and ``#`` comments are skipped."""
    text, name = _read_text(source)
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line:
            raise ParseError("expected 'label -> class_tag'", name, lineno)
        label, tag = (part.strip() for part in line.split("->", 1))
        if not label or not tag:
            raise ParseError("empty label or class tag", name, lineno)
        mapping[normalize_label(label)] = tag
    return mapping


def _resolve(label: str, treatments: Sequence[Treatment], class_map: dict[str, str] | None) -> int:
    key = label
    if class_map is not None:
        # labels that already are class tags need no map entry
        key = class_map.get(normalize_label(label), label)
    for t in treatments:
        if key in (t.class_tag, t.label):
            return t.id
    raise KeyError(label)


# ---------------------------------------------------------------------------
# CSV ingestion

def _read_text(source: Source) -> tuple[str, str]:
    if hasattr(source, "read"):
        return source.read(), getattr(source, "name", "<stream>")
    path = Path(source)
    return path.read_text(encoding="utf-8"), str(path)


def _rows(source: Source, required: Sequence[str]) -> tuple[list[dict[str, str]], str]:
    text, name = _read_text(source)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ParseError("no studies (empty file)", name)
    header = [h.strip() for h in reader.fieldnames]
    missing = [c for c in required if c not in header]
    if missing:
        raise ParseError(f"header lacks columns {missing}", name, 1)
    rows = [{(k or "").strip(): (v or "").strip() for k, v in r.items()} for r in reader]
    if not rows:
        raise ParseError("no studies", name)
    return rows, name


def _num(row: dict[str, str], key: str, kind, name: str, lineno: int, optional: bool = False):
    raw = row.get(key, "")
    if raw == "" and optional:
        return None
    try:
        return kind(raw)
    except ValueError:
        raise ParseError(f"malformed number in {key!r}: {raw!r}", name, lineno) from None


def ingest_ad(
    source: Source,
    treatments: Sequence[Treatment],
    class_map: dict[str, str] | None = None,
) -> list[ADStudyRecord]:
    """Parse an aggregate-data CSV (see ``AD_COLUMNS``).

    Treatment cells are resolved through ``class_map`` when given, otherwise
    they must name a treatment label or class tag directly. An optional
    ``ppos`` column overrides the count-based imputation, in which case the
    count columns may be left empty. Row numbers in errors count the header
    as row 1.
    """
    rows, name = _rows(source, AD_COLUMNS)
    records = []
    for lineno, row in enumerate(rows, start=2):
        try:
            k = _resolve(row["ref_treatment"], treatments, class_map)
            l = _resolve(row["exp_treatment"], treatments, class_map)
        except KeyError as exc:
            raise ParseError(f"unknown treatment label {exc.args[0]!r}", name, lineno) from None
        given_ppos = _num(row, "ppos", float, name, lineno, optional=True)
        counts = [_num(row, c, int, name, lineno, optional=given_ppos is not None)
                  for c in ("n_total", "n_pos", "n_neg", "n_unknown")]
        try:
            if given_ppos is None:
                _, ppos = impute_missing_status(counts[1], counts[2], counts[3], counts[0])
            else:
                ppos = given_ppos
            rec = ADStudyRecord(
                study_id=row["study_id"],
                treatment_k=k,
                treatment_l=l,
                hr=_num(row, "hr", float, name, lineno),
                ci_low=_num(row, "ci_low", float, name, lineno),
                ci_high=_num(row, "ci_high", float, name, lineno),
                n_total=counts[0], n_pos=counts[1], n_neg=counts[2], n_unknown=counts[3],
                ppos=ppos,
            )
        except ParseError:
            raise
        except EvidenceError as exc:
            raise ParseError(str(exc), name, lineno) from None
        records.append(rec)
    return records


def ingest_ipd(
    source: Source,
    treatments: Sequence[Treatment],
    class_map: dict[str, str] | None = None,
) -> list[IPDStudy]:
    """Parse a participant-level CSV (see ``IPD_COLUMNS``) into studies.

    Each study must involve exactly two treatments; the one with the lower
    id becomes arm 0.
    """
    rows, name = _rows(source, IPD_COLUMNS)
    grouped: dict[str, list[tuple[int, int, dict[str, str]]]] = defaultdict(list)
    for lineno, row in enumerate(rows, start=2):
        try:
            tid = _resolve(row["treatment"], treatments, class_map)
        except KeyError as exc:
            raise ParseError(f"unknown treatment label {exc.args[0]!r}", name, lineno) from None
        grouped[row["study_id"]].append((lineno, tid, row))

    studies = []
    for study_id, entries in grouped.items():
        tids = sorted({tid for _, tid, _ in entries})
        if len(tids) != 2:
            raise ParseError(f"study {study_id!r} must have exactly two treatments, found {tids}",
                             name, entries[0][0])
        k, l = tids
        subjects = []
        for lineno, tid, row in entries:
            event = _num(row, "event", int, name, lineno)
            biomarker = _num(row, "biomarker", int, name, lineno)
            if event not in (0, 1):
                raise ParseError(f"event must be 0 or 1, got {event}", name, lineno)
            try:
                subjects.append(SubjectRecord(
                    subject_id=row["subject_id"],
                    time=_num(row, "time", float, name, lineno),
                    event=bool(event),
                    biomarker=biomarker,
                    arm=int(tid == l),
                ))
            except EvidenceError as exc:
                raise ParseError(str(exc), name, lineno) from None
        try:
            studies.append(IPDStudy(study_id, k, l, tuple(subjects)))
        except EvidenceError as exc:
            raise ParseError(str(exc), name) from None
    return studies


def write_ipd_csv(studies: Iterable[IPDStudy], dest: Source, treatments: Sequence[Treatment]) -> None:
    labels = {t.id: t.label for t in treatments}
    close = False
    if not hasattr(dest, "write"):
        dest = open(dest, "w", encoding="utf-8", newline="")
        close = True
    try:
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(IPD_COLUMNS)
        for st in studies:
            arm_label = {0: labels[st.treatment_k], 1: labels[st.treatment_l]}
            for s in st.subjects:
                w.writerow([st.study_id, s.subject_id, arm_label[s.arm], s.biomarker,
                            repr(float(s.time)), int(s.event)])
    finally:
        if close:
            dest.close()


# ---------------------------------------------------------------------------
# network assembly

def build_network(
    treatments: Sequence[Treatment],
    ad_studies: Sequence[ADStudyRecord] = (),
    ipd_studies: Sequence[IPDStudy] = (),
) -> Network:
    """Canonicalise evidence (``k < l``), sort it and check connectivity.

    AD records are converted to the log scale if that has not happened yet.
    The result does not depend on the input order of the studies.
    """
    ids = {t.id for t in treatments}
    ad, ipd = [], []
    for rec in ad_studies:
        if rec.treatment_k not in ids or rec.treatment_l not in ids:
            raise EvidenceError(f"{rec.study_id}: references an undeclared treatment")
        if rec.y is None:
            rec = rec.with_log_scale()
        ad.append(rec.flipped() if rec.treatment_k > rec.treatment_l else rec)
    for st in ipd_studies:
        if st.treatment_k not in ids or st.treatment_l not in ids:
            raise EvidenceError(f"{st.study_id}: references an undeclared treatment")
        if not st.subjects:
            raise EvidenceError(f"{st.study_id}: no subjects")
        ipd.append(st.flipped() if st.treatment_k > st.treatment_l else st)

    ad.sort(key=lambda r: (r.study_id, r.treatment_k, r.treatment_l, r.y))
    ipd.sort(key=lambda s: (s.study_id, s.treatment_k, s.treatment_l))
    net = Network(tuple(sorted(treatments, key=lambda t: t.id)), tuple(ad), tuple(ipd))

    n = net.n_treatments
    pairs = net.contrasts
    if n > 1:
        rows = [k - 1 for k, _ in pairs]
        cols = [l - 1 for _, l in pairs]
        graph = sparse.coo_matrix((np.ones(len(pairs)), (rows, cols)), shape=(n, n))
        n_comp, labels = connected_components(graph, directed=False)
        if n_comp > 1:
            comps = [[net.treatments[i].label for i in range(n) if labels[i] == c]
                     for c in range(n_comp)]
            raise NetworkError(f"network is disconnected: components {comps}", comps)
    return net
