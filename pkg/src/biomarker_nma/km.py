"""Reconstruct participant-level survival data from a digitised Kaplan-Meier
curve and its numbers-at-risk table.

Within each risk-table interval the number of censorings is chosen so that
the implied number at risk at the next table time matches the table; the
censorings are spread evenly over the interval and events are placed at the
curve's drop times so that the product-limit estimate of the output follows
the input curve.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evidence import SubjectRecord

__all__ = [
    "RECONSTRUCTION_TOLERANCE",
    "ReconstructionError",
    "DigitizedCurve",
    "RiskTable",
    "IntervalCounts",
    "ReconstructionReport",
    "reconstruct",
    "km_estimate",
    "survival_at",
    "roundtrip_error",
    "read_curve_csv",
    "read_risk_csv",
]

log = logging.getLogger(__name__)

MAX_ITER = 50
RISE_TOLERANCE = 0.005
RECONSTRUCTION_TOLERANCE = 0.02
TAIL_TOLERANCE = RECONSTRUCTION_TOLERANCE


class ReconstructionError(ValueError):
    pass


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class DigitizedCurve:
    """Step-function coordinates ``(time, survival)`` of one arm.

    Use :meth:`from_points` to validate raw digitiser output: a point at
    time 0 with survival 1 is prepended when missing and small upward
    jitter (up to ``RISE_TOLERANCE``) is clipped away with a warning.
    """

    times: np.ndarray
    survival: np.ndarray
    arm_label: str = ""

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, float]], arm_label: str = "") -> "DigitizedCurve":
        if len(points) == 0:
            raise ReconstructionError("curve has no points")
        t = np.array([p[0] for p in points], dtype=float)
        s = np.array([p[1] for p in points], dtype=float)
        if np.any(t < 0) or np.any(np.diff(t) <= 0):
            raise ReconstructionError("curve times must be non-negative and strictly increasing")
        if np.any((s < 0) | (s > 1)):
            raise ReconstructionError("survival values must lie in [0, 1]")
        if t[0] == 0 and s[0] != 1:
            raise ReconstructionError("survival at time 0 must be 1")
        if t[0] > 0:
            t = np.concatenate([[0.0], t])
            s = np.concatenate([[1.0], s])
        running = np.minimum.accumulate(s)
        rise = float(np.max(s - running))
        if rise > RISE_TOLERANCE:
            raise ReconstructionError(f"survival rises by {rise:.4f}, more than digitisation noise")
        if rise > 0:
            warnings.warn(f"clipping survival rise of {rise:.4f} in curve {arm_label!r}", stacklevel=2)
        return cls(t, running, arm_label)


@dataclass(frozen=True)
class RiskTable:
    times: np.ndarray
    n_at_risk: np.ndarray

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[float, int]]) -> "RiskTable":
        if len(entries) == 0:
            raise ReconstructionError("risk table is empty")
        t = np.array([e[0] for e in entries], dtype=float)
        n = np.array([e[1] for e in entries], dtype=int)
        if t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ReconstructionError("risk-table times must start at 0 and increase strictly")
        if n[0] < 1 or np.any(np.diff(n) > 0) or np.any(n < 0):
            raise ReconstructionError("numbers at risk must start positive and never increase")
        return cls(t, n)


@dataclass(frozen=True)
class IntervalCounts:
    start: float
    end: float
    n_at_risk: int
    events: int
    censored: int


@dataclass
class ReconstructionReport:
    records: list[SubjectRecord]
    max_abs_survival_deviation: float
    intervals: list[IntervalCounts] = field(default_factory=list)


# ---------------------------------------------------------------------------

def _step_value(times, surv, t):
    idx = np.searchsorted(times, t, side="right") - 1
    return surv[max(idx, 0)]


class _Walker:
    """Book-keeping for one pass over the digitised points."""

    def __init__(self, T, S):
        self.T, self.S = T, S
        n = len(T)
        self.d = np.zeros(n, dtype=int)
        self.cen = np.zeros(n, dtype=int)
        self.nhat = np.zeros(n + 1, dtype=int)
        self.km = np.ones(n)
        self.cen_times: list[np.ndarray] = [np.zeros(0)] * n

    def run_interval(self, lo, hi, n_start, cen_times, km_last, last):
        """Allocate events on points ``lo..hi``; returns number left after ``hi``."""
        T, S = self.T, self.S
        nxt = np.append(T[lo + 1:hi + 1], np.inf)
        starts = np.searchsorted(cen_times, T[lo:hi + 1], side="left")
        counts = np.searchsorted(cen_times, nxt, side="left") - starts
        self.nhat[lo] = n_start
        for idx, k in enumerate(range(lo, hi + 1)):
            n_k = self.nhat[k]
            if k == 0 or n_k <= 0 or km_last <= 0:
                d = 0
            else:
                d = _round_half_up(n_k * (1.0 - S[k] / km_last))
                d = min(max(d, 0), n_k)
            self.d[k] = d
            self.km[k] = km_last * (1.0 - d / n_k) if n_k > 0 else km_last
            if d > 0:
                km_last = self.km[k]
                last = k
            self.cen[k] = min(int(counts[idx]), n_k - d)
            self.cen_times[k] = cen_times[starts[idx]:starts[idx] + self.cen[k]]
            self.nhat[k + 1] = n_k - d - self.cen[k]
        return self.nhat[hi + 1], km_last, last


def _even(start, end, count):
    if count <= 0:
        return np.zeros(0)
    return start + (end - start) * np.arange(1, count + 1) / (count + 1)


def reconstruct(
    curve: DigitizedCurve,
    risk: RiskTable,
    total_events: int | None = None,
    *,
    arm: int = 0,
    biomarker: int = 0,
    study_id: str = "study",
    arm_label: str | None = None,
) -> ReconstructionReport:
    """Rebuild individual times and event indicators for one curve.

    Parameters
    ----------
    curve, risk
        Digitised curve and the numbers at risk printed beneath it.
    total_events
        Reported total number of events; when given, censoring after the
        last risk-table time is tuned to reproduce it.
    arm, biomarker
        Values copied into every output record.
    study_id, arm_label
        Used to build subject ids ``"<study>_<arm>_<k>"``.

    Returns
    -------
    ReconstructionReport
        Records (one per participant at risk at time 0), the sup-norm
        distance between the input curve and the records' product-limit
        estimate, and per-interval event/censoring counts.
    """
    if risk.times[-1] < 0 or curve.times[-1] < risk.times[0]:
        raise ReconstructionError("curve and risk table do not overlap")
    arm_label = arm_label if arm_label is not None else (curve.arm_label or str(arm))

    # make every risk-table time a curve point
    T = list(curve.times)
    S = list(curve.survival)
    for t in risk.times:
        if t not in curve.times:
            s_val = _step_value(curve.times, curve.survival, t)
            pos = int(np.searchsorted(T, t))
            T.insert(pos, float(t))
            S.insert(pos, float(s_val))
    T = np.array(T)
    S = np.array(S)

    m = len(risk.times)
    lower = [int(np.searchsorted(T, t)) for t in risk.times]
    upper = [lower[i + 1] - 1 for i in range(m - 1)] + [len(T) - 1]
    nr = risk.n_at_risk
    w = _Walker(T, S)
    intervals: list[IntervalCounts] = []
    km_last, last = 1.0, 0
    n_here = int(nr[0])

    for i in range(m - 1):
        lo, hi = lower[i], upper[i]
        t0, t1 = risk.times[i], risk.times[i + 1]
        if n_here != nr[i]:
            raise ReconstructionError(f"internal mismatch at risk time {t0}")
        s_lo = S[lo]
        guess = _round_half_up(nr[i] * S[lower[i + 1]] / s_lo - nr[i + 1]) if s_lo > 0 else 0
        n_cens = min(max(guess, 0), int(nr[i]))
        tried: dict[int, int] = {}
        for _ in range(MAX_ITER):
            left, _, _ = w.run_interval(lo, hi, n_here, _even(t0, t1, n_cens), km_last, last)
            tried[n_cens] = int(left)
            if left == nr[i + 1]:
                break
            nxt = min(max(n_cens + int(left - nr[i + 1]), 0), int(nr[i]))
            if nxt in tried:
                break
            n_cens = nxt
        if tried[n_cens] != nr[i + 1]:
            # even spacing cannot hit the target: take the largest count that
            # leaves too many at risk and censor the surplus after the last drop
            ok = [c for c, v in tried.items() if v >= nr[i + 1]]
            if not ok:
                raise ReconstructionError(
                    f"interval [{t0}, {t1}): more events than the risk table allows "
                    f"(tried censor counts {sorted(tried)}, at risk {sorted(set(tried.values()))} "
                    f"vs {nr[i + 1]})")
            n_cens = max(ok)
        cens = _even(t0, t1, n_cens)
        left, km_last, last = w.run_interval(lo, hi, n_here, cens, km_last, last)
        surplus = int(left - nr[i + 1])
        if surplus > 0:
            tail_start = max(T[hi], cens[-1] if len(cens) else t0)
            extra = _even(tail_start, t1, surplus)
            cens = np.concatenate([cens, extra])
            w.cen[hi] += surplus
            w.cen_times[hi] = np.concatenate([w.cen_times[hi], extra])
            w.nhat[hi + 1] -= surplus
            left = nr[i + 1]
        intervals.append(IntervalCounts(float(t0), float(t1), int(nr[i]),
                                        int(w.d[lo:hi + 1].sum()), int(w.cen[lo:hi + 1].sum())))
        n_here = int(left)

    # tail after the last risk-table time
    lo, hi = lower[-1], upper[-1]
    t0, t_end = risk.times[-1], T[-1]
    if t_end > t0:
        # censoring after the last table time is unconstrained by the table:
        # among counts reproducing the curve tail within TAIL_TOLERANCE, take
        # the one closest to the reported event total, then the closest fit
        events_before = int(w.d[:lo].sum())
        scores = []
        for c in range(n_here + 1):
            w.run_interval(lo, hi, n_here, _even(t0, t_end, c), km_last, last)
            dev = float(np.max(np.abs(S[lo:hi + 1] - w.km[lo:hi + 1])))
            miss = 0 if total_events is None else abs(int(w.d[lo:hi + 1].sum()) + events_before - total_events)
            scores.append((miss, round(dev, 12), c))
        admissible = [sc for sc in scores if sc[1] <= TAIL_TOLERANCE] or [min(scores, key=lambda sc: sc[1:])]
        miss, _, n_cens = min(admissible)
        if miss:
            warnings.warn(f"total events reproduced only to within {miss}", stacklevel=2)
        cens = _even(t0, t_end, n_cens)
    else:
        cens = np.zeros(0)
    w.run_interval(lo, hi, n_here, cens, km_last, last)
    remaining = int(w.nhat[hi + 1])
    intervals.append(IntervalCounts(float(t0), float(t_end), n_here,
                                    int(w.d[lo:hi + 1].sum()), int(w.cen[lo:hi + 1].sum()) + remaining))

    if remaining and t_end <= 0:
        raise ReconstructionError("curve ends at time 0; cannot place censored participants")

    times: list[float] = []
    events: list[bool] = []
    for k in np.nonzero(w.d)[0]:
        times += [float(T[k])] * int(w.d[k])
        events += [True] * int(w.d[k])
    all_cens = np.concatenate(w.cen_times)
    times += [float(c) for c in all_cens]
    events += [False] * len(all_cens)
    times += [float(t_end)] * remaining
    events += [False] * remaining
    order = np.lexsort((~np.array(events, dtype=bool), np.array(times)))
    records = [
        SubjectRecord(f"{study_id}_{arm_label}_{n + 1}", times[o], events[o], biomarker, arm)
        for n, o in enumerate(order)
    ]
    if len(records) != nr[0]:
        raise ReconstructionError(f"produced {len(records)} records for {nr[0]} at risk")
    dev = roundtrip_error(curve, records)
    return ReconstructionReport(records, dev, intervals)


def km_estimate(records: Sequence[SubjectRecord]) -> list[tuple[float, float]]:
    """Product-limit estimate at time 0 and at every distinct observed time."""
    if len(records) == 0:
        raise ValueError("no records")
    t = np.array([r.time for r in records], dtype=float)
    e = np.array([r.event for r in records], dtype=bool)
    uniq = np.unique(t)
    out = [(0.0, 1.0)]
    surv = 1.0
    at_risk = len(t)
    for u in uniq:
        here = t == u
        d = int(np.sum(e & here))
        if d:
            surv *= 1.0 - d / at_risk
        out.append((float(u), surv))
        at_risk -= int(np.sum(here))
    return out


def survival_at(step: Sequence[tuple[float, float]], t: float) -> float:
    """Value of a step function (as returned by :func:`km_estimate`) at ``t``."""
    times = np.array([p[0] for p in step])
    surv = np.array([p[1] for p in step])
    return float(_step_value(times, surv, t))


def roundtrip_error(curve: DigitizedCurve, records: Sequence[SubjectRecord]) -> float:
    """Largest ``|S_curve(t) - S_km(t)|`` over the curve's points, each side
    taken as the step value holding from that time onwards.
    """
    step = km_estimate(records)
    times = np.array([p[0] for p in step])
    surv = np.array([p[1] for p in step])
    idx = np.searchsorted(times, curve.times, side="right") - 1
    fitted = surv[np.maximum(idx, 0)]
    return float(np.max(np.abs(curve.survival - fitted)))


# ---------------------------------------------------------------------------
# CSV helpers

def _csv_rows(path, columns):
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or any(c not in [f.strip() for f in reader.fieldnames] for c in columns):
        raise ReconstructionError(f"{path}: expected header {','.join(columns)}")
    rows = [{k.strip(): v.strip() for k, v in r.items()} for r in reader]
    if not rows:
        raise ReconstructionError(f"{path}: no data rows")
    return rows


def read_curve_csv(path, arm_label: str = "") -> DigitizedCurve:
    rows = _csv_rows(path, ("time", "survival"))
    return DigitizedCurve.from_points([(float(r["time"]), float(r["survival"])) for r in rows],
                                      arm_label)


def read_risk_csv(path) -> RiskTable:
    rows = _csv_rows(path, ("time", "n_at_risk"))
    return RiskTable.from_entries([(float(r["time"]), int(r["n_at_risk"])) for r in rows])
