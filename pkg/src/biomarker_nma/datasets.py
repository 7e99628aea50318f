"""Bundled case-study inputs and a synthetic stand-in for the breast-cancer IPD.

Breast cancer: treatments C (chemotherapy), X (taxane) and CX (taxane plus
chemotherapy), biomarker = hormone-receptor positive.  Colorectal cancer:
chemotherapy, VEGF + chemotherapy and EGFR + chemotherapy, biomarker =
KRAS wild type.
"""
from __future__ import annotations

from importlib import resources

from .emulation import EmulatedTrial, EmulationProtocol, SyntheticEHRConfig, emulate_network, generate_synthetic_ehr
from .evidence import (
    ADStudyRecord,
    IPDStudy,
    Network,
    Treatment,
    build_network,
    ingest_ad,
    load_class_map,
    make_treatments,
)

__all__ = [
    "BREAST_LABELS",
    "COLORECTAL_LABELS",
    "BREAST_DESIGNS",
    "data_path",
    "breast_treatments",
    "colorectal_treatments",
    "load_breast_ad",
    "load_breast_table2",
    "load_colorectal_ad",
    "breast_ehr_config",
    "synthetic_breast_trials",
    "breast_network",
]

BREAST_LABELS = ("C", "X", "CX")
COLORECTAL_LABELS = ("C", "VEGF+C", "EGFR+C")
BREAST_DESIGNS = tuple([("X", "C")] * 5 + [("CX", "C")] * 5)


def data_path(name: str):
    return resources.files("biomarker_nma") / "data" / name


def breast_treatments() -> tuple[Treatment, ...]:
    return make_treatments(BREAST_LABELS)


def colorectal_treatments() -> tuple[Treatment, ...]:
    return make_treatments(COLORECTAL_LABELS)


def _load(csv_name: str, map_name: str, treatments) -> list[ADStudyRecord]:
    with resources.as_file(data_path(map_name)) as mp, resources.as_file(data_path(csv_name)) as cp:
        return ingest_ad(cp, treatments, load_class_map(mp))


def load_breast_ad() -> list[ADStudyRecord]:
    """Default breast-cancer aggregate bundle: 13 comparisons against chemotherapy."""
    return _load("breast_ad.csv", "breast_classes.map", breast_treatments())


def load_breast_table2() -> list[ADStudyRecord]:
    """All 18 published breast-cancer rows (including head-to-head taxane trials)."""
    return _load("breast_table2.csv", "breast_classes.map", breast_treatments())


def load_colorectal_ad() -> list[ADStudyRecord]:
    return _load("colorectal_ad.csv", "colorectal_classes.map", colorectal_treatments())


def breast_ehr_config(n_trials: int = 10, per_trial: int = 150) -> SyntheticEHRConfig:
    """Records for ``n_trials`` folds of roughly 64 matched pairs each.

    The experimental arm is drawn for 45% of patients, about 75% are
    hormone-receptor positive and there is mild confounding by age.
    """
    return SyntheticEHRConfig(n=n_trials * per_trial, p_biomarker=0.75, assign_intercept=-0.2,
                              assign_age=0.2, assign_biomarker=0.1, log_hr_neg=-0.1, log_hr_pos=0.0)


def synthetic_breast_trials(seed: int = 20240101, designs=BREAST_DESIGNS) -> list[EmulatedTrial]:
    """Emulated trials (5 X vs C and 5 CX vs C by default) from synthetic records.

    The arm named first in each design is the experimental arm; the
    generator assigns its ``arms[0]`` to that regimen class.
    """
    trials = []
    for i, arms in enumerate(designs):
        cfg = breast_ehr_config(1)
        cfg = SyntheticEHRConfig(**{**cfg.__dict__, "arms": tuple(arms)})
        records = generate_synthetic_ehr(cfg, seed + i)
        trial, = emulate_network(records, EmulationProtocol(arms=tuple(arms), seed=seed + i), [tuple(arms)],
                                 prefix=f"EMU{i + 1}_")
        trial.trial_id = f"EMU{i + 1}"
        trials.append(trial)
    return trials


def breast_network(with_ipd: bool = True, seed: int = 20240101) -> Network:
    """Breast-cancer network: 13 AD rows plus (optionally) 10 emulated trials."""
    treatments = breast_treatments()
    ids = {t.label: t.id for t in treatments}
    ipd: list[IPDStudy] = []
    if with_ipd:
        ipd = [t.to_ipd_study(ids) for t in synthetic_breast_trials(seed)]
    return build_network(treatments, load_breast_ad(), ipd)
