"""End-to-end fits of the three analysis models and their summaries.

* Model 1 (:func:`fit_model1`): network meta-regression on aggregate data.
* Model 2 (:func:`fit_model2`): each participant-level study is first
  reduced to a log hazard ratio by :func:`stage_one_fit`, the resulting
  pseudo-aggregate rows are added to the aggregate data and Model 1 is run
  on the union.
* Model 3 (:func:`fit_model3`): one-stage joint model.

All fits return a :class:`FitSummary` holding hazard-ratio summaries for
every contrast in both biomarker subgroups, convergence diagnostics and
provenance hashes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .evidence import ADStudyRecord, EvidenceError, IPDStudy, Network, build_network, ipd_ppos
from .mcmc import Draws, SamplerConfig, ess, rhat, run_chains
from .posterior import ModelKind, ModelSpec, NMAPosterior, StudyPosterior, TAU_FLOOR

__all__ = [
    "SUBGROUPS",
    "RHAT_MAX",
    "ESS_MIN",
    "StageOneError",
    "PseudoADRow",
    "ContrastSummary",
    "FitSummary",
    "stage_one_fit",
    "fit_model1",
    "fit_model2",
    "fit_model3",
    "fit",
    "contrast_log_hr",
    "contrast_hr",
    "width_reduction",
    "compare_fits",
    "export_forest",
    "round_half_up",
]

log = logging.getLogger(__name__)

SUBGROUPS = ("+ve", "-ve")
RHAT_MAX = 1.05
ESS_MIN = 400.0
MODEL_LABELS = {ModelKind.AD_NMR: "M1", ModelKind.TWO_STAGE: "M2", ModelKind.ONE_STAGE: "M3"}


class StageOneError(EvidenceError):
    pass


@dataclass(frozen=True)
class PseudoADRow:
    """Stage-one summary of a participant-level study on the log-HR scale."""

    study_id: str
    treatment_k: int
    treatment_l: int
    y: float
    sigma: float
    ppos: float
    origin: str = "stage-one"

    def __post_init__(self):
        if not self.sigma > 0:
            raise StageOneError(f"{self.study_id}: stage-one sigma must be positive")

    def to_record(self) -> ADStudyRecord:
        half = 1.959963984540054 * self.sigma
        return ADStudyRecord(
            study_id=self.study_id, treatment_k=self.treatment_k, treatment_l=self.treatment_l,
            hr=math.exp(self.y), ci_low=math.exp(self.y - half), ci_high=math.exp(self.y + half),
            ppos=self.ppos, y=self.y, sigma=self.sigma,
        )


@dataclass(frozen=True)
class ContrastSummary:
    """Posterior hazard ratio of ``treatment_l`` versus ``treatment_k``."""

    treatment_k: int
    treatment_l: int
    label: str
    subgroup: str
    hr_median: float
    hr_mean: float
    lower: float
    upper: float
    rhat: float
    ess: float


@dataclass
class FitSummary:
    kind: ModelKind
    treatments: list[str]
    contrasts: list[ContrastSummary]
    tau: dict[str, float]
    diagnostics: dict[str, dict[str, float]]
    converged: bool
    provenance: dict[str, object]
    pseudo_ad: list[PseudoADRow] = field(default_factory=list)
    draws: Draws | None = field(default=None, repr=False, compare=False)

    @property
    def model(self) -> str:
        return MODEL_LABELS[self.kind]

    def contrast(self, k: int, l: int, subgroup: str) -> ContrastSummary:
        for c in self.contrasts:
            if (c.treatment_k, c.treatment_l, c.subgroup) == (k, l, subgroup):
                return c
        raise KeyError(f"no contrast {l} vs {k} ({subgroup}) in this fit")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "kind": self.kind.value,
            "treatments": list(self.treatments),
            "contrasts": [dataclasses.asdict(c) for c in self.contrasts],
            "tau": dict(self.tau),
            "diagnostics": self.diagnostics,
            "converged": self.converged,
            "provenance": self.provenance,
            "pseudo_ad": [dataclasses.asdict(r) for r in self.pseudo_ad],
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FitSummary":
        return cls(
            kind=ModelKind(d["kind"]),
            treatments=list(d["treatments"]),
            contrasts=[ContrastSummary(**c) for c in d["contrasts"]],
            tau={k: float(v) for k, v in d["tau"].items()},
            diagnostics=d["diagnostics"],
            converged=bool(d["converged"]),
            provenance=d["provenance"],
            pseudo_ad=[PseudoADRow(**r) for r in d.get("pseudo_ad", [])],
        )

    @classmethod
    def from_json(cls, text: str) -> "FitSummary":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# contrasts on draws

def _basic(draws: Draws, k: int, subgroup: str) -> np.ndarray:
    if subgroup not in SUBGROUPS:
        raise ValueError(f"subgroup must be one of {SUBGROUPS}, got {subgroup!r}")
    if k == 1:
        return np.zeros(draws.samples.shape[:2])
    name = f"d_neg[{k}]" if subgroup == "-ve" else f"d_pos[{k}]"
    if name not in draws:
        raise KeyError(f"unknown treatment {k}")
    return draws.get(name)


def contrast_log_hr(draws: Draws, k: int, l: int, subgroup: str) -> np.ndarray:
    """Per-draw log hazard ratio of ``l`` versus ``k``, shape ``(chains, iterations)``."""
    if k == l:
        raise ValueError("contrast needs two different treatments")
    return _basic(draws, l, subgroup) - _basic(draws, k, subgroup)


def contrast_hr(draws: Draws, k: int, l: int, subgroup: str, level: float = 0.95) -> tuple[float, float, float]:
    """Posterior median and equal-tailed interval of the hazard ratio."""
    hr = np.exp(contrast_log_hr(draws, k, l, subgroup)).ravel()
    a = (1 - level) / 2
    lo, med, hi = np.quantile(hr, [a, 0.5, 1 - a])
    return float(med), float(lo), float(hi)


def round_half_up(x: float, digits: int = 1) -> float:
    q = 10 ** digits
    return math.floor(x * q + 0.5) / q


def width_reduction(ci_a: Sequence[float], ci_b: Sequence[float]) -> float:
    """Percentage by which interval ``b`` is narrower than baseline ``a``."""
    (a_lo, a_hi), (b_lo, b_hi) = ci_a, ci_b
    if not a_hi > a_lo:
        raise ValueError("baseline interval has no width")
    if not b_hi > b_lo:
        raise ValueError("comparison interval must satisfy hi > lo")
    return 100.0 * (1.0 - (b_hi - b_lo) / (a_hi - a_lo))


def compare_fits(fit_a: FitSummary, fit_b: FitSummary) -> list[dict]:
    """Width reduction of every contrast/subgroup interval from ``fit_a`` to ``fit_b``."""
    key = lambda c: (c.treatment_k, c.treatment_l, c.subgroup)  # noqa: E731
    a = {key(c): c for c in fit_a.contrasts}
    b = {key(c): c for c in fit_b.contrasts}
    if set(a) != set(b):
        raise ValueError(f"fits cover different contrasts: {sorted(set(a) ^ set(b))}")
    rows = []
    for kk in sorted(a):
        ca, cb = a[kk], b[kk]
        rows.append({
            "contrast": ca.label, "subgroup": ca.subgroup,
            "width_a": ca.upper - ca.lower, "width_b": cb.upper - cb.lower,
            "reduction_pct": round_half_up(width_reduction((ca.lower, ca.upper), (cb.lower, cb.upper))),
        })
    return rows


# ---------------------------------------------------------------------------
# provenance

def _digest(obj) -> str:
    text = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def network_digest(network: Network) -> str:
    ad = [[r.study_id, r.treatment_k, r.treatment_l, repr(r.y), repr(r.sigma), repr(r.ppos)]
          for r in network.ad_studies]
    ipd = [[s.study_id, s.treatment_k, s.treatment_l,
            [[r.subject_id, repr(r.time), r.event, r.biomarker, r.arm] for r in s.subjects]]
           for s in network.ipd_studies]
    labels = [[t.id, t.label] for t in network.treatments]
    return _digest({"treatments": labels, "ad": ad, "ipd": ipd})


def config_digest(spec: ModelSpec, config: SamplerConfig, stage_one_mode: str | None) -> str:
    s = dataclasses.asdict(spec)
    s["kind"] = spec.kind.value
    return _digest({"spec": s, "sampler": dataclasses.asdict(config), "stage_one": stage_one_mode})


# ---------------------------------------------------------------------------
# fitting

def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0])


def _check_events(study: IPDStudy) -> None:
    arr = study.arrays
    for arm, tid in ((0, study.treatment_k), (1, study.treatment_l)):
        if arr["event"][arr["arm"] == arm].sum() == 0:
            raise StageOneError(f"{study.study_id}: no events in arm {arm} (treatment {tid})")


def stage_one_fit(study: IPDStudy, mode: str = "pooled", config: SamplerConfig | None = None,
                  spec: ModelSpec | None = None) -> list[PseudoADRow]:
    """Reduce one participant-level study to pseudo-aggregate rows.

    ``pooled`` gives one row (treatment effect ignoring the biomarker, with
    the study's biomarker-positive share as ``ppos``); ``subgroup`` gives
    one row per biomarker level present, with ``ppos`` 1 and 0.
    """
    if mode not in ("pooled", "subgroup"):
        raise ValueError(f"unknown stage-one mode {mode!r}")
    _check_events(study)
    cfg = config or SamplerConfig()
    target = StudyPosterior(study, mode, spec)
    draws = run_chains(target, config=cfg)
    sid = study.study_id

    def row(name, suffix, ppos):
        v = draws.pooled(f"{name}[{sid}]")
        return PseudoADRow(f"{sid}{suffix}", study.treatment_k, study.treatment_l, float(v.mean()),
                           float(v.std(ddof=1)), ppos, f"stage-one:{mode}")

    if target.mode == "pooled":
        share = ipd_ppos(study)
        if mode == "subgroup":
            return [row("delta", "+ve" if share == 1.0 else "-ve", 1.0 if share == 1.0 else 0.0)]
        return [row("delta", "", share)]
    return [row("delta_pos", "+ve", 1.0), row("delta_neg", "-ve", 0.0)]


def _ad_delta_draws(post: NMAPosterior, samples: np.ndarray, seed: int) -> tuple[list[str], np.ndarray]:
    """Draw each AD study's effect from its full conditional given the other draws."""
    if post.n_ad == 0:
        return [], np.zeros(samples.shape[:2] + (0,))
    rng = np.random.default_rng(seed)
    bb = np.concatenate([np.zeros(samples.shape[:2] + (1,)), samples[..., post.sl_bb]], axis=-1)
    d = np.concatenate([np.zeros(samples.shape[:2] + (1,)), samples[..., post.sl_a]], axis=-1) - bb * post.center
    if post.i_tau is None:
        tau = np.full(samples.shape[:2], post.spec.tau_fixed)
    else:
        tau = samples[..., post.i_tau]
    tau = np.maximum(tau, TAU_FLOOR)[..., None]
    md = d[..., post.ad_l] - d[..., post.ad_k] + (bb[..., post.ad_l] - bb[..., post.ad_k]) * post.ppos
    prec = 1 / post.sigma ** 2 + 1 / tau ** 2
    mean = (post.y / post.sigma ** 2 + md / tau ** 2) / prec
    vals = mean + rng.standard_normal(mean.shape) / np.sqrt(prec)
    return [f"delta[{r.study_id}]" for r in post.network.ad_studies], vals


def _summarize(kind: ModelKind, network: Network, draws: Draws, spec: ModelSpec, config: SamplerConfig,
               stage_one_mode: str | None, data_digest: str, pseudo: list[PseudoADRow]) -> FitSummary:
    labels = [t.label for t in network.treatments]
    contrasts = []
    gate = True
    for k, l in [(k, l) for k in range(1, len(labels) + 1) for l in range(k + 1, len(labels) + 1)]:
        for sg in SUBGROUPS:
            lhr = contrast_log_hr(draws, k, l, sg)
            hr = np.exp(lhr).ravel()
            lo, med, hi = np.quantile(hr, [0.025, 0.5, 0.975])
            r, e = _diag(lhr)
            gate &= (r <= RHAT_MAX) and (e >= ESS_MIN)
            contrasts.append(ContrastSummary(k, l, f"{labels[l - 1]} vs {labels[k - 1]}", sg, float(med),
                                             float(hr.mean()), float(lo), float(hi), r, e))
    diagnostics = {}
    for name in draws.names:
        r, e = _diag(draws.get(name))
        diagnostics[name] = {"rhat": r, "ess": e}
    if "tau" in draws:
        t = draws.pooled("tau")
        lo, med, hi = np.quantile(t, [0.025, 0.5, 0.975])
        tau = {"mean": float(t.mean()), "median": float(med), "lower": float(lo), "upper": float(hi),
               "sd": float(t.std(ddof=1))}
    else:
        tau = {"fixed": float(spec.tau_fixed)}
    provenance = {
        "config_hash": config_digest(spec, config, stage_one_mode),
        "seed": int(config.seed),
        "data_digest": data_digest,
        "version": __version__,
    }
    if not gate:
        log.warning("convergence gate failed (R-hat <= %.2f and ESS >= %.0f required)", RHAT_MAX, ESS_MIN)
    return FitSummary(kind, labels, contrasts, tau, diagnostics, bool(gate), provenance, pseudo, draws)


def _diag(x: np.ndarray) -> tuple[float, float]:
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = rhat(x) if x.shape[0] >= 2 and x.shape[1] >= 4 else float("nan")
        e = ess(x) if x.size >= 4 else float("nan")
    return float(r), float(e)


def _run_nma(kind: ModelKind, network: Network, spec: ModelSpec, config: SamplerConfig) -> tuple[Draws, NMAPosterior]:
    spec = dataclasses.replace(spec, kind=kind)
    post = NMAPosterior(spec, network)
    raw = run_chains(post, config=config)
    names, values = post.reported(raw.samples)
    d_names, d_vals = _ad_delta_draws(post, raw.samples, _derived_seed(config.seed, 2))
    draws = Draws(names + d_names, np.concatenate([values, d_vals], axis=-1), raw.acceptance, raw.seeds)
    return draws, post


def fit_model1(network: Network, spec: ModelSpec | None = None, config: SamplerConfig | None = None) -> FitSummary:
    """Aggregate-data network meta-regression (participant-level studies are ignored)."""
    spec = spec or ModelSpec()
    cfg = config or SamplerConfig()
    ad_only = build_network(network.treatments, network.ad_studies, ())
    return _fit_ad(ModelKind.AD_NMR, ad_only, spec, cfg, None, [], network_digest(ad_only))


def _fit_ad(kind, network, spec, cfg, mode, pseudo, digest):
    if not network.ad_studies:
        raise EvidenceError("no aggregate-data rows to fit")
    draws, _ = _run_nma(kind, network, spec, cfg)
    return _summarize(kind, network, draws, spec, cfg, mode, digest, pseudo)


def fit_model2(network: Network, mode: str = "pooled", spec: ModelSpec | None = None,
               config: SamplerConfig | None = None, stage_one_config: SamplerConfig | None = None) -> FitSummary:
    """Two-stage analysis: per-study stage-one fits, then Model 1 on the union.

    Stage-one chains use seeds derived from ``config.seed`` and the study's
    position, so the second stage uses exactly the same random stream as
    :func:`fit_model1` would.
    """
    spec = spec or ModelSpec()
    cfg = config or SamplerConfig()
    s1 = stage_one_config or cfg
    pseudo: list[PseudoADRow] = []
    for j, st in enumerate(network.ipd_studies):
        s1_cfg = dataclasses.replace(s1, seed=_derived_seed(cfg.seed, 1, j))
        pseudo += stage_one_fit(st, mode, s1_cfg, spec)
    union = build_network(network.treatments, list(network.ad_studies) + [p.to_record() for p in pseudo], ())
    # the stage-one mode only matters (and is only hashed) when there is IPD
    return _fit_ad(ModelKind.TWO_STAGE, union, spec, cfg, mode if pseudo else None, pseudo,
                   network_digest(network))


def fit_model3(network: Network, spec: ModelSpec | None = None, config: SamplerConfig | None = None) -> FitSummary:
    """One-stage joint model of participant-level and aggregate data."""
    spec = spec or ModelSpec()
    cfg = config or SamplerConfig()
    for st in network.ipd_studies:
        if {s.arm for s in st.subjects} != {0, 1}:
            raise EvidenceError(f"{st.study_id}: both arms need subjects")
    draws, _ = _run_nma(ModelKind.ONE_STAGE, network, spec, cfg)
    return _summarize(ModelKind.ONE_STAGE, network, draws, spec, cfg, None, network_digest(network), [])


def fit(kind: ModelKind | int | str, network: Network, spec: ModelSpec | None = None,
        config: SamplerConfig | None = None, stage_one_mode: str = "pooled",
        stage_one_config: SamplerConfig | None = None) -> FitSummary:
    """Dispatch on model kind (``1``/``2``/``3`` or a :class:`ModelKind`)."""
    kind = _kind(kind)
    if kind is ModelKind.AD_NMR:
        return fit_model1(network, spec, config)
    if kind is ModelKind.TWO_STAGE:
        return fit_model2(network, stage_one_mode, spec, config, stage_one_config)
    return fit_model3(network, spec, config)


def _kind(kind) -> ModelKind:
    if isinstance(kind, ModelKind):
        return kind
    table = {"1": ModelKind.AD_NMR, "2": ModelKind.TWO_STAGE, "3": ModelKind.ONE_STAGE}
    key = str(kind).strip()
    if key in table:
        return table[key]
    try:
        return ModelKind(key.upper())
    except ValueError:
        raise ValueError(f"unknown model {kind!r}; use 1, 2 or 3") from None


# ---------------------------------------------------------------------------
# export

FOREST_COLUMNS = ("model", "contrast", "subgroup", "hr", "lo", "hi", "rhat_max", "ess_min")


def export_forest(fits: FitSummary | Iterable[FitSummary], dest) -> None:
    """Write the hazard-ratio table behind a forest plot.

    Rows are ordered by contrast, subgroup (+ve first) and model.
    """
    fits = [fits] if isinstance(fits, FitSummary) else list(fits)
    rows = []
    for f in fits:
        for c in f.contrasts:
            rows.append(((c.treatment_k, c.treatment_l), SUBGROUPS.index(c.subgroup), f.model,
                         [f.model, c.label, c.subgroup, c.hr_median, c.lower, c.upper, c.rhat, c.ess]))
    rows.sort(key=lambda r: r[:3])
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FOREST_COLUMNS)
        for *_, vals in rows:
            w.writerow(vals[:3] + [f"{v:.3f}" for v in vals[3:]])


def write_fit_json(fit_summary: FitSummary, dest) -> None:
    Path(dest).write_text(fit_summary.to_json(), encoding="utf-8")


def read_fit_json(path) -> FitSummary:
    return FitSummary.from_json(Path(path).read_text(encoding="utf-8"))
