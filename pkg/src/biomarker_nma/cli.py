"""Command-line interface.

Every run is driven by an INI file (see ``--print-defaults``); relative
paths in it are resolved against the file's directory. Logs go to standard
error and results to files under the output directory.

Exit codes: 0 success, 1 unexpected error, 2 invalid input, 3 convergence
gate not met (outputs are still written).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datasets
from .emulation import (
    EmulationError,
    EmulationProtocol,
    SyntheticEHRConfig,
    emulate_network,
    generate_synthetic_ehr,
    load_protocol,
    read_ehr_csv,
)
from .evidence import (
    EvidenceError,
    IPDStudy,
    Network,
    build_network,
    ingest_ad,
    ingest_ipd,
    load_class_map,
    make_treatments,
    write_ipd_csv,
)
from .km import RECONSTRUCTION_TOLERANCE, ReconstructionError, read_curve_csv, read_risk_csv, reconstruct
from .mcmc import SamplerConfig
from .pipelines import compare_fits, export_forest, fit, read_fit_json, write_fit_json
from .posterior import ModelSpec, StructureError

log = logging.getLogger("biomarker_nma")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_CONVERGENCE = 0, 1, 2, 3

DEFAULTS = """\
# Run configuration. Paths are relative to this file.
[run]
seed = 20240101
out = results

[data]
# bundle = breast | colorectal loads packaged aggregate data and labels
bundle =
# include the ten emulated breast-cancer trials with bundle = breast
synthetic_ipd = false
# comma-separated treatment labels, reference first (ignored with a bundle)
treatments =
class_map =
ad =
# comma-separated participant-level CSV files
ipd =

[model]
# 1: aggregate-data NMR, 2: two-stage, 3: one-stage
kind = 1
stage_one = pooled
gamma_shape = 1.0
gamma_rate = 0.01
prior_var = 100.0
tau_upper = 2.0

[sampler]
n_chains = 4
burn_in = 10000
n_iter = 20000
thin = 1
target_accept = 0.44
adapt_window = 50

[emulate]
# EHR CSV; leave empty to simulate synthetic_n records instead
ehr =
synthetic_n = 3000
protocol =
# experimental:control designs, "*n" repeats (one fold per design)
designs = X:C*5, CX:C*5
caliper =

# One [km:<study>] section per digitised study, for example
# [km:Study1]
# ref = C
# exp = EGFR+C
# curves =
#     0, 1, ctrl_wt.csv, ctrl_wt_risk.csv
#     1, 1, exp_wt.csv, exp_wt_risk.csv, 120
# Each line: arm, biomarker, curve CSV, risk CSV[, total events].
"""


class ConfigError(ValueError):
    pass


INVALID = (ConfigError, EvidenceError, EmulationError, ReconstructionError, StructureError, ValueError,
           KeyError, FileNotFoundError)


# ---------------------------------------------------------------------------
# configuration

class RunConfig:
    """Parsed INI configuration with CLI overrides applied."""

    def __init__(self, path: str | None, seed: int | None = None, out: str | None = None):
        self.cp = configparser.ConfigParser()
        self.cp.read_string(DEFAULTS)
        self.base = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {path} not found")
            self.cp.read(p, encoding="utf-8")
            self.base = p.resolve().parent
        run = self.cp["run"]
        try:
            self.seed = int(seed if seed is not None else run.get("seed"))
        except (TypeError, ValueError):
            raise ConfigError("[run] seed must be an integer") from None
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        self.out = Path(out) if out is not None else self.path(run.get("out", "results"))

    def path(self, value: str) -> Path:
        p = Path(value.strip())
        return p if p.is_absolute() else self.base / p

    def get(self, section: str, key: str, fallback: str = "") -> str:
        return self.cp.get(section, key, fallback=fallback).strip()

    def paths(self, section: str, key: str) -> list[Path]:
        raw = self.get(section, key)
        return [self.path(v) for v in raw.replace("\n", ",").split(",") if v.strip()]

    def spec(self) -> ModelSpec:
        m = self.cp["model"]
        try:
            return ModelSpec(gamma_shape=m.getfloat("gamma_shape"), gamma_rate=m.getfloat("gamma_rate"),
                             prior_var=m.getfloat("prior_var"), tau_upper=m.getfloat("tau_upper"))
        except ValueError as exc:
            raise ConfigError(f"[model]: {exc}") from None

    def sampler(self) -> SamplerConfig:
        s = self.cp["sampler"]
        try:
            return SamplerConfig(n_chains=s.getint("n_chains"), burn_in=s.getint("burn_in"),
                                 n_iter=s.getint("n_iter"), thin=s.getint("thin"), seed=self.seed,
                                 target_accept=s.getfloat("target_accept"), adapt_window=s.getint("adapt_window"))
        except ValueError as exc:
            raise ConfigError(f"[sampler]: {exc}") from None

    def kind(self) -> str:
        return self.get("model", "kind", "1")

    def stage_one_mode(self) -> str:
        mode = self.get("model", "stage_one", "pooled")
        if mode not in ("pooled", "subgroup"):
            raise ConfigError(f"[model] stage_one must be pooled or subgroup, got {mode!r}")
        return mode

    # -- evidence --------------------------------------------------------
    def treatments(self):
        bundle = self.get("data", "bundle")
        if bundle == "breast":
            return datasets.breast_treatments()
        if bundle == "colorectal":
            return datasets.colorectal_treatments()
        if bundle:
            raise ConfigError(f"unknown bundle {bundle!r}")
        labels = [v.strip() for v in self.get("data", "treatments").split(",") if v.strip()]
        if len(labels) < 2:
            raise ConfigError("[data] treatments needs at least two labels (reference first)")
        return make_treatments(labels)

    def class_map(self):
        raw = self.get("data", "class_map")
        return load_class_map(self.path(raw)) if raw else None

    def network(self) -> Network:
        treatments = self.treatments()
        cmap = self.class_map()
        bundle = self.get("data", "bundle")
        ad, ipd = [], []
        if bundle == "breast":
            ad += datasets.load_breast_ad()
            if self.cp.getboolean("data", "synthetic_ipd", fallback=False):
                ids = {t.label: t.id for t in treatments}
                ipd += [t.to_ipd_study(ids) for t in datasets.synthetic_breast_trials(self.seed)]
        elif bundle == "colorectal":
            ad += datasets.load_colorectal_ad()
        if self.get("data", "ad"):
            ad += ingest_ad(self.path(self.get("data", "ad")), treatments, cmap)
        for p in self.paths("data", "ipd"):
            ipd += ingest_ipd(p, treatments, cmap)
        if not ad and not ipd:
            raise ConfigError("no evidence configured ([data] bundle, ad or ipd)")
        return build_network(treatments, ad, ipd)


# ---------------------------------------------------------------------------
# commands

def cmd_validate(cfg: RunConfig, args) -> int:
    problems: list[str] = []
    network = None
    try:
        network = cfg.network()
    except INVALID as exc:
        problems.append(str(exc))
    for name, section in _km_sections(cfg):
        try:
            _km_entries(cfg, section)
        except INVALID as exc:
            problems.append(f"[km:{name}] {exc}")
    ehr = cfg.get("emulate", "ehr")
    if ehr:
        try:
            read_ehr_csv(cfg.path(ehr))
        except INVALID as exc:
            problems.append(str(exc))
    for p in problems:
        log.error("%s", p)
    if problems:
        print(f"{len(problems)} problem(s) found")
        return EXIT_INVALID
    n_studies = len(network.ad_studies) + len(network.ipd_studies)
    print(f"{network.n_treatments} treatments, {n_studies} studies")
    return EXIT_OK


def _km_sections(cfg: RunConfig):
    for sec in cfg.cp.sections():
        if sec.startswith("km:"):
            yield sec[3:].strip(), cfg.cp[sec]


def _km_entries(cfg: RunConfig, section):
    entries = []
    for line in section.get("curves", "").splitlines():
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (4, 5):
            raise ConfigError(f"curve line {line!r}: expected arm, biomarker, curve, risk[, events]")
        arm, bm = int(parts[0]), int(parts[1])
        total = int(parts[4]) if len(parts) == 5 else None
        entries.append((arm, bm, read_curve_csv(cfg.path(parts[2]), f"arm{arm}"), read_risk_csv(cfg.path(parts[3])),
                        total))
    if not entries:
        raise ConfigError("no curves listed")
    return entries


def cmd_reconstruct_km(cfg: RunConfig, args) -> int:
    treatments = cfg.treatments()
    labels = {t.label: t.id for t in treatments}
    sections = list(_km_sections(cfg))
    if not sections:
        raise ConfigError("no [km:<study>] sections in the configuration")
    cfg.out.mkdir(parents=True, exist_ok=True)
    report_rows = []
    failures = 0
    for name, section in sections:
        try:
            k, l = labels[section.get("ref", "").strip()], labels[section.get("exp", "").strip()]
            records = []
            for arm, bm, curve, risk, total in _km_entries(cfg, section):
                rep = reconstruct(curve, risk, total, arm=arm, biomarker=bm, study_id=name,
                                  arm_label=f"a{arm}b{bm}")
                flag = "ok" if rep.max_abs_survival_deviation <= RECONSTRUCTION_TOLERANCE else "WARN"
                if flag != "ok":
                    log.warning("%s arm %d biomarker %d: round-trip deviation %.4f", name, arm, bm,
                                rep.max_abs_survival_deviation)
                report_rows.append([name, arm, bm, len(rep.records), sum(r.event for r in rep.records),
                                    f"{rep.max_abs_survival_deviation:.4f}", flag])
                records += rep.records
            study = IPDStudy(name, k, l, tuple(records))
            write_ipd_csv([study], cfg.out / f"ipd_{name}.csv", treatments)
        except INVALID as exc:
            failures += 1
            log.error("[km:%s] reconstruction failed: %s", name, exc)
            report_rows.append([name, "", "", "", "", "", f"FAILED: {exc}"])
    with open(cfg.out / "km_report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study", "arm", "biomarker", "n", "events", "max_abs_deviation", "status"])
        w.writerows(report_rows)
    return EXIT_INVALID if failures else EXIT_OK


def _designs(text: str) -> list[tuple[str, str]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        rep = 1
        if "*" in item:
            item, n = item.rsplit("*", 1)
            rep = int(n)
        if ":" not in item:
            raise ConfigError(f"design {item!r} must read experimental:control")
        exp, ctrl = (s.strip() for s in item.split(":", 1))
        out += [(exp, ctrl)] * rep
    if not out:
        raise ConfigError("[emulate] designs is empty")
    return out


def cmd_emulate(cfg: RunConfig, args) -> int:
    designs = _designs(cfg.get("emulate", "designs"))
    proto_path = cfg.get("emulate", "protocol")
    protocol = load_protocol(cfg.path(proto_path)) if proto_path else EmulationProtocol()
    caliper = cfg.get("emulate", "caliper")
    protocol = dataclasses.replace(protocol, seed=cfg.seed,
                                   caliper=float(caliper) if caliper else protocol.caliper)
    ehr = cfg.get("emulate", "ehr")
    if ehr:
        records = read_ehr_csv(cfg.path(ehr))
    else:
        n = int(cfg.get("emulate", "synthetic_n", "3000"))
        arms = sorted({a for d in designs for a in d})
        if not set(arms) <= {"X", "C", "CX"}:
            raise ConfigError("synthetic records support the X, C and CX classes only")
        records = _synthetic_records(n, designs, cfg.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        trials = emulate_network(records, protocol, designs)
    for w in caught:
        log.warning("%s", w.message)
    if len(trials) < len(designs):
        log.error("%d of %d trials could not be emulated", len(designs) - len(trials), len(designs))
        if not trials:
            return EXIT_INVALID
    treatments = cfg.treatments() if (cfg.get("data", "bundle") or cfg.get("data", "treatments")) \
        else datasets.breast_treatments()
    ids = {t.label: t.id for t in treatments}
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in trials:
        write_ipd_csv([t.to_ipd_study(ids)], cfg.out / f"emulated_{t.trial_id}.csv", treatments)
        exp_age = np.mean([p.age_experimental for p in t.pairs])
        ctl_age = np.mean([p.age_control for p in t.pairs])
        rows.append([t.trial_id, t.arms[0], t.arms[1], len(t.pairs), len(t.pairs),
                     f"{exp_age:.1f}", f"{ctl_age:.1f}",
                     sum(p.experimental.biomarker for p in t.pairs), sum(p.control.biomarker for p in t.pairs),
                     f"{t.balance['age'][0]:.3f}", f"{t.balance['age'][1]:.3f}"])
    with open(cfg.out / "balance.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "experimental", "control", "n_experimental", "n_control", "mean_age_experimental",
                    "mean_age_control", "pos_experimental", "pos_control", "smd_age_before", "smd_age_after"])
        w.writerows(rows)
    return EXIT_OK if len(trials) == len(designs) else EXIT_INVALID


def _synthetic_records(n: int, designs, seed: int):
    """Pool of synthetic records covering every design's regimen classes."""
    pairs = sorted(set(designs))
    per = max(n // len(pairs), 1)
    records = []
    for i, arms in enumerate(pairs):
        sc = SyntheticEHRConfig(n=per, arms=tuple(arms))
        batch = generate_synthetic_ehr(sc, seed + i)
        records += [dataclasses.replace(r, patient_id=f"S{i + 1}_{r.patient_id}") for r in batch]
    return records


def cmd_fit(cfg: RunConfig, args) -> int:
    network = cfg.network()
    summary = fit(cfg.kind(), network, cfg.spec(), cfg.sampler(), cfg.stage_one_mode())
    cfg.out.mkdir(parents=True, exist_ok=True)
    tag = summary.model
    write_fit_json(summary, cfg.out / f"fit_{tag}.json")
    summary.draws.to_csv(cfg.out / f"draws_{tag}.csv")
    export_forest(summary, cfg.out / f"forest_{tag}.csv")
    if summary.converged:
        log.info("convergence gate passed")
        return EXIT_OK
    log.warning("convergence gate not met; outputs flagged")
    return EXIT_CONVERGENCE


def cmd_summarize(cfg: RunConfig, args) -> int:
    fits = [read_fit_json(p) for p in args.fits]
    if not fits:
        raise ConfigError("give at least one fit JSON file")
    cfg.out.mkdir(parents=True, exist_ok=True)
    export_forest(fits, cfg.out / "forest.csv")
    for f in fits:
        for c in f.contrasts:
            print(f"{f.model}  {c.label:<20} {c.subgroup}  {c.hr_median:.2f} ({c.lower:.2f}, {c.upper:.2f})")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    a, b = read_fit_json(args.fit_a), read_fit_json(args.fit_b)
    rows = compare_fits(a, b)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / f"compare_{a.model}_{b.model}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["contrast", "subgroup", "width_a", "width_b", "reduction_pct"])
        for r in rows:
            w.writerow([r["contrast"], r["subgroup"], f"{r['width_a']:.3f}", f"{r['width_b']:.3f}",
                        f"{r['reduction_pct']:.1f}"])
    for r in rows:
        print(f"{r['contrast']:<20} {r['subgroup']}  {r['reduction_pct']:.1f}%")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "reconstruct-km": cmd_reconstruct_km,
    "emulate": cmd_emulate,
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biomarker-nma", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="INI run configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    parser.add_argument("--out", help="output directory (overrides [run] out)")
    parser.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("validate", help="check inputs and network connectivity")
    sub.add_parser("reconstruct-km", help="rebuild participant data from digitised curves")
    sub.add_parser("emulate", help="emulate target trials from EHR records")
    sub.add_parser("fit", help="fit the configured model")
    p = sub.add_parser("summarize", help="tabulate fit summaries")
    p.add_argument("fits", nargs="+")
    p = sub.add_parser("compare", help="credible-interval width reduction between two fits")
    p.add_argument("fit_a")
    p.add_argument("fit_b")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        sys.stdout.write(DEFAULTS)
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        cfg = RunConfig(args.config, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except INVALID as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except Exception:  # noqa: BLE001
        log.exception("unexpected failure")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
