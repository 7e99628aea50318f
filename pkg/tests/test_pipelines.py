import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biomarker_nma.evidence import ADStudyRecord, IPDStudy, SubjectRecord, build_network, make_treatments
from biomarker_nma.mcmc import Draws, SamplerConfig, mcse
from biomarker_nma.pipelines import (
    FitSummary,
    PseudoADRow,
    StageOneError,
    compare_fits,
    contrast_hr,
    contrast_log_hr,
    export_forest,
    fit,
    fit_model1,
    fit_model2,
    fit_model3,
    read_fit_json,
    round_half_up,
    stage_one_fit,
    width_reduction,
    write_fit_json,
)
from biomarker_nma.posterior import ModelSpec
from biomarker_nma.simulate import simulate_ipd_study

FAST = SamplerConfig(n_chains=2, burn_in=1000, n_iter=2000, seed=7)
MEDIUM = SamplerConfig(n_chains=4, burn_in=2000, n_iter=5000, seed=8)


def _ad(sid, k, l, y, sigma, ppos):
    return ADStudyRecord(sid, k, l, math.exp(y), math.exp(y - 1.96 * sigma), math.exp(y + 1.96 * sigma),
                         ppos=ppos, y=y, sigma=sigma)


@pytest.fixture(scope="module")
def abc_ad():
    tr = make_treatments(["A", "B", "C"])
    rows = [_ad("s1", 1, 2, -0.2, 0.15, 0.4), _ad("s2", 1, 2, -0.1, 0.2, 0.7), _ad("s3", 1, 3, 0.1, 0.2, 0.5),
            _ad("s4", 1, 3, 0.0, 0.25, 0.8), _ad("s5", 2, 3, 0.2, 0.3, 0.6)]
    return build_network(tr, rows)


@pytest.fixture(scope="module")
def m1(abc_ad):
    return fit_model1(abc_ad, config=FAST)


# ---------------------------------------------------------------------------
# width reduction

@pytest.mark.parametrize("a, b, expected", [
    ((0.62, 1.84), (0.69, 1.56), 28.7),
    ((0.62, 1.84), (0.67, 1.29), 49.2),
    ((0.35, 2.01), (0.41, 1.85), 13.3),
    ((0.35, 2.01), (0.65, 1.76), 33.1),
    ((0.74, 0.98), (0.74, 0.96), 8.3),
    ((0.82, 1.42), (0.87, 1.25), 36.7),
])
def test_width_reduction_published(a, b, expected):
    assert abs(width_reduction(a, b) - expected) <= 0.05 + 1e-9
    assert round_half_up(width_reduction(a, b)) == expected


def test_width_reduction_edge_cases():
    assert width_reduction((0.5, 2.0), (0.5, 2.0)) == 0.0
    with pytest.raises(ValueError):
        width_reduction((1.0, 1.0), (0.5, 2.0))
    assert width_reduction((1.0, 2.0), (0.5, 3.0)) == pytest.approx(-150.0)


def test_round_half_up():
    assert round_half_up(28.75) == 28.8
    assert round_half_up(0.05, 1) == 0.1
    assert round_half_up(-0.04) == 0.0


# ---------------------------------------------------------------------------
# contrasts on draws

def _fake_draws(n=50, seed=0, chains=2):
    rng = np.random.default_rng(seed)
    dn = rng.normal(0, 0.3, (chains, n, 2))
    bb = rng.normal(0, 0.3, (chains, n, 2))
    names = ["d_neg[2]", "d_neg[3]", "beta_bar[2]", "beta_bar[3]", "d_pos[2]", "d_pos[3]"]
    return Draws(names, np.concatenate([dn, bb, dn + bb], axis=2))


class TestContrastHr:
    def test_constant_draws(self):
        d = Draws(["d_neg[2]", "d_pos[2]"], np.full((2, 10, 2), -0.10536051565782628))
        med, lo, hi = contrast_hr(d, 1, 2, "-ve")
        assert med == pytest.approx(0.9, abs=1e-12) and lo == pytest.approx(0.9) and hi == pytest.approx(0.9)

    def test_same_treatment(self):
        with pytest.raises(ValueError):
            contrast_hr(_fake_draws(), 2, 2, "+ve")

    def test_unknown_treatment(self):
        with pytest.raises(KeyError):
            contrast_hr(_fake_draws(), 1, 4, "+ve")

    @given(st.integers(0, 10 ** 6), st.sampled_from(["+ve", "-ve"]),
           st.sampled_from([(1, 2), (1, 3), (2, 3)]))
    @settings(max_examples=25)
    def test_antisymmetry(self, seed, sg, pair):
        d = _fake_draws(n=51, seed=seed, chains=1)
        k, l = pair
        np.testing.assert_array_equal(contrast_log_hr(d, k, l, sg), -contrast_log_hr(d, l, k, sg))
        med_kl = contrast_hr(d, k, l, sg)[0]
        med_lk = contrast_hr(d, l, k, sg)[0]
        # odd draw count: medians are order statistics, so the identity is exact
        assert med_kl == pytest.approx(1 / med_lk, rel=1e-12)

    def test_subgroup_difference_is_beta_bar(self):
        d = _fake_draws()
        diff = contrast_log_hr(d, 2, 3, "+ve") - contrast_log_hr(d, 2, 3, "-ve")
        np.testing.assert_allclose(diff, d.get("beta_bar[3]") - d.get("beta_bar[2]"), atol=1e-14)


# ---------------------------------------------------------------------------
# fits

class TestFitSummary:
    def test_invariants(self, m1):
        assert m1.model == "M1"
        assert len(m1.contrasts) == 6
        assert {c.subgroup for c in m1.contrasts} == {"+ve", "-ve"}
        for c in m1.contrasts:
            assert 0 < c.lower < c.hr_median < c.upper
        assert set(m1.provenance) >= {"config_hash", "seed", "data_digest"}

    def test_subgroup_identity_on_fit_draws(self, m1):
        d = m1.draws
        diff = contrast_log_hr(d, 1, 3, "+ve") - contrast_log_hr(d, 1, 3, "-ve")
        np.testing.assert_allclose(diff, d.get("beta_bar[3]"), atol=1e-12)

    def test_json_roundtrip(self, m1, tmp_path):
        write_fit_json(m1, tmp_path / "fit.json")
        back = read_fit_json(tmp_path / "fit.json")
        assert back == m1
        assert isinstance(back, FitSummary)

    def test_deterministic(self, abc_ad, m1):
        again = fit_model1(abc_ad, config=FAST)
        assert again.to_json() == m1.to_json()
        assert np.array_equal(again.draws.samples, m1.draws.samples)

    def test_ad_delta_draws_present(self, m1):
        assert "delta[s1]" in m1.draws


class TestReductions:
    def test_model2_without_ipd_equals_model1(self, abc_ad, m1):
        m2 = fit_model2(abc_ad, config=FAST)
        assert m2.model == "M2"
        assert m2.contrasts == m1.contrasts
        assert m2.tau == m1.tau
        assert np.array_equal(m2.draws.samples, m1.draws.samples)
        assert m2.provenance == m1.provenance

    def test_model3_without_ipd_matches_model1(self, abc_ad):
        a = fit_model1(abc_ad, config=MEDIUM)
        b = fit_model3(abc_ad, config=dataclasses.replace(MEDIUM, seed=99))
        for k, l in ((1, 2), (1, 3)):
            for sg in ("+ve", "-ve"):
                x = contrast_log_hr(a.draws, k, l, sg)
                y = contrast_log_hr(b.draws, k, l, sg)
                tol = 3 * math.hypot(mcse(x), mcse(y))
                assert abs(x.mean() - y.mean()) < tol

    def test_dispatch(self, abc_ad):
        assert fit(1, abc_ad, config=FAST).model == "M1"
        with pytest.raises(ValueError):
            fit("4", abc_ad, config=FAST)


def test_precision_additivity():
    """Two identical studies carry the information of one with sigma / sqrt(2)."""
    tr = make_treatments(["A", "B"])
    spec = ModelSpec(tau_fixed=1e-6)
    two = build_network(tr, [_ad("a", 1, 2, -0.3, 0.2, 0.5), _ad("b", 1, 2, -0.3, 0.2, 0.5)])
    one = build_network(tr, [_ad("c", 1, 2, -0.3, 0.2 / math.sqrt(2), 0.5)])
    fa = fit_model1(two, spec, MEDIUM)
    fb = fit_model1(one, spec, dataclasses.replace(MEDIUM, seed=3))
    for sg in ("+ve", "-ve"):
        x = contrast_log_hr(fa.draws, 1, 2, sg)
        y = contrast_log_hr(fb.draws, 1, 2, sg)
        assert abs(x.mean() - y.mean()) < 3 * math.hypot(mcse(x), mcse(y))
        assert x.std() == pytest.approx(y.std(), rel=0.1)


def test_ppos_zero_leaves_positive_subgroup_to_prior():
    net = build_network(make_treatments(["A", "B"]), [_ad("z", 1, 2, -0.3, 0.1, 0.0)])
    f = fit_model1(net, ModelSpec(tau_fixed=1e-6), MEDIUM)
    neg = f.contrast(1, 2, "-ve")
    pos = f.contrast(1, 2, "+ve")
    assert math.log(neg.upper / neg.lower) < 1.0
    # beta_bar keeps its N(0, 100) prior: the +ve log-HR interval spans roughly +-2 * 1.96 * 10 / sqrt(2)
    assert math.log(pos.upper / pos.lower) > 20


# ---------------------------------------------------------------------------
# stage one

class TestStageOne:
    def test_pooled_recovers_effect(self):
        study = simulate_ipd_study(np.random.default_rng(1), "big", 1, 2, n=2000, delta_neg=-0.3, delta_pos=-0.3)
        row, = stage_one_fit(study, "pooled", FAST)
        assert abs(row.y + 0.3) < 0.1
        assert 0 < row.sigma < 0.1
        assert row.ppos == pytest.approx(np.mean([s.biomarker for s in study.subjects]))

    def test_subgroup_rows_agree_without_interaction(self):
        study = simulate_ipd_study(np.random.default_rng(2), "s", 1, 2, n=800, delta_neg=-0.2, delta_pos=-0.2)
        rows = stage_one_fit(study, "subgroup", FAST)
        assert [r.ppos for r in rows] == [1.0, 0.0]
        a, b = rows
        assert abs(a.y - b.y) < 2 * math.hypot(a.sigma, b.sigma)

    def test_all_positive_study(self):
        study = simulate_ipd_study(np.random.default_rng(3), "p", 1, 2, n=200, ppos=1.0)
        rows = stage_one_fit(study, "subgroup", FAST)
        assert len(rows) == 1 and rows[0].ppos == 1.0

    def test_no_events_in_arm(self):
        subj = tuple(SubjectRecord(str(i), 1.0 + i, i % 2 == 1, 0, i % 2) for i in range(10))
        with pytest.raises(StageOneError, match="arm 0"):
            stage_one_fit(IPDStudy("q", 1, 2, subj), "pooled", FAST)

    def test_bad_mode(self):
        study = simulate_ipd_study(np.random.default_rng(3), "p", 1, 2, n=50)
        with pytest.raises(ValueError):
            stage_one_fit(study, "other", FAST)

    def test_pseudo_row_invariant(self):
        with pytest.raises(StageOneError):
            PseudoADRow("x", 1, 2, 0.1, 0.0, 0.5)


@pytest.fixture(scope="module")
def network():
    rng = np.random.default_rng(4)
    tr = make_treatments(["A", "B", "C"])
    ad = [_ad("s1", 1, 2, -0.2, 0.15, 0.4), _ad("s2", 1, 3, 0.1, 0.2, 0.5), _ad("s3", 2, 3, 0.2, 0.3, 0.6)]
    ipd = [simulate_ipd_study(rng, "i1", 1, 2, n=300, delta_neg=-0.2, delta_pos=0.1)]
    return build_network(tr, ad, ipd)


class TestWithIpd:
    def test_model2_appends_stage_one_rows(self, network):
        f = fit_model2(network, "subgroup", config=FAST)
        assert [p.study_id for p in f.pseudo_ad] == ["i1+ve", "i1-ve"]
        assert f.provenance["config_hash"] != fit_model2(network, "pooled", config=FAST).provenance["config_hash"]

    def test_model3_single_ipd_study_is_informative(self, network):
        f = fit_model3(network, config=FAST)
        prior_width = 2 * 1.96 * 10
        for sg in ("+ve", "-ve"):
            c = f.contrast(1, 2, sg)
            assert np.isfinite([c.lower, c.upper]).all()
            assert math.log(c.upper / c.lower) < prior_width
        assert "gamma[i1]" in f.draws and "Delta[i1]" in f.draws


# ---------------------------------------------------------------------------
# export and comparison

class TestExport:
    def test_rows_and_order(self, m1, tmp_path):
        export_forest(m1, tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "model,contrast,subgroup,hr,lo,hi,rhat_max,ess_min"
        assert len(lines) == 7
        assert [ln.split(",")[2] for ln in lines[1:3]] == ["+ve", "-ve"]
        assert all(len(v.split(".")[1]) == 3 for v in lines[1].split(",")[3:])

    def test_byte_identical(self, m1, tmp_path):
        export_forest(m1, tmp_path / "a.csv")
        export_forest(m1, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_three_models_eighteen_rows(self, abc_ad, m1, tmp_path):
        fits = [m1, fit_model2(abc_ad, config=FAST), fit_model3(abc_ad, config=FAST)]
        export_forest(fits, tmp_path / "all.csv")
        lines = (tmp_path / "all.csv").read_text().splitlines()[1:]
        assert len(lines) == 18
        assert [ln.split(",")[0] for ln in lines[:3]] == ["M1", "M2", "M3"]

    def test_single_contrast(self, tmp_path):
        f = fit_model1(build_network(make_treatments(["A", "B"]), [_ad("s", 1, 2, 0.1, 0.2, 0.5)]), config=FAST)
        export_forest(f, tmp_path / "one.csv")
        assert len((tmp_path / "one.csv").read_text().splitlines()) == 3

    def test_compare(self, m1, tmp_path):
        rows = compare_fits(m1, m1)
        assert len(rows) == 6 and all(r["reduction_pct"] == 0.0 for r in rows)
        other = fit_model1(build_network(make_treatments(["A", "B"]), [_ad("s", 1, 2, 0.1, 0.2, 0.5)]),
                           config=FAST)
        with pytest.raises(ValueError):
            compare_fits(m1, other)
