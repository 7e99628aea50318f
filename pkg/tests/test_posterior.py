import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from biomarker_nma.evidence import ADStudyRecord, IPDStudy, Network, SubjectRecord, build_network, make_treatments
from biomarker_nma.posterior import (
    ModelKind,
    ModelParameters,
    ModelSpec,
    NMAPosterior,
    StructureError,
    StudyPosterior,
    ad_loglik,
    consistency_mean,
    linear_predictor,
    log_posterior,
    log_prior,
    random_effects_loglik,
    weibull_loglik,
    weibull_mle,
)
from biomarker_nma.simulate import simulate_ipd_study

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
ONE = ModelSpec(kind=ModelKind.ONE_STAGE)


def _ad(sid, k, l, y, sigma, ppos):
    return ADStudyRecord(sid, k, l, math.exp(y), math.exp(y - 1.96 * sigma), math.exp(y + 1.96 * sigma),
                         ppos=ppos, y=y, sigma=sigma)


def _random_params(rng, nt, n_ad, n_ipd):
    return ModelParameters(
        d_neg=np.r_[0.0, rng.normal(0, 0.5, nt - 1)],
        beta_bar=np.r_[0.0, rng.normal(0, 0.5, nt - 1)],
        tau=rng.uniform(0.1, 1.5),
        delta_ad=rng.normal(0, 0.5, n_ad),
        gamma=rng.uniform(0.6, 2.0, n_ipd),
        mu_neg=rng.normal(-3, 0.5, n_ipd),
        beta=rng.normal(0, 0.3, n_ipd),
        delta_neg=rng.normal(0, 0.3, n_ipd),
        Delta=rng.normal(0, 0.3, n_ipd),
    )


@pytest.fixture(scope="module")
def mixed_network():
    rng = np.random.default_rng(7)
    tr = make_treatments(["A", "B", "C", "D"])
    ad = [_ad("ad1", 1, 2, -0.2, 0.2, 0.4), _ad("ad2", 1, 3, 0.1, 0.25, 0.7), _ad("ad3", 2, 3, 0.3, 0.3, 0.5),
          _ad("ad4", 3, 4, -0.1, 0.2, 0.6), _ad("ad5", 2, 4, 0.05, 0.15, 0.3)]
    ipd = [simulate_ipd_study(rng, "ipd1", 1, 2, n=60, delta_neg=-0.2, delta_pos=0.1),
           simulate_ipd_study(rng, "ipd2", 1, 4, n=50, delta_neg=0.3, delta_pos=-0.1)]
    return build_network(tr, ad, ipd)


# ---------------------------------------------------------------------------
# elementwise terms

class TestWeibull:
    def test_examples(self):
        assert weibull_loglik(1.0, True, 1.0, 0.0) == pytest.approx(-1.0)
        assert weibull_loglik(2.0, False, 1.0, math.log(0.5)) == pytest.approx(-1.0)
        assert weibull_loglik(3.0, True, 2.0, math.log(0.1)) == pytest.approx(math.log(0.6) - 0.9, abs=1e-12)
        assert math.log(0.6) - 0.9 == pytest.approx(-1.41083, abs=5e-6)

    def test_domain(self):
        with pytest.raises(ValueError):
            weibull_loglik(0.0, True, 1.0, 0.0)
        with pytest.raises(ValueError):
            weibull_loglik(1.0, True, 0.0, 0.0)

    @pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("lam", [0.1, 1.0, 5.0])
    def test_density_normalised(self, gamma, lam):
        f = lambda t: math.exp(weibull_loglik(t, True, gamma, math.log(lam)))  # noqa: E731
        # split at the median to help the quadrature near the mode / singularity
        med = (math.log(2) / lam) ** (1 / gamma)
        total = sum(integrate.quad(f, a, b, limit=500, epsabs=1e-13, epsrel=1e-12)[0]
                    for a, b in ((0, med), (med, math.inf)))
        assert abs(total - 1.0) < 1e-6


def test_linear_predictor():
    assert linear_predictor(-2.0, 0.5, -0.3, 0.1, 0, 0) == -2.0
    assert linear_predictor(-2.0, 0.5, -0.3, 0.1, 1, 1) == pytest.approx(-1.7)
    assert linear_predictor(-2.0, 0.5, -0.3, 0.1, 1, 0) == pytest.approx(-1.5)


def test_ad_loglik():
    assert ad_loglik(0.3, 1.0, 0.3) == pytest.approx(-0.91894, abs=5e-6)
    assert ad_loglik(0.5, 0.5, 0.0) == pytest.approx(-0.72579, abs=5e-6)
    assert ad_loglik(0.5, 0.5, 0.0) == pytest.approx(stats.norm.logpdf(0.5, 0.0, 0.5), rel=1e-12)
    with pytest.raises(ValueError):
        ad_loglik(0.0, 0.0, 0.0)


class TestConsistency:
    d = np.array([0.0, -0.2, -0.1])
    b = np.array([0.0, 0.1, 0.3])

    def test_example(self):
        assert consistency_mean(self.d, self.b, 1, 3, 0.5) == pytest.approx(0.05)

    def test_limits(self):
        assert consistency_mean(self.d, self.b, 2, 3, 0.0) == pytest.approx(0.1)
        d_pos = self.d + self.b
        assert consistency_mean(self.d, self.b, 2, 3, 1.0) == pytest.approx(d_pos[2] - d_pos[1])

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_ppos_zero_ignores_beta_bar(self, bb):
        bb = np.array([0.0] + bb[1:])
        assert consistency_mean(self.d, bb, 1, 3, 0.0) == consistency_mean(self.d, self.b, 1, 3, 0.0)


class TestRandomEffects:
    def test_at_means(self):
        net = build_network(make_treatments(["A", "B"]), [_ad("s1", 1, 2, 0.1, 0.2, 0.3), _ad("s2", 1, 2, 0, 0.2, 0.6)])
        p = ModelParameters([0, -0.2], [0, 0.4], 1.0, delta_ad=[-0.2 + 0.4 * 0.3, -0.2 + 0.4 * 0.6])
        assert random_effects_loglik(p, ModelSpec(), net) == pytest.approx(-2 * HALF_LOG_2PI)

    def test_one_sd_away(self):
        net = build_network(make_treatments(["A", "B"]), [_ad("s1", 1, 2, 0.1, 0.2, 0.5)])
        tau = 0.3
        md = -0.2 + 0.4 * 0.5
        p = ModelParameters([0, -0.2], [0, 0.4], tau, delta_ad=[md + tau])
        assert random_effects_loglik(p, ModelSpec(), net) == pytest.approx(-HALF_LOG_2PI - math.log(tau) - 0.5)

    def test_tau_out_of_support(self):
        net = build_network(make_treatments(["A", "B"]), [_ad("s1", 1, 2, 0.1, 0.2, 0.5)])
        p = ModelParameters([0, 0], [0, 0], 2.5, delta_ad=[0.0])
        assert random_effects_loglik(p, ModelSpec(), net) == -math.inf


class TestPrior:
    def test_gamma_term(self):
        base = ModelParameters([0, 0.0], [0, 0.0], 1.0, gamma=[1.0], mu_neg=[0], beta=[0], delta_neg=[0], Delta=[0])
        big = ModelParameters([0, 0.0], [0, 0.0], 1.0, gamma=[100.0], mu_neg=[0], beta=[0], delta_neg=[0], Delta=[0])
        diff = log_prior(big, ONE) - log_prior(base, ONE)
        # Gamma(1, 0.01) log density at 100 is log(0.01) - 1; at 1 it is log(0.01) - 0.01
        assert diff == pytest.approx((math.log(0.01) - 1) - (math.log(0.01) - 0.01))
        assert math.log(0.01) - 1 == pytest.approx(-5.60517, abs=5e-6)

    def test_gamma_boundary(self):
        p = ModelParameters([0, 0.0], [0, 0.0], 1.0, gamma=[0.0], mu_neg=[0], beta=[0], delta_neg=[0], Delta=[0])
        assert log_prior(p, ONE) == -math.inf

    def test_normal_and_tau_terms(self):
        p = ModelParameters([0, 0.0], [0, 0.0], 1.0)
        assert log_prior(p, ModelSpec()) == pytest.approx(2 * -0.5 * math.log(2 * math.pi * 100) + math.log(0.5))


# ---------------------------------------------------------------------------
# assembled posterior

def _reference_logp(spec, network, p):
    """Direct sum of the elementwise terms (independent of the compiled path)."""
    total = log_prior(p, spec) + random_effects_loglik(p, spec, network)
    for j, st in enumerate(network.ad_studies):
        total += float(ad_loglik(st.y, st.sigma, p.delta_ad[j]))
    if spec.kind is ModelKind.ONE_STAGE:
        for j, st in enumerate(network.ipd_studies):
            a = st.arrays
            eta = linear_predictor(p.mu_neg[j], p.beta[j], p.delta_neg[j], p.Delta[j], a["biomarker"], a["arm"])
            total += float(np.sum(weibull_loglik(a["time"], a["event"], p.gamma[j], eta)))
    return total


class TestLogPosterior:
    def test_empty_network_is_prior(self):
        net = Network(make_treatments(["A", "B"]), (), ())
        p = ModelParameters([0, 0.3], [0, -0.2], 0.7)
        assert log_posterior(ModelSpec(), net, p) == pytest.approx(log_prior(p, ModelSpec()))

    def test_single_ad_study_termwise(self):
        net = build_network(make_treatments(["A", "B"]), [_ad("s1", 1, 2, -0.3, 0.2, 0.6)])
        p = ModelParameters([0, -0.1], [0, 0.2], 0.4, delta_ad=[-0.25])
        spec = ModelSpec()
        expected = ad_loglik(-0.3, 0.2, -0.25) + random_effects_loglik(p, spec, net) + log_prior(p, spec)
        assert log_posterior(spec, net, p) == pytest.approx(float(expected), abs=1e-12)

    def test_empty_ipd_study(self):
        st_ = IPDStudy("e", 1, 2, ())
        net = Network(make_treatments(["A", "B"]), (), (st_,))
        p = ModelParameters([0, 0.0], [0, 0.0], 0.5, gamma=[1.0], mu_neg=[0], beta=[0], delta_neg=[0], Delta=[0])
        with pytest.raises(StructureError):
            log_posterior(ONE, net, p)

    def test_dimension_mismatch(self, mixed_network):
        p = ModelParameters([0, 0.0], [0, 0.0], 0.5)
        with pytest.raises(StructureError):
            log_posterior(ONE, mixed_network, p)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_matches_reference_sum(self, mixed_network, seed):
        rng = np.random.default_rng(seed)
        p = _random_params(rng, 4, 5, 2)
        got = log_posterior(ONE, mixed_network, p)
        assert got == pytest.approx(_reference_logp(ONE, mixed_network, p), rel=1e-11, abs=1e-9)

    def test_subgroup_identities(self):
        rng = np.random.default_rng(3)
        p = _random_params(rng, 3, 0, 4)
        np.testing.assert_allclose(p.mu_pos - p.mu_neg, p.beta, atol=1e-14)
        np.testing.assert_allclose(p.delta_pos - p.delta_neg, p.Delta, atol=1e-14)
        np.testing.assert_allclose(p.d_pos - p.d_neg, p.beta_bar, atol=1e-14)

    def test_relabeling_invariance(self, mixed_network):
        rng = np.random.default_rng(11)
        p = _random_params(rng, 4, 5, 2)
        base = log_posterior(ONE, mixed_network, p)
        tr = mixed_network.treatments
        for perm in ([1, 3, 2, 4], [1, 4, 2, 3], [1, 2, 4, 3]):
            new_id = {old: new for old, new in zip(range(1, 5), perm)}
            ad = [ADStudyRecord(r.study_id, new_id[r.treatment_k], new_id[r.treatment_l], r.hr, r.ci_low, r.ci_high,
                                ppos=r.ppos, y=r.y, sigma=r.sigma) for r in mixed_network.ad_studies]
            ipd = [IPDStudy(s.study_id, new_id[s.treatment_k], new_id[s.treatment_l], s.subjects)
                   for s in mixed_network.ipd_studies]
            net2 = build_network(tr, ad, ipd)
            d2, b2 = np.zeros(4), np.zeros(4)
            for old in range(1, 5):
                d2[new_id[old] - 1] = p.d_neg[old - 1]
                b2[new_id[old] - 1] = p.beta_bar[old - 1]
            # AD studies reversed by canonicalisation carry the negated effect
            sign = {r.study_id: (1 if new_id[r.treatment_k] < new_id[r.treatment_l] else -1)
                    for r in mixed_network.ad_studies}
            delta = {r.study_id: sign[r.study_id] * p.delta_ad[j] for j, r in enumerate(mixed_network.ad_studies)}
            p2 = ModelParameters(d2, b2, p.tau, delta_ad=[delta[r.study_id] for r in net2.ad_studies],
                                 gamma=p.gamma, mu_neg=p.mu_neg, beta=p.beta, delta_neg=p.delta_neg, Delta=p.Delta)
            assert abs(log_posterior(ONE, net2, p2) - base) < 1e-10


def _analytic_gradient(network, x, post):
    """Gradient of the explicit-effect, uncentred posterior in ``post``'s coordinates."""
    nt = post.nt
    g = np.zeros_like(x)
    d = np.r_[0.0, x[:nt - 1]]
    bb = np.r_[0.0, x[nt - 1:2 * (nt - 1)]]
    tau = x[post.i_tau]
    var = 100.0
    g[:2 * (nt - 1)] -= x[:2 * (nt - 1)] / var

    def add_md(k, l, ppos, dmd):
        for idx, sgn in ((l, 1.0), (k, -1.0)):
            if idx > 1:
                g[idx - 2] += sgn * dmd
                g[nt - 1 + idx - 2] += sgn * dmd * ppos

    def re_term(value, md):
        r = value - md
        g[post.i_tau] += -1 / tau + r * r / tau ** 3
        return -r / tau ** 2, r / tau ** 2

    for j, r in enumerate(network.ad_studies):
        i = post.sl_delta.start + j
        md = d[r.treatment_l - 1] - d[r.treatment_k - 1] + (bb[r.treatment_l - 1] - bb[r.treatment_k - 1]) * r.ppos
        g[i] += (r.y - x[i]) / r.sigma ** 2
        dv, dmd = re_term(x[i], md)
        g[i] += dv
        add_md(r.treatment_k, r.treatment_l, r.ppos, dmd)
    for j, s in enumerate(network.ipd_studies):
        b = post.ipd_start + 5 * j
        gam, mn, mp, dn, dp = x[b:b + 5]
        a = s.arrays
        X, T, t, e = a["biomarker"], a["arm"], a["time"], a["event"]
        eta = np.where(X == 1, mp, mn) + np.where(X == 1, dp, dn) * T
        ch = np.exp(eta) * t ** gam
        deta = e - ch
        g[b] += np.sum(e * (1 / gam + np.log(t)) - ch * np.log(t)) + (1.0 - 1) / gam - 0.01
        g[b + 1] += np.sum(deta * (X == 0)) - mn / var
        g[b + 2] += np.sum(deta * (X == 1)) - mp / var
        g[b + 3] += np.sum(deta * (X == 0) * T)
        g[b + 4] += np.sum(deta * (X == 1) * T)
        for value, ppos, i in ((dn, 0.0, b + 3), (dp, 1.0, b + 4)):
            md = d[s.treatment_l - 1] - d[s.treatment_k - 1] + (bb[s.treatment_l - 1] - bb[s.treatment_k - 1]) * ppos
            dv, dmd = re_term(value, md)
            g[i] += dv
            add_md(s.treatment_k, s.treatment_l, ppos, dmd)
    return g


def test_gradient_matches_finite_differences(mixed_network):
    post = NMAPosterior(ONE, mixed_network, marginalize_ad=False, center=False)
    rng = np.random.default_rng(5)
    x = post.pack(_random_params(rng, 4, 5, 2))
    analytic = _analytic_gradient(mixed_network, x, post)

    def f(v):
        return log_posterior(ONE, mixed_network, post.unpack(v))

    h = 1e-5
    numeric = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])
    scale = np.maximum(np.abs(analytic), 1.0)
    assert np.max(np.abs(numeric - analytic) / scale) < 1e-4


class TestBatchedTarget:
    def test_centering_preserves_density(self, mixed_network):
        rng = np.random.default_rng(2)
        p = _random_params(rng, 4, 5, 2)
        a = NMAPosterior(ONE, mixed_network, center=True)
        b = NMAPosterior(ONE, mixed_network, center=False)
        assert a.center > 0
        assert a.logp(a.pack(p))[0] == pytest.approx(b.logp(b.pack(p))[0], rel=1e-12)
        np.testing.assert_allclose(a.unpack(a.pack(p)).d_neg, p.d_neg, atol=1e-14)

    def test_marginalisation_by_quadrature(self):
        net = build_network(make_treatments(["A", "B"]), [_ad("s1", 1, 2, -0.3, 0.2, 0.6)])
        spec = ModelSpec()
        marg = NMAPosterior(spec, net, center=False)
        full = NMAPosterior(spec, net, marginalize_ad=False, center=False)
        x = np.array([-0.1, 0.25, 0.35])
        integrand = lambda dlt: math.exp(full.logp(np.r_[x, dlt][None, :])[0])  # noqa: E731
        val, _ = integrate.quad(integrand, -5, 5, epsabs=1e-14, epsrel=1e-12, points=[-0.3])
        assert marg.logp(x[None, :])[0] == pytest.approx(math.log(val), abs=1e-8)

    def test_local_terms_capture_changes(self, mixed_network):
        post = NMAPosterior(ONE, mixed_network)
        rng = np.random.default_rng(4)
        x = np.stack([post.pack(_random_params(rng, 4, 5, 2)) for _ in range(3)])
        base_full, base_local = post.logp(x), [post.logp_local(x, i) for i in range(post.n_params)]
        for i in range(post.n_params):
            y = x.copy()
            y[:, i] += 0.01 if i != post.i_tau else -0.01
            np.testing.assert_allclose(post.logp(y) - base_full, post.logp_local(y, i) - base_local[i],
                                       rtol=1e-9, atol=1e-9)

    def test_reported_names(self, mixed_network):
        post = NMAPosterior(ONE, mixed_network)
        names, values = post.reported(np.zeros((1, 2, post.n_params)))
        assert "d_pos[3]" in names and "beta[ipd1]" in names and "Delta[ipd2]" in names
        assert values.shape == (1, 2, len(names))


@pytest.fixture(scope="module")
def study():
    return simulate_ipd_study(np.random.default_rng(1), "s", 1, 2, n=80, delta_neg=-0.3, delta_pos=0.2)


class TestStudyPosterior:
    def test_pooled_density(self, study):
        sp = StudyPosterior(study, "pooled")
        a = study.arrays
        x = np.array([1.3, -2.5, -0.2])
        ll = np.sum(weibull_loglik(a["time"], a["event"], 1.3, -2.5 - 0.2 * a["arm"]))
        sd = 10.0
        prior = (math.log(0.01) - 0.013) + 2 * (-0.5 * math.log(2 * math.pi * sd ** 2)) \
            - 0.5 * (2.5 ** 2 + 0.2 ** 2) / sd ** 2
        assert sp.logp(x)[0] == pytest.approx(ll + prior, rel=1e-12)

    def test_subgroup_density(self, study):
        sp = StudyPosterior(study, "subgroup")
        a = study.arrays
        x = np.array([0.9, -2.5, -2.2, -0.2, 0.1])
        eta = np.where(a["biomarker"] == 1, -2.2 + 0.1 * a["arm"], -2.5 - 0.2 * a["arm"])
        ll = np.sum(weibull_loglik(a["time"], a["event"], 0.9, eta))
        prior = (math.log(0.01) - 0.009) + sum(-0.5 * math.log(200 * math.pi) - 0.5 * v * v / 100
                                               for v in (-2.5, -2.2, -0.2, 0.1))
        assert sp.logp(x)[0] == pytest.approx(ll + prior, rel=1e-12)

    def test_single_level_falls_back(self):
        subj = tuple(SubjectRecord(str(i), 1.0 + i, i % 3 == 0, 1, i % 2) for i in range(20))
        sp = StudyPosterior(IPDStudy("p", 1, 2, subj), "subgroup")
        assert sp.mode == "pooled" and sp.n_params == 3


def test_weibull_mle_recovers_truth():
    st_ = simulate_ipd_study(np.random.default_rng(0), "big", 1, 2, n=6000, gamma=1.3, mu_neg=-3.0, beta=0.4,
                             delta_neg=-0.3, delta_pos=0.2, follow_up=(20.0, 60.0))
    est, se = weibull_mle(st_, "subgroup")
    truth = np.array([1.3, -3.0, -2.6, -0.3, 0.2])
    assert np.all(np.abs(est - truth) < 4 * se)
