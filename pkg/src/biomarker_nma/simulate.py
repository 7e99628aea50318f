"""Synthetic networks drawn from the joint model with known parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evidence import ADStudyRecord, IPDStudy, Network, SubjectRecord, build_network, make_treatments

__all__ = ["NetworkTruth", "simulate_weibull_times", "simulate_ipd_study", "simulate_network"]


@dataclass(frozen=True)
class NetworkTruth:
    d_neg: np.ndarray
    beta_bar: np.ndarray
    tau: float

    @property
    def d_pos(self) -> np.ndarray:
        return self.d_neg + self.beta_bar


def simulate_weibull_times(rng, gamma, log_lambda, size=None):
    """Draw from ``S(t) = exp(-lambda * t**gamma)`` by inversion."""
    u = rng.random(size if size is not None else np.shape(log_lambda))
    return (-np.log(u) / np.exp(log_lambda)) ** (1.0 / gamma)


def simulate_ipd_study(rng, study_id, k, l, *, n=200, ppos=0.6, gamma=1.2, mu_neg=-3.0,
                       beta=0.2, delta_neg=0.0, delta_pos=0.0, follow_up=(12.0, 48.0)):
    """One two-arm study with 1:1 allocation and uniform administrative censoring."""
    X = (rng.random(n) < ppos).astype(int)
    T = np.arange(n) % 2
    log_lam = mu_neg + beta * X + delta_neg * T + (delta_pos - delta_neg) * X * T
    t_event = simulate_weibull_times(rng, gamma, log_lam)
    t_cens = rng.uniform(*follow_up, size=n)
    time = np.minimum(t_event, t_cens)
    event = t_event <= t_cens
    subjects = tuple(
        SubjectRecord(f"{study_id}_{i}", float(time[i]), bool(event[i]), int(X[i]), int(T[i]))
        for i in range(n)
    )
    return IPDStudy(study_id, k, l, subjects)


def simulate_network(rng, truth: NetworkTruth, *, n_ad=8, n_ipd=4, ipd_size=200,
                     sigma_range=(0.12, 0.3), ppos_range=(0.3, 0.85)) -> Network:
    """Network over ``len(truth.d_neg)`` treatments (treatment 1 = reference).

    AD studies cycle through every pair of treatments; IPD studies compare
    each non-reference treatment with the reference in turn.
    """
    nt = len(truth.d_neg)
    treatments = make_treatments([chr(ord("A") + i) for i in range(nt)])
    pairs = [(k, l) for k in range(1, nt + 1) for l in range(k + 1, nt + 1)]
    d_neg, d_pos = np.asarray(truth.d_neg), np.asarray(truth.d_pos)

    ad = []
    for j in range(n_ad):
        k, l = pairs[j % len(pairs)]
        ppos = rng.uniform(*ppos_range)
        md = d_neg[l - 1] - d_neg[k - 1] + (truth.beta_bar[l - 1] - truth.beta_bar[k - 1]) * ppos
        delta = rng.normal(md, truth.tau)
        sigma = rng.uniform(*sigma_range)
        y = rng.normal(delta, sigma)
        half = 1.959963984540054 * sigma
        ad.append(ADStudyRecord(
            study_id=f"AD{j + 1}", treatment_k=k, treatment_l=l,
            hr=math.exp(y), ci_low=math.exp(y - half), ci_high=math.exp(y + half),
            ppos=ppos, y=y, sigma=sigma,
        ))

    ipd = []
    for j in range(n_ipd):
        l = 2 + j % (nt - 1)
        k = 1
        dn = rng.normal(d_neg[l - 1] - d_neg[k - 1], truth.tau)
        dp = rng.normal(d_pos[l - 1] - d_pos[k - 1], truth.tau)
        ipd.append(simulate_ipd_study(
            rng, f"IPD{j + 1}", k, l, n=ipd_size, ppos=rng.uniform(*ppos_range),
            gamma=rng.uniform(0.8, 1.5), mu_neg=rng.normal(-3.0, 0.3),
            beta=rng.normal(0.2, 0.2), delta_neg=dn, delta_pos=dp,
        ))
    return build_network(treatments, ad, ipd)
