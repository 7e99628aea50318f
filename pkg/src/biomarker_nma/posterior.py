"""Log-posterior of the biomarker network meta-regression models.

Three model kinds share one parameterisation:

* ``AD_NMR`` (and ``TWO_STAGE``, which is the same model fed with stage-one
  summaries): normal likelihood for reported log hazard ratios with the
  biomarker-positive proportion as a treatment-specific covariate.
* ``ONE_STAGE``: the above plus a Weibull proportional-hazards likelihood for
  every participant-level study, tied to the aggregate part through the
  shared basic parameters.

The elementwise building blocks (``weibull_loglik`` ...) are plain numpy
functions. :class:`NMAPosterior` assembles them into a target that evaluates
a whole batch of chains at once and exposes per-coordinate local terms for
the coordinate-wise sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize
from numba import njit
from scipy.special import gammaln

from .evidence import IPDStudy, Network

__all__ = [
    "ModelKind",
    "ModelSpec",
    "ModelParameters",
    "StructureError",
    "TAU_FLOOR",
    "weibull_loglik",
    "linear_predictor",
    "ad_loglik",
    "consistency_mean",
    "random_effects_loglik",
    "log_prior",
    "log_posterior",
    "NMAPosterior",
    "StudyPosterior",
    "weibull_mle",
]

LOG_2PI = math.log(2 * math.pi)
TAU_FLOOR = 1e-6


class StructureError(ValueError):
    """Parameters do not fit the network/model structure."""


class ModelKind(str, Enum):
    AD_NMR = "AD_NMR"
    TWO_STAGE = "TWO_STAGE"
    ONE_STAGE = "ONE_STAGE"


@dataclass(frozen=True)
class ModelSpec:
    """Model kind and prior settings.

    ``prior_var`` is the variance of every N(0, .) prior. ``tau_fixed`` pins
    the heterogeneity SD (it is then not sampled).
    """

    kind: ModelKind = ModelKind.AD_NMR
    gamma_shape: float = 1.0
    gamma_rate: float = 0.01
    prior_var: float = 100.0
    tau_upper: float = 2.0
    reference: int = 1
    tau_fixed: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if min(self.gamma_shape, self.gamma_rate, self.prior_var, self.tau_upper) <= 0:
            raise ValueError("prior hyperparameters must be positive")
        if self.tau_fixed is not None and not 0 < self.tau_fixed < self.tau_upper:
            raise ValueError("tau_fixed must lie inside (0, tau_upper)")


# ---------------------------------------------------------------------------
# elementwise pieces

def weibull_loglik(time, event, gamma, log_lambda):
    """Weibull log-likelihood with hazard ``lambda * gamma * t**(gamma - 1)``.

    Events contribute ``log h(t) - H(t)``, censored times ``-H(t)`` where
    ``H(t) = lambda * t**gamma``. Broadcasts over all arguments.
    """
    time = np.asarray(time, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(time <= 0) or np.any(gamma <= 0):
        raise ValueError("time and gamma must be positive")
    log_t = np.log(time)
    cum_hazard = np.exp(log_lambda + gamma * log_t)
    log_h = log_lambda + np.log(gamma) + (gamma - 1) * log_t
    return np.where(np.asarray(event, dtype=bool), log_h, 0.0) - cum_hazard


def linear_predictor(mu_neg, beta, delta_neg, Delta, X, T):
    """Log scale of participant ``(X, T)``: biomarker status and treatment arm."""
    return mu_neg + beta * X + delta_neg * T + Delta * X * T


def _norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z


def ad_loglik(y, sigma, delta):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return _norm_logpdf(y, delta, sigma)


def consistency_mean(d_neg, beta_bar, k, l, ppos):
    """Mean effect of ``l`` versus ``k`` in a population with share ``ppos``
    of biomarker-positive participants. Treatment ids are 1-based.
    """
    d_neg = np.asarray(d_neg)
    beta_bar = np.asarray(beta_bar)
    return (d_neg[..., l - 1] - d_neg[..., k - 1]
            + (beta_bar[..., l - 1] - beta_bar[..., k - 1]) * ppos)


def _gamma_logpdf(x, shape, rate):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * math.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x
    return np.where(x > 0, out, -np.inf)


# ---------------------------------------------------------------------------
# parameter container

@dataclass
class ModelParameters:
    """Full parameter set of the joint model.

    ``d_neg`` and ``beta_bar`` are indexed by treatment (entry 0 is the
    reference and must be 0). Per-study arrays follow the order of the
    network's AD and IPD studies.
    """

    d_neg: np.ndarray
    beta_bar: np.ndarray
    tau: float
    delta_ad: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_neg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    delta_neg: np.ndarray = field(default_factory=lambda: np.zeros(0))
    Delta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("d_neg", "beta_bar", "delta_ad", "gamma", "mu_neg", "beta",
                     "delta_neg", "Delta"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.d_neg[0] != 0 or self.beta_bar[0] != 0:
            raise StructureError("reference treatment must have d_neg = beta_bar = 0")
        if self.d_neg.shape != self.beta_bar.shape:
            raise StructureError("d_neg and beta_bar differ in length")
        n = len(self.gamma)
        if any(len(a) != n for a in (self.mu_neg, self.beta, self.delta_neg, self.Delta)):
            raise StructureError("per-IPD-study arrays differ in length")

    @property
    def d_pos(self) -> np.ndarray:
        return self.d_neg + self.beta_bar

    @property
    def mu_pos(self) -> np.ndarray:
        return self.mu_neg + self.beta

    @property
    def delta_pos(self) -> np.ndarray:
        return self.delta_neg + self.Delta


def _check_structure(spec: ModelSpec, network: Network, params: ModelParameters) -> None:
    nt = network.n_treatments
    if len(params.d_neg) != nt:
        raise StructureError(f"expected {nt} basic parameters, got {len(params.d_neg)}")
    if len(params.delta_ad) != len(network.ad_studies):
        raise StructureError(
            f"expected {len(network.ad_studies)} AD study effects, got {len(params.delta_ad)}")
    n_ipd = len(network.ipd_studies) if spec.kind is ModelKind.ONE_STAGE else 0
    if len(params.gamma) != n_ipd:
        raise StructureError(f"expected {n_ipd} IPD study blocks, got {len(params.gamma)}")
    if spec.kind is ModelKind.ONE_STAGE:
        for st in network.ipd_studies:
            if not st.subjects:
                raise StructureError(f"IPD study {st.study_id} has no subjects")


def random_effects_loglik(params: ModelParameters, spec: ModelSpec, network: Network) -> float:
    """Exchangeable study effects around their consistency means."""
    tau = params.tau
    if not 0 < tau < spec.tau_upper:
        return -math.inf
    tau = max(tau, TAU_FLOOR)
    total = 0.0
    for j, st in enumerate(network.ad_studies):
        md = consistency_mean(params.d_neg, params.beta_bar, st.treatment_k, st.treatment_l, st.ppos)
        total += float(_norm_logpdf(params.delta_ad[j], md, tau))
    if spec.kind is ModelKind.ONE_STAGE:
        for j, st in enumerate(network.ipd_studies):
            k, l = st.treatment_k, st.treatment_l
            md_neg = consistency_mean(params.d_neg, params.beta_bar, k, l, 0.0)
            md_pos = consistency_mean(params.d_neg, params.beta_bar, k, l, 1.0)
            total += float(_norm_logpdf(params.delta_neg[j], md_neg, tau))
            total += float(_norm_logpdf(params.delta_pos[j], md_pos, tau))
    return total


def log_prior(params: ModelParameters, spec: ModelSpec) -> float:
    if np.any(params.gamma <= 0):
        return -math.inf
    sd = math.sqrt(spec.prior_var)
    total = float(np.sum(_gamma_logpdf(params.gamma, spec.gamma_shape, spec.gamma_rate)))
    total += float(np.sum(_norm_logpdf(params.mu_neg, 0.0, sd)))
    total += float(np.sum(_norm_logpdf(params.mu_pos, 0.0, sd)))
    total += float(np.sum(_norm_logpdf(params.d_neg[1:], 0.0, sd)))
    total += float(np.sum(_norm_logpdf(params.beta_bar[1:], 0.0, sd)))
    if spec.tau_fixed is None:
        if not 0 < params.tau < spec.tau_upper:
            return -math.inf
        total += -math.log(spec.tau_upper)
    return total


def log_posterior(spec: ModelSpec, network: Network, params: ModelParameters) -> float:
    """Unnormalised log-posterior with every study effect explicit."""
    _check_structure(spec, network, params)
    if np.any(params.gamma <= 0) or not 0 < params.tau < spec.tau_upper:
        return -math.inf
    target = NMAPosterior(spec, network, marginalize_ad=False, center=False)
    return float(target.logp(target.pack(params)[None, :])[0])


# ---------------------------------------------------------------------------
# compiled kernels for the batched target

def _ipd_arrays(st: IPDStudy) -> dict[str, np.ndarray]:
    a = st.arrays
    return {
        "log_t": np.log(a["time"]),
        "event": a["event"],
        "X": a["biomarker"],
        "T": a["arm"],
    }


@njit(cache=True)
def _nlp(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * LOG_2PI - math.log(sd) - 0.5 * z * z


@njit(cache=True)
def _weibull_block(g, mu_n, mu_p, dn, dp, log_t, event, X, T, lo, hi):
    lg = math.log(g)
    s = 0.0
    for i in range(lo, hi):
        if X[i] > 0.5:
            eta = mu_p + dp * T[i]
        else:
            eta = mu_n + dn * T[i]
        s += event[i] * (eta + lg + (g - 1.0) * log_t[i]) - math.exp(eta + g * log_t[i])
    return s


@njit(cache=True)
def _study_kernel(x, b, log_t, event, X, T, lo, hi, shape, rate, sd, use_lik, out):
    """Weibull likelihood of one study plus priors on its block, per chain."""
    log_norm = shape * math.log(rate) - math.lgamma(shape)
    for c in range(x.shape[0]):
        g = x[c, b]
        if not g > 0.0:
            out[c] = -np.inf
            continue
        mu_n = x[c, b + 1]
        mu_p = x[c, b + 2]
        s = log_norm + (shape - 1.0) * math.log(g) - rate * g
        s += _nlp(mu_n, 0.0, sd) + _nlp(mu_p, 0.0, sd)
        if use_lik:
            s += _weibull_block(g, mu_n, mu_p, x[c, b + 3], x[c, b + 4],
                                log_t, event, X, T, lo, hi)
        out[c] = s


@njit(cache=True)
def _basic(x, c, nt, a0, bb0, center, d, dp):
    d[0] = 0.0
    dp[0] = 0.0
    for k in range(1, nt):
        bb = x[c, bb0 + k - 1]
        d[k] = x[c, a0 + k - 1] - bb * center
        dp[k] = d[k] + bb


@njit(cache=True)
def _tau(x, c, i_tau, tau_fixed):
    return tau_fixed if i_tau < 0 else x[c, i_tau]


@njit(cache=True)
def _ipd_re_kernel(x, j, nt, a0, bb0, center, i_tau, tau_fixed, ipd_start, ipd_k, ipd_l, out):
    d = np.empty(nt)
    dp = np.empty(nt)
    for c in range(x.shape[0]):
        _basic(x, c, nt, a0, bb0, center, d, dp)
        t = max(_tau(x, c, i_tau, tau_fixed), TAU_FLOOR)
        b = ipd_start + 5 * j
        k, l = ipd_k[j], ipd_l[j]
        out[c] += (_nlp(x[c, b + 3], d[l] - d[k], t) + _nlp(x[c, b + 4], dp[l] - dp[k], t))


@njit(cache=True)
def _global_kernel(x, nt, a0, bb0, center, i_tau, tau_fixed, tau_upper, sd,
                   y, sigma, ad_k, ad_l, ppos, marginal, delta0, use_lik,
                   ipd_start, ipd_k, ipd_l, out):
    """AD terms, every random-effects term and priors on shared parameters."""
    d = np.empty(nt)
    dp = np.empty(nt)
    for c in range(x.shape[0]):
        tau = _tau(x, c, i_tau, tau_fixed)
        if not (tau > 0.0 and tau < tau_upper):
            out[c] = -np.inf
            continue
        t = max(tau, TAU_FLOOR)
        _basic(x, c, nt, a0, bb0, center, d, dp)
        s = 0.0
        if i_tau >= 0:
            s -= math.log(tau_upper)
        for k in range(1, nt):
            s += _nlp(d[k], 0.0, sd) + _nlp(dp[k] - d[k], 0.0, sd)
        for j in range(y.shape[0]):
            k, l = ad_k[j], ad_l[j]
            md = d[l] - d[k] + ((dp[l] - d[l]) - (dp[k] - d[k])) * ppos[j]
            if marginal:
                if use_lik:
                    s += _nlp(y[j], md, math.sqrt(sigma[j] * sigma[j] + t * t))
            else:
                delta = x[c, delta0 + j]
                s += _nlp(delta, md, t)
                if use_lik:
                    s += _nlp(y[j], delta, sigma[j])
        for j in range(ipd_k.shape[0]):
            b = ipd_start + 5 * j
            k, l = ipd_k[j], ipd_l[j]
            s += _nlp(x[c, b + 3], d[l] - d[k], t) + _nlp(x[c, b + 4], dp[l] - dp[k], t)
        out[c] = s


class NMAPosterior:
    """Batched log-posterior over a flat coordinate vector.

    Coordinates, in order: one "centred" effect ``a[k]`` and one regression
    coefficient ``beta_bar[k]`` per non-reference treatment, ``tau`` (unless
    fixed), explicit AD study effects (only if ``marginalize_ad`` is false),
    then per IPD study ``gamma, mu_neg, mu_pos, delta_neg, delta_pos``.

    With ``center`` the sampler works on ``a[k] = d_neg[k] + beta_bar[k] * c``
    where ``c`` is the precision-weighted mean biomarker-positive share of
    the AD studies; this is a unit-Jacobian linear change of variables that
    removes most of the posterior correlation between ``d_neg`` and
    ``beta_bar``. With ``marginalize_ad`` the AD study effects are
    integrated out analytically (``y ~ N(md, sigma^2 + tau^2)``).

    ``likelihood=False`` keeps only priors and random-effects terms.
    """

    def __init__(self, spec: ModelSpec, network: Network, *, marginalize_ad: bool = True,
                 center: bool = True, likelihood: bool = True):
        self.spec = spec
        self.network = network
        self.marginalize_ad = marginalize_ad
        self.likelihood = likelihood
        nt = network.n_treatments
        if spec.reference != 1:
            raise StructureError("treatment 1 must be the network reference")
        self.nt = nt
        ad = network.ad_studies
        self.n_ad = len(ad)
        self.ipd = list(network.ipd_studies) if spec.kind is ModelKind.ONE_STAGE else []
        for st in self.ipd:
            if not st.subjects:
                raise StructureError(f"IPD study {st.study_id} has no subjects")
        self.n_ipd = len(self.ipd)

        self.y = np.array([r.y for r in ad], dtype=float)
        self.sigma = np.array([r.sigma for r in ad], dtype=float)
        self.ad_k = np.array([r.treatment_k - 1 for r in ad], dtype=int)
        self.ad_l = np.array([r.treatment_l - 1 for r in ad], dtype=int)
        self.ppos = np.array([r.ppos for r in ad], dtype=float)
        self.ipd_k = np.array([s.treatment_k - 1 for s in self.ipd], dtype=int)
        self.ipd_l = np.array([s.treatment_l - 1 for s in self.ipd], dtype=int)
        arrays = [_ipd_arrays(s) for s in self.ipd]
        sizes = [len(a["X"]) for a in arrays]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        for key in ("log_t", "event", "X", "T"):
            setattr(self, "_" + key,
                    np.concatenate([a[key] for a in arrays]) if arrays else np.zeros(0))

        if center and self.n_ad:
            w = 1.0 / self.sigma ** 2
            self.center = float(np.sum(w * self.ppos) / np.sum(w))
        else:
            self.center = 0.0

        names: list[str] = []
        bounds: list[tuple[float, float]] = []
        ids = [t.id for t in network.treatments if t.id != 1]
        a_name = "a" if self.center else "d_neg"
        names += [f"{a_name}[{k}]" for k in ids]
        names += [f"beta_bar[{k}]" for k in ids]
        bounds += [(-np.inf, np.inf)] * (2 * len(ids))
        self.sl_a = slice(0, nt - 1)
        self.sl_bb = slice(nt - 1, 2 * (nt - 1))
        pos = 2 * (nt - 1)
        self.i_tau = None
        if spec.tau_fixed is None:
            self.i_tau = pos
            names.append("tau")
            bounds.append((0.0, spec.tau_upper))
            pos += 1
        self.sl_delta = slice(pos, pos)
        if not marginalize_ad:
            _unique([r.study_id for r in ad], "AD")
            names += [f"delta[{r.study_id}]" for r in ad]
            bounds += [(-np.inf, np.inf)] * self.n_ad
            self.sl_delta = slice(pos, pos + self.n_ad)
            pos += self.n_ad
        self.n_global = pos
        _unique([s.study_id for s in self.ipd], "IPD")
        self.ipd_start = pos
        for s in self.ipd:
            sid = s.study_id
            names += [f"gamma[{sid}]", f"mu_neg[{sid}]", f"mu_pos[{sid}]",
                      f"delta_neg[{sid}]", f"delta_pos[{sid}]"]
            bounds += [(0.0, np.inf)] + [(-np.inf, np.inf)] * 4
        self.names = names
        self.bounds = bounds
        self.n_params = len(names)
        self._mle: list | None = None

    # -- packing -----------------------------------------------------------
    def pack(self, params: ModelParameters) -> np.ndarray:
        _check_structure(self.spec, self.network, params)
        x = np.empty(self.n_params)
        x[self.sl_a] = params.d_neg[1:] + params.beta_bar[1:] * self.center
        x[self.sl_bb] = params.beta_bar[1:]
        if self.i_tau is not None:
            x[self.i_tau] = params.tau
        if not self.marginalize_ad:
            x[self.sl_delta] = params.delta_ad
        for j in range(self.n_ipd):
            b = self.ipd_start + 5 * j
            x[b:b + 5] = (params.gamma[j], params.mu_neg[j], params.mu_pos[j],
                          params.delta_neg[j], params.delta_pos[j])
        return x

    def unpack(self, x: np.ndarray) -> ModelParameters:
        x = np.asarray(x, dtype=float)
        bb = np.concatenate([[0.0], x[self.sl_bb]])
        d = np.concatenate([[0.0], x[self.sl_a]]) - bb * self.center
        blocks = x[self.ipd_start:].reshape(self.n_ipd, 5)
        return ModelParameters(
            d_neg=d, beta_bar=bb,
            tau=self.spec.tau_fixed if self.i_tau is None else float(x[self.i_tau]),
            delta_ad=x[self.sl_delta] if not self.marginalize_ad else np.zeros(self.n_ad),
            gamma=blocks[:, 0], mu_neg=blocks[:, 1], beta=blocks[:, 2] - blocks[:, 1],
            delta_neg=blocks[:, 3], Delta=blocks[:, 4] - blocks[:, 3],
        )

    def reported(self, samples: np.ndarray) -> tuple[list[str], np.ndarray]:
        """Map sampler coordinates (``(..., P)``) to reported quantities.

        Adds ``d_neg``/``d_pos`` per treatment and ``beta``/``Delta`` per IPD
        study; the centred coordinates are replaced by ``d_neg``.
        """
        ids = [t.id for t in self.network.treatments if t.id != 1]
        bb = samples[..., self.sl_bb]
        d = samples[..., self.sl_a] - bb * self.center
        cols = [d, bb, d + bb]
        names = ([f"d_neg[{k}]" for k in ids] + [f"beta_bar[{k}]" for k in ids]
                 + [f"d_pos[{k}]" for k in ids])
        rest = samples[..., 2 * (self.nt - 1):self.ipd_start]
        cols.append(rest)
        names += self.names[2 * (self.nt - 1):self.ipd_start]
        for j, s in enumerate(self.ipd):
            b = self.ipd_start + 5 * j
            blk = samples[..., b:b + 5]
            cols.append(blk)
            cols.append(np.stack([blk[..., 2] - blk[..., 1], blk[..., 4] - blk[..., 3]], axis=-1))
            names += self.names[b:b + 5] + [f"beta[{s.study_id}]", f"Delta[{s.study_id}]"]
        return names, np.concatenate(cols, axis=-1)

    # -- density -------------------------------------------------------------
    def _global_terms(self, x):
        """AD terms, all random-effects terms and priors on shared parameters."""
        spec = self.spec
        out = np.empty(x.shape[0])
        _global_kernel(
            x, self.nt, self.sl_a.start, self.sl_bb.start, self.center,
            -1 if self.i_tau is None else self.i_tau,
            spec.tau_fixed if spec.tau_fixed is not None else 1.0,
            spec.tau_upper, math.sqrt(spec.prior_var),
            self.y, self.sigma, self.ad_k, self.ad_l, self.ppos,
            self.marginalize_ad, self.sl_delta.start, self.likelihood,
            self.ipd_start, self.ipd_k, self.ipd_l, out,
        )
        return out

    def _study_terms(self, x, j):
        """Weibull likelihood of IPD study ``j`` plus priors on its own block."""
        spec = self.spec
        out = np.empty(x.shape[0])
        _study_kernel(x, self.ipd_start + 5 * j, self._log_t, self._event, self._X, self._T,
                      self._offsets[j], self._offsets[j + 1], spec.gamma_shape, spec.gamma_rate,
                      math.sqrt(spec.prior_var), self.likelihood, out)
        return out

    def logp(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        total = self._global_terms(x)
        for j in range(self.n_ipd):
            total += self._study_terms(x, j)
        return total

    def local_group(self, i: int):
        if i < self.n_global:
            return "global"
        return (i - self.ipd_start) // 5

    def logp_local(self, x: np.ndarray, i: int) -> np.ndarray:
        """Sum of the terms that involve coordinate ``i``."""
        if i < self.n_global:
            return self._global_terms(x)
        j = (i - self.ipd_start) // 5
        out = self._study_terms(x, j)
        spec = self.spec
        _ipd_re_kernel(x, j, self.nt, self.sl_a.start, self.sl_bb.start, self.center,
                       -1 if self.i_tau is None else self.i_tau,
                       spec.tau_fixed if spec.tau_fixed is not None else 1.0,
                       self.ipd_start, self.ipd_k, self.ipd_l, out)
        return out

    # -- starting values -------------------------------------------------
    def _study_mle(self):
        if self._mle is None:
            self._mle = [weibull_mle(s, "subgroup") for s in self.ipd]
        return self._mle

    def initial_points(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Over-dispersed starting points (IPD blocks jittered around the MLE)."""
        x = np.zeros((n, self.n_params))
        x[:, :2 * (self.nt - 1)] = rng.normal(0.0, 0.5, size=(n, 2 * (self.nt - 1)))
        if self.i_tau is not None:
            x[:, self.i_tau] = rng.uniform(0.05, min(1.0, 0.5 * self.spec.tau_upper), size=n)
        if not self.marginalize_ad and self.n_ad:
            x[:, self.sl_delta] = self.y + rng.normal(0.0, 1.0, size=(n, self.n_ad)) * self.sigma
        for j, (est, se) in enumerate(self._study_mle()):
            b = self.ipd_start + 5 * j
            jitter = rng.normal(0.0, 1.0, size=(n, 5)) * se
            x[:, b] = est[0] * np.exp(jitter[:, 0] / est[0])
            x[:, b + 1:b + 5] = est[1:] + jitter[:, 1:]
        return x

    def proposal_scales(self) -> np.ndarray:
        """Starting random-walk SDs on the sampler's unconstrained scale."""
        s = np.full(self.n_params, 0.2)
        for j, (est, se) in enumerate(self._study_mle()):
            b = self.ipd_start + 5 * j
            s[b] = se[0] / est[0]
            s[b + 1:b + 5] = se[1:]
        return np.clip(s, 1e-3, 5.0)


def _unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise StructureError(f"duplicate {what} study id {i!r}")
        seen.add(i)


# ---------------------------------------------------------------------------
# single-study model for stage one

class StudyPosterior:
    """Weibull PH posterior for one participant-level study with N(0, var)
    priors on its effects (no pooling).

    ``mode="pooled"``: coordinates ``gamma, mu, delta`` and the treatment is
    the only covariate. ``mode="subgroup"``: coordinates ``gamma, mu_neg,
    mu_pos, delta_neg, delta_pos``. A subgroup-mode study in which every
    participant has the same biomarker status falls back to the pooled
    layout (the other subgroup's parameters are not identified).
    """

    def __init__(self, study: IPDStudy, mode: str = "pooled", spec: ModelSpec | None = None):
        if mode not in ("pooled", "subgroup"):
            raise ValueError(f"unknown stage-one mode {mode!r}")
        self.spec = spec or ModelSpec()
        self.study = study
        self.arr = _ipd_arrays(study)
        levels = np.unique(self.arr["X"])
        self.mode = mode if len(levels) == 2 else "pooled"
        sid = study.study_id
        if self.mode == "pooled":
            self.names = [f"gamma[{sid}]", f"mu[{sid}]", f"delta[{sid}]"]
        else:
            self.names = [f"gamma[{sid}]", f"mu_neg[{sid}]", f"mu_pos[{sid}]",
                          f"delta_neg[{sid}]", f"delta_pos[{sid}]"]
        self.bounds = [(0.0, np.inf)] + [(-np.inf, np.inf)] * (len(self.names) - 1)
        self.n_params = len(self.names)
        self._est, self._se = weibull_mle(study, self.mode)

    def logp(self, x):
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        if self.mode == "pooled":
            # gamma, mu, delta -> gamma, mu, mu, delta, delta
            x = x[:, [0, 1, 1, 2, 2]]
        spec = self.spec
        out = np.empty(x.shape[0])
        a = self.arr
        _study_kernel(x, 0, a["log_t"], a["event"], a["X"], a["T"], 0, len(a["X"]),
                      spec.gamma_shape, spec.gamma_rate, math.sqrt(spec.prior_var), True, out)
        sd = math.sqrt(spec.prior_var)
        if self.mode == "pooled":
            # one mu prior and one delta prior instead of two copies of mu
            out += _norm_logpdf(x[:, 3], 0.0, sd) - _norm_logpdf(x[:, 1], 0.0, sd)
        else:
            out += _norm_logpdf(x[:, 3], 0.0, sd) + _norm_logpdf(x[:, 4], 0.0, sd)
        return out

    def initial_points(self, rng, n):
        jitter = rng.normal(0.0, 1.0, size=(n, self.n_params)) * self._se
        x = self._est + jitter
        x[:, 0] = self._est[0] * np.exp(jitter[:, 0] / self._est[0])
        return x

    def proposal_scales(self):
        s = self._se.copy()
        s[0] = s[0] / self._est[0]
        return np.clip(s, 1e-3, 5.0)


def weibull_mle(study: IPDStudy, mode: str = "subgroup") -> tuple[np.ndarray, np.ndarray]:
    """Maximum-likelihood estimate and standard errors of a study's Weibull
    model, in the coordinate order used by :class:`NMAPosterior`
    (``gamma, mu_neg, mu_pos, delta_neg, delta_pos``) or, for ``pooled``,
    ``gamma, mu, delta``.

    Unidentified subgroup parameters (one biomarker level absent) are set
    to the pooled estimates with a large standard error.
    """
    arr = _ipd_arrays(study)
    X, T = arr["X"], arr["T"]
    has = {v: bool(np.any(X == v)) for v in (0.0, 1.0)}

    if mode == "pooled" or not (has[0.0] and has[1.0]):
        design = np.column_stack([np.ones_like(T), T])
    else:
        design = np.column_stack([1 - X, X, (1 - X) * T, X * T])
    log_t, event = arr["log_t"], arr["event"]

    def nll(theta):
        lg, coef = theta[0], theta[1:]
        g = math.exp(lg)
        eta = design @ coef
        ll = event * (eta + lg + (g - 1) * log_t) - np.exp(eta + g * log_t)
        return -ll.sum()

    p = design.shape[1]
    x0 = np.zeros(p + 1)
    rate = max(event.sum(), 1.0) / np.exp(log_t).sum()
    x0[1:] = 0.0
    x0[1] = math.log(rate)
    if p == 4:
        x0[2] = x0[1]
    res = optimize.minimize(nll, x0, method="BFGS")
    theta = res.x
    hess = _num_hessian(nll, theta)
    try:
        cov = np.linalg.inv(hess)
        se = np.sqrt(np.clip(np.diag(cov), 1e-8, None))
    except np.linalg.LinAlgError:
        se = np.full(p + 1, 0.5)
    se = np.where(np.isfinite(se), se, 0.5)
    gamma = math.exp(theta[0])
    est = np.concatenate([[gamma], theta[1:]])
    se = np.concatenate([[gamma * se[0]], se[1:]])
    if mode == "subgroup" and p == 2:
        # expand pooled (mu, delta) to the five-coordinate layout
        est = np.array([est[0], est[1], est[1], est[2], est[2]])
        se = np.array([se[0], se[1], se[1], se[2], se[2]])
    return est, se


def _num_hessian(f, x, h=1e-4):
    n = len(x)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            e_i = np.zeros(n)
            e_j = np.zeros(n)
            e_i[i] = h
            e_j[j] = h
            v = (f(x + e_i + e_j) - f(x + e_i - e_j) - f(x - e_i + e_j) + f(x - e_i - e_j)) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H
