"""Adaptive random-walk Metropolis-within-Gibbs and convergence diagnostics.

All chains advance in lockstep so the target is evaluated on a
``(n_chains, n_params)`` batch, but every chain draws its random numbers
from its own stream spawned from the master seed, so a chain's path does
not depend on how many other chains run beside it.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logit

__all__ = [
    "SamplerConfig",
    "Draws",
    "InitializationError",
    "FunctionTarget",
    "run_chains",
    "rhat",
    "ess",
    "mcse",
    "summarize",
]

log = logging.getLogger(__name__)

_BLOCK = 500  # iterations of random numbers drawn per chain at a time


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    burn_in: int = 10_000
    n_iter: int = 20_000
    thin: int = 1
    seed: int = 20240101
    target_accept: float = 0.44
    adapt_window: int = 50

    def __post_init__(self):
        if min(self.n_chains, self.burn_in + 1, self.n_iter, self.thin, self.adapt_window) < 1:
            raise ValueError("sampler counts must be positive and thin >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class Draws:
    """Posterior draws, ``samples[chain, iteration, parameter]``."""

    names: list[str]
    samples: np.ndarray
    acceptance: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    seeds: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 3 or self.samples.shape[2] != len(self.names):
            raise ValueError("samples must have shape (chains, iterations, len(names))")
        if len(set(self.names)) != len(self.names):
            raise ValueError("parameter names must be unique")
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_iter(self) -> int:
        return self.samples.shape[1]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def get(self, name: str) -> np.ndarray:
        """Draws of one parameter, shape ``(chains, iterations)``."""
        try:
            return self.samples[:, :, self._index[name]]
        except KeyError:
            raise KeyError(f"no parameter {name!r} in draws") from None

    def pooled(self, name: str) -> np.ndarray:
        return self.get(name).reshape(-1)

    def with_columns(self, names: Sequence[str], values: np.ndarray) -> "Draws":
        values = np.asarray(values, dtype=float).reshape(self.n_chains, self.n_iter, len(names))
        return Draws(list(self.names) + list(names),
                     np.concatenate([self.samples, values], axis=2),
                     self.acceptance, list(self.seeds))

    def to_csv(self, dest) -> None:
        """Long format ``chain,iteration,param,value``."""
        close = False
        if not hasattr(dest, "write"):
            dest = open(dest, "w", encoding="utf-8", newline="")
            close = True
        try:
            w = csv.writer(dest, lineterminator="\n")
            w.writerow(["chain", "iteration", "param", "value"])
            for c in range(self.n_chains):
                for t in range(self.n_iter):
                    row = self.samples[c, t]
                    for name, v in zip(self.names, row):
                        w.writerow([c, t, name, repr(float(v))])
        finally:
            if close:
                dest.close()


class FunctionTarget:
    """Adapter for a plain ``f(vector) -> float`` log density."""

    def __init__(self, fn: Callable[[np.ndarray], float], names: Sequence[str],
                 bounds: Sequence[tuple[float, float]] | None = None):
        self.fn = fn
        self.names = list(names)
        self.n_params = len(self.names)
        self.bounds = list(bounds) if bounds is not None else [(-np.inf, np.inf)] * self.n_params

    def logp(self, x):
        return np.array([self.fn(row) for row in np.atleast_2d(x)], dtype=float)


# ---------------------------------------------------------------------------
# transforms between the constrained space and the sampler's real line

class _Transform:
    def __init__(self, bounds):
        lo = np.array([b[0] for b in bounds], dtype=float)
        hi = np.array([b[1] for b in bounds], dtype=float)
        self.lo, self.hi = lo, hi
        self.kind = np.zeros(len(bounds), dtype=int)
        self.kind[np.isfinite(lo) & ~np.isfinite(hi)] = 1
        self.kind[~np.isfinite(lo) & np.isfinite(hi)] = 2
        self.kind[np.isfinite(lo) & np.isfinite(hi)] = 3

    def to_real(self, x, i):
        k, lo, hi = self.kind[i], self.lo[i], self.hi[i]
        if k == 0:
            return x
        if k == 1:
            return np.log(x - lo)
        if k == 2:
            return np.log(hi - x)
        return logit((x - lo) / (hi - lo))

    def from_real(self, z, i):
        k, lo, hi = self.kind[i], self.lo[i], self.hi[i]
        if k == 0:
            return z
        if k == 1:
            return lo + np.exp(z)
        if k == 2:
            return hi - np.exp(z)
        return lo + (hi - lo) * expit(z)

    def log_jac(self, z, i):
        """log |dx/dz|."""
        k = self.kind[i]
        if k == 0:
            return np.zeros_like(z)
        if k in (1, 2):
            return z
        return math.log(self.hi[i] - self.lo[i]) - np.logaddexp(0.0, z) - np.logaddexp(0.0, -z)


def _chain_streams(seed: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def _initial_states(target, init, rngs, max_tries=100):
    n, P = len(rngs), target.n_params
    x = np.empty((n, P))
    fixed = None
    if init is not None and not callable(init):
        fixed = np.asarray(init, dtype=float)
    for c, rng in enumerate(rngs):
        found = False
        for _ in range(1 if fixed is not None else max_tries):
            if fixed is not None:
                cand = fixed[c] if fixed.ndim == 2 else fixed
            elif init is None:
                cand = np.asarray(target.initial_points(rng, 1), dtype=float)[0]
            else:
                cand = np.asarray(init(rng), dtype=float)
            cand = np.array(cand, dtype=float).reshape(P)
            if np.isfinite(target.logp(cand[None, :])[0]):
                x[c] = cand
                found = True
                break
        if not found:
            raise InitializationError(
                f"chain {c}: no starting point with finite log posterior after {max_tries} tries")
    return x


def run_chains(target, init=None, config: SamplerConfig | None = None) -> Draws:
    """Run ``config.n_chains`` adaptive Metropolis-within-Gibbs chains.

    Parameters
    ----------
    target
        Object with ``names``, ``bounds``, ``n_params`` and a batched
        ``logp(x)`` taking ``(n_chains, n_params)``. Optional hooks:
        ``logp_local(x, i)`` / ``local_group(i)`` (terms involving coordinate
        ``i``; coordinates in one group share the same local function),
        ``initial_points(rng, n)`` and ``proposal_scales()``. A plain callable
        on 1-D vectors is accepted when wrapped in :class:`FunctionTarget`.
    init
        ``None`` (use ``target.initial_points``), an array of shape
        ``(n_params,)`` or ``(n_chains, n_params)``, or ``f(rng) -> vector``.
    config
        Sampler settings; defaults to :class:`SamplerConfig()`.

    Each sweep updates every coordinate in turn with a Gaussian random walk
    on the unconstrained scale (log for lower-bounded, scaled logit for
    interval-bounded parameters, Jacobian included). Proposal SDs are tuned
    per chain and coordinate towards ``target_accept`` during burn-in only.
    """
    cfg = config or SamplerConfig()
    C, P = cfg.n_chains, target.n_params
    rngs = _chain_streams(cfg.seed, C)
    tr = _Transform(target.bounds)
    x = _initial_states(target, init, rngs)
    z = np.column_stack([tr.to_real(x[:, i], i) for i in range(P)]) if P else x.copy()

    local = getattr(target, "logp_local", None)
    group = getattr(target, "local_group", None)
    if local is None:
        local = lambda xx, i: target.logp(xx)  # noqa: E731
        group = lambda i: None  # noqa: E731
    groups = [group(i) for i in range(P)]
    kinds = tr.kind.tolist()

    hint = getattr(target, "proposal_scales", None)
    scales0 = np.asarray(hint(), dtype=float) if hint is not None else np.full(P, 0.5)
    log_s = np.tile(np.log(scales0), (C, 1))

    n_total = cfg.burn_in + cfg.n_iter
    n_keep = cfg.n_iter // cfg.thin
    out = np.empty((C, n_keep, P))
    accepted_window = np.zeros((C, P))
    accepted_kept = np.zeros((C, P))
    n_batches = 0
    kept = 0

    for it in range(n_total):
        b = it % _BLOCK
        if b == 0:
            m = min(_BLOCK, n_total - it)
            noise = np.stack([r.standard_normal((m, P)) for r in rngs], axis=1)
            log_u = np.log(np.stack([r.random((m, P)) for r in rngs], axis=1))
        step = np.exp(log_s) * noise[b]
        cur_group = object()
        cur = None
        for i in range(P):
            if groups[i] is None or groups[i] != cur_group:
                cur = local(x, i)
                cur_group = groups[i]
            old_x = x[:, i].copy()
            old_z = z[:, i].copy()
            new_z = old_z + step[:, i]
            x[:, i] = new_z if kinds[i] == 0 else tr.from_real(new_z, i)
            prop = local(x, i)
            log_r = prop - cur
            if kinds[i]:
                log_r += tr.log_jac(new_z, i) - tr.log_jac(old_z, i)
            # NaN or -inf proposals compare False and are rejected
            acc = log_u[b, :, i] < log_r
            x[:, i] = np.where(acc, x[:, i], old_x)
            z[:, i] = np.where(acc, new_z, old_z)
            cur = np.where(acc, prop, cur)
            if it < cfg.burn_in:
                accepted_window[:, i] += acc
            else:
                accepted_kept[:, i] += acc
            if groups[i] is None:
                cur_group = object()  # no local structure: recompute next time

        if it < cfg.burn_in:
            if (it + 1) % cfg.adapt_window == 0:
                n_batches += 1
                rate = accepted_window / cfg.adapt_window
                log_s += (rate - cfg.target_accept) * min(1.0, 2.0 / math.sqrt(n_batches))
                accepted_window[:] = 0
        elif (it - cfg.burn_in) % cfg.thin == cfg.thin - 1 and kept < n_keep:
            out[:, kept] = x
            kept += 1

    acceptance = accepted_kept / max(cfg.n_iter, 1)
    seeds = [(cfg.seed, c) for c in range(C)]
    return Draws(list(target.names), out, acceptance, seeds)


# ---------------------------------------------------------------------------
# diagnostics

def _chains(draws: Draws | np.ndarray, parameter: str | None) -> np.ndarray:
    if isinstance(draws, Draws):
        return draws.get(parameter)
    arr = np.asarray(draws, dtype=float)
    return arr[None, :] if arr.ndim == 1 else arr


def rhat(draws: Draws | np.ndarray, parameter: str | None = None) -> float:
    """Split-chain potential scale reduction factor.

    Returns NaN (with a warning) when every chain half is constant.
    """
    x = _chains(draws, parameter)
    m, n = x.shape
    if m < 2 or n < 4:
        raise ValueError("rhat needs at least 2 chains of 4 iterations")
    half = n // 2
    split = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    w = split.var(axis=1, ddof=1).mean()
    if w == 0:
        warnings.warn("zero within-chain variance; R-hat undefined", RuntimeWarning, stacklevel=2)
        return math.nan
    b = half * split.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance along the last axis via FFT (biased estimator)."""
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    return ac / n


def ess(draws: Draws | np.ndarray, parameter: str | None = None) -> float:
    """Effective sample size using Geyer's initial monotone sequence on the
    multi-chain autocorrelation estimate. Clamped to ``[1, total draws]``.
    """
    x = _chains(draws, parameter)
    m, n = x.shape
    total = m * n
    if n < 4:
        raise ValueError("ess needs at least 4 iterations per chain")
    acov = _autocov(x)
    w = acov[:, 0].mean() * n / (n - 1)
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        warnings.warn("constant draws; ESS set to its minimum", RuntimeWarning, stacklevel=2)
        return 1.0
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    prev = math.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2 * pair
    value = total / tau if tau > 0 else float(total)
    return float(min(max(value, 1.0), total))


def mcse(draws: Draws | np.ndarray, parameter: str | None = None) -> float:
    """Monte Carlo standard error of the posterior mean."""
    x = _chains(draws, parameter)
    return float(x.std(ddof=1) / math.sqrt(ess(x)))


def summarize(draws: Draws | np.ndarray, parameter: str | None = None, level: float = 0.95):
    """``(mean, median, lower, upper, sd)`` of the pooled draws with an
    equal-tailed interval at ``level``.
    """
    x = _chains(draws, parameter).reshape(-1)
    if x.size == 0:
        raise ValueError("no draws")
    lo, med, hi = np.quantile(x, [(1 - level) / 2, 0.5, (1 + level) / 2])
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return float(x.mean()), float(med), float(lo), float(hi), sd
