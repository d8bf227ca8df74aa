"""Fatal-disease duration distributions: representation, combination,
replicate draws for their uncertainty, and day-lag delay matrices.

Published onset-to-death models are combined by simulating samples of the
original study sizes, pooling, and refitting a lognormal by maximum
likelihood; convolution with the incubation distribution is done the same
way on a large Monte-Carlo sample (maximum likelihood on a large sample
minimizes Kullback-Leibler divergence to the sampled law).
"""

import csv
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import linalg, optimize, special, stats

MC_FIT_SAMPLES = 100_000  # sample size for KL-minimizing lognormal fits


class DurationDataError(ValueError):
    """Input histogram or probability table unusable."""


@dataclass(frozen=True)
class DurationDist:
    """Parametric duration distribution in days.

    lognormal: param1 = log-scale mean, param2 = log-scale sd.
    gamma: param1 = shape, param2 = scale.
    """

    family: str
    param1: float
    param2: float

    def __post_init__(self):
        if self.family not in ("lognormal", "gamma"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.param2 <= 0 or (self.family == "gamma" and self.param1 <= 0):
            raise ValueError("distribution parameters must be positive")

    @classmethod
    def lognormal_from_mean_sd(cls, mean: float, sd: float) -> "DurationDist":
        s2 = np.log(1.0 + (sd / mean) ** 2)
        return cls("lognormal", np.log(mean) - 0.5 * s2, float(np.sqrt(s2)))

    @classmethod
    def gamma_from_mean_sd(cls, mean: float, sd: float) -> "DurationDist":
        return cls("gamma", (mean / sd) ** 2, sd**2 / mean)

    @property
    def _frozen(self):
        if self.family == "lognormal":
            return stats.lognorm(self.param2, scale=np.exp(self.param1))
        return stats.gamma(self.param1, scale=self.param2)

    def pdf(self, x):
        return self._frozen.pdf(x)

    def cdf(self, x):
        return self._frozen.cdf(x)

    def mean(self) -> float:
        return float(self._frozen.mean())

    def sd(self) -> float:
        return float(self._frozen.std())

    def median(self) -> float:
        return float(self._frozen.median())

    def rvs(self, n: int, rng) -> np.ndarray:
        return self._frozen.rvs(size=n, random_state=rng)


@dataclass(frozen=True)
class StudyModel:
    """A published onset-to-death model with its sample size."""

    name: str
    dist: DurationDist
    n: int


@dataclass
class DurationEnsemble:
    """Replicate infection-to-death distributions capturing their uncertainty."""

    draws: list
    mean_dist: DurationDist

    def __post_init__(self):
        if len(self.draws) < 1:
            raise ValueError("ensemble needs at least one draw")
        if any(d.family != "lognormal" for d in self.draws):
            raise ValueError("ensemble draws must be lognormal")

    def __len__(self) -> int:
        return len(self.draws)


@dataclass
class DelayMatrix:
    """Lower-triangular matrix mapping daily incidence to expected deaths."""

    B: np.ndarray

    def __post_init__(self):
        n = self.B.shape[0]
        if self.B.shape != (n, n):
            raise ValueError("delay matrix must be square")


def published_models() -> list:
    """The three published onset-to-death models with their sample sizes."""
    return [
        StudyModel("verity", DurationDist.gamma_from_mean_sd(17.8, 8.44), 24),
        StudyModel("wu", DurationDist.gamma_from_mean_sd(20.0, 10.0), 41),
        StudyModel("linton", DurationDist.lognormal_from_mean_sd(20.2, 11.6), 34),
    ]


def incubation_model() -> DurationDist:
    """Lognormal infection-to-onset distribution from the meta-analysis."""
    return DurationDist("lognormal", 1.63, 0.50)


def fit_lognormal_ml(x) -> DurationDist:
    """Maximum-likelihood lognormal fit (matches log-scale moments)."""
    lx = np.log(np.asarray(x, dtype=float))
    return DurationDist("lognormal", float(lx.mean()), float(lx.std()))


def combine_onset_to_death(rng) -> DurationDist:
    """One meta-analysis replicate: simulate each study's sample size, pool,
    and fit a lognormal to the pooled 99 durations."""
    xs = []
    for study in published_models():
        draw = study.dist.rvs(study.n, rng)
        while np.any(draw <= 0):  # probability ~0, but the log needs positives
            bad = draw <= 0
            draw[bad] = study.dist.rvs(int(bad.sum()), rng)
        xs.append(draw)
    return fit_lognormal_ml(np.concatenate(xs))


def convolve_to_infection(onset2death: DurationDist, incubation: DurationDist,
                          rng=None, n: int = MC_FIT_SAMPLES) -> DurationDist:
    """Lognormal fit to the law of onset-to-death plus incubation (independent)."""
    rng = np.random.default_rng(0) if rng is None else rng
    total = onset2death.rvs(n, rng) + incubation.rvs(n, rng)
    return fit_lognormal_ml(total)


def duration_ensemble(R: int = 100, rng=None) -> DurationEnsemble:
    """R independent meta-analysis replicates of the infection-to-death law."""
    if R < 1:
        raise ValueError("need R >= 1 replicates")
    rng = np.random.default_rng(0) if rng is None else rng
    inc = incubation_model()
    draws = [convolve_to_infection(combine_onset_to_death(rng), inc, rng)
             for _ in range(R)]
    mu = float(np.mean([d.param1 for d in draws]))
    sig = float(np.mean([d.param2 for d in draws]))
    return DurationEnsemble(draws=draws, mean_dist=DurationDist("lognormal", mu, sig))


def day_lag_weights(dist: DurationDist, n_days: int) -> np.ndarray:
    """Density at integer day lags 1..n_days (midpoint approximation of the
    per-day integral; these are the delay-matrix entries)."""
    return dist.pdf(np.arange(1, n_days + 1, dtype=float))


def delay_matrix(dist: DurationDist, n_days: int) -> DelayMatrix:
    """B[i, j] = density of the duration at lag i - j + 1 days for i >= j.

    The density at the integer lag is the midpoint approximation of the
    integral of the duration density over that day.
    """
    if n_days < 1:
        raise ValueError("n_days must be at least 1")
    lags = day_lag_weights(dist, n_days)
    row = np.zeros(n_days)
    row[0] = lags[0]
    return DelayMatrix(B=linalg.toeplitz(lags, row))


# ---------------------------------------------------------------------------
# English hospital (CHESS-style) onset-to-death histogram: mixture fit


@dataclass
class MixtureFit:
    """Profile-constrained mixture fit to an onset-to-death histogram."""

    hospital: DurationDist       # gamma component (short durations)
    community: DurationDist      # lognormal component (long durations)
    community_weight: float
    loglik: float
    mle_loglik: float
    mle_community_weight: float


def _cell_probs(dist: DurationDist, days: np.ndarray) -> np.ndarray:
    hi = dist.cdf(days + 0.5)
    lo = dist.cdf(np.maximum(days - 0.5, 0.0))
    return hi - lo


def _mixture_loglik(days, counts, w_gamma, gamma_dist, ln_dist) -> float:
    p = w_gamma * _cell_probs(gamma_dist, days) + (1 - w_gamma) * _cell_probs(ln_dist, days)
    if np.any(p <= 0):
        return -np.inf
    return float(counts @ np.log(p))


def _fit_mixture_given_weight(days, counts, w_gamma, x0):
    def nll(x):
        a, s, mu, sig = np.exp(x[0]), np.exp(x[1]), x[2], np.exp(x[3])
        ll = _mixture_loglik(days, counts, w_gamma,
                             DurationDist("gamma", a, s),
                             DurationDist("lognormal", mu, sig))
        return -ll if np.isfinite(ll) else 1e12
    return optimize.minimize(nll, x0, method="Nelder-Mead",
                             options=dict(maxiter=4000, xatol=1e-7, fatol=1e-9))


def fit_chess_mixture(histogram: dict) -> MixtureFit:
    """Fit gamma + lognormal mixture to an onset-to-death day histogram, then
    profile the gamma (hospital) proportion down until the log likelihood is
    4 below the MLE, returning the constrained fit (shortest defensible
    community mean).

    The lognormal component is constrained to the longer mean.
    """
    days = np.asarray(sorted(histogram), dtype=float)
    counts = np.asarray([histogram[d] for d in sorted(histogram)], dtype=float)
    if days.size < 2:
        raise DurationDataError("histogram needs at least two distinct days")
    g0 = DurationDist.gamma_from_mean_sd(4.0, 2.0)
    l0 = DurationDist.lognormal_from_mean_sd(21.0, 12.7)
    x0 = np.array([np.log(g0.param1), np.log(g0.param2), l0.param1, np.log(l0.param2)])

    def nll_joint(z):
        w = 1.0 / (1.0 + np.exp(-z[0]))
        a, s, mu, sig = np.exp(z[1]), np.exp(z[2]), z[3], np.exp(z[4])
        gam = DurationDist("gamma", a, s)
        ln = DurationDist("lognormal", mu, sig)
        if ln.mean() <= gam.mean():
            return 1e12
        ll = _mixture_loglik(days, counts, w, gam, ln)
        return -ll if np.isfinite(ll) else 1e12

    res = optimize.minimize(nll_joint, np.concatenate([[0.0], x0]), method="Nelder-Mead",
                            options=dict(maxiter=8000, xatol=1e-8, fatol=1e-10))
    w_hat = 1.0 / (1.0 + np.exp(-res.x[0]))
    x_hat = res.x[1:]
    ll_max = -res.fun

    def profile_gap(w):
        r = _fit_mixture_given_weight(days, counts, w, x_hat)
        return -r.fun - (ll_max - 4.0), r

    lo, hi = 1e-4, w_hat
    gap_lo, r_lo = profile_gap(lo)
    if gap_lo > 0:
        # likelihood never drops 4 below the MLE: keep the MLE fit
        w_fin, r_fin = w_hat, _fit_mixture_given_weight(days, counts, w_hat, x_hat)
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            gap, r_mid = profile_gap(mid)
            if gap > 0:
                hi = mid
            else:
                lo = mid
            if hi - lo < 1e-6:
                break
        w_fin = 0.5 * (lo + hi)
        _, r_fin = profile_gap(w_fin)
    a, s = np.exp(r_fin.x[0]), np.exp(r_fin.x[1])
    mu, sig = r_fin.x[2], np.exp(r_fin.x[3])
    return MixtureFit(
        hospital=DurationDist("gamma", float(a), float(s)),
        community=DurationDist("lognormal", float(mu), float(sig)),
        community_weight=float(1.0 - w_fin),
        loglik=float(-r_fin.fun),
        mle_loglik=float(ll_max),
        mle_community_weight=float(1.0 - w_hat),
    )


# ---------------------------------------------------------------------------
# ISARIC-style hospitalization-to-death probability table


@dataclass
class IsaricCombination:
    """Durations derived from a hospitalization-to-death probability table."""

    hosp_to_death: DurationDist
    onset_to_death_mean: float
    onset_to_death_sd: float
    infection_to_death: DurationDist


def fit_lognormal_to_pf(days: np.ndarray, probs: np.ndarray) -> DurationDist:
    """KL-minimizing lognormal fit of a tabulated daily probability function
    (day d covers [d, d+1), represented by its midpoint)."""
    mid = days + 0.5
    m = float(probs @ np.log(mid))
    v = float(probs @ (np.log(mid) - m) ** 2)
    return DurationDist("lognormal", m, np.sqrt(v))


def isaric_infection_to_death(hosp2death_pf, rng=None,
                              onset_to_hosp=(7.7, 6.1)) -> IsaricCombination:
    """Combine a tabulated hospitalization-to-death probability function with
    the onset-to-hospitalization lognormal and the incubation distribution
    (all independent); fit a lognormal to the three-way sum."""
    days = np.asarray(sorted(hosp2death_pf), dtype=float)
    probs = np.asarray([hosp2death_pf[d] for d in sorted(hosp2death_pf)], dtype=float)
    total = probs.sum()
    if abs(total - 1.0) > 0.02:
        raise DurationDataError(f"probability function sums to {total:.4f}, not 1")
    probs = probs / total
    rng = np.random.default_rng(0) if rng is None else rng

    hd_fit = fit_lognormal_to_pf(days, probs)
    oh = DurationDist.lognormal_from_mean_sd(*onset_to_hosp)
    inc = incubation_model()
    o2d_mean = hd_fit.mean() + oh.mean()
    o2d_sd = float(np.hypot(hd_fit.sd(), oh.sd()))
    total_draws = (hd_fit.rvs(MC_FIT_SAMPLES, rng)
                   + oh.rvs(MC_FIT_SAMPLES, rng)
                   + inc.rvs(MC_FIT_SAMPLES, rng))
    return IsaricCombination(
        hosp_to_death=hd_fit,
        onset_to_death_mean=o2d_mean,
        onset_to_death_sd=o2d_sd,
        infection_to_death=fit_lognormal_ml(total_draws),
    )


# ---------------------------------------------------------------------------
# Bundled tabulated data


def _read_two_column_csv(name: str) -> dict:
    out = {}
    with resources.files("backcalc.data").joinpath(name).open() as fh:
        for row in csv.reader(r for r in fh if not r.startswith("#")):
            if not row or row[0].strip().lower() in ("day", ""):
                continue
            out[int(row[0])] = float(row[1])
    return out


def load_chess_histogram() -> dict:
    """Bundled stand-in for the English hospital onset-to-death histogram."""
    return {d: int(v) for d, v in _read_two_column_csv("chess_onset_to_death_histogram.csv").items()}


def load_isaric_pf() -> dict:
    """Bundled stand-in for the hospitalization-to-death probability function."""
    return _read_two_column_csv("isaric_hosp_to_death_pf.csv")


def chess_infection_to_death(rng=None) -> DurationDist:
    """Infection-to-death lognormal from the bundled hospital-data mixture fit."""
    fit = fit_chess_mixture(load_chess_histogram())
    return convolve_to_infection(fit.community, incubation_model(), rng)
