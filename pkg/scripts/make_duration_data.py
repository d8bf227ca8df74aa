#!/usr/bin/env python3
"""Regenerate the bundled tabulated duration data files.

The original English hospital onset-to-death bar chart and the digitized
hospitalization-to-death CDF are access-restricted, so the repo ships
synthetic stand-ins generated here: tabulations of distributions chosen so
the downstream fits land on the published summary values (community
lognormal mean 21 / sd 12.7 at ~0.7 mixture weight; hospitalization-to-death
lognormal mean 12.47 / sd 10.97).

Run from the repo root:  python3 scripts/make_duration_data.py
"""

from pathlib import Path

import numpy as np
from scipy import stats

OUT = Path(__file__).resolve().parent.parent / "src" / "backcalc" / "data"

CHESS_HEADER = """\
# Synthetic stand-in for the English hospital onset-to-death duration
# histogram (3274 deaths before 10 June 2020 with onset before 1 May;
# original bar chart is access-restricted). Expected per-day counts of the
# mixture 0.35*gamma(mean 3.5, sd 2.2) + 0.65*lognormal(mean 21.75, sd 12.5),
# n=3300, rounded; chosen so the profile-constrained mixture fit reproduces
# the published community component (lognormal mean ~21, sd ~12.7 at ~0.7
# community weight, log-likelihood 4 below the MLE).
# Regenerate with scripts/make_duration_data.py.
day,count
"""

ISARIC_HEADER = """\
# Synthetic stand-in for the hospitalization-to-death interval probability
# function obtained by differencing a digitized cumulative distribution
# (original figure is not redistributable). Tabulated per-day probabilities
# of lognormal(mean 12.47, sd 10.97); day d covers [d, d+1).
# Regenerate with scripts/make_duration_data.py.
day,probability
"""


def lognormal_params(mean, sd):
    s2 = np.log(1.0 + (sd / mean) ** 2)
    return np.log(mean) - 0.5 * s2, np.sqrt(s2)


def gamma_params(mean, sd):
    return (mean / sd) ** 2, sd**2 / mean


def make_chess(path):
    w_gamma, gm, gs, lm, ls, n = 0.35, 3.5, 2.2, 21.75, 12.5, 3300
    a, s = gamma_params(gm, gs)
    mu, sig = lognormal_params(lm, ls)
    days = np.arange(1, 91)
    hi = days + 0.5
    lo = np.maximum(days - 0.5, 0.0)
    p = (w_gamma * (stats.gamma.cdf(hi, a, scale=s) - stats.gamma.cdf(lo, a, scale=s))
         + (1 - w_gamma) * (stats.lognorm.cdf(hi, sig, scale=np.exp(mu))
                            - stats.lognorm.cdf(lo, sig, scale=np.exp(mu))))
    counts = np.round(n * p).astype(int)
    keep = counts > 0
    with open(path, "w") as fh:
        fh.write(CHESS_HEADER)
        for d, c in zip(days[keep], counts[keep]):
            fh.write(f"{d},{c}\n")
    print(f"{path}: {counts[keep].sum()} deaths over {keep.sum()} days")


def make_isaric(path):
    mu, sig = lognormal_params(12.47, 10.97)
    edges = np.arange(0.0, 201.0)
    p = np.diff(stats.lognorm.cdf(edges, sig, scale=np.exp(mu)))
    p = p / p.sum()
    with open(path, "w") as fh:
        fh.write(ISARIC_HEADER)
        for d, v in enumerate(p):
            fh.write(f"{d},{v:.10e}\n")
    print(f"{path}: {len(p)} days, sum {p.sum():.6f}")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    make_chess(OUT / "chess_onset_to_death_histogram.csv")
    make_isaric(OUT / "isaric_hosp_to_death_pf.csv")
