"""Observation models for daily death series.

Three kinds share one negative-binomial likelihood engine:

* ``basic``     log mu_i = f(i) + f_w(weekday_i), a plain GAM;
* ``incidence`` a smooth positive fatal-incidence curve convolved with the
  infection-to-death day-lag matrix, log mu = log(B f_c) + f_w;
* ``renewal``   f_c produced by a discrete renewal recursion whose log
  reproduction number is a spline, then convolved as above.

Each model exposes the penalized log likelihood with exact gradient and
Hessian in all coefficients; the latent-curve Jacobians are propagated
through the convolution and the weekly term by the chain rule.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import durations, splines
from .durations import DurationDist

ETA_CLIP = 40.0      # |log f_c| beyond this is treated as numerically singular
FC_FLOOR = 1e-12     # keeps log(delta) finite when the latent curve underflows
GEN_HORIZON = 60     # generation-interval truncation (tail mass < 1e-6)


class ModelError(ValueError):
    pass


@dataclass
class DeathSeries:
    """Daily death counts with calendar anchors.

    ``y`` is integer-valued on ingest; derived series (e.g. IFR-adjusted)
    may carry fractional counts.
    """

    dates: np.ndarray
    y: np.ndarray
    anchors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.y = np.asarray(self.y, dtype=float)
        if self.dates.size != self.y.size:
            raise ModelError("dates and counts differ in length")
        if self.dates.size and np.any(np.diff(self.dates) != np.timedelta64(1, "D")):
            raise ModelError("dates must be contiguous daily")
        if np.any(~np.isfinite(self.y)) or np.any(self.y < 0):
            raise ModelError("death counts must be finite and nonnegative")

    @classmethod
    def from_counts(cls, y, start="2020-03-13", anchors=None):
        y = np.asarray(y, dtype=float)
        dates = np.datetime64(start, "D") + np.arange(y.size)
        return cls(dates=dates, y=y, anchors=dict(anchors or {}))

    def __len__(self):
        return self.y.size

    @property
    def weekday(self) -> np.ndarray:
        """ISO weekday 1..7 of each date."""
        return ((self.dates.astype("datetime64[D]").view("int64") + 3) % 7) + 1

    def day_index(self, date) -> int:
        idx = int((np.datetime64(date, "D") - self.dates[0]).astype(int))
        if not 0 <= idx < len(self):
            raise ModelError(f"{date} outside the series")
        return idx

    def anchor_day(self, name: str) -> int:
        if name not in self.anchors:
            raise ModelError(f"no anchor named {name!r}")
        return self.day_index(self.anchors[name])


@dataclass
class ModelSpec:
    """Static configuration of an observation model."""

    kind: str
    f_term: splines.SmoothTerm
    fw_term: splines.SmoothTerm | None
    dist: DurationDist | None
    theta: float
    N: float = 6.7e7
    ifr: float = 0.006

    def __post_init__(self):
        if self.kind not in ("basic", "incidence", "renewal"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.theta <= 0:
            raise ModelError("negative binomial theta must be positive")
        if not 0 < self.ifr < 1:
            raise ModelError("infection fatality rate must lie in (0, 1)")
        if self.N <= 0:
            raise ModelError("susceptible population must be positive")


@dataclass
class LinkState:
    """Model state at a coefficient vector."""

    beta: np.ndarray
    mu: np.ndarray
    delta: np.ndarray
    fc: np.ndarray


# ---------------------------------------------------------------------------
# negative binomial likelihood


def nb_loglik_terms(y, mu, theta):
    """Per-observation NB log likelihood and its first two mu-derivatives."""
    if np.any(mu <= 0):
        raise ModelError("mu must be positive")
    ll = (special.gammaln(y + theta) - special.gammaln(theta) - special.gammaln(y + 1.0)
          + theta * np.log(theta) + y * np.log(mu) - (y + theta) * np.log(mu + theta))
    d1 = y / mu - (y + theta) / (mu + theta)
    d2 = -y / mu**2 + (y + theta) / (mu + theta) ** 2
    return ll, d1, d2


def nb_deviance(y, mu, theta):
    """Per-observation NB deviance with derivatives.

    D_i = 2 y log(max(1, y)/mu) - 2 (y+theta) log((y+theta)/(mu+theta)),
    whose mu-derivatives are 2((y+theta)/(mu+theta) - y/mu) and
    2(y/mu^2 - (y+theta)/(mu+theta)^2).
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ModelError("mu must be positive")
    D = 2.0 * y * np.log(np.maximum(y, 1.0) / mu) \
        - 2.0 * (y + theta) * np.log((y + theta) / (mu + theta))
    d1 = 2.0 * ((y + theta) / (mu + theta) - y / mu)
    d2 = 2.0 * (y / mu**2 - (y + theta) / (mu + theta) ** 2)
    return D, d1, d2


def nb_simulate(mu, theta, rng):
    """NB deviates with mean mu and variance mu + mu^2/theta."""
    mu = np.asarray(mu, dtype=float)
    if np.isinf(theta):
        return rng.poisson(mu).astype(float)
    return rng.negative_binomial(theta, theta / (theta + mu)).astype(float)


def generation_interval(horizon: int = GEN_HORIZON) -> np.ndarray:
    """Day-lag weights g_1..g_horizon of the renewal generation interval.

    g_1 integrates the gamma density over (0, 1.5); g_j over (j-.5, j+.5).
    """
    shape = 6.5 * 0.62**2
    scale = 0.62**-2
    edges = np.arange(1, horizon + 1) + 0.5
    cdf = stats.gamma.cdf(edges, shape, scale=scale)
    return np.diff(np.concatenate([[0.0], cdf]))


# ---------------------------------------------------------------------------
# the model


class DeathModel:
    """A death-series observation model with exact coefficient derivatives."""

    def __init__(self, series: DeathSeries, spec: ModelSpec, lead_days: int,
                 build_args: dict):
        self.series = series
        self.spec = spec
        self.lead_days = lead_days
        self._build_args = build_args
        n = len(series)
        m = lead_days + n
        self.infection_days = np.arange(-lead_days, n)

        self.X_f = spec.f_term.design
        if self.X_f.shape[0] != m:
            raise ModelError("latent-curve design does not cover the infection grid")
        if spec.kind == "basic":
            self.B = None
        else:
            self.B = durations.delay_matrix(spec.dist, m).B[lead_days:, :]
        if spec.fw_term is not None:
            self.X_w = splines.evaluate_term(spec.fw_term, series.weekday.astype(float))
        else:
            self.X_w = np.zeros((n, 0))
        self.k_w = self.X_w.shape[1]

        if spec.kind == "renewal":
            self.g = generation_interval(min(GEN_HORIZON, m - 1) if m > 1 else 1)
            self.n_latent = 1 + self.X_f.shape[1]  # log c_1 plus R-spline coefs
        else:
            self.g = None
            self.n_latent = self.X_f.shape[1]
        self.n_coef = self.n_latent + self.k_w
        self.latent_slice = slice(0, self.n_latent)
        self.weekly_slice = slice(self.n_latent, self.n_coef)

        # penalties embedded in the full coefficient space
        self.penalties = []
        off = 1 if spec.kind == "renewal" else 0
        for S in spec.f_term.penalty:
            P = np.zeros((self.n_coef, self.n_coef))
            kf = self.X_f.shape[1]
            P[off:off + kf, off:off + kf] = S
            self.penalties.append(P)
        if spec.fw_term is not None:
            P = np.zeros((self.n_coef, self.n_coef))
            P[self.weekly_slice, self.weekly_slice] = spec.fw_term.penalty[0]
            self.penalties.append(P)

    # -- construction helpers -------------------------------------------------

    def rebuilt(self, **overrides) -> "DeathModel":
        """A new model with some build arguments replaced."""
        args = dict(self._build_args)
        args.update(overrides)
        return build_model(**args)

    @property
    def n_penalties(self) -> int:
        return len(self.penalties)

    def penalty_total(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        if lam.size != self.n_penalties:
            raise ModelError(f"expected {self.n_penalties} smoothing parameters")
        S = np.zeros((self.n_coef, self.n_coef))
        for lm, P in zip(lam, self.penalties):
            S += lm * P
        return S

    # -- latent fatal-incidence curve -----------------------------------------

    def _latent_exp(self, beta_f, order):
        eta = self.X_f @ beta_f
        if np.any(np.abs(eta) > ETA_CLIP):
            return None
        fc = np.exp(eta)
        if order == 0:
            return fc, None, None
        dfc = fc[:, None] * self.X_f
        contract = None
        if order == 2:
            def contract(u):
                return self.X_f.T @ ((u * fc)[:, None] * self.X_f)
        return fc, dfc, contract

    def _latent_renewal(self, psi, order):
        spec = self.spec
        m = self.infection_days.size
        p = self.n_latent
        rho, beta_r = psi[0], psi[1:]
        if abs(rho) > ETA_CLIP:
            return None
        eta_r = self.X_f @ beta_r
        if np.any(np.abs(eta_r) > ETA_CLIP):
            return None
        R = np.exp(eta_r)
        g = self.g
        W = g.size

        c = np.zeros(m)
        c[0] = np.exp(rho)
        dc = d2c = None
        if order >= 1:
            dc = np.zeros((m, p))
            dc[0, 0] = c[0]
        if order == 2:
            d2c = np.zeros((m, p, p))
            d2c[0, 0, 0] = c[0]
        cum = c[0]
        dcum = dc[0].copy() if order >= 1 else None
        d2cum = d2c[0].copy() if order == 2 else None
        clamped = False
        for t in range(1, m):
            w0 = max(t - W, 0)
            gw = g[t - 1 - np.arange(w0, t)]  # g_{t-tau} for tau = w0..t-1
            s = gw @ c[w0:t]
            A = 1.0 - cum / spec.N
            if A <= 0.0:
                A = 0.0
                clamped = True
            c[t] = A * R[t] * s
            if order >= 1:
                ds = gw @ dc[w0:t]
                dR = np.zeros(p)
                dR[1:] = R[t] * self.X_f[t]
                dA = -dcum / spec.N if A > 0 else np.zeros(p)
                dc[t] = dA * R[t] * s + A * dR * s + A * R[t] * ds
                if order == 2:
                    d2s = np.tensordot(gw, d2c[w0:t], axes=(0, 0))
                    d2R = np.zeros((p, p))
                    d2R[1:, 1:] = R[t] * np.outer(self.X_f[t], self.X_f[t])
                    d2A = -d2cum / spec.N if A > 0 else np.zeros((p, p))
                    d2c[t] = (d2A * R[t] * s
                              + np.outer(dA, dR) * s + np.outer(dR, dA) * s
                              + np.outer(dA, ds) * R[t] + np.outer(ds, dA) * R[t]
                              + A * d2R * s
                              + A * (np.outer(dR, ds) + np.outer(ds, dR))
                              + A * R[t] * d2s)
                    d2cum += d2c[t]
                dcum += dc[t]
            cum += c[t]
        if clamped:
            warnings.warn("renewal damping clamped at zero susceptibles",
                          RuntimeWarning, stacklevel=3)
        fc = spec.ifr * c
        if order == 0:
            return fc, None, None
        dfc = spec.ifr * dc
        contract = None
        if order == 2:
            def contract(u):
                return spec.ifr * np.tensordot(u, d2c, axes=(0, 0))
        return fc, dfc, contract

    def latent_curve(self, beta, order=0):
        beta = np.asarray(beta, dtype=float)
        psi = beta[self.latent_slice]
        if self.spec.kind == "renewal":
            return self._latent_renewal(psi, order)
        return self._latent_exp(psi, order)

    # -- mean structure --------------------------------------------------------

    def predict(self, beta, order=0):
        """(mu, delta, fc) plus, for order>=1, the Jacobian of mu and, for
        order 2, the weighted second-derivative contraction of mu."""
        beta = np.asarray(beta, dtype=float)
        out = self.latent_curve(beta, order)
        if out is None:
            return None
        fc, dfc, contract_fc = out
        beta_w = beta[self.weekly_slice]
        fw = self.X_w @ beta_w if self.k_w else np.zeros(len(self.series))
        if np.any(np.abs(fw) > ETA_CLIP):
            return None
        if self.B is None:
            delta = np.maximum(fc, FC_FLOOR)
        else:
            delta = np.maximum(self.B @ np.maximum(fc, FC_FLOOR), FC_FLOOR)
        mu = delta * np.exp(fw)
        if order == 0:
            return mu, delta, fc, None, None
        ratio = mu / delta
        Jd = dfc if self.B is None else self.B @ dfc
        J = np.empty((mu.size, self.n_coef))
        J[:, self.latent_slice] = ratio[:, None] * Jd
        if self.k_w:
            J[:, self.weekly_slice] = mu[:, None] * self.X_w
        if order == 1:
            return mu, delta, fc, J, None

        def contract(u):
            """sum_i u_i * d2 mu_i / dbeta dbeta."""
            H = np.zeros((self.n_coef, self.n_coef))
            ur = u * ratio
            v = ur if self.B is None else self.B.T @ ur
            H[self.latent_slice, self.latent_slice] = contract_fc(v)
            if self.k_w:
                M = Jd.T @ (ur[:, None] * self.X_w)
                H[self.latent_slice, self.weekly_slice] = M
                H[self.weekly_slice, self.latent_slice] = M.T
                H[self.weekly_slice, self.weekly_slice] = \
                    self.X_w.T @ ((u * mu)[:, None] * self.X_w)
            return H

        return mu, delta, fc, J, contract

    def link_state(self, beta) -> LinkState:
        out = self.predict(beta, order=0)
        if out is None:
            raise ModelError("coefficients numerically out of range")
        mu, delta, fc, _, _ = out
        return LinkState(beta=np.asarray(beta, dtype=float), mu=mu, delta=delta, fc=fc)

    # -- likelihood ------------------------------------------------------------

    def loglik(self, beta) -> float:
        out = self.predict(beta, order=0)
        if out is None:
            return -np.inf
        mu = out[0]
        ll, _, _ = nb_loglik_terms(self.series.y, mu, self.spec.theta)
        val = float(ll.sum())
        return val if np.isfinite(val) else -np.inf

    def loglik_grad_hess(self, beta):
        out = self.predict(beta, order=2)
        if out is None:
            return -np.inf, None, None
        mu, _, _, J, contract = out
        ll, d1, d2 = nb_loglik_terms(self.series.y, mu, self.spec.theta)
        val = float(ll.sum())
        if not np.isfinite(val):
            return -np.inf, None, None
        grad = J.T @ d1
        hess = J.T @ (d2[:, None] * J) + contract(d1)
        return val, grad, hess

    def penalized_objective(self, beta, lam):
        """Penalized log likelihood l(beta) - 0.5 beta' S_lam beta with
        gradient and Hessian; value -inf signals a line-search backtrack."""
        lam = np.asarray(lam, dtype=float)
        if np.any(lam < 0):
            raise ModelError("smoothing parameters must be nonnegative")
        S = self.penalty_total(lam)
        val, grad, hess = self.loglik_grad_hess(beta)
        if not np.isfinite(val):
            return -np.inf, None, None
        beta = np.asarray(beta, dtype=float)
        return (val - 0.5 * beta @ S @ beta, grad - S @ beta, hess - S)

    def penalized_value(self, beta, lam) -> float:
        val = self.loglik(beta)
        if not np.isfinite(val):
            return -np.inf
        S = self.penalty_total(lam)
        beta = np.asarray(beta, dtype=float)
        return val - 0.5 * beta @ S @ beta

    def deviance(self, beta) -> float:
        state = self.link_state(beta)
        D, _, _ = nb_deviance(self.series.y, state.mu, self.spec.theta)
        return float(D.sum())

    # -- curves from coefficient draws -----------------------------------------

    def fc_from_betas(self, betas: np.ndarray) -> np.ndarray:
        """Latent fatal-incidence paths, one row per coefficient vector."""
        betas = np.atleast_2d(np.asarray(betas, dtype=float))
        if self.spec.kind != "renewal":
            eta = betas[:, self.latent_slice] @ self.X_f.T
            return np.exp(np.clip(eta, -ETA_CLIP, ETA_CLIP))
        return np.vstack([self.latent_curve(b, order=0)[0] for b in betas])

    # -- starting values --------------------------------------------------------

    def initial_beta(self) -> np.ndarray:
        y = self.series.y
        n = len(self.series)
        beta = np.zeros(self.n_coef)
        if self.spec.kind == "basic":
            target = np.log(y + 0.5)
            beta[self.latent_slice] = _ridge_fit(self.X_f, target)
            return beta
        if self.spec.kind == "incidence":
            shift = int(round(self.spec.dist.mean()))
            idx = np.clip(self.infection_days + shift, 0, n - 1)
            target = np.log(y[idx] + 0.5)
            beta[self.latent_slice][:] = _ridge_fit(self.X_f, target)
            return beta
        # renewal: two-step log R profile, then scan the initial-count level
        anchor = min(self.series.anchors.values(), default=None)
        try:
            step_day = self.series.day_index(anchor) if anchor is not None else n // 3
        except ModelError:
            step_day = n // 3
        logR = np.where(self.infection_days < step_day, np.log(3.0), np.log(0.7))
        beta_r = _ridge_fit(self.X_f, logR)
        best_rho, best_ll = 0.0, -np.inf
        for rho in np.linspace(-2.0, 14.0, 17):
            cand = np.concatenate([[rho], beta_r, np.zeros(self.k_w)])
            ll = self.loglik(cand)
            if ll > best_ll:
                best_rho, best_ll = rho, ll
        beta[0] = best_rho
        beta[1:self.n_latent] = beta_r
        return beta


def _ridge_fit(X, target, eps=1e-6):
    A = X.T @ X + eps * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ target)


def build_model(series: DeathSeries, kind: str, dist: DurationDist | None = None, *,
                k: int = 30, adaptive_m: int = 1, weekly: bool = True,
                k_weekly: int = 7, theta: float = 20.0, lead_days: int = 45,
                N: float = 6.7e7, ifr: float = 0.006,
                dilate_anchor=None, dilate_weights=(3.5, 6.0, 3.5)) -> DeathModel:
    """Assemble a DeathModel on the (lead-extended) infection grid.

    ``dilate_anchor`` is a day index relative to the series start; when set,
    the latent-curve basis and penalty are built on the dilated grid while
    the death-time convolution stays on calendar days.
    """
    build_args = dict(series=series, kind=kind, dist=dist, k=k, adaptive_m=adaptive_m,
                      weekly=weekly, k_weekly=k_weekly, theta=theta,
                      lead_days=lead_days, N=N, ifr=ifr, dilate_anchor=dilate_anchor,
                      dilate_weights=dilate_weights)
    if kind == "basic":
        lead_days = 0
    elif dist is None:
        raise ModelError(f"{kind} model needs an infection-to-death distribution")
    grid = np.arange(-lead_days, len(series), dtype=float)
    if dilate_anchor is not None:
        grid = splines.dilate_grid(grid, float(dilate_anchor), dilate_weights)
    if adaptive_m > 1:
        f_term = splines.adaptive_penalty(grid, k, adaptive_m)
    else:
        f_term = splines.cubic_basis(grid, k)
    fw_term = splines.cyclic_basis(period=7.0, k=k_weekly) if weekly else None
    spec = ModelSpec(kind=kind, f_term=f_term, fw_term=fw_term, dist=dist,
                     theta=theta, N=N, ifr=ifr)
    return DeathModel(series, spec, lead_days, build_args)
