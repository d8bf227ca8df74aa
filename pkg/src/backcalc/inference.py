"""Empirical-Bayes fitting and posterior simulation.

Coefficients maximize the penalized log likelihood by Newton iteration with
step halving. Smoothing parameters follow generalized Fellner-Schall
updates, accepted only when the Laplace approximate marginal likelihood
does not decrease; for the basic model the dispersion is estimated jointly
with the smoothing parameters by (finite-difference) Newton iteration on
the same Laplace criterion. Posterior draws come from the large-sample
Gaussian approximation or from a Metropolis-Hastings sampler alternating
independence proposals (the Gaussian approximation) with shrunken
random-walk steps, and are pooled across replicate duration distributions.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft
from scipy import linalg

from .models import DeathModel, ModelError


class FitError(RuntimeError):
    pass


@dataclass
class FitState:
    """Converged empirical-Bayes fit defining the Gaussian posterior."""

    beta: np.ndarray
    H: np.ndarray            # negative log-likelihood Hessian at beta
    S_lambda: np.ndarray
    lam: np.ndarray
    theta: float
    lml: float               # Laplace marginal likelihood at (lam, theta)
    converged: bool
    iterations: int
    trace: list = field(default_factory=list, repr=False)

    @property
    def precision(self) -> np.ndarray:
        return self.H + self.S_lambda


@dataclass
class PosteriorEnsemble:
    """Pooled coefficient draws (optionally across duration replicates)."""

    draws: np.ndarray        # (n_samples, p)
    tags: np.ndarray         # duration-draw index per sample
    ess: np.ndarray          # (n_chains, p) per-coefficient effective sizes
    model: DeathModel | None = None
    fits: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.draws)):
            raise FitError("posterior draws contain non-finite values")

    @property
    def min_ess(self) -> float:
        return float(np.min(self.ess))

    def fc_paths(self, model: DeathModel | None = None) -> np.ndarray:
        model = model or self.model
        return model.fc_from_betas(self.draws)


# ---------------------------------------------------------------------------
# penalized Newton


def _chol_with_ridge(A):
    scale = max(np.trace(A) / A.shape[0], 1e-30)
    ridge = 0.0
    for _ in range(12):
        try:
            L = linalg.cholesky(A + ridge * np.eye(A.shape[0]), lower=True)
            return L, ridge
        except linalg.LinAlgError:
            ridge = max(2 * ridge, 1e-10 * scale) * 10
    raise FitError("Hessian could not be made positive definite")


def maximize_penalized(model, lam, beta0, tol=1e-6, max_iter=200):
    """Newton maximization of the penalized log likelihood."""
    beta = np.asarray(beta0, dtype=float).copy()
    val, grad, hess = model.penalized_objective(beta, lam)
    if not np.isfinite(val):
        raise FitError("starting coefficients give non-finite objective")
    for it in range(max_iter):
        gscale = tol * max(1.0, abs(val))
        if np.max(np.abs(grad)) < gscale:
            return beta, val, True, it
        L, _ = _chol_with_ridge(-hess)
        step = linalg.cho_solve((L, True), grad)
        alpha = 1.0
        for _ in range(40):
            cand = beta + alpha * step
            v2, g2, h2 = model.penalized_objective(cand, lam)
            if np.isfinite(v2) and v2 >= val - 1e-12 * max(1.0, abs(val)):
                break
            alpha *= 0.5
        else:
            return beta, val, False, it
        if v2 < val and alpha < 1e-9:
            return beta, val, False, it
        beta, val, grad, hess = cand, v2, g2, h2
    converged = np.max(np.abs(grad)) < 10 * tol * max(1.0, abs(val))
    return beta, val, converged, max_iter


def _log_pdet(S, rank):
    w = linalg.eigvalsh(S)
    w = np.sort(w)[::-1][:rank]
    w = np.maximum(w, 1e-300)
    return float(np.sum(np.log(w)))


def _penalty_rank(model):
    total = sum(model.penalties)
    w = linalg.eigvalsh(total)
    return int(np.sum(w > 1e-10 * max(w.max(), 1e-300)))


def laml_value(model, lam, beta_hat, rank=None) -> float:
    """Laplace approximation to the log marginal likelihood at (lam, theta)."""
    lam = np.asarray(lam, dtype=float)
    S = model.penalty_total(lam)
    ll, _, hess = model.loglik_grad_hess(beta_hat)
    H = -hess
    rank = _penalty_rank(model) if rank is None else rank
    L, _ = _chol_with_ridge(H + S)
    logdet_post = 2.0 * float(np.sum(np.log(np.diag(L))))
    p = model.n_coef
    return (ll - 0.5 * beta_hat @ S @ beta_hat
            + 0.5 * _log_pdet(S, rank) - 0.5 * logdet_post
            + 0.5 * (p - rank) * np.log(2 * np.pi))


def _initial_lambda(model, beta0):
    _, _, hess = model.loglik_grad_hess(beta0)
    H = -hess
    lam0 = []
    for P in model.penalties:
        mask = np.diag(P) > 0
        num = np.abs(np.diag(H)[mask]).sum()
        lam0.append(max(num, 1e-8) / max(np.trace(P), 1e-8))
    return np.asarray(lam0)


def _fs_update(model, lam, beta, H):
    """Generalized Fellner-Schall multiplicative update of each lambda."""
    S = model.penalty_total(lam)
    w, V = linalg.eigh(S)
    rank = _penalty_rank(model)
    order = np.argsort(w)[::-1][:rank]
    Vr = V[:, order]
    wr = np.maximum(w[order], 1e-300)
    L, _ = _chol_with_ridge(H + S)
    new = np.empty_like(lam)
    for m, P in enumerate(model.penalties):
        tr_pinv = float(np.sum((Vr.T @ P @ Vr).diagonal() / wr))
        tr_post = float(np.trace(linalg.cho_solve((L, True), P)))
        num = tr_pinv - tr_post
        den = float(beta @ P @ beta)
        if den <= 1e-14 * max(1.0, float(beta @ beta)) * max(np.trace(P), 1e-30):
            factor = np.exp(4.0)  # curve already in the null space: smooth harder
        else:
            factor = max(num, 1e-12) / den
        factor = float(np.clip(factor, np.exp(-4.0), np.exp(4.0)))
        new[m] = np.clip(lam[m] * factor, 1e-8, 1e11)
    return new


def fit_empirical_bayes(model, *, lam0=None, theta=None, estimate_theta=None,
                        tol=1e-6, lam_tol=1e-4, max_outer=100) -> FitState:
    """Empirical-Bayes fit: beta by penalized Newton, smoothing parameters
    (and, for the basic model, theta) at a Laplace marginal likelihood
    stationary point.

    Accepted smoothing updates never decrease the marginal likelihood
    (enforced by step halving toward the current value).
    """
    if estimate_theta is None:
        estimate_theta = model.spec.kind == "basic"
    if theta is not None:
        model.spec.theta = float(theta)
    beta = model.initial_beta()
    lam = np.asarray(lam0, dtype=float) if lam0 is not None else _initial_lambda(model, beta)
    rank = _penalty_rank(model)
    trace = []

    if estimate_theta:
        return _fit_nested_newton(model, lam, beta, rank, tol=tol,
                                  step_tol=lam_tol, max_outer=max_outer)

    beta, val, conv, _ = maximize_penalized(model, lam, beta, tol=tol)
    current = laml_value(model, lam, beta, rank)
    iterations = 0
    for it in range(max_outer):
        iterations = it + 1
        _, _, hess = model.loglik_grad_hess(beta)
        proposal = _fs_update(model, lam, beta, -hess)
        dlog = np.log(proposal) - np.log(lam)
        accepted = False
        for _ in range(20):
            if np.max(np.abs(dlog)) < lam_tol:
                break
            cand = np.exp(np.log(lam) + dlog)
            beta_c, _, conv_c, _ = maximize_penalized(model, cand, beta, tol=tol)
            cand_val = laml_value(model, cand, beta_c, rank)
            if np.isfinite(cand_val) and cand_val >= current - 1e-9 * max(1.0, abs(current)):
                lam, beta, current, conv = cand, beta_c, cand_val, conv_c
                accepted = True
                break
            dlog *= 0.5
        trace.append((lam.copy(), current))
        if not accepted or np.max(np.abs(dlog)) < lam_tol:
            break
    return _finalize_fit(model, lam, beta, current, conv, iterations, trace, tol)


def _fit_nested_newton(model, lam, beta, rank, tol, step_tol, max_outer):
    """Joint (log lambda, log theta) Newton on the Laplace criterion with
    finite-difference derivatives; the inner Newton supplies beta-hat."""
    state = {"beta": beta.copy()}

    def crit(v):
        model.spec.theta = float(np.exp(v[-1]))
        lam_v = np.exp(v[:-1])
        b, _, _, _ = maximize_penalized(model, lam_v, state["beta"], tol=1e-8)
        state["beta"] = b
        return laml_value(model, lam_v, b, rank)

    v = np.concatenate([np.log(lam), [np.log(model.spec.theta)]])
    cur = crit(v)
    trace = []
    h = 1e-3
    iterations = 0
    for it in range(max_outer):
        iterations = it + 1
        q = v.size
        g = np.zeros(q)
        Hm = np.zeros((q, q))
        base = cur
        evals = {}

        def crit_at(dv):
            key = tuple(np.round(dv / h).astype(int))
            if key not in evals:
                evals[key] = crit(v + dv)
            return evals[key]

        for i in range(q):
            e = np.zeros(q)
            e[i] = h
            fp, fm = crit_at(e), crit_at(-e)
            g[i] = (fp - fm) / (2 * h)
            Hm[i, i] = (fp - 2 * base + fm) / h**2
        for i in range(q):
            for j in range(i + 1, q):
                ei, ej = np.zeros(q), np.zeros(q)
                ei[i] = h
                ej[j] = h
                fpp = crit_at(ei + ej)
                fpm = crit_at(ei - ej)
                fmp = crit_at(-ei + ej)
                fmm = crit_at(-ei - ej)
                Hm[i, j] = Hm[j, i] = (fpp - fpm - fmp + fmm) / (4 * h**2)
        # Newton step on the concave target; fix curvature sign if needed
        w, V = linalg.eigh(Hm)
        w = np.minimum(w, -1e-4)
        step = V @ ((V.T @ g) / (-w))
        step = np.clip(step, -3.0, 3.0)
        if np.max(np.abs(step)) < step_tol:
            break
        alpha, accepted = 1.0, False
        for _ in range(15):
            cand_val = crit(v + alpha * step)
            if np.isfinite(cand_val) and cand_val >= cur - 1e-9 * max(1.0, abs(cur)):
                v = v + alpha * step
                cur = cand_val
                accepted = True
                break
            alpha *= 0.5
        trace.append((np.exp(v).copy(), cur))
        if not accepted or alpha * np.max(np.abs(step)) < step_tol:
            break
    lam = np.exp(v[:-1])
    model.spec.theta = float(np.exp(v[-1]))
    beta, _, conv, _ = maximize_penalized(model, lam, state["beta"], tol=tol)
    cur = laml_value(model, lam, beta, rank)
    return _finalize_fit(model, lam, beta, cur, conv, iterations, trace, tol)


def _finalize_fit(model, lam, beta, lml, converged, iterations, trace, tol):
    if not converged:
        raise FitError(f"empirical-Bayes fit failed to converge; trace: {trace[-5:]}")
    _, _, hess = model.loglik_grad_hess(beta)
    H = -hess
    S = model.penalty_total(lam)
    try:
        linalg.cholesky(H + S, lower=True)
    except linalg.LinAlgError:
        jitter = 1e-8 * np.trace(H + S) / H.shape[0]
        warnings.warn("posterior precision needed a jitter to factor",
                      RuntimeWarning, stacklevel=2)
        H = H + jitter * np.eye(H.shape[0])
        linalg.cholesky(H + S, lower=True)
    return FitState(beta=beta, H=H, S_lambda=S, lam=np.asarray(lam, float),
                    theta=model.spec.theta, lml=float(lml), converged=bool(converged),
                    iterations=iterations, trace=trace)


# ---------------------------------------------------------------------------
# posterior simulation


@dataclass
class GaussianPosterior:
    """Sampler over N(beta_hat, (H + S_lambda)^-1)."""

    mean: np.ndarray
    prec_chol: np.ndarray  # lower Cholesky factor of the precision

    @classmethod
    def from_fit(cls, fit: FitState) -> "GaussianPosterior":
        try:
            L = linalg.cholesky(fit.precision, lower=True)
        except linalg.LinAlgError as exc:
            raise FitError("posterior precision is not positive definite") from exc
        return cls(mean=fit.beta.copy(), prec_chol=L)

    def sample(self, n: int, rng) -> np.ndarray:
        z = rng.standard_normal((n, self.mean.size))
        return self.mean + linalg.solve_triangular(self.prec_chol.T, z.T, lower=False).T

    def logpdf_unnormalized(self, beta) -> float:
        w = self.prec_chol.T @ (np.asarray(beta, float) - self.mean)
        return -0.5 * float(w @ w)

    def cov(self) -> np.ndarray:
        inv = linalg.solve_triangular(self.prec_chol, np.eye(self.mean.size), lower=True)
        return inv.T @ inv


def posterior_gaussian(fit: FitState) -> GaussianPosterior:
    return GaussianPosterior.from_fit(fit)


def ess_imse(x: np.ndarray) -> float:
    """Effective sample size by the initial monotone sequence estimator:
    pair autocovariances Gamma_m = gamma_{2m} + gamma_{2m+1}, truncate at the
    first nonpositive pair, enforce a non-increasing sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    nf = sp_fft.next_fast_len(2 * n)
    f = np.fft.rfft(x, nf)
    acov = np.fft.irfft(f * np.conj(f), nf)[:n].real / n
    g0 = acov[0]
    if g0 <= 0:
        return float(n)
    sigma2 = -g0
    prev = np.inf
    for m in range(0, n - 1, 2):
        G = acov[m] + acov[m + 1]
        if G <= 0:
            break
        G = min(G, prev)
        prev = G
        sigma2 += 2 * G
    return float(n * g0 / max(sigma2, 1e-300))


def _run_mh(logpost, start, proposal: GaussianPosterior, n_iter, rng, *,
            shrink=0.4, adapt_until=0, adapt_target=0.23):
    """Alternating independence / random-walk Metropolis-Hastings chain."""
    p = start.size
    chain = np.empty((n_iter, p))
    beta = np.asarray(start, dtype=float).copy()
    lp = logpost(beta)
    lq = proposal.logpdf_unnormalized(beta)
    log_s = np.log(shrink)
    acc = {"indep": [0, 0], "rw": [0, 0]}
    n_rw = 0
    for i in range(n_iter):
        z = rng.standard_normal(p)
        step = linalg.solve_triangular(proposal.prec_chol.T, z, lower=False)
        if i % 2 == 0:
            cand = proposal.mean + step
            lq_cand = -0.5 * float(z @ z)
            lp_cand = logpost(cand)
            log_alpha = (lp_cand - lp) - (lq_cand - lq)
            kind = "indep"
        else:
            cand = beta + np.exp(log_s) * step
            lp_cand = logpost(cand)
            log_alpha = lp_cand - lp
            kind = "rw"
        acc[kind][1] += 1
        accepted = np.log(rng.random()) < log_alpha
        if accepted:
            beta, lp = cand, lp_cand
            lq = proposal.logpdf_unnormalized(beta)
            acc[kind][0] += 1
        if kind == "rw" and i < adapt_until:
            n_rw += 1
            gain = 4.0 / (20.0 + n_rw) ** 0.7
            log_s += gain * ((1.0 if accepted else 0.0) - adapt_target)
            log_s = np.clip(log_s, np.log(1e-3), np.log(10.0))
        chain[i] = beta
    rates = {k: (v[0] / v[1] if v[1] else np.nan) for k, v in acc.items()}
    return chain, rates, float(np.exp(log_s))


def mh_sample(fit: FitState, model: DeathModel, n_target_ess: float = 5000, *,
              rng=None, n_burn=2000, block=5000, max_blocks=40,
              shrink=0.4) -> PosteriorEnsemble:
    """Metropolis-Hastings sample of the exact penalized posterior.

    Alternates independence proposals from the Gaussian approximation with
    random-walk steps whose covariance is the posterior approximation shrunk
    by ``shrink`` (adapted toward 23% acceptance during burn-in). Extends
    the chain in blocks until every coefficient reaches the target effective
    sample size, or warns at the iteration cap.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    proposal = GaussianPosterior.from_fit(fit)
    S = fit.S_lambda

    def logpost(beta):
        ll = model.loglik(beta)
        if not np.isfinite(ll):
            return -np.inf
        return ll - 0.5 * float(beta @ S @ beta)

    burn, rates, s_adapted = _run_mh(logpost, fit.beta, proposal, n_burn, rng,
                                     shrink=shrink, adapt_until=n_burn)
    if rates["rw"] < 0.01:
        raise FitError(
            f"random-walk acceptance {rates['rw']:.3%} below 1% after adaptation; "
            "try a smaller shrink factor")
    chains = []
    total_rates = []
    for _ in range(max_blocks):
        part, rates, _ = _run_mh(logpost, burn[-1] if not chains else chains[-1][-1],
                                 proposal, block, rng, shrink=s_adapted, adapt_until=0)
        chains.append(part)
        total_rates.append(rates)
        draws = np.vstack(chains)
        ess = np.array([ess_imse(draws[:, j]) for j in range(draws.shape[1])])
        if ess.min() >= n_target_ess:
            break
    else:
        warnings.warn(f"minimum ESS {ess.min():.0f} below target {n_target_ess} "
                      f"after {max_blocks} blocks", RuntimeWarning, stacklevel=2)
    if min(r["indep"] for r in total_rates) < 0.01 and min(
            r["rw"] for r in total_rates) < 0.01:
        raise FitError("both proposal types below 1% acceptance")
    return PosteriorEnsemble(draws=draws, tags=np.zeros(draws.shape[0], dtype=int),
                             ess=ess[None, :], model=model, fits=[fit])


# ---------------------------------------------------------------------------
# pooling over the duration ensemble


def pool_over_durations(model_template, ensemble, *, n_keep=500, sampler="mh",
                        n_target_ess=2000, seed=0, mh_opts=None) -> PosteriorEnsemble:
    """One empirical-Bayes fit and posterior sample per duration draw, pooled
    with equal sample counts.

    ``model_template`` is a callable mapping a DurationDist to a DeathModel.
    Individual draw failures are skipped with a warning; more than 10%
    failures is an error.
    """
    seeds = np.random.SeedSequence(seed).spawn(len(ensemble.draws))
    all_draws, all_tags, all_ess, fits = [], [], [], []
    failures = 0
    mh_opts = dict(mh_opts or {})
    for r, dist in enumerate(ensemble.draws):
        rng = np.random.default_rng(seeds[r])
        try:
            model = model_template(dist)
            fit = fit_empirical_bayes(model)
            if sampler == "gaussian":
                draws = posterior_gaussian(fit).sample(n_keep, rng)
                ess = np.full(model.n_coef, float(n_keep))
            else:
                res = mh_sample(fit, model, n_target_ess=n_target_ess, rng=rng,
                                **mh_opts)
                idx = np.linspace(0, res.draws.shape[0] - 1, n_keep).round().astype(int)
                draws = res.draws[idx]
                ess = res.ess[0]
        except (FitError, np.linalg.LinAlgError) as exc:
            failures += 1
            warnings.warn(f"duration draw {r} failed: {exc}", RuntimeWarning,
                          stacklevel=2)
            continue
        all_draws.append(draws)
        all_tags.append(np.full(draws.shape[0], r, dtype=int))
        all_ess.append(ess)
        fits.append(fit)
    if failures > 0.1 * len(ensemble.draws):
        raise FitError(f"{failures}/{len(ensemble.draws)} duration-draw fits failed")
    mean_model = model_template(ensemble.mean_dist)
    return PosteriorEnsemble(draws=np.vstack(all_draws), tags=np.concatenate(all_tags),
                             ess=np.vstack(all_ess), model=mean_model, fits=fits)


def band_summary(paths: np.ndarray, quantiles=(0.025, 0.16, 0.5, 0.84, 0.975)):
    """Pointwise quantile bands over sample paths."""
    qs = np.quantile(paths, quantiles, axis=0)
    return {f"q{100 * q:g}": qs[i] for i, q in enumerate(quantiles)}


def peak_day_distribution(fc_paths: np.ndarray, days: np.ndarray):
    """Posterior probability of each day being the fatal-incidence peak.

    Ties break to the earliest day.
    """
    fc_paths = np.atleast_2d(fc_paths)
    idx = np.argmax(fc_paths, axis=1)
    days = np.asarray(days)
    uniq, counts = np.unique(idx, return_counts=True)
    return days[uniq], counts / fc_paths.shape[0]
