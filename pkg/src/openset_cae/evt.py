"""Generalized Pareto tail models of reconstruction errors and the operating threshold.

The match errors are modelled on their right tail. The non-match errors are
modelled on their left tail by fitting the right tail of the negated sample.
Below the fitted tail onset each probability falls back to the empirical
fraction, so both error curves are continuous at the onset.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GRID_POINTS = 1001
MIN_ONSET_SAMPLES = 100
MIN_EXCEEDANCES = 30
ONSET_QUANTILES = np.arange(50, 96) / 100.0
ONSET_MIN_FIT_POINTS = 10
ONSET_R2 = 0.98
ONSET_FLAT_RMS = 0.05
ONSET_FALLBACK_QUANTILE = 0.90
GOLDEN_MAX_ITER = 200
GOLDEN_TOL = 1e-9

MATCH_SIDE = "right_tail_of_match"
NONMATCH_SIDE = "right_tail_of_negated_nonmatch"


class InsufficientDataError(ValueError):
    pass


class FitError(RuntimeError):
    """MLE failed; ``best`` holds the best (zeta, mu, loglik) seen."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass
class GpdFit:
    u: float
    zeta: float
    mu: float
    exceed_frac: float
    side: str = MATCH_SIDE
    n_exceed: int = 0
    loglik: float = float("nan")

    def to_dict(self) -> dict:
        return {"u": self.u, "zeta": self.zeta, "mu": self.mu, "exceed_frac": self.exceed_frac, "side": self.side}

    @classmethod
    def from_dict(cls, d: dict) -> GpdFit:
        return cls(u=float(d["u"]), zeta=float(d["zeta"]), mu=float(d["mu"]),
                   exceed_frac=float(d["exceed_frac"]), side=d.get("side", MATCH_SIDE))


@dataclass
class ThresholdModel:
    fit_match: GpdFit
    fit_nonmatch: GpdFit
    p_u: float
    tau_star: float
    search_lo: float
    search_hi: float
    # sorted error sets; kept in memory only, used below the tail onsets
    s_match: np.ndarray | None = field(default=None, repr=False)
    s_nonmatch: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "fit_match": self.fit_match.to_dict(),
            "fit_nonmatch": self.fit_nonmatch.to_dict(),
            "p_u": self.p_u,
            "tau_star": self.tau_star,
            "search_lo": self.search_lo,
            "search_hi": self.search_hi,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ThresholdModel:
        return cls(
            fit_match=GpdFit.from_dict(d["fit_match"]),
            fit_nonmatch=GpdFit.from_dict(d["fit_nonmatch"]),
            p_u=float(d["p_u"]),
            tau_star=float(d["tau_star"]),
            search_lo=float(d["search_lo"]),
            search_hi=float(d["search_hi"]),
        )


def gpd_cdf(w, zeta: float, mu: float):
    """GPD CDF ``1 - (1 + zeta*w/mu)**(-1/zeta)``, exponential when zeta == 0.

    Points beyond the upper support end (zeta < 0) saturate at 1; negative
    ``w`` maps to 0.
    """
    if not mu > 0:
        raise ValueError(f"GPD scale must be positive, got {mu}")
    w = np.asarray(w, dtype=np.float64)
    y = np.maximum(w, 0.0) / mu
    if zeta == 0.0:
        out = -np.expm1(-y)
    else:
        t = zeta * y
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(t > -1.0, -np.expm1(-np.log1p(np.maximum(t, -1.0)) / zeta), 1.0)
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def gpd_pdf(w, zeta: float, mu: float):
    w = np.asarray(w, dtype=np.float64)
    y = w / mu
    if zeta == 0.0:
        out = np.exp(-y) / mu
    else:
        t = 1.0 + zeta * y
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(t > 0, np.exp(-(1.0 / zeta + 1.0) * np.log(np.where(t > 0, t, 1.0))) / mu, 0.0)
    out = np.where(w < 0, 0.0, out)
    return out if out.ndim else float(out)


def gpd_sample(zeta: float, mu: float, size, rng: np.random.Generator) -> np.ndarray:
    """Draw from the GPD by inverting its CDF."""
    q = rng.uniform(size=size)
    if zeta == 0.0:
        return -mu * np.log1p(-q)
    return mu * np.expm1(-zeta * np.log1p(-q)) / zeta


def gpd_loglik(y: np.ndarray, zeta: float, mu: float) -> float:
    """Log-likelihood of exceedances ``y`` (already shifted by the onset)."""
    if mu <= 0:
        return -math.inf
    n = y.size
    if zeta == 0.0:
        return -n * math.log(mu) - float(y.sum()) / mu
    t = zeta * y / mu
    if np.any(t <= -1.0):
        return -math.inf
    return -n * math.log(mu) - (1.0 + 1.0 / zeta) * float(np.log1p(t).sum())


def mean_excess(samples, thresholds) -> np.ndarray:
    """Empirical mean excess ``mean(w - v | w > v)`` at each threshold ``v``."""
    w = np.sort(np.asarray(samples, dtype=np.float64))
    csum = np.concatenate([[0.0], np.cumsum(w[::-1])])
    out = []
    for v in np.atleast_1d(thresholds):
        n_above = w.size - np.searchsorted(w, v, side="right")
        out.append(csum[n_above] / n_above - v if n_above else math.nan)
    return np.asarray(out)


def _linear_enough(x: np.ndarray, e: np.ndarray) -> bool:
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, e, rcond=None)
    resid = e - A @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((e - e.mean()) ** 2).sum())
    if ss_tot > 0 and 1.0 - ss_res / ss_tot >= ONSET_R2:
        return True
    # a flat mean-excess curve (exponential tail) has R^2 ~ 0 but is still linear
    level = abs(float(e.mean()))
    return level > 0 and math.sqrt(ss_res / e.size) <= ONSET_FLAT_RMS * level


def estimate_tail_onset(samples) -> float:
    """Pick the GPD tail onset as the lowest quantile past which the mean excess is linear.

    Candidates are the 50%..95% sample quantiles in 1% steps. A candidate is
    accepted when the least-squares line through the mean excess at it and
    all higher candidates fits well. Falls back to the 90% quantile.
    """
    w = np.asarray(samples, dtype=np.float64)
    if w.size < MIN_ONSET_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_ONSET_SAMPLES} samples, got {w.size}")
    if not np.all(np.isfinite(w)) or np.ptp(w) == 0:
        raise InsufficientDataError("samples are constant or non-finite")
    cands = np.quantile(w, ONSET_QUANTILES)
    n_above = np.array([np.count_nonzero(w > c) for c in cands])
    usable = n_above >= MIN_EXCEEDANCES
    cands = cands[usable]
    e = mean_excess(w, cands)
    for i in range(len(cands) - ONSET_MIN_FIT_POINTS + 1):
        if _linear_enough(cands[i:], e[i:]):
            return float(cands[i])
    u = float(np.quantile(w, ONSET_FALLBACK_QUANTILE))
    if np.count_nonzero(w > u) < MIN_EXCEEDANCES:
        u = float(np.sort(w)[-MIN_EXCEEDANCES - 1])
    return u


def _moments_start(y: np.ndarray) -> tuple[float, float]:
    m = float(y.mean())
    s2 = float(y.var(ddof=1)) if y.size > 1 else m * m
    r = m * m / s2 if s2 > 0 else 1.0
    return 0.5 * (1.0 - r), 0.5 * m * (r + 1.0)


def _profile(theta: float, y: np.ndarray) -> tuple[float, float, float]:
    """For ``theta = zeta/mu`` return the profiled (zeta, mu, loglik)."""
    ymax = float(y.max())
    if theta * ymax <= -1.0:
        return math.nan, math.nan, -math.inf
    if abs(theta) * ymax < 1e-10:
        mu = float(y.mean())
        return 0.0, mu, gpd_loglik(y, 0.0, mu)
    zeta = float(np.log1p(theta * y).mean())
    mu = zeta / theta
    if zeta == 0.0 or mu <= 0:
        return zeta, mu, -math.inf
    return zeta, mu, gpd_loglik(y, zeta, mu)


def _golden_max(f, a: float, b: float) -> tuple[float, float, int]:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    scale = max(abs(a), abs(b), 1e-300)
    it = 0
    while it < GOLDEN_MAX_ITER and (b - a) > GOLDEN_TOL * scale:
        it += 1
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = c if fc >= fd else d
    return x, max(fc, fd), it


def fit_gpd(samples, u: float, side: str = MATCH_SIDE) -> GpdFit:
    """Maximum-likelihood GPD fit to the exceedances ``w - u`` for ``w > u``.

    The two-parameter likelihood is profiled onto ``theta = zeta/mu``, for
    which the optimal ``zeta`` has a closed form, and maximized by a grid
    scan followed by golden-section refinement. The method-of-moments
    estimate is always among the scanned points.
    """
    w = np.asarray(samples, dtype=np.float64)
    y = w[w > u] - u
    if y.size < MIN_EXCEEDANCES:
        raise InsufficientDataError(f"need at least {MIN_EXCEEDANCES} exceedances of u={u}, got {y.size}")
    ymax = float(y.max())
    ybar = float(y.mean())
    edge = -1.0 / ymax  # theta below this puts the largest exceedance outside the support
    hi = 1e3 / ybar

    z0, m0 = _moments_start(y)
    ll_start = gpd_loglik(y, z0, m0)
    # negative side clustered towards both zero and the support edge
    r = np.geomspace(1e-6, 1.0, 50)
    thetas = np.concatenate([
        edge * (1.0 - r[:-1]),
        edge * r,
        [0.0],
        np.geomspace(1e-6 / ybar, hi, 80),
    ])
    if math.isfinite(ll_start):
        thetas = np.append(thetas, z0 / m0)
    thetas = np.unique(thetas)

    profile = [_profile(float(t), y) for t in thetas]
    lls = np.array([p[2] for p in profile])
    if not np.any(np.isfinite(lls)):
        raise FitError("GPD likelihood is not finite anywhere on the scan", best=None)
    i = int(np.nanargmax(np.where(np.isfinite(lls), lls, -np.inf)))
    best = (profile[i][0], profile[i][1], float(lls[i]))
    if i == 0:
        # likelihood keeps rising into the support boundary: zeta < -1 regime, no MLE
        raise FitError("GPD likelihood unbounded at the support boundary", best=best)

    a = float(thetas[max(i - 1, 0)])
    b = float(thetas[min(i + 1, len(thetas) - 1)])
    theta, ll, _ = _golden_max(lambda t: _profile(t, y)[2], a, b)
    zeta, mu, ll = _profile(theta, y)
    if not (math.isfinite(ll) and mu > 0):
        raise FitError("golden-section refinement left the valid region", best=best)
    if ll < best[2]:
        zeta, mu, ll = best
    if zeta < -1.0:
        # the supremum sits on the support edge; an interior point here is not an MLE
        raise FitError(f"no GPD MLE for shape {zeta:.3f} < -1", best=(zeta, mu, ll))
    if math.isfinite(ll_start) and ll < ll_start:
        raise FitError("refined likelihood below the moments start", best=best)
    return GpdFit(u=float(u), zeta=float(zeta), mu=float(mu), exceed_frac=y.size / w.size,
                  side=side, n_exceed=int(y.size), loglik=float(ll))


def _need(samples, what):
    if samples is None:
        raise ValueError(f"empirical {what} errors are not available below the tail onset")
    return samples


def prob_match_error_above(tm: ThresholdModel, tau):
    """P(match error > tau): GPD tail above the onset, empirical survival below."""
    tau = np.asarray(tau, dtype=np.float64)
    f = tm.fit_match
    tail = f.exceed_frac * (1.0 - gpd_cdf(tau - f.u, f.zeta, f.mu))
    below = tau < f.u
    if np.any(below):
        s = _need(tm.s_match, "match")
        emp = (s.size - np.searchsorted(s, tau, side="right")) / s.size
        tail = np.where(below, emp, tail)
    out = np.clip(tail, 0.0, 1.0)
    return out if out.ndim else float(out)


def prob_nonmatch_error_below(tm: ThresholdModel, tau):
    """P(non-match error < tau): GPD on the negated sample, empirical CDF above its onset."""
    tau = np.asarray(tau, dtype=np.float64)
    f = tm.fit_nonmatch
    neg = -tau
    tail = f.exceed_frac * (1.0 - gpd_cdf(neg - f.u, f.zeta, f.mu))
    below = neg < f.u
    if np.any(below):
        s = _need(tm.s_nonmatch, "non-match")
        emp = np.searchsorted(s, tau, side="left") / s.size
        tail = np.where(below, emp, tail)
    out = np.clip(tail, 0.0, 1.0)
    return out if out.ndim else float(out)


def error_probability(tm: ThresholdModel, tau, p_u: float | None = None):
    """Prior-weighted open-set error: rejected knowns plus accepted unknowns."""
    p = tm.p_u if p_u is None else p_u
    return (1.0 - p) * prob_match_error_above(tm, tau) + p * prob_nonmatch_error_below(tm, tau)


def search_bounds(s_match: np.ndarray, s_nonmatch: np.ndarray) -> tuple[float, float]:
    """Overlap interval of the two sets, or the gap between them if disjoint.

    On a gap the fitted tails still decide where tau* lands; with bounded
    tails the objective is exactly zero past the match support end, and the
    smallest such grid point wins.
    """
    lo = max(float(s_match.min()), float(s_nonmatch.min()))
    hi = min(float(s_match.max()), float(s_nonmatch.max()))
    return (hi, lo) if lo > hi else (lo, hi)


def grid_argmin(grid: np.ndarray, values: np.ndarray, p_u: float) -> float:
    """Grid point of least objective; ties go to the smallest tau.

    The boundary priors are pinned to the grid ends: with p_u = 0 only
    rejected knowns cost anything, so the most accepting tau is optimal, and
    with p_u = 1 the most rejecting one.
    """
    if p_u == 0.0:
        return float(grid[-1])
    if p_u == 1.0:
        return float(grid[0])
    return float(grid[int(np.argmin(values))])


def _check_sets(s_match, s_nonmatch, p_u):
    s_m = np.sort(np.asarray(s_match, dtype=np.float64))
    s_nm = np.sort(np.asarray(s_nonmatch, dtype=np.float64))
    if s_m.size == 0 or s_nm.size == 0:
        raise ValueError("both error sets must be non-empty")
    if not 0.0 <= p_u <= 1.0:
        raise ValueError(f"p_u must be in [0, 1], got {p_u}")
    return s_m, s_nm


def compute_threshold(error_sets, p_u: float) -> ThresholdModel:
    """Fit both tails and line-search the error-minimizing threshold tau*."""
    s_m, s_nm = _check_sets(error_sets.s_match, error_sets.s_nonmatch, p_u)
    u_m = estimate_tail_onset(s_m)
    fit_m = fit_gpd(s_m, u_m, MATCH_SIDE)
    neg = -s_nm
    u_nm = estimate_tail_onset(neg)
    fit_nm = fit_gpd(neg, u_nm, NONMATCH_SIDE)

    lo, hi = search_bounds(s_m, s_nm)
    tm = ThresholdModel(fit_match=fit_m, fit_nonmatch=fit_nm, p_u=float(p_u), tau_star=math.nan,
                        search_lo=lo, search_hi=hi, s_match=s_m, s_nonmatch=s_nm)
    grid = np.linspace(lo, hi, GRID_POINTS)
    tm.tau_star = grid_argmin(grid, error_probability(tm, grid), p_u)
    return tm


def empirical_threshold(s_match, s_nonmatch, p_u: float) -> float:
    """Same grid search as ``compute_threshold`` on raw error counts, no tail model."""
    s_m, s_nm = _check_sets(s_match, s_nonmatch, p_u)
    lo, hi = search_bounds(s_m, s_nm)
    grid = np.linspace(lo, hi, GRID_POINTS)
    above = s_m.size - np.searchsorted(s_m, grid, side="right")
    below = np.searchsorted(s_nm, grid, side="left")
    return grid_argmin(grid, (1.0 - p_u) * above + p_u * below, p_u)
