"""Maximum-likelihood estimation over the operational quasiprobability.

The log-likelihood of a count table is

    l_W(t) = (1 / N_s) * sum_ab N_W(a, b) * log w(a, b | t)

with ``N_W`` the virtual counts of :func:`coqm.quasiprob.nw_counts`. The
estimate is the root of the score ``d l_W / d t`` that maximizes ``l_W``
inside the connected region around the initial guess where every entry of
``w`` stays above a small margin.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from coqm.exceptions import PositivityError
from coqm.fisher import ParamTag, w_derivatives, w_family
from coqm.quasiprob import CountTable

__all__ = [
    "CountTable",
    "EstimationResult",
    "ConcentrationResult",
    "SPECIFIC_ROTATION",
    "PATH_LENGTH",
    "log_likelihood_w",
    "score_w",
    "observed_information_w",
    "positive_interval",
    "mle_solve",
    "estimate_error",
    "to_concentration",
    "concentration_to_rotation",
]

BOUNDARY_MARGIN = 1e-9
SCAN_POINTS = 33

# sucrose, deg ml dm^-1 g^-1, and cell length in dm
SPECIFIC_ROTATION = 34.1
PATH_LENGTH = 0.1


@dataclass(frozen=True)
class EstimationResult:
    theta_hat: float | None
    f_observed: float | None
    error_hat: float | None
    failed: bool
    reason: str | None = None
    multiplicity: int = 0
    loglik: float | None = None

    @property
    def ok(self) -> bool:
        return not self.failed


@dataclass(frozen=True)
class ConcentrationResult:
    c_hat: float
    dc_hat: float | None
    alpha: float
    path_l: float
    theta0: float

    @property
    def negative(self) -> bool:
        return self.c_hat < 0


def _w_at(t, fixed, tag):
    return w_family(tag, fixed)(t)


def _derivs(t, fixed, tag):
    tag = ParamTag.parse(tag)
    theta, phi = (t, fixed) if tag is ParamTag.THETA else (fixed, t)
    return w_derivatives(theta, phi, tag)


_SA = np.array([1.0, -1.0])[None, :, None]
_SB = np.array([1.0, -1.0])[None, None, :]


def _tables(ts: np.ndarray, fixed: float, tag: ParamTag):
    """``w`` and its first derivative on a grid of parameter values, shape (K, 2, 2)."""
    ts = np.asarray(ts, dtype=float)[:, None, None]
    if tag is ParamTag.THETA:
        cth, sth, cph = np.cos(ts), np.sin(ts), math.cos(fixed)
        d1 = -_SA * sth + _SB * cth * cph
    else:
        cth, sth, cph, sph = math.cos(fixed), math.sin(fixed), np.cos(ts), np.sin(ts)
        d1 = -_SB * sth * sph + 0.0 * _SA
    w = 0.25 * (1.0 + _SA * cth + _SB * sth * cph)
    return w, 0.25 * d1


def log_likelihood_w(counts: CountTable, theta: float, fixed: float, tag=ParamTag.THETA) -> float:
    """``l_W`` at ``theta`` with the other probe angle fixed.

    Raises
    ------
    PositivityError
        If ``w(a, b | theta) <= 0`` for some entry.
    """
    w = _w_at(theta, fixed, tag)
    if (w <= 0).any():
        raise PositivityError(f"w has non-positive entries at {theta}: {w.tolist()}")
    n_w = counts.n_w
    return float(np.sum(n_w * np.log(w)) / counts.n_s)


def score_w(counts: CountTable, theta: float, fixed: float, tag=ParamTag.THETA) -> float:
    w = _w_at(theta, fixed, tag)
    d1, _ = _derivs(theta, fixed, tag)
    return float(np.sum(counts.n_w * d1 / w) / counts.n_s)


def observed_information_w(counts: CountTable, theta: float, fixed: float, tag=ParamTag.THETA) -> float:
    """Closed-form ``-d^2 l_W / d t^2``."""
    w = _w_at(theta, fixed, tag)
    if (w <= 0).any():
        raise PositivityError(f"w has non-positive entries at {theta}")
    d1, d2 = _derivs(theta, fixed, tag)
    return float(-np.sum(counts.n_w * (d2 / w - (d1 / w) ** 2)) / counts.n_s)


def positive_interval(guess: float, fixed: float, tag=ParamTag.THETA, margin: float = BOUNDARY_MARGIN):
    """Connected interval around ``guess`` where ``min w >= margin``."""
    return _positive_interval(float(guess), float(fixed), ParamTag.parse(tag), float(margin))


@functools.lru_cache(maxsize=4096)
def _positive_interval(guess: float, fixed: float, tag: ParamTag, margin: float):
    family = w_family(tag, fixed)

    def slack(t):
        return float(family(t).min()) - margin

    if slack(guess) <= 0:
        raise PositivityError(f"initial guess {guess} lies outside the positive region")
    if tag is ParamTag.THETA:
        lo_limit, hi_limit = 0.0, np.pi
    else:
        lo_limit, hi_limit = guess - np.pi, guess + np.pi
    edges = []
    for limit in (lo_limit, hi_limit):
        ts = np.linspace(guess, limit, 2049)
        vals = _tables(ts, fixed, tag)[0].min(axis=(1, 2)) - margin
        bad = np.flatnonzero(vals <= 0)
        if bad.size == 0:
            edges.append(limit)
            continue
        k = bad[0]
        edges.append(optimize.brentq(slack, ts[k - 1], ts[k], xtol=1e-15, rtol=1e-15))
    lo, hi = edges
    # brentq may land a hair outside; nudge inward until the margin holds
    step = 1e-13
    while slack(lo) < 0:
        lo += step
        step *= 2
    step = 1e-13
    while slack(hi) < 0:
        hi -= step
        step *= 2
    return lo, hi


def _failed(reason: str) -> EstimationResult:
    return EstimationResult(None, None, None, failed=True, reason=reason)


def mle_solve(
    counts: CountTable,
    search_interval: tuple[float, float] | None = None,
    fixed: float = 0.15 * np.pi,
    tag=ParamTag.THETA,
    guess: float = np.pi / 2,
) -> EstimationResult:
    """Maximize ``l_W`` over ``search_interval``.

    Failures are reported in the result rather than raised: ``negative_nw``
    when the virtual counts have a negative entry, ``boundary`` when
    ``l_W`` has no interior maximum, ``no_root`` for degenerate data.
    """
    tag = ParamTag.parse(tag)
    n_w = counts.n_w
    if (n_w < 0).any():
        return _failed("negative_nw")
    if search_interval is None:
        search_interval = positive_interval(guess, fixed, tag)
    lo, hi = search_interval

    ts = np.linspace(lo, hi, SCAN_POINTS)
    w_grid, d1_grid = _tables(ts, fixed, tag)
    scores = np.sum(n_w * d1_grid / w_grid, axis=(1, 2)) / counts.n_s
    if not np.isfinite(scores).all() or np.all(scores == 0):
        return _failed("no_root")

    def score(t):
        return score_w(counts, t, fixed, tag)

    roots = []
    for k in range(SCAN_POINTS - 1):
        if scores[k] > 0 and scores[k + 1] <= 0:
            if scores[k + 1] == 0:
                roots.append(ts[k + 1])
            else:
                roots.append(optimize.brentq(score, ts[k], ts[k + 1], xtol=1e-14, rtol=1e-15))
    if not roots:
        res = optimize.minimize_scalar(
            lambda t: -log_likelihood_w(counts, t, fixed, tag),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-12},
        )
        edge_tol = 1e-6 * (hi - lo)
        if not res.success or res.x - lo < edge_tol or hi - res.x < edge_tol:
            return _failed("boundary")
        roots = [float(res.x)]
    lls = [log_likelihood_w(counts, r, fixed, tag) for r in roots]
    best = int(np.argmax(lls))
    t_hat = float(roots[best])
    f_obs = observed_information_w(counts, t_hat, fixed, tag)
    err = estimate_error_value(f_obs, counts.n_s)
    return EstimationResult(
        theta_hat=t_hat,
        f_observed=f_obs,
        error_hat=err if math.isfinite(err) else None,
        failed=False,
        multiplicity=len(roots),
        loglik=lls[best],
    )


def estimate_error_value(f_observed: float, n_s: float) -> float:
    if f_observed is None or f_observed <= 0:
        return math.inf
    return 1.0 / math.sqrt(n_s * f_observed)


def estimate_error(result: EstimationResult, n_s: float) -> float:
    """``1/sqrt(n_s F_est)``; ``inf`` when the observed information is not positive."""
    return estimate_error_value(result.f_observed, n_s)


def to_concentration(
    theta_hat: float,
    theta0: float,
    alpha: float = SPECIFIC_ROTATION,
    path_l: float = PATH_LENGTH,
    dtheta: float | None = None,
) -> ConcentrationResult:
    """Convert a rotation estimate (radians) into a concentration in g/ml."""
    if alpha <= 0 or path_l <= 0:
        raise ValueError("alpha and path_l must be positive")
    scale = np.degrees(1.0) / (alpha * path_l)
    dc = None if dtheta is None else float(dtheta * scale)
    return ConcentrationResult(float((theta_hat - theta0) * scale), dc, alpha, path_l, theta0)


def concentration_to_rotation(c: float, alpha: float = SPECIFIC_ROTATION, path_l: float = PATH_LENGTH) -> float:
    """Polarization rotation in radians produced by concentration ``c`` g/ml."""
    return float(np.radians(alpha * path_l * c))


def expected_counts(theta: float, phi: float, n_s: float) -> CountTable:
    """Exact-frequency counts of the ideal pure-probe contexts (A = z, B = x)."""
    p_ab = np.outer(0.5 * (1 + np.array([1.0, -1.0]) * np.cos(theta)), [0.5, 0.5])
    c = np.sin(theta) * np.cos(phi)
    p_b = np.array([(1 + c) / 2, (1 - c) / 2])
    return CountTable(n_s * p_b, n_s * p_ab, n_s)
