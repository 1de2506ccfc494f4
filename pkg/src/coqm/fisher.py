"""Classical, contextual and quantum Fisher information.

The contextual Fisher information (coFI) of a quasiprobability family is
``sum_ab (d w / d theta)^2 / w``; it is only defined when every entry of
``w`` is strictly positive.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from coqm.exceptions import PositivityError
from coqm.quasiprob import analytic_w

POSITIVITY_MARGIN = 1e-12
FD_STEP = 1e-6

_SIGN = np.array([1.0, -1.0])


class ParamTag(enum.Enum):
    THETA = "theta"
    PHI = "phi"

    @classmethod
    def parse(cls, value) -> "ParamTag":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class FisherReport:
    f_classical: float
    f_contextual: float
    f_quantum: float
    crb_co: float
    crb_q: float
    ratio_R: float


def _as_array(dist) -> np.ndarray:
    for attr in ("w", "p"):
        if hasattr(dist, attr):
            return np.asarray(getattr(dist, attr), dtype=float)
    return np.asarray(dist, dtype=float)


def central_derivative(family: Callable, x: float, h: float = FD_STEP) -> np.ndarray:
    return (_as_array(family(x + h)) - _as_array(family(x - h))) / (2 * h)


def classical_fi(
    family: Callable,
    theta: float,
    dtheta: float = FD_STEP,
    derivative: Callable | None = None,
) -> float:
    """Fisher information ``sum_x (d p)^2 / p`` of a distribution family.

    Outcomes with zero probability and zero derivative contribute nothing;
    a zero-probability outcome with a nonzero derivative makes the
    information diverge and ``inf`` is returned.
    """
    p = _as_array(family(theta)).ravel()
    dp = (
        _as_array(derivative(theta)).ravel()
        if derivative is not None
        else central_derivative(family, theta, dtheta).ravel()
    )
    if (p < 0).any():
        raise ValueError("classical_fi needs a non-negative distribution")
    zero = p <= 0
    if (np.abs(dp[zero]) > 1e-9).any():
        return math.inf
    return float(np.sum(dp[~zero] ** 2 / p[~zero]))


def contextual_fi(
    family: Callable,
    theta: float,
    dtheta: float = FD_STEP,
    derivative: Callable | None = None,
) -> float:
    """coFI of a quasiprobability family at ``theta``.

    Raises
    ------
    PositivityError
        If any entry of ``w(theta)`` is at or below the positivity margin.
    """
    w = _as_array(family(theta)).ravel()
    if (w <= POSITIVITY_MARGIN).any():
        raise PositivityError(f"coFI undefined: w has non-positive entries {w}")
    dw = (
        _as_array(derivative(theta)).ravel()
        if derivative is not None
        else central_derivative(family, theta, dtheta).ravel()
    )
    return float(np.sum(dw**2 / w))


# closed-form family with A = z, B = x


def w_family(tag: ParamTag, fixed: float, shrink: float = 1.0) -> Callable[[float], np.ndarray]:
    """``t -> w(a,b|t)`` with the other probe angle held at ``fixed``."""
    tag = ParamTag.parse(tag)
    if tag is ParamTag.THETA:
        return lambda t: analytic_w(t, fixed, shrink)
    return lambda t: analytic_w(fixed, t, shrink)


def w_derivatives(theta: float, phi: float, tag: ParamTag, shrink: float = 1.0):
    """First and second derivative tables of the analytic ``w``."""
    sa, sb = _SIGN[:, None], _SIGN[None, :]
    if ParamTag.parse(tag) is ParamTag.THETA:
        d1 = -sa * np.sin(theta) + sb * np.cos(theta) * np.cos(phi)
        d2 = -sa * np.cos(theta) - sb * np.sin(theta) * np.cos(phi)
    else:
        d1 = np.broadcast_to(-sb * np.sin(theta) * np.sin(phi), (2, 2))
        d2 = np.broadcast_to(-sb * np.sin(theta) * np.cos(phi), (2, 2))
    return 0.25 * shrink * np.asarray(d1), 0.25 * shrink * np.asarray(d2)


def _angles(angles) -> tuple[float, float]:
    return float(angles.theta), float(angles.phi)


def cofi(angles, tag: ParamTag = ParamTag.THETA, shrink: float = 1.0) -> float:
    """coFI of the analytic quasiprobability with closed-form derivatives."""
    theta, phi = _angles(angles)
    tag = ParamTag.parse(tag)
    x, fixed = (theta, phi) if tag is ParamTag.THETA else (phi, theta)
    d1, _ = w_derivatives(theta, phi, tag, shrink)
    return contextual_fi(w_family(tag, fixed, shrink), x, derivative=lambda _: d1)


def consecutive_fi(angles, tag: ParamTag = ParamTag.THETA, shrink: float = 1.0) -> float:
    """Classical FI of ``p(a,b|AB)`` for A = z, B = x (closed form)."""
    theta, phi = _angles(angles)
    tag = ParamTag.parse(tag)

    def table(t):
        th = t if tag is ParamTag.THETA else theta
        return np.outer(0.5 * (1 + shrink * _SIGN * np.cos(th)), [0.5, 0.5])

    def deriv(t):
        if tag is ParamTag.PHI:
            return np.zeros((2, 2))
        return np.outer(-0.5 * shrink * _SIGN * np.sin(t), [0.5, 0.5])

    x = theta if tag is ParamTag.THETA else phi
    return classical_fi(table, x, derivative=deriv)


def quantum_fi(angles, tag: ParamTag = ParamTag.THETA, lam: float = 1.0) -> float:
    """QFI of the (possibly depolarized) probe family.

    Pure probes use ``4(<d psi|d psi> - |<psi|d psi>|^2)``. Depolarized
    probes use the qubit Bloch-vector formula
    ``|dr|^2 + (r . dr)^2 / (1 - |r|^2)``, an extension beyond pure states.
    """
    if not 0.25 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0.25, 1], got {lam}")
    theta, phi = _angles(angles)
    tag = ParamTag.parse(tag)
    if lam == 1.0:
        psi = np.array([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)])
        if tag is ParamTag.THETA:
            dpsi = np.array([-np.sin(theta / 2) / 2, np.exp(1j * phi) * np.cos(theta / 2) / 2])
        else:
            dpsi = np.array([0.0, 1j * np.exp(1j * phi) * np.sin(theta / 2)])
        return float(4 * (np.vdot(dpsi, dpsi).real - abs(np.vdot(psi, dpsi)) ** 2))
    shrink = (4 * lam - 1) / 3
    r = shrink * np.array(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    )
    if tag is ParamTag.THETA:
        dr = shrink * np.array(
            [np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)]
        )
    else:
        dr = shrink * np.array([-np.sin(theta) * np.sin(phi), np.sin(theta) * np.cos(phi), 0.0])
    radial = r @ dr
    # radial term vanishes identically for this family; skip the 0/0 at |r| -> 1
    return float(dr @ dr + (radial**2 / (1 - r @ r) if radial != 0 else 0.0))


def crb(f: float, n_samples: float) -> float:
    """Cramér-Rao error ``1/sqrt(n f)``; ``inf`` when ``f == 0``."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if f < 0:
        raise ValueError("Fisher information must be non-negative")
    if f == 0:
        return math.inf
    return 1.0 / math.sqrt(n_samples * f)


def error_ratio(f_co: float, f_q: float) -> float:
    """``log10(sqrt(2) d_co / d_q) = log10(2 f_q / f_co) / 2``; negative means enhancement."""
    if f_co <= 0 or f_q <= 0:
        raise ValueError("error_ratio needs positive Fisher informations")
    return 0.5 * math.log10(2 * f_q / f_co)


def observed_information(loglik: Callable[[float], float], theta_est: float, h: float = 1e-4) -> float:
    """Negative central second difference of a log-likelihood at ``theta_est``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    return -(loglik(theta_est + h) - 2 * loglik(theta_est) + loglik(theta_est - h)) / h**2


def fisher_report(angles, tag: ParamTag, n_samples: float, lam: float = 1.0) -> FisherReport:
    shrink = (4 * lam - 1) / 3
    f_cl = consecutive_fi(angles, tag, shrink)
    f_co = cofi(angles, tag, shrink)
    f_q = quantum_fi(angles, tag, lam)
    return FisherReport(
        f_classical=f_cl,
        f_contextual=f_co,
        f_quantum=f_q,
        crb_co=crb(f_co, n_samples),
        crb_q=crb(f_q, n_samples),
        ratio_R=error_ratio(f_co, f_q),
    )
