"""Operational quasiprobability built from two measurement contexts.

Tables are indexed ``[a, b]`` (row-major, ``a`` the outcome of A). The
quasiprobability combines the consecutive-context table ``p(a,b|AB)``
with the single-context distribution ``p(b|B)``::

    w(a, b) = p(a, b|AB) + (p(b|B) - p(b|AB)) / 2
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from coqm.exceptions import NegativeCountFailure

_ATOL = 1e-12

# uniform random ensemble R, p(a|R)
RANDOM_ENSEMBLE = np.array([0.5, 0.5])
RANDOM_ENSEMBLE.setflags(write=False)


def _readonly(arr, shape) -> np.ndarray:
    out = np.array(arr, dtype=float)
    if out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


def _check_normalized(p: np.ndarray, what: str) -> None:
    # plain floats: cheaper than ufunc reductions on 2- and 4-entry tables
    values = p.ravel().tolist()
    if min(values) < -_ATOL:
        raise ValueError(f"{what} has negative entries: {p}")
    total = sum(values)
    if abs(total - 1.0) > _ATOL:
        raise ValueError(f"{what} is not normalized (sum={total!r})")


@dataclass(frozen=True)
class OutcomeDist:
    """``p(b|B)`` over ``b in {0, 1}``."""

    p: np.ndarray

    def __post_init__(self):
        p = _readonly(self.p, (2,))
        _check_normalized(p, "OutcomeDist")
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class JointDist:
    """``p(a,b|AB)`` as a 2x2 table."""

    p: np.ndarray

    def __post_init__(self):
        p = _readonly(self.p, (2, 2))
        _check_normalized(p, "JointDist")
        object.__setattr__(self, "p", p)

    @property
    def marginal_b(self) -> np.ndarray:
        return self.p.sum(axis=0)

    @property
    def marginal_a(self) -> np.ndarray:
        return self.p.sum(axis=1)


@dataclass(frozen=True)
class QuasiProb:
    """Signed 2x2 table summing to one; entries may be negative."""

    w: np.ndarray
    provenance: Any = None

    def __post_init__(self):
        w = _readonly(self.w, (2, 2))
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"quasiprobability must sum to 1 (sum={w.sum()!r})")
        object.__setattr__(self, "w", w)

    @property
    def min_entry(self) -> float:
        return float(self.w.min())

    @property
    def is_positive(self) -> bool:
        return bool((self.w > 0).all())


@dataclass(frozen=True)
class MixingWeights:
    """Ensemble-selection probabilities p(W), p(B), p(AB) and p(a|R)."""

    pW: float = 0.5
    pB: float = 0.5
    pAB: float = 0.5
    pR: float = 0.5

    def __post_init__(self):
        for name in ("pW", "pB", "pAB", "pR"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class CountTable:
    """Outcome counts of the B-only ensemble and the consecutive AB ensemble.

    Counts are normally integers; real-valued expected counts are accepted
    so that exact-frequency tables can be fed through the same code path.
    """

    n_b: np.ndarray
    n_ab: np.ndarray
    n_s: float

    def __post_init__(self):
        n_b = _readonly(self.n_b, (2,))
        n_ab = _readonly(self.n_ab, (2, 2))
        if (n_b < 0).any() or (n_ab < 0).any():
            raise ValueError("counts must be non-negative")
        tol = 1e-9 * max(self.n_s, 1)
        if abs(n_b.sum() - self.n_s) > tol or abs(n_ab.sum() - self.n_s) > tol:
            raise ValueError(
                f"both ensembles must hold n_s={self.n_s} samples "
                f"(got {n_b.sum()} and {n_ab.sum()})"
            )
        object.__setattr__(self, "n_b", n_b)
        object.__setattr__(self, "n_ab", n_ab)

    @classmethod
    def expected(cls, single: OutcomeDist, joint: JointDist, n_s: float) -> "CountTable":
        """Exact-frequency counts ``n_s * p`` (real-valued)."""
        return cls(n_s * single.p, n_s * joint.p, n_s)

    @property
    def n_w(self) -> np.ndarray:
        """Virtual-ensemble counts ``N_AB(a,b) + (N_B(b) - N_AB(b)) / 2``."""
        return nw_counts(self.n_b, self.n_ab)


def nw_counts(n_b: np.ndarray, n_ab: np.ndarray) -> np.ndarray:
    """Virtual counts; broadcasts over leading batch axes (n_b: (..., 2), n_ab: (..., 2, 2))."""
    n_b = np.asarray(n_b, dtype=float)
    n_ab = np.asarray(n_ab, dtype=float)
    marginal = n_ab.sum(axis=-2)
    return n_ab + 0.5 * (n_b - marginal)[..., None, :]


def build_oq(single: OutcomeDist, joint: JointDist) -> QuasiProb:
    w = joint.p + 0.5 * (single.p - joint.marginal_b)[None, :]
    return QuasiProb(w, provenance=(single, joint))


def analytic_oq(angles) -> QuasiProb:
    """Closed form for a pure probe with A = z and B = x.

    ``w(a,b) = (1 + (-1)^a cos(theta) + (-1)^b sin(theta) cos(phi)) / 4``
    """
    return QuasiProb(analytic_w(angles.theta, angles.phi), provenance=angles)


_SIGN = np.array([1.0, -1.0])


def analytic_w(theta: float, phi: float, shrink: float = 1.0) -> np.ndarray:
    """Raw analytic table; ``shrink`` scales the Bloch vector (depolarized probes)."""
    return 0.25 * (
        1.0
        + shrink * _SIGN[:, None] * np.cos(theta)
        + shrink * _SIGN[None, :] * np.sin(theta) * np.cos(phi)
    )


def build_oq_from_counts(counts: CountTable) -> QuasiProb:
    """Empirical quasiprobability ``N_W / N_s``.

    Raises
    ------
    NegativeCountFailure
        If any virtual count ``N_W(a, b)`` is negative; such a trial must be
        excluded and counted as a failure.
    """
    n_w = counts.n_w
    if (n_w < 0).any():
        raise NegativeCountFailure(n_w)
    return QuasiProb(n_w / counts.n_s, provenance=counts)


def negativity(w: QuasiProb) -> float:
    arr = w.w if isinstance(w, QuasiProb) else np.asarray(w, dtype=float)
    return float(np.sum(np.abs(arr) - arr) / 2)


def nsit_violation(single: OutcomeDist, joint: JointDist) -> float:
    """Largest gap between ``p(b|B)`` and the AB marginal ``p(b|AB)``."""
    return float(np.max(np.abs(single.p - joint.marginal_b)))


def forward_mix(dists):
    """Convex mixture of ``[(dist, weight), ...]``; weights must sum to one."""
    dists = list(dists)
    if not dists:
        raise ValueError("nothing to mix")
    weights = np.array([w for _, w in dists], dtype=float)
    if (weights < 0).any() or abs(weights.sum() - 1.0) > _ATOL:
        raise ValueError(f"mixing weights must be non-negative and sum to 1: {weights}")
    arrays = [np.asarray(getattr(d, "p", d), dtype=float) for d, _ in dists]
    mixed = sum(w * a for w, a in zip(weights, arrays))
    first = dists[0][0]
    if isinstance(first, (OutcomeDist, JointDist)):
        return type(first)(mixed)
    return mixed


def backward_mix(pC, pB, pA_weight: float, pB_weight: float) -> np.ndarray:
    """Recover ensemble A from the mixture C and component B.

    ``p(x|A) = p(x|C) / p(A) - p(x|B) p(B) / p(A)``. The result is a signed
    table that sums to one when ``pA_weight + pB_weight == 1``.
    """
    if pA_weight <= 0:
        raise ValueError("pA_weight must be positive")
    pC = np.asarray(getattr(pC, "p", pC), dtype=float)
    pB = np.asarray(getattr(pB, "p", pB), dtype=float)
    return pC / pA_weight - pB * pB_weight / pA_weight


def oq_by_ensemble_mixing(
    single: OutcomeDist, joint: JointDist, weights: MixingWeights = MixingWeights()
) -> QuasiProb:
    """Quasiprobability assembled through the forward/backward mixing chain.

    ``E+ = p(a|R) p(b|B) p(B) + p(a,b|AB) p(AB)`` is formed by forward mixing
    and ``w`` follows by backward mixing E+ against ``p(a|R) p(b|AB)``.
    """
    r = np.array([weights.pR, 1.0 - weights.pR])
    rb = np.outer(r, single.p)
    e_plus = weights.pB * rb + weights.pAB * joint.p
    r_marginal = np.outer(r, joint.marginal_b)
    w = backward_mix(e_plus, r_marginal, weights.pW, weights.pB)
    return QuasiProb(w, provenance=("ensemble-mixing", weights))
