"""Single-qubit states and two-outcome measurements.

States are Bloch vectors, measurements are binary POVMs described by an
axis, a sharpness ``mu`` and a bias ``x``::

    m(a) = ((1 + (-1)**a * x) I + (-1)**a * mu * axis . sigma) / 2

Outcome ``0`` is the ``+1`` eigenvalue along the axis (H for the z axis,
D for the x axis). Angles are in radians throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from coqm.quasiprob import JointDist, OutcomeDist

_ATOL = 1e-12

PAULI = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)
IDENTITY = np.eye(2, dtype=complex)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


def _canonical_angles(theta: float, phi: float) -> tuple[float, float]:
    # fold theta into [0, pi]; reflections through a pole shift phi by pi
    theta = float(np.mod(theta, 2 * np.pi))
    if theta > np.pi:
        theta = 2 * np.pi - theta
        phi = phi + np.pi
    return theta, float(np.mod(phi, 2 * np.pi))


@dataclass(frozen=True)
class ProbeAngles:
    """Polar and azimuthal angle of the probe ``cos(t/2)|H> + e^{i p} sin(t/2)|V>``."""

    theta: float
    phi: float = 0.0

    def __post_init__(self):
        if not (-_ATOL <= self.theta <= np.pi + _ATOL):
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")
        object.__setattr__(self, "theta", min(max(float(self.theta), 0.0), np.pi))
        object.__setattr__(self, "phi", float(self.phi) % (2 * np.pi))

    @classmethod
    def canonical(cls, theta: float, phi: float) -> "ProbeAngles":
        """Build from arbitrary real angles, folding them into canonical ranges."""
        return cls(*_canonical_angles(theta, phi))


@dataclass(frozen=True)
class BlochState:
    r: np.ndarray

    def __post_init__(self):
        r = _frozen(self.r)
        if r.shape != (3,):
            raise ValueError("Bloch vector must have three components")
        norm = math.sqrt(float(r @ r))
        if norm > 1 + _ATOL:
            raise ValueError(f"|r| = {norm} exceeds 1")
        object.__setattr__(self, "r", r)

    @property
    def purity_radius(self) -> float:
        return float(np.linalg.norm(self.r))

    @property
    def is_pure(self) -> bool:
        return abs(self.purity_radius - 1.0) <= _ATOL

    def density_matrix(self) -> np.ndarray:
        return 0.5 * (IDENTITY + sum(c * s for c, s in zip(self.r, PAULI)))


@dataclass(frozen=True)
class BinaryMeasurement:
    """Two-outcome POVM with axis, sharpness ``mu`` and bias ``x``.

    Valid whenever ``|x| <= 1 - mu``; ``mu=1, x=0`` is a projective pair.
    """

    axis: np.ndarray
    mu: float = 1.0
    x: float = 0.0

    def __post_init__(self):
        axis = _frozen(self.axis)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > _ATOL:
            raise ValueError("measurement axis must be a unit 3-vector")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"sharpness mu must lie in [0, 1], got {self.mu}")
        if abs(self.x) > 1.0 - self.mu + _ATOL:
            raise ValueError(f"|x| <= 1 - mu violated: x={self.x}, mu={self.mu}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "x", float(self.x))

    @classmethod
    def from_angles(cls, theta: float, phi: float, mu: float = 1.0, x: float = 0.0):
        return cls(spherical_unit(theta, phi), mu, x)

    @property
    def is_sharp(self) -> bool:
        return self.mu == 1.0 and self.x == 0.0

    @property
    def vector(self) -> np.ndarray:
        return self.mu * self.axis

    def effect(self, outcome: int) -> np.ndarray:
        sign = 1 - 2 * outcome
        n_sigma = sum(c * s for c, s in zip(self.axis, PAULI))
        return 0.5 * ((1 + sign * self.x) * IDENTITY + sign * self.mu * n_sigma)

    def kraus(self, outcome: int) -> np.ndarray:
        """Square root of the effect (generalized Lüders instrument)."""
        sign = 1 - 2 * outcome
        lam_par = 0.5 * (1 + sign * self.x + self.mu)
        lam_anti = 0.5 * (1 + sign * self.x - self.mu)
        s_par, s_anti = np.sqrt(max(lam_par, 0.0)), np.sqrt(max(lam_anti, 0.0))
        n_sigma = sum(c * s for c, s in zip(self.axis, PAULI))
        # eigenvalue lam_par belongs to the eigenvector along sign*axis
        return 0.5 * (s_par + s_anti) * IDENTITY + sign * 0.5 * (s_par - s_anti) * n_sigma


@dataclass(frozen=True)
class WavePlateStack:
    """QWP1(q1) -> HWP(p) -> QWP2(q2) acting on |H>; fast-axis angles in radians."""

    q1: float
    p: float
    q2: float = field(default=np.pi / 4)


def spherical_unit(theta: float, phi: float) -> np.ndarray:
    return np.array(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    )


MEAS_A = BinaryMeasurement(np.array([0.0, 0.0, 1.0]))
MEAS_B = BinaryMeasurement(np.array([1.0, 0.0, 0.0]))


def bloch_from_angles(angles: ProbeAngles) -> BlochState:
    return BlochState(spherical_unit(angles.theta, angles.phi))


def prepare_with_waveplates(stack: WavePlateStack) -> ProbeAngles:
    """Probe angles produced by the wave-plate stack with QWP2 fixed at pi/4."""
    if not np.isclose(stack.q2, np.pi / 4, atol=1e-12):
        raise ValueError("closed-form preparation requires q2 = pi/4")
    theta = np.pi / 2 - 2 * stack.q1
    phi = 4 * stack.p - 2 * stack.q1 - np.pi / 2
    return ProbeAngles.canonical(theta, phi)


def waveplate_jones(fast_axis: float, retardance: float) -> np.ndarray:
    c, s = np.cos(fast_axis), np.sin(fast_axis)
    rot = np.array([[c, s], [-s, c]])
    return rot.T @ np.diag([1.0, np.exp(1j * retardance)]) @ rot


def waveplate_state(stack: WavePlateStack) -> np.ndarray:
    """Jones vector of ``QWP2 HWP QWP1 |H>`` by explicit matrix products."""
    out = np.array([1.0, 0.0], dtype=complex)
    for angle, retardance in ((stack.q1, np.pi / 2), (stack.p, np.pi), (stack.q2, np.pi / 2)):
        out = waveplate_jones(angle, retardance) @ out
    return out


def bloch_from_ket(ket: np.ndarray) -> BlochState:
    ket = np.asarray(ket, dtype=complex)
    ket = ket / np.linalg.norm(ket)
    overlap = np.conj(ket[0]) * ket[1]
    r = [2 * overlap.real, 2 * overlap.imag, abs(ket[0]) ** 2 - abs(ket[1]) ** 2]
    return BlochState(np.clip(r, -1.0, 1.0))


def born_probability(state: BlochState, meas: BinaryMeasurement, outcome: int) -> float:
    if outcome not in (0, 1):
        raise ValueError("outcome must be 0 or 1")
    sign = 1 - 2 * outcome
    return 0.5 * ((1 + sign * meas.x) + sign * float(state.r @ meas.vector))


def single_context_dist(state: BlochState, B: BinaryMeasurement) -> OutcomeDist:
    p0 = born_probability(state, B, 0)
    return OutcomeDist(np.array([p0, 1.0 - p0]))


def consecutive_context_dist(
    state: BlochState,
    A: BinaryMeasurement,
    B: BinaryMeasurement,
    instrument: str | None = None,
) -> JointDist:
    """Joint statistics of measuring A, updating the state, then measuring B.

    A sharp A uses the projective (Lüders) update. Unsharp or biased A is
    rejected unless an ``instrument`` is chosen:

    ``"sqrt"``
        Kraus operators ``sqrt(E_a)``; keeps part of the coherence
        transverse to the A axis.
    ``"readout"``
        Projective measurement along the A axis followed by classical
        outcome noise ``q(a|k) = (1 + (-1)^a (x + (-1)^k mu)) / 2``.
        The post-measurement state is the projected eigenstate.
    """
    if A.is_sharp:
        return _readout_joint(state, A, B)
    if instrument == "readout":
        return _readout_joint(state, A, B)
    if instrument != "sqrt":
        raise ValueError("unsharp A requires instrument='sqrt' or 'readout'")
    rho = state.density_matrix()
    table = np.empty((2, 2))
    for a in (0, 1):
        k = A.kraus(a)
        post = k @ rho @ k.conj().T
        for b in (0, 1):
            table[a, b] = np.trace(B.effect(b) @ post).real
    return JointDist(np.clip(table, 0.0, None))


def _readout_joint(state, A, B):
    # k: eigenprojection along the A axis, a: reported outcome, b: B outcome;
    # scalar arithmetic because the tables are tiny and this runs per probe
    along = float(state.r @ A.axis)
    overlap = float(A.axis @ B.vector)
    table = [[0.0, 0.0], [0.0, 0.0]]
    for k, s_k in ((0, 1.0), (1, -1.0)):
        p_k = 0.5 * (1 + s_k * along)
        for a, s_a in ((0, 1.0), (1, -1.0)):
            q = 0.5 * (1 + s_a * (A.x + s_k * A.mu)) * p_k
            for b, s_b in ((0, 1.0), (1, -1.0)):
                # the probe after A is s_k * A.axis
                table[a][b] += q * 0.5 * (1 + s_b * B.x + s_b * s_k * overlap)
    return JointDist([[max(v, 0.0) for v in row] for row in table])


def depolarize(state: BlochState, lam: float) -> BlochState:
    """Pauli-twirl depolarization with purity ``lam`` in [0.25, 1]."""
    _check_purity(lam)
    return BlochState((4 * lam - 1) / 3 * state.r)


def pauli_conjugate(state: BlochState, k: int) -> BlochState:
    """Bloch vector of ``sigma_k rho sigma_k`` (k = 0, 1, 2 for x, y, z)."""
    flip = -np.ones(3)
    flip[k] = 1.0
    return BlochState(flip * state.r)


def mix_depolarized_probabilities(tables, lam: float):
    """Mix ``[P_0, P_x, P_y, P_z]`` as ``lam P_0 + (1 - lam)/3 (P_x + P_y + P_z)``.

    Accepts OutcomeDist, JointDist or raw arrays; returns the type of ``P_0``.
    """
    _check_purity(lam)
    if len(tables) != 4:
        raise ValueError("expected four tables P_0, P_x, P_y, P_z")
    arrays = [np.asarray(getattr(t, "p", t), dtype=float) for t in tables]
    for arr in arrays:
        if abs(arr.sum() - 1.0) > _ATOL or (arr < -_ATOL).any():
            raise ValueError("input tables must be normalized probability tables")
    mixed = lam * arrays[0] + (1 - lam) / 3 * (arrays[1] + arrays[2] + arrays[3])
    first = tables[0]
    if isinstance(first, (OutcomeDist, JointDist)):
        return type(first)(mixed)
    return mixed


def _check_purity(lam: float) -> None:
    if not 0.25 - _ATOL <= lam <= 1.0 + _ATOL:
        raise ValueError(f"purity lambda must lie in [0.25, 1], got {lam}")
