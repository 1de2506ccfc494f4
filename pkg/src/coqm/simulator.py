"""Monte-Carlo engine for the two-context estimation experiments.

Every trial draws its own pair of random streams (one per ensemble) from
``SeedSequence([seed, point, trial])`` with a counter-based Philox bit
generator, so results do not depend on how trials are scheduled across
worker threads.
"""
from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from coqm.calibration import ErrorModelParams
from coqm.estimator import (
    PATH_LENGTH,
    SPECIFIC_ROTATION,
    EstimationResult,
    concentration_to_rotation,
    mle_solve,
    positive_interval,
    to_concentration,
)
from coqm.exceptions import PositivityError
from coqm.fisher import ParamTag, cofi, crb, error_ratio, quantum_fi
from coqm.quasiprob import CountTable, JointDist, OutcomeDist, analytic_w, negativity
from coqm.qubit import (
    BinaryMeasurement,
    BlochState,
    ProbeAngles,
    bloch_from_angles,
    consecutive_context_dist,
    depolarize,
    mix_depolarized_probabilities,
    pauli_conjugate,
    single_context_dist,
)

KINDS = ("landscape", "theta_sweep", "phi_sweep", "sample_size", "concentration", "depolarization")

# the likelihood family assumes A along z and B along x
AXIS_A = (0.0, 0.0, 1.0)
AXIS_B = (1.0, 0.0, 0.0)


class ConfigError(ValueError):
    pass


def _tuple(values) -> tuple:
    return tuple(float(v) for v in np.atleast_1d(values)) if values is not None else ()


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings for one experiment run.

    ``thetas``/``phis`` are the probe grid. Sweeps over theta use ``phis[0]``
    as the fixed azimuth and vice versa; ``sizes`` replaces ``n_s`` for the
    sample-size sweep and ``concentrations`` the probe grid for the
    concentration runs.
    """

    kind: str
    thetas: tuple = (np.pi / 2,)
    phis: tuple = (0.15 * np.pi,)
    n_s: int = 100_000
    trials: int = 100
    seed: int = 0
    lambdas: tuple = (1.0,)
    sizes: tuple = ()
    concentrations: tuple = ()
    theta0: float = np.pi / 2
    alpha: float = SPECIFIC_ROTATION
    path_l: float = PATH_LENGTH
    axis_a: tuple = AXIS_A
    axis_b: tuple = AXIS_B
    systematic: ErrorModelParams | None = None
    clip: bool = False
    monte_carlo: bool = False
    workers: int = 1
    keep_trials: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        for name in ("thetas", "phis", "lambdas", "sizes", "concentrations", "axis_a", "axis_b"):
            object.__setattr__(self, name, _tuple(getattr(self, name)))
        if not self.thetas or not self.phis:
            raise ConfigError("probe grid must be nonempty")
        if self.n_s < 1:
            raise ConfigError("n_s must be at least 1")
        if self.trials < 1:
            raise ConfigError("trial count must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if any(not 0.25 <= lam <= 1.0 for lam in self.lambdas):
            raise ConfigError("purity lambda must lie in [0.25, 1]")
        if self.kind == "sample_size":
            if not self.sizes or any(s < 1 for s in self.sizes):
                raise ConfigError("sample_size needs a list of sizes >= 1")
            if list(self.sizes) != sorted(self.sizes):
                raise ConfigError("sizes must be ascending")
        if self.kind == "concentration" and not self.concentrations:
            raise ConfigError("concentration needs at least one concentration value")
        if self.alpha <= 0 or self.path_l <= 0:
            raise ConfigError("alpha and path_l must be positive")
        for axis in (self.axis_a, self.axis_b):
            if len(axis) != 3 or abs(math.hypot(*axis) - 1.0) > 1e-12:
                raise ConfigError("measurement axes must be unit 3-vectors")
        if self.systematic is not None and not self.systematic.feasible:
            raise ConfigError("systematic-error parameters violate the POVM constraints")

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, ErrorModelParams):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            out[name] = value
        return out


@dataclass(frozen=True)
class TrialRecord:
    point: int
    trial: int
    param: float
    seed: tuple
    counts_digest: str
    result: EstimationResult
    wall_time: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class PointSummary:
    """Statistics of one sweep point over its trials.

    ``failure_rate`` counts negative virtual counts only; other estimator
    failures (no interior maximum) are in ``n_other_failures``.
    """

    param: float
    theta: float
    phi: float
    n_s: int
    lam: float
    trials: int
    n_success: int
    n_negative: int
    n_other_failures: int
    mean_estimate: float
    std_estimate: float
    mean_error: float
    ideal_error: float
    crb_bound: float
    records: tuple = field(default=(), repr=False, compare=False)

    @property
    def failure_rate(self) -> float:
        return self.n_negative / self.trials

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r.result.theta_hat for r in self.records if r.result.ok])


# -- sampling -----------------------------------------------------------------


def trial_streams(seed: int, point: int, trial: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the B-only and the AB ensemble of one trial."""
    ss = np.random.SeedSequence([int(seed), int(point), int(trial)])
    return tuple(np.random.Generator(np.random.Philox(child)) for child in ss.spawn(2))


def _streams(rng):
    if isinstance(rng, np.random.Generator):
        return rng, rng
    stream_b, stream_ab = rng
    return stream_b, stream_ab


def sample_counts(single: OutcomeDist, joint: JointDist, n_s: int, rng) -> CountTable:
    """Multinomial counts of both ensembles from given context distributions."""
    stream_b, stream_ab = _streams(rng)
    n_s = int(n_s)
    n_b = stream_b.multinomial(n_s, _clean(single.p))
    n_ab = stream_ab.multinomial(n_s, _clean(joint.p.ravel())).reshape(2, 2)
    return CountTable(n_b, n_ab, n_s)


def _clean(p):
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    return p / p.sum()


def sample_contexts(
    state: BlochState, A: BinaryMeasurement, B: BinaryMeasurement, n_s: int, rng, instrument="readout"
) -> CountTable:
    """Draw ``N_B`` and ``N_AB`` for ``n_s`` probes per ensemble.

    ``rng`` is one generator or a ``(stream_b, stream_ab)`` pair;
    ``instrument`` picks the state update of an unsharp A.
    """
    if n_s < 1:
        raise ValueError("n_s must be at least 1")
    single = single_context_dist(state, B)
    joint = consecutive_context_dist(state, A, B, instrument=instrument)
    return sample_counts(single, joint, n_s, rng)


def apply_systematic_model(angles: ProbeAngles, params: ErrorModelParams, lam: float = 1.0):
    """Context distributions under drifted probe angles and imperfect measurements.

    The drifted probe is measured with the ``(x, mu)`` POVMs of ``params``.
    An unsharp A is modelled as a projective measurement with readout noise,
    so the probe after A is an eigenstate of the drifted A axis.

    Raises
    ------
    ValueError
        If ``params`` violates the POVM constraints.
    """
    params.check()
    theta, phi = params.drift(angles.theta, angles.phi)
    r = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    state = depolarize(BlochState(r), lam)
    A, B = params.measurement("A"), params.measurement("B")
    single = single_context_dist(state, B)
    joint = consecutive_context_dist(state, A, B, instrument="readout")
    return single, joint


def context_dists(theta: float, phi: float, config: ExperimentConfig, lam: float = 1.0):
    """Sampling distributions of one probe point, with depolarization and systematics."""
    angles = ProbeAngles(theta, phi)
    if config.systematic is not None:
        return apply_systematic_model(angles, config.systematic, lam)
    A = BinaryMeasurement(np.array(config.axis_a))
    B = BinaryMeasurement(np.array(config.axis_b))
    state = bloch_from_angles(angles)
    if lam == 1.0:
        return single_context_dist(state, B), consecutive_context_dist(state, A, B)
    # Pauli-twirl mixture of the four conjugated probes
    probes = [state] + [pauli_conjugate(state, k) for k in range(3)]
    singles = [single_context_dist(s, B) for s in probes]
    joints = [consecutive_context_dist(s, A, B) for s in probes]
    return mix_depolarized_probabilities(singles, lam), mix_depolarized_probabilities(joints, lam)


def counts_digest(counts: CountTable) -> str:
    payload = np.concatenate([counts.n_b, counts.n_ab.ravel()]).astype(np.int64).tobytes()
    return hashlib.sha256(payload).hexdigest()[:16]


# -- trial runner -------------------------------------------------------------


@dataclass(frozen=True)
class _PointJob:
    index: int
    param: float
    theta: float
    phi: float
    tag: ParamTag
    n_s: int
    lam: float
    single: OutcomeDist
    joint: JointDist
    interval: tuple


def _run_trial(job: _PointJob, seed: int, trial: int) -> TrialRecord:
    start = time.perf_counter()
    counts = sample_counts(job.single, job.joint, job.n_s, trial_streams(seed, job.index, trial))
    fixed = job.phi if job.tag is ParamTag.THETA else job.theta
    result = mle_solve(counts, job.interval, fixed=fixed, tag=job.tag)
    return TrialRecord(
        point=job.index,
        trial=trial,
        param=job.param,
        seed=(seed, job.index, trial),
        counts_digest=counts_digest(counts),
        result=result,
        wall_time=time.perf_counter() - start,
    )


def run_trials(job: _PointJob, config: ExperimentConfig) -> list[TrialRecord]:
    """All trials of one point, ordered by trial index whatever the worker count."""
    trials = range(config.trials)
    if config.workers == 1:
        return [_run_trial(job, config.seed, t) for t in trials]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(lambda t: _run_trial(job, config.seed, t), trials))


def _summarize(job: _PointJob, records: list[TrialRecord], config: ExperimentConfig, f_q: float) -> PointSummary:
    ok = [r.result for r in records if r.result.ok]
    negative = sum(1 for r in records if r.result.reason == "negative_nw")
    estimates = np.array([r.theta_hat for r in ok])
    errors = np.array([r.error_hat for r in ok if r.error_hat is not None])
    true_angles = ProbeAngles(job.theta, job.phi)
    try:
        ideal = crb(cofi(true_angles, job.tag), job.n_s)
    except PositivityError:
        ideal = math.nan
    return PointSummary(
        param=job.param,
        theta=job.theta,
        phi=job.phi,
        n_s=job.n_s,
        lam=job.lam,
        trials=len(records),
        n_success=len(ok),
        n_negative=negative,
        n_other_failures=len(records) - len(ok) - negative,
        mean_estimate=float(estimates.mean()) if estimates.size else math.nan,
        std_estimate=float(estimates.std(ddof=1)) if estimates.size > 1 else math.nan,
        mean_error=float(errors.mean()) if errors.size else math.nan,
        ideal_error=ideal,
        crb_bound=crb(f_q, 2 * job.n_s),
        records=tuple(records) if config.keep_trials else (),
    )


def _job(index, param, theta, phi, tag, n_s, lam, config) -> _PointJob:
    single, joint = context_dists(theta, phi, config, lam)
    fixed, guess = (phi, theta) if tag is ParamTag.THETA else (theta, phi)
    interval = positive_interval(guess, fixed, tag)
    return _PointJob(index, param, theta, phi, tag, int(n_s), lam, single, joint, interval)


def is_positive_point(theta: float, phi: float, tag=ParamTag.THETA) -> bool:
    """Whether the ideal likelihood family is strictly positive at the point."""
    return float(analytic_w(theta, phi).min()) > 1e-9


def _check_points(points, config: ExperimentConfig, tag):
    """Split points into kept and clipped; raise when clipping is off."""
    kept, clipped = [], []
    for p in points:
        (kept if is_positive_point(p[1], p[2], tag) else clipped).append(p)
    if clipped and not config.clip:
        bad = ", ".join(f"({t:.6g}, {f:.6g})" for _, t, f in clipped)
        raise PositivityError(f"probe points outside the positivity region: {bad}")
    return kept, clipped


@dataclass(frozen=True)
class SweepResult:
    kind: str
    rows: tuple
    clipped: tuple = ()

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


def _sweep(points, tag, config, f_q_of, n_s_of=None, lam_of=None) -> SweepResult:
    kept, clipped = _check_points(points, config, tag)
    rows = []
    for index, (param, theta, phi) in enumerate(points):
        if (param, theta, phi) not in kept:
            continue
        n_s = n_s_of(param) if n_s_of else config.n_s
        lam = lam_of(param) if lam_of else 1.0
        job = _job(index, param, theta, phi, tag, n_s, lam, config)
        rows.append(_summarize(job, run_trials(job, config), config, f_q_of(theta, phi)))
    return SweepResult(config.kind, tuple(rows), tuple(p[0] for p in clipped))


# -- experiments --------------------------------------------------------------


def run_theta_sweep(config: ExperimentConfig) -> SweepResult:
    """Theta estimation at fixed ``phis[0]`` over ``thetas``; bound uses F_q = 1."""
    phi = config.phis[0]
    points = [(t, t, phi) for t in config.thetas]
    return _sweep(points, ParamTag.THETA, config, lambda t, f: 1.0)


def run_phi_sweep(config: ExperimentConfig) -> SweepResult:
    """Phi estimation at fixed ``thetas[0]``; bound uses F_q = sin^2(theta)."""
    theta = config.thetas[0]
    points = [(f, theta, f) for f in config.phis]
    return _sweep(points, ParamTag.PHI, config, lambda t, f: math.sin(t) ** 2)


def run_sample_size_sweep(config: ExperimentConfig) -> SweepResult:
    theta, phi = config.thetas[0], config.phis[0]
    points = [(float(n), theta, phi) for n in config.sizes]
    return _sweep(points, ParamTag.THETA, config, lambda t, f: 1.0, n_s_of=lambda n: int(n))


@dataclass(frozen=True)
class ConcentrationSummary:
    c_true: float
    theta: float
    c_hat_mean: float
    c_hat_std: float
    dc_mean: float
    dc_bound: float
    point: PointSummary = field(repr=False)


def run_concentration(config: ExperimentConfig) -> list[ConcentrationSummary]:
    """Estimate sugar concentrations from the rotated probe ``theta0 + alpha l c``.

    Raises
    ------
    ConfigError
        If a rotated probe leaves the positivity region.
    """
    phi = config.phis[0]
    out = []
    for index, c in enumerate(config.concentrations):
        theta = config.theta0 + concentration_to_rotation(c, config.alpha, config.path_l)
        if not is_positive_point(theta, phi):
            raise ConfigError(f"concentration {c} rotates the probe to {theta} outside the positivity region")
        job = _job(index, c, theta, phi, ParamTag.THETA, config.n_s, 1.0, config)
        records = run_trials(job, config)
        point = _summarize(job, records, config, 1.0)
        results = [
            to_concentration(r.result.theta_hat, config.theta0, config.alpha, config.path_l, r.result.error_hat)
            for r in records
            if r.result.ok
        ]
        c_hat = np.array([r.c_hat for r in results])
        dc = np.array([r.dc_hat for r in results if r.dc_hat is not None])
        bound = to_concentration(config.theta0, config.theta0, config.alpha, config.path_l, point.crb_bound).dc_hat
        out.append(
            ConcentrationSummary(
                c_true=float(c),
                theta=theta,
                c_hat_mean=float(c_hat.mean()) if c_hat.size else math.nan,
                c_hat_std=float(c_hat.std(ddof=1)) if c_hat.size > 1 else math.nan,
                dc_mean=float(dc.mean()) if dc.size else math.nan,
                dc_bound=float(bound),
                point=point,
            )
        )
    return out


def run_depolarization(config: ExperimentConfig) -> SweepResult:
    """Phi estimation at ``thetas[0]`` for each purity in ``lambdas``.

    Samples come from the depolarized probe while the likelihood keeps the
    ideal pure-state family. The bound is the pure-probe conventional one,
    ``1/sqrt(2 n_s sin^2 theta)``.
    """
    theta = config.thetas[0]
    points, lams = [], []
    for lam in config.lambdas:
        for phi in config.phis:
            points.append((len(points), theta, phi))
            lams.append(lam)
    kept, clipped = _check_points(points, config, ParamTag.PHI)
    kept_idx = {p[0] for p in kept}
    rows = []
    for index, theta_, phi in points:
        if index not in kept_idx:
            continue
        job = _job(index, phi, theta_, phi, ParamTag.PHI, config.n_s, lams[index], config)
        rows.append(_summarize(job, run_trials(job, config), config, math.sin(theta) ** 2))
    return SweepResult(config.kind, tuple(rows), tuple(points[i][2] for i, *_ in clipped))


@dataclass(frozen=True)
class LandscapeCell:
    theta: float
    phi: float
    R: float | None
    negativity: float
    mc_error: float | None = None
    crb_bound: float | None = None


def landscape_cell(theta: float, phi: float, config: ExperimentConfig | None = None, index: int = 0) -> LandscapeCell:
    """Error ratio from analytic F_co and F_q = 1; ``R`` is None where w is not positive."""
    w = analytic_w(theta, phi)
    neg = negativity(w)
    if neg < 1e-15:
        # rounding noise on the positivity boundary
        neg = 0.0
    angles = ProbeAngles(theta, phi) if 0.0 <= theta <= np.pi else ProbeAngles.canonical(theta, phi)
    try:
        f_co = cofi(angles, ParamTag.THETA)
    except PositivityError:
        return LandscapeCell(theta, phi, None, neg)
    f_q = quantum_fi(angles, ParamTag.THETA)
    R = error_ratio(f_co, f_q)
    if config is None or not config.monte_carlo:
        return LandscapeCell(theta, phi, R, neg)
    job = _job(index, theta, theta, phi, ParamTag.THETA, config.n_s, 1.0, config)
    summary = _summarize(job, run_trials(job, config), config, f_q)
    return LandscapeCell(theta, phi, R, neg, summary.mean_error, summary.crb_bound)


def landscape_grid(n_theta: int, n_phi: int) -> tuple[np.ndarray, np.ndarray]:
    """Polar angles including both poles and azimuths ``2 pi j / n_phi``."""
    if n_theta < 2 or n_phi < 2:
        raise ConfigError("landscape grid must be at least 2x2")
    return np.linspace(0.0, np.pi, n_theta), 2 * np.pi * np.arange(n_phi) / n_phi


def run_landscape(config: ExperimentConfig) -> list[LandscapeCell]:
    """Every ``(theta, phi)`` cell of the probe grid, theta-major."""
    cells = []
    for i, theta in enumerate(config.thetas):
        for j, phi in enumerate(config.phis):
            cells.append(landscape_cell(theta, phi, config, index=i * len(config.phis) + j))
    return cells


def run_experiment(config: ExperimentConfig):
    runners = {
        "landscape": run_landscape,
        "theta_sweep": run_theta_sweep,
        "phi_sweep": run_phi_sweep,
        "sample_size": run_sample_size_sweep,
        "concentration": run_concentration,
        "depolarization": run_depolarization,
    }
    return runners[config.kind](config)


def mixing_functional_check(components, functions, n: int, rng: np.random.Generator):
    """Sampled check that expectations decompose over a forward mixture.

    ``components`` is ``[(probabilities, weight), ...]`` over a common
    outcome set and ``functions`` has shape ``(n_functions, n_outcomes)``.
    The mixture ensemble C and every component ensemble are sampled with
    ``n`` draws each. Returns the deviations
    ``E[f|C] - sum_i w_i E[f|i]`` and the bound ``5 max|f| / sqrt(n)``.
    """
    probs = np.array([_clean(p) for p, _ in components])
    weights = np.array([w for _, w in components], dtype=float)
    functions = np.atleast_2d(np.asarray(functions, dtype=float))
    if abs(weights.sum() - 1.0) > 1e-12 or (weights < 0).any():
        raise ValueError("component weights must be non-negative and sum to 1")
    picks = rng.multinomial(n, weights)
    counts_c = sum(rng.multinomial(k, p) for k, p in zip(picks, probs))
    counts_i = np.array([rng.multinomial(n, p) for p in probs])
    e_c = functions @ counts_c / n
    e_i = functions @ counts_i.T / n
    deviation = e_c - e_i @ weights
    bound = 5 * np.abs(functions).max(axis=1) / math.sqrt(n)
    return deviation, bound
