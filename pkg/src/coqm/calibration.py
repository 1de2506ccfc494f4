"""Systematic-error measurement model and its KL-divergence calibration.

Probe angles drift linearly, ``theta = theta0 + theta1 * theta_exp`` and
``phi = phi0 + phi1 * phi_exp``, and each binary measurement has a bias
``x``, a sharpness ``mu`` and an axis ``(theta_M, phi_M)``:

    p(a) = ((1 + (-1)^a x) + (-1)^a mu * r_s . n_M) / 2

The twelve parameters are fitted to single-measurement frequencies
collected on a lattice of probe states by minimizing the prior-weighted
KL divergence of both measurements, subject to ``|x| <= 1 - mu``.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

PARAM_NAMES = (
    "theta0", "phi0", "theta1", "phi1",
    "xA", "muA", "thetaA", "phiA",
    "xB", "muB", "thetaB", "phiB",
)
SCALE_BOUNDS = (0.9, 1.1)
# global rotations about z leave every probability unchanged, so one
# azimuth is pinned; the B axis defines phi = 0
DEFAULT_FIXED = ("phiB",)

_IDX = {name: k for k, name in enumerate(PARAM_NAMES)}
_SIGN = np.array([1.0, -1.0])


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorModelParams:
    theta0: float = 0.0
    phi0: float = 0.0
    theta1: float = 1.0
    phi1: float = 1.0
    xA: float = 0.0
    muA: float = 1.0
    thetaA: float = 0.0
    phiA: float = 0.0
    xB: float = 0.0
    muB: float = 1.0
    thetaB: float = np.pi / 2
    phiB: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def feasible(self) -> bool:
        return constraint_violation(self.as_vector()) <= 1e-12

    def check(self) -> "ErrorModelParams":
        if not self.feasible:
            raise ValueError(
                "POVM constraints violated: need 0 <= mu <= 1 and |x| <= 1 - mu "
                f"(A: x={self.xA}, mu={self.muA}; B: x={self.xB}, mu={self.muB})"
            )
        return self

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @classmethod
    def from_vector(cls, vec) -> "ErrorModelParams":
        return cls(*[float(v) for v in vec])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ErrorModelParams":
        unknown = set(data) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown parameter names: {sorted(unknown)}")
        return cls(**data)

    def axis(self, which: str) -> np.ndarray:
        theta, phi = (self.thetaA, self.phiA) if which == "A" else (self.thetaB, self.phiB)
        return np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])

    def measurement(self, which: str):
        from coqm.qubit import BinaryMeasurement

        if which == "A":
            return BinaryMeasurement(self.axis("A"), self.muA, self.xA)
        return BinaryMeasurement(self.axis("B"), self.muB, self.xB)

    def drift(self, theta, phi):
        """Actual probe angles for nominal (experimental) ones."""
        return self.theta0 + self.theta1 * np.asarray(theta), self.phi0 + self.phi1 * np.asarray(phi)


NO_ERROR = ErrorModelParams()
# Tabulated experiment row, with muA lowered from the printed 1.0 to
# 1 - |xA| so the A measurement is a valid POVM.
EXPERIMENT = ErrorModelParams(
    theta0=0.00023, phi0=0.0078, theta1=1.0, phi1=1.0,
    xA=-0.0015, muA=0.9985, thetaA=0.0, phiA=0.0,
    xB=0.0016, muB=0.99, thetaB=np.pi / 2, phiB=0.0,
)
PRESETS = {"no_error": NO_ERROR, "experiment": EXPERIMENT}


def constraint_violation(vec) -> float:
    """Largest violation of the POVM and scaling constraints (0 when feasible)."""
    vec = np.asarray(vec, dtype=float)
    worst = 0.0
    for x, mu in ((vec[_IDX["xA"]], vec[_IDX["muA"]]), (vec[_IDX["xB"]], vec[_IDX["muB"]])):
        worst = max(worst, -mu, mu - 1.0, abs(x) - (1.0 - mu))
    return max(worst, 0.0)


# -- lattice and data ---------------------------------------------------------


@dataclass(frozen=True)
class LatticePrior:
    """Probe lattice with prior weights proportional to ``sin(theta)``."""

    n_theta: int
    n_phi: int
    thetas: np.ndarray = field(repr=False)
    phis: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    normalization: float = 0.0

    @property
    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(theta, phi)`` of every cell, theta-major."""
        th, ph = np.meshgrid(self.thetas, self.phis, indexing="ij")
        return th.ravel(), ph.ravel()


def build_lattice_prior(n_theta: int, n_phi: int) -> LatticePrior:
    """Midpoint lattice in theta (poles excluded) and uniform lattice in phi."""
    if n_theta < 2 or n_phi < 1:
        raise ValueError("need n_theta >= 2 and n_phi >= 1")
    thetas = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phis = 2 * np.pi * np.arange(n_phi) / n_phi
    sin_cells = np.repeat(np.sin(thetas), n_phi)
    norm = float(sin_cells.sum())
    return LatticePrior(n_theta, n_phi, thetas, phis, sin_cells / norm, norm)


@dataclass(frozen=True)
class FrequencyDataset:
    """Counts per probe cell: ``counts[cell, meas, outcome]`` with meas 0 = A, 1 = B."""

    theta: np.ndarray
    phi: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        phi = np.asarray(self.phi, dtype=float).ravel()
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (theta.size, 2, 2) or phi.size != theta.size:
            raise ValueError("counts must have shape (n_cells, 2, 2)")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        if (counts.sum(axis=2) <= 0).any():
            raise ValueError("every cell needs counts for both measurements")
        for arr in (theta, phi, counts):
            arr.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "counts", counts)

    @property
    def n_cells(self) -> int:
        return self.theta.size

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.totals[..., None]

    @property
    def prior(self) -> np.ndarray:
        s = np.sin(self.theta)
        return s / s.sum()

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["theta_s", "phi_s", "meas", "outcome", "count"])
        for k in range(self.n_cells):
            for m, label in enumerate("AB"):
                for a in (0, 1):
                    writer.writerow([repr(float(self.theta[k])), repr(float(self.phi[k])), label, a, _fmt_count(self.counts[k, m, a])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "FrequencyDataset":
        with open(path, encoding="utf-8", newline="") as fh:
            return cls.from_csv_text(fh.read())

    @classmethod
    def from_csv_text(cls, text: str) -> "FrequencyDataset":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["theta_s", "phi_s", "meas", "outcome", "count"]:
            raise DatasetFormatError("line 1: expected header theta_s,phi_s,meas,outcome,count")
        cells: dict[tuple[float, float], np.ndarray] = {}
        for lineno, row in enumerate(rows[1:], start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise DatasetFormatError(f"line {lineno}: expected 5 fields, got {len(row)}")
            try:
                theta, phi = float(row[0]), float(row[1])
                meas = row[2].strip()
                outcome = int(row[3])
                count = float(row[4])
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from None
            if meas not in ("A", "B"):
                raise DatasetFormatError(f"line {lineno}: meas must be A or B, got {meas!r}")
            if outcome not in (0, 1):
                raise DatasetFormatError(f"line {lineno}: outcome must be 0 or 1")
            if count < 0 or not math.isfinite(count):
                raise DatasetFormatError(f"line {lineno}: count must be a non-negative number")
            table = cells.setdefault((theta, phi), np.zeros((2, 2)))
            table[0 if meas == "A" else 1, outcome] += count
        if not cells:
            raise DatasetFormatError("no data rows")
        keys = list(cells)
        counts = np.array([cells[k] for k in keys])
        bad = np.flatnonzero((counts.sum(axis=2) <= 0).any(axis=1))
        if bad.size:
            raise DatasetFormatError(f"cell {keys[bad[0]]} lacks counts for one measurement")
        return cls(np.array([k[0] for k in keys]), np.array([k[1] for k in keys]), counts)


def _fmt_count(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


# -- model --------------------------------------------------------------------


def _unit(theta, phi):
    return np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1
    )


def model_probabilities(theta_exp, phi_exp, params: ErrorModelParams) -> np.ndarray:
    """Model probabilities with shape ``(n_cells, 2 meas, 2 outcomes)``."""
    th, ph = params.drift(np.atleast_1d(theta_exp), np.atleast_1d(phi_exp))
    r = _unit(th, ph)
    proj = np.stack([r @ params.axis("A"), r @ params.axis("B")], axis=1)
    x = np.array([params.xA, params.xB])
    mu = np.array([params.muA, params.muB])
    return 0.5 * ((1 + _SIGN * x[:, None]) + _SIGN * (mu[:, None] * proj[..., None]))


def model_probability(cell, params: ErrorModelParams, which: str, outcome: int) -> float:
    """Probability of ``outcome`` of measurement ``which`` ('A' or 'B') for probe ``cell``.

    ``cell`` is an object with ``theta``/``phi`` attributes or a
    ``(theta, phi)`` pair of nominal angles.
    """
    params.check()
    theta, phi = (cell.theta, cell.phi) if hasattr(cell, "theta") else cell
    if which not in ("A", "B") or outcome not in (0, 1):
        raise ValueError("which must be 'A' or 'B' and outcome 0 or 1")
    return float(model_probabilities(theta, phi, params)[0, "AB".index(which), outcome])


def _jacobian(theta_exp, phi_exp, vec) -> np.ndarray:
    """d p / d params with shape ``(n_cells, 2, 2, 12)``."""
    p = ErrorModelParams.from_vector(vec)
    th, ph = p.drift(theta_exp, phi_exp)
    r = _unit(th, ph)
    dr_dth = np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)], axis=-1)
    dr_dph = np.stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(th)], axis=-1)
    n = len(theta_exp)
    jac = np.zeros((n, 2, 12))  # d(x + mu r.n) per measurement; outcome sign applied below
    for m, (tm, pm, xi, mi, ti, fi) in enumerate(
        ((p.thetaA, p.phiA, "xA", "muA", "thetaA", "phiA"), (p.thetaB, p.phiB, "xB", "muB", "thetaB", "phiB"))
    ):
        mu = getattr(p, mi)
        axis = _unit(tm, pm)
        daxis_dth = np.array([np.cos(tm) * np.cos(pm), np.cos(tm) * np.sin(pm), -np.sin(tm)])
        daxis_dph = np.array([-np.sin(tm) * np.sin(pm), np.sin(tm) * np.cos(pm), 0.0])
        jac[:, m, _IDX[xi]] = 1.0
        jac[:, m, _IDX[mi]] = r @ axis
        jac[:, m, _IDX[ti]] = mu * (r @ daxis_dth)
        jac[:, m, _IDX[fi]] = mu * (r @ daxis_dph)
        g_th = mu * (dr_dth @ axis)
        g_ph = mu * (dr_dph @ axis)
        jac[:, m, _IDX["theta0"]] = g_th
        jac[:, m, _IDX["theta1"]] = g_th * theta_exp
        jac[:, m, _IDX["phi0"]] = g_ph
        jac[:, m, _IDX["phi1"]] = g_ph * phi_exp
    return 0.5 * _SIGN[None, None, :, None] * jac[:, :, None, :]


def _xlogy_ratio(f: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``f log(f/p)`` with ``0 log 0 = 0`` and cancellation-safe evaluation near ``f == p``."""
    out = np.zeros_like(f)
    pos = f > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out[pos] = -f[pos] * np.log1p((p[pos] - f[pos]) / f[pos])
    return out


def kl_objective(data: FrequencyDataset, params: ErrorModelParams) -> float:
    """Prior-weighted KL divergence of both measurement blocks.

    Returns ``inf`` when the model assigns zero probability to an observed
    outcome.
    """
    return _kl(data, params.as_vector())


def _kl(data: FrequencyDataset, vec) -> float:
    p = model_probabilities(data.theta, data.phi, ErrorModelParams.from_vector(vec))
    f = data.frequencies
    if ((p <= 0) & (f > 0)).any():
        return math.inf
    terms = _xlogy_ratio(f, p)
    return float(np.sum(data.prior[:, None, None] * terms))


def kl_gradient(data: FrequencyDataset, params: ErrorModelParams) -> np.ndarray:
    return _kl_grad_and_fisher(data, params.as_vector())[0]


def _kl_grad_and_fisher(data: FrequencyDataset, vec):
    p = model_probabilities(data.theta, data.phi, ErrorModelParams.from_vector(vec))
    jac = _jacobian(data.theta, data.phi, vec)
    weight = data.prior[:, None, None]
    f = data.frequencies
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(f > 0, f / p, 0.0)
        inv_p = np.where(p > 0, 1.0 / p, 0.0)
    grad = -np.einsum("cma,cmak->k", weight * ratio, jac)
    fisher = np.einsum("cma,cmak,cmal->kl", weight * inv_p, jac, jac)
    return grad, fisher


def log_likelihood(data: FrequencyDataset, params: ErrorModelParams) -> float:
    """``sum f(a, t_s) log p(a, t_s | t)`` with prior-weighted joint frequencies."""
    p = model_probabilities(data.theta, data.phi, params)
    joint_f = data.prior[:, None, None] * data.frequencies
    joint_p = data.prior[:, None, None] * p
    pos = joint_f > 0
    return float(np.sum(joint_f[pos] * np.log(joint_p[pos])))


def synthetic_dataset(
    params: ErrorModelParams,
    lattice: LatticePrior,
    counts_per_cell: float = 1.0,
    rng: np.random.Generator | None = None,
) -> FrequencyDataset:
    """Frequencies generated by the model on ``lattice``.

    Without ``rng`` the counts are exact (``counts_per_cell * p``); with
    ``rng`` each measurement in each cell is a binomial draw.
    """
    params.check()
    th, ph = lattice.cells
    p = model_probabilities(th, ph, params)
    if rng is None:
        counts = counts_per_cell * p
    else:
        n = int(counts_per_cell)
        k0 = rng.binomial(n, np.clip(p[..., 0], 0.0, 1.0))
        counts = np.stack([k0, n - k0], axis=-1).astype(float)
    return FrequencyDataset(th, ph, counts)


# -- fitting ------------------------------------------------------------------


def _project_xmu(x: float, mu: float) -> tuple[float, float]:
    """Euclidean projection onto the triangle ``0 <= mu``, ``|x| <= 1 - mu``."""
    if mu >= 0 and abs(x) <= 1 - mu + 1e-15:
        return x, mu
    best, best_d = None, math.inf
    for (ax, am), (bx, bm) in (((-1.0, 0.0), (1.0, 0.0)), ((1.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (-1.0, 0.0))):
        dx, dm = bx - ax, bm - am
        s = ((x - ax) * dx + (mu - am) * dm) / (dx * dx + dm * dm)
        s = min(max(s, 0.0), 1.0)
        px, pm = ax + s * dx, am + s * dm
        d = (px - x) ** 2 + (pm - mu) ** 2
        if d < best_d:
            best, best_d = (px, pm), d
    return best


def project(vec) -> np.ndarray:
    """Project a parameter vector onto the feasible set."""
    out = np.array(vec, dtype=float)
    for xi, mi in (("xA", "muA"), ("xB", "muB")):
        out[_IDX[xi]], out[_IDX[mi]] = _project_xmu(out[_IDX[xi]], out[_IDX[mi]])
    for name in ("theta1", "phi1"):
        out[_IDX[name]] = min(max(out[_IDX[name]], SCALE_BOUNDS[0]), SCALE_BOUNDS[1])
    return out


@dataclass(frozen=True)
class FitResult:
    params: ErrorModelParams
    objective: float
    init_objective: float
    iterations: int
    converged: bool
    projected_gradient_norm: float
    history: tuple = field(repr=False)
    fisher_eigenvalues: tuple = field(repr=False)
    n_flat_directions: int = 0
    starts: int = 1
    free: tuple = PARAM_NAMES

    def to_dict(self) -> dict:
        return {
            "parameters": self.params.to_dict(),
            "objective": self.objective,
            "init_objective": self.init_objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "projected_gradient_norm": self.projected_gradient_norm,
            "n_flat_directions": self.n_flat_directions,
            "identifiable": self.n_flat_directions == 0,
            "starts": self.starts,
            "free_parameters": list(self.free),
        }


def _projected_gradient_norm(vec, grad, free_mask) -> float:
    step = np.where(free_mask, grad, 0.0)
    return float(np.linalg.norm(vec - project(vec - step)))


_EDGES = (  # outward normals and offsets of the (x, mu) triangle: n . (x, mu) <= c
    (np.array([0.0, -1.0]), 0.0),
    (np.array([1.0, 1.0]), 1.0),
    (np.array([-1.0, 1.0]), 1.0),
)


def _step_basis(vec, grad, free_mask, tol=1e-12) -> np.ndarray:
    """Orthonormal directions the step may use.

    Fixed parameters and active constraints the descent direction pushes
    against are removed, so the damped solve moves along the active face
    instead of being undone by the projection.
    """
    rows = [np.eye(12)[k] for k in np.flatnonzero(~free_mask)]
    for xi, mi in ((_IDX["xA"], _IDX["muA"]), (_IDX["xB"], _IDX["muB"])):
        for normal, offset in _EDGES:
            if normal @ vec[[xi, mi]] >= offset - tol and -(normal @ grad[[xi, mi]]) > 0:
                row = np.zeros(12)
                row[[xi, mi]] = normal
                rows.append(row)
    for name in ("theta1", "phi1"):
        k = _IDX[name]
        if (vec[k] <= SCALE_BOUNDS[0] + tol and grad[k] > 0) or (vec[k] >= SCALE_BOUNDS[1] - tol and grad[k] < 0):
            rows.append(np.eye(12)[k])
    if not rows:
        return np.eye(12)
    _, sv, vt = np.linalg.svd(np.array(rows))
    rank = int(np.sum(sv > 1e-10))
    return vt[rank:].T


def _local_fit(data, vec0, free_mask, max_iter, grad_tol, trace):
    vec = project(vec0)
    fval = _kl(data, vec)
    history = [fval]
    damping = 1e-3
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad, fisher = _kl_grad_and_fisher(data, vec)
        pg = _projected_gradient_norm(vec, grad, free_mask)
        if pg <= grad_tol * 1e-3:
            break
        basis = _step_basis(vec, grad, free_mask)
        g = basis.T @ grad
        h = basis.T @ fisher @ basis
        scale = np.diag(h).copy()
        scale[scale <= 0] = 1.0
        ridge = 1e-14 * max(float(np.trace(h)), 1e-300)
        accepted = False
        while damping < 1e12:
            step = np.linalg.solve(h + damping * np.diag(scale) + ridge * np.eye(len(g)), -g)
            trial = project(vec + basis @ step)
            ftrial = _kl(data, trial)
            if ftrial <= fval:
                accepted = True
                moved = float(np.linalg.norm(trial - vec))
                vec, fval = trial, ftrial
                damping = max(damping / 5, 1e-12)
                break
            damping *= 4
        if trace is not None:
            trace.append(vec.copy())
        if not accepted:
            break
        history.append(fval)
        if moved < 1e-14 or (pg <= grad_tol and moved < 1e-12):
            break
    grad, fisher = _kl_grad_and_fisher(data, vec)
    pg = _projected_gradient_norm(vec, grad, free_mask)
    return vec, fval, history, iterations, pg, fisher


def fit_parameters(
    data: FrequencyDataset,
    init: ErrorModelParams = NO_ERROR,
    fixed=DEFAULT_FIXED,
    n_starts: int = 8,
    seed: int = 0,
    max_iter: int = 500,
    grad_tol: float = 1e-6,
    trace: list | None = None,
) -> FitResult:
    """Minimize the two-block KL divergence over the error-model parameters.

    A damped Fisher-scoring step (Levenberg-Marquardt style) is projected
    onto the feasible set and accepted only when the objective does not
    increase, so every iterate is feasible and the objective is monotone.
    ``n_starts - 1`` extra starts are random perturbations of ``init``.

    Raises
    ------
    ValueError
        If ``init`` violates the POVM constraints.
    """
    if not init.feasible:
        raise ValueError("initial parameters violate the POVM constraints")
    if data.n_cells < 20:
        warnings.warn(
            f"only {data.n_cells} lattice cells; parameters are likely not identifiable",
            stacklevel=2,
        )
    unknown = set(fixed) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown fixed parameters {sorted(unknown)}")
    free_mask = np.array([name not in fixed for name in PARAM_NAMES])
    rng = np.random.default_rng(seed)
    base = init.as_vector()
    jitter = np.array([1e-2, 1e-2, 1e-2, 1e-2, 5e-3, 5e-3, 1e-2, 1e-2, 5e-3, 5e-3, 1e-2, 1e-2])
    starts = [base] + [project(base + free_mask * jitter * rng.standard_normal(12)) for _ in range(n_starts - 1)]
    init_obj = _kl(data, base)
    best = None
    for start in starts:
        out = _local_fit(data, start, free_mask, max_iter, grad_tol, trace)
        if best is None or out[1] < best[1]:
            best = out
    vec, fval, history, iterations, pg, fisher = best
    if fval > init_obj:
        # keep the guarantee objective(result) <= objective(init)
        vec, fval = base, init_obj
    h = fisher[np.ix_(free_mask, free_mask)]
    eigs = np.linalg.eigvalsh(h)
    flat = int(np.sum(eigs <= 1e-10 * max(eigs.max(), 1e-300)))
    return FitResult(
        params=ErrorModelParams.from_vector(vec),
        objective=fval,
        init_objective=init_obj,
        iterations=iterations,
        converged=bool(pg <= grad_tol and math.isfinite(fval)),
        projected_gradient_norm=pg,
        history=tuple(history),
        fisher_eigenvalues=tuple(float(e) for e in eigs),
        n_flat_directions=flat,
        starts=len(starts),
        free=tuple(n for n, m in zip(PARAM_NAMES, free_mask) if m),
    )


def with_params(params: ErrorModelParams, **changes) -> ErrorModelParams:
    return replace(params, **changes)

