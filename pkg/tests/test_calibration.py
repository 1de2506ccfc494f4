import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coqm.calibration import (
    DEFAULT_FIXED,
    EXPERIMENT,
    NO_ERROR,
    PARAM_NAMES,
    DatasetFormatError,
    ErrorModelParams,
    FrequencyDataset,
    build_lattice_prior,
    constraint_violation,
    fit_parameters,
    kl_gradient,
    kl_objective,
    log_likelihood,
    model_probabilities,
    model_probability,
    project,
    synthetic_dataset,
    with_params,
)
from oracles import fd, mp_model_probability

PI = np.pi


def random_feasible(rng):
    vec = NO_ERROR.as_vector()
    vec[:4] += rng.normal(0, 0.02, 4)
    for xi, mi in ((4, 5), (8, 9)):
        mu = rng.uniform(0.8, 1.0)
        vec[mi], vec[xi] = mu, rng.uniform(-(1 - mu), 1 - mu)
    vec[[6, 7, 10, 11]] += rng.normal(0, 0.05, 4)
    return ErrorModelParams.from_vector(project(vec))


class TestParams:
    def test_presets_feasible(self):
        assert NO_ERROR.feasible and EXPERIMENT.feasible

    def test_infeasible(self):
        p = ErrorModelParams(xA=0.1, muA=0.95)
        assert not p.feasible
        assert constraint_violation(p.as_vector()) == pytest.approx(0.05)
        with pytest.raises(ValueError):
            p.check()

    def test_dict_round_trip(self):
        assert ErrorModelParams.from_dict(EXPERIMENT.to_dict()) == EXPERIMENT
        with pytest.raises(ValueError):
            ErrorModelParams.from_dict({"bogus": 1.0})

    def test_vector_order(self):
        assert list(ErrorModelParams.from_vector(range(12)).to_dict()) == list(PARAM_NAMES)

    def test_with_params(self):
        assert with_params(NO_ERROR, xB=0.01, muB=0.99).xB == 0.01


class TestModel:
    def test_north_pole(self):
        assert model_probability((0.0, 0.0), NO_ERROR, "A", 0) == pytest.approx(1.0)

    def test_orthogonal_probe(self):
        p = ErrorModelParams(xA=0.1, muA=0.8)
        assert model_probability((0.5 * PI, 0.3), p, "A", 0) == pytest.approx(0.55, abs=1e-15)

    def test_experiment_row_b(self):
        got = model_probability((0.5 * PI, 0.0), EXPERIMENT, "B", 0)
        ref = mp_model_probability(0.5 * PI, 0.0, EXPERIMENT.to_dict(), "B", 0)
        assert got == pytest.approx(ref, abs=1e-15)
        expected = 0.5 * (1 + 0.0016 + 0.99 * math.sin(0.5 * PI + 0.00023) * math.cos(0.0078))
        assert got == pytest.approx(expected, abs=1e-15)

    def test_against_mpmath(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            params = random_feasible(rng)
            theta, phi = rng.uniform(0, PI), rng.uniform(0, 2 * PI)
            for which in "AB":
                for a in (0, 1):
                    ref = mp_model_probability(theta, phi, params.to_dict(), which, a)
                    assert model_probability((theta, phi), params, which, a) == pytest.approx(ref, abs=1e-14)

    def test_normalized(self):
        rng = np.random.default_rng(1)
        p = model_probabilities(rng.uniform(0, PI, 100), rng.uniform(0, 2 * PI, 100), random_feasible(rng))
        assert np.allclose(p.sum(axis=2), 1.0, atol=1e-15)
        assert (p >= 0).all() and (p <= 1).all()

    def test_rejects_infeasible(self):
        with pytest.raises(ValueError):
            model_probability((1.0, 0.0), ErrorModelParams(xB=0.5), "B", 0)
        with pytest.raises(ValueError):
            model_probability((1.0, 0.0), NO_ERROR, "C", 0)


class TestLattice:
    def test_two_rows(self):
        lat = build_lattice_prior(2, 3)
        assert np.allclose(lat.weights, 1 / 6)
        assert (lat.thetas > 0).all() and (lat.thetas < PI).all()

    def test_normalized(self):
        lat = build_lattice_prior(30, 30)
        assert lat.weights.sum() == pytest.approx(1.0, abs=1e-10)
        assert (lat.weights > 0).all()

    def test_riemann_limit(self):
        lat = build_lattice_prior(100, 1)
        assert abs(np.sin(lat.thetas).sum() * PI / 100 - 2) <= 1e-3
        big = build_lattice_prior(400, 20)
        assert big.normalization == pytest.approx(2 * 20 * 400 / PI, rel=1e-5)

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            build_lattice_prior(1, 5)


class TestObjective:
    def setup_method(self):
        self.lattice = build_lattice_prior(12, 12)

    def test_self_zero(self):
        for params in (NO_ERROR, EXPERIMENT):
            data = synthetic_dataset(params, self.lattice, 1000.0)
            assert abs(kl_objective(data, params)) <= 1e-12

    def test_mismatch_positive(self):
        data = synthetic_dataset(NO_ERROR, self.lattice, 1000.0)
        assert kl_objective(data, EXPERIMENT) > 0

    def test_zero_probability_infinite(self):
        data = FrequencyDataset([0.0], [0.0], [[[0.0, 10.0], [5.0, 5.0]]])
        assert kl_objective(data, NO_ERROR) == math.inf

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_gibbs(self, seed):
        rng = np.random.default_rng(seed)
        lat = build_lattice_prior(4, 5)
        th, ph = lat.cells
        counts = rng.integers(0, 50, (th.size, 2, 2)) + 1
        data = FrequencyDataset(th, ph, counts)
        assert kl_objective(data, random_feasible(rng)) >= 0

    def test_gradient_is_minus_loglik_gradient(self):
        rng = np.random.default_rng(3)
        data = synthetic_dataset(EXPERIMENT, self.lattice, 10**4, rng)
        for _ in range(10):
            params = random_feasible(rng)
            grad = kl_gradient(data, params)
            vec = params.as_vector()
            for k in range(12):
                def ll(t, k=k):
                    v = vec.copy()
                    v[k] = t
                    return log_likelihood(data, ErrorModelParams.from_vector(v))
                assert abs(grad[k] + fd(ll, vec[k], 1e-6)) <= 1e-6

    def test_gradient_matches_kl_fd(self):
        rng = np.random.default_rng(4)
        data = synthetic_dataset(EXPERIMENT, self.lattice, 10**4, rng)
        params = random_feasible(rng)
        vec = params.as_vector()
        for k in range(12):
            def kl(t, k=k):
                v = vec.copy()
                v[k] = t
                return kl_objective(data, ErrorModelParams.from_vector(v))
            assert kl_gradient(data, params)[k] == pytest.approx(fd(kl, vec[k]), abs=1e-7)


class TestProject:
    def test_feasible_unchanged(self):
        vec = EXPERIMENT.as_vector()
        assert np.array_equal(project(vec), vec)

    def test_projection_feasible(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            vec = NO_ERROR.as_vector() + rng.normal(0, 0.5, 12)
            out = project(vec)
            assert constraint_violation(out) <= 1e-12
            assert 0.9 <= out[2] <= 1.1 and 0.9 <= out[3] <= 1.1


class TestFit:
    def test_no_error_recovery(self):
        data = synthetic_dataset(NO_ERROR, build_lattice_prior(20, 20), 10**5, np.random.default_rng(6))
        fit = fit_parameters(data, init=with_params(NO_ERROR, theta0=0.01, xB=0.005, muB=0.99), n_starts=2)
        assert fit.params.feasible
        got, want = fit.params.as_vector(), NO_ERROR.as_vector()
        # phiA has no meaning while the A axis sits on the pole
        mask = np.array([n != "phiA" for n in PARAM_NAMES])
        assert np.abs(got - want)[mask].max() <= 1e-3

    def test_noiseless_experiment_recovery(self):
        data = synthetic_dataset(EXPERIMENT, build_lattice_prior(8, 16), 1.0)
        fit = fit_parameters(data, n_starts=2)
        assert fit.converged and fit.objective <= 1e-14
        for name in PARAM_NAMES:
            if name != "phiA":
                assert getattr(fit.params, name) == pytest.approx(getattr(EXPERIMENT, name), abs=1e-6)
        assert np.allclose(fit.params.axis("A"), EXPERIMENT.axis("A"), atol=1e-6)
        assert fit.n_flat_directions == 1

    def test_iterates_feasible_and_monotone(self):
        data = synthetic_dataset(EXPERIMENT, build_lattice_prior(10, 10), 10**4, np.random.default_rng(7))
        seen = []
        fit = fit_parameters(data, n_starts=3, trace=seen)
        assert seen
        assert all(constraint_violation(v) <= 1e-12 for v in seen)
        assert all(b <= a + 1e-15 for a, b in zip(fit.history, fit.history[1:]))
        assert fit.objective <= fit.init_objective
        assert fit.projected_gradient_norm <= 1e-6

    def test_fixed_parameters(self):
        data = synthetic_dataset(EXPERIMENT, build_lattice_prior(8, 8), 1.0)
        fit = fit_parameters(data, fixed=DEFAULT_FIXED + ("theta1", "phi1"), n_starts=1)
        assert fit.params.theta1 == 1.0 and fit.params.phi1 == 1.0 and fit.params.phiB == 0.0

    def test_single_cell_flat(self):
        data = FrequencyDataset([1.0], [0.5], [[[60.0, 40.0], [30.0, 70.0]]])
        with pytest.warns(UserWarning):
            fit = fit_parameters(data, n_starts=1)
        assert fit.n_flat_directions >= 8
        assert fit.objective <= fit.init_objective

    def test_infeasible_init(self):
        data = synthetic_dataset(NO_ERROR, build_lattice_prior(5, 5), 1.0)
        with pytest.raises(ValueError):
            fit_parameters(data, init=ErrorModelParams(xA=0.5))

    def test_unknown_fixed(self):
        data = synthetic_dataset(NO_ERROR, build_lattice_prior(5, 5), 1.0)
        with pytest.raises(ValueError):
            fit_parameters(data, fixed=("nope",))

    def test_result_dict(self):
        data = synthetic_dataset(NO_ERROR, build_lattice_prior(5, 5), 1.0)
        d = fit_parameters(data, n_starts=1).to_dict()
        assert set(d["parameters"]) == set(PARAM_NAMES)
        assert {"objective", "iterations", "converged"} <= set(d)


class TestCsv:
    def test_round_trip(self, tmp_path):
        data = synthetic_dataset(EXPERIMENT, build_lattice_prior(5, 4), 1000, np.random.default_rng(8))
        path = tmp_path / "freq.csv"
        data.to_csv(path)
        back = FrequencyDataset.from_csv(path)
        assert np.array_equal(back.theta, data.theta)
        assert np.array_equal(back.counts, data.counts)

    def test_float_counts_round_trip(self):
        data = synthetic_dataset(EXPERIMENT, build_lattice_prior(3, 3), 1.0)
        back = FrequencyDataset.from_csv_text(data.to_csv())
        assert np.array_equal(back.counts, data.counts)

    @pytest.mark.parametrize(
        "text, line",
        [
            ("theta,phi,meas,outcome,count\n", 1),
            ("theta_s,phi_s,meas,outcome,count\n0.1,0.2,A,0\n", 2),
            ("theta_s,phi_s,meas,outcome,count\n0.1,0.2,A,0,5\n0.1,0.2,C,1,5\n", 3),
            ("theta_s,phi_s,meas,outcome,count\n0.1,0.2,A,2,5\n", 2),
            ("theta_s,phi_s,meas,outcome,count\n0.1,x,A,0,5\n", 2),
            ("theta_s,phi_s,meas,outcome,count\n0.1,0.2,A,0,-5\n", 2),
        ],
    )
    def test_errors_name_line(self, text, line):
        with pytest.raises(DatasetFormatError, match=f"line {line}"):
            FrequencyDataset.from_csv_text(text)

    def test_missing_measurement(self):
        with pytest.raises(DatasetFormatError):
            FrequencyDataset.from_csv_text("theta_s,phi_s,meas,outcome,count\n0.1,0.2,A,0,5\n")
