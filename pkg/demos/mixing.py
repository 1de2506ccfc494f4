"""Depolarization as a forward mixture of Pauli-conjugated probes.

A depolarized probe is lam rho + (1 - lam)/3 (X rho X + Y rho Y + Z rho Z).
Sampling the mixture directly must give the same expectation values as
weighting the four component ensembles.

    python demos/mixing.py
"""
import numpy as np

from coqm.qubit import MEAS_A, MEAS_B, BlochState, ProbeAngles, bloch_from_angles, consecutive_context_dist, \
    depolarize, pauli_conjugate
from coqm.simulator import mixing_functional_check

lam = 0.9
state = bloch_from_angles(ProbeAngles(np.pi / 5, np.pi / 2))
components = [state] + [pauli_conjugate(state, k) for k in range(3)]
weights = [lam] + [(1 - lam) / 3] * 3
tables = [consecutive_context_dist(s, MEAS_A, MEAS_B).p.ravel() for s in components]

# the mixture is the same as depolarizing the Bloch vector
mixed = sum(w * t for w, t in zip(weights, tables))
direct = consecutive_context_dist(depolarize(state, lam), MEAS_A, MEAS_B).p.ravel()
print("max |mixture - depolarized| =", np.abs(mixed - direct).max())

rng = np.random.default_rng(11)
functions = rng.uniform(-1, 1, size=(20, 4))
deviation, bound = mixing_functional_check(list(zip(tables, weights)), functions, 100_000, rng)
print(f"{np.sum(np.abs(deviation) <= bound)}/{len(deviation)} functions within 5 sigma; "
      f"largest |dev|/bound = {np.max(np.abs(deviation) / bound):.3f}")
