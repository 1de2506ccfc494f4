"""Where does a quasiprobability probe beat the conventional bound?

Walks over the Bloch sphere, prints the error ratio R = dtheta_co / dtheta_q
in dB for a coarse grid, and marks the cells where the quasiprobability
goes negative (no estimator is defined there).

    python demos/landscape.py
"""
import numpy as np

from coqm.quasiprob import analytic_w, negativity
from coqm.simulator import ExperimentConfig, run_landscape

thetas = np.linspace(0.05, 0.95, 10) * np.pi
phis = np.linspace(0.0, 1.0, 11) * np.pi
cells = run_landscape(ExperimentConfig(kind="landscape", thetas=thetas, phis=phis))

# one row per theta, one column per phi; '  neg ' where w < 0 somewhere
print("phi/pi ->")
print("theta/pi |" + "".join(f"{p / np.pi:7.2f}" for p in phis))
for i, theta in enumerate(thetas):
    row = cells[i * len(phis):(i + 1) * len(phis)]
    text = "".join("    neg" if c.R is None else f"{c.R:7.2f}" for c in row)
    print(f"{theta / np.pi:8.2f} |{text}")

# the best cell on the grid
best = min((c for c in cells if c.R is not None), key=lambda c: c.R)
print(f"\nlowest R on this grid: {best.R:.3f} dB at theta={best.theta / np.pi:.2f}pi, phi={best.phi / np.pi:.2f}pi")

# the operating point used by the sweeps: all four entries positive
w = analytic_w(0.5 * np.pi, 0.15 * np.pi)
print("w at (pi/2, 0.15pi):")
print(np.round(w, 4))
print("negativity:", negativity(w))
