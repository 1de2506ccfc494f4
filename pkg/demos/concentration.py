"""Sugar concentration from the optical rotation of the probe.

A solution of concentration c rotates the polar angle by alpha * l * c. The
estimated theta is mapped back to c and its error to dc.

    python demos/concentration.py
"""
import numpy as np

from coqm.estimator import concentration_to_rotation
from coqm.simulator import ExperimentConfig, run_concentration

concentrations = (0.0, 0.1, 0.3, 0.5)
for c in concentrations:
    print(f"c = {c:.1f} g/mL rotates the probe by {concentration_to_rotation(c):+.4f} rad")

config = ExperimentConfig(kind="concentration", concentrations=concentrations, phis=(0.15 * np.pi,),
                          n_s=100_000, trials=50, seed=3)
print("\nc_true   c_hat_mean   c_hat_std    dc_mean     dc_bound")
for s in run_concentration(config):
    print(f"{s.c_true:6.2f}   {s.c_hat_mean:10.5f}   {s.c_hat_std:.3e}   {s.dc_mean:.3e}   {s.dc_bound:.3e}")
