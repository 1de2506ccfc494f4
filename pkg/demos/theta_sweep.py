"""Monte Carlo estimation of theta near the equator.

Runs the MLE on sampled virtual counts for a few probe angles and compares the
reported error with the conventional bound 1/sqrt(2 n_s). Then shows how the
failure rate (negative virtual counts) falls with sample size.

    python demos/theta_sweep.py
"""
import numpy as np

from coqm.simulator import ExperimentConfig, run_sample_size_sweep, run_theta_sweep

phi = 0.15 * np.pi
config = ExperimentConfig(kind="theta_sweep", thetas=np.array([0.49, 0.5, 0.51]) * np.pi, phis=(phi,),
                          n_s=100_000, trials=200, seed=1)
print("theta/pi   mean_est/pi   mean_error   ideal_error   crb_bound   std_est")
for row in run_theta_sweep(config):
    print(f"{row.theta / np.pi:8.3f}   {row.mean_estimate / np.pi:11.5f}   {row.mean_error:.3e}    "
          f"{row.ideal_error:.3e}     {row.crb_bound:.3e}   {row.std_estimate:.3e}")

# mean_error is what the observed information predicts; std_est is the real spread
# of the estimates and it stays above the bound

sizes = (100, 1000, 10_000, 100_000)
config = ExperimentConfig(kind="sample_size", thetas=(0.5 * np.pi,), phis=(0.1 * np.pi,), sizes=sizes,
                          trials=300, seed=2)
print("\n   n_s   failure_rate   mean_error * sqrt(n_s)")
for row in run_sample_size_sweep(config):
    scaled = row.mean_error * np.sqrt(row.n_s) if row.n_success else float("nan")
    print(f"{row.n_s:6d}   {row.failure_rate:12.3f}   {scaled:.4f}")
