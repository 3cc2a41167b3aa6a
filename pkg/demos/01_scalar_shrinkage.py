"""Scalar Gaussian denoising: Bayes, variance-constrained and distribution-constrained.

Latent values are standard normal and each is observed with unit Gaussian
noise. The posterior mean shrinks by one half, so its spread is too small to
describe the latent population. The constrained denoisers trade a little
risk for outputs whose spread matches the fitted prior.

Run with ``python demos/01_scalar_shrinkage.py``.
"""

import numpy as np

from constrained_eb import constrain
from constrained_eb.gmodel import npmle, prior_moments
from constrained_eb.models import Dataset, GaussianHomoscedastic, make_rng

# %% simulate
rng = make_rng(0)
n = 2000
theta = rng.standard_normal(n)
data = Dataset(theta + rng.standard_normal(n), GaussianHomoscedastic(1.0), theta)

# %% fit the prior by nonparametric maximum likelihood on a lattice
prior = npmle(data, grid="lattice", k=200)
mean, cov = prior_moments(prior)
print(f"fitted prior: {prior.size} atoms, mean {mean[0]:+.3f}, variance {cov[0, 0]:.3f}")

# %% denoise three ways
print(f"{'method':>6} {'variance':>9} {'risk':>7}")
for method in ("bayes", "VCB", "DCB"):
    report = constrain.denoise(method, data, prior=prior)
    values = report.values[:, 0]
    risk = constrain.diagnostics(report, data)["empirical_risk"]
    print(f"{method:>6} {np.var(values, ddof=1):9.3f} {risk:7.3f}")

# %% the VCB map is affine; with a N(0, 1) prior its slope on z is close to 1/sqrt(2)
vcb = constrain.variance_constrained(data, prior=prior).values[:, 0]
slope = np.polyfit(data.z[:, 0], vcb, 1)[0]
print(f"VCB slope on z: {slope:.3f} (1/sqrt(2) = {1 / np.sqrt(2):.3f})")
