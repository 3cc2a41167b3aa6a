"""Seeded simulation scenarios and a replication harness.

Random numbers come from numpy's counter-based ``Philox`` bit generator.
Replication ``k`` of a run with seed ``s`` uses the ``k``-th child of
``SeedSequence(s)``, so any replication can be regenerated on its own and
results do not depend on how replications are scheduled.
"""

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import constrain
from .errors import UnknownScenario
from .gmodel import DiscreteDistribution, npmle, prior_moments, smooth_npmle
from .models import (
    Dataset,
    GaussianHeteroscedastic,
    GaussianHomoscedastic,
    PoissonExposure,
    conjugate_bayes,
    conjugate_vcb,
    make_rng,
)

FIGURE1_CENTERS = np.array([[-1.5, -1.5], [1.5, 1.5]])


def figure1(rng, n=2000, tau2=0.1, sigma2=1.0, centers=FIGURE1_CENTERS):
    """Two-component Gaussian mixture in the plane.

    ``Θ ~ ½ N(c_1, τ² I) + ½ N(c_2, τ² I)`` and ``Z | Θ ~ N(Θ, σ² I)``.
    """
    centers = np.asarray(centers, dtype=float)
    m = centers.shape[1]
    label = rng.integers(0, centers.shape[0], size=n)
    theta = centers[label] + np.sqrt(tau2) * rng.standard_normal((n, m))
    model = GaussianHomoscedastic(sigma2 * np.eye(m))
    z = model.sample(theta, rng)
    return Dataset(z, model, theta, meta={"scenario": "figure1", "tau2": tau2, "sigma2": sigma2})


def figure1_truth(tau2=0.1, centers=FIGURE1_CENTERS):
    """Mean and covariance of the latent mixture of the ``figure1`` scenario."""
    centers = np.asarray(centers, dtype=float)
    mean = centers.mean(0)
    dev = centers - mean
    return mean, tau2 * np.eye(centers.shape[1]) + dev.T @ dev / centers.shape[0]


def figure7(rng, n=1500, variances=(0.5, 8.0)):
    """Heteroscedastic normal means: ``Θ ~ N(0, 1)``, ``σ_i²`` uniform on ``variances``."""
    theta = rng.standard_normal((n, 1))
    s2 = np.asarray(variances, dtype=float)[rng.integers(0, len(variances), size=n)]
    model = GaussianHeteroscedastic(s2[:, None, None])
    z = model.sample(theta, rng)
    return Dataset(z, model, theta, meta={"scenario": "figure7", "variances": list(variances)})


def conjugate(rng, family="gaussian", n=100_000, **params):
    """Draw ``(z, θ)`` from a conjugate prior-likelihood pair (m = 1).

    gaussian
        ``Θ ~ N(mu, a2)``, ``Z ~ N(Θ, sigma2)``.
    poisson
        ``Θ ~ Gamma(shape, scale)``, ``Z ~ Poi(Θ)``.
    exponential
        ``Θ ~ InvGamma(shape, scale)``, ``Z ~ Exp(mean Θ)``.
    geometric
        ``Θ`` the mean of a geometric count on ``{0, 1, ...}`` with success
        probability ``p ~ Beta(alpha, beta)``.

    Returns a dict with ``z``, ``theta``, ``family`` and ``noise_var``.
    """
    if family == "gaussian":
        mu, a2, s2 = params.get("mu", 0.0), params.get("a2", 1.0), params.get("sigma2", 1.0)
        theta = mu + np.sqrt(a2) * rng.standard_normal(n)
        z = theta + np.sqrt(s2) * rng.standard_normal(n)
        return {"z": z, "theta": theta, "family": family, "noise_var": s2}
    if family == "poisson":
        theta = rng.gamma(params.get("shape", 3.0), params.get("scale", 1.0), size=n)
        return {"z": rng.poisson(theta).astype(float), "theta": theta, "family": family, "noise_var": None}
    if family == "exponential":
        theta = 1.0 / rng.gamma(params.get("shape", 5.0), 1.0 / params.get("scale", 4.0), size=n)
        return {"z": rng.exponential(theta), "theta": theta, "family": family, "noise_var": None}
    if family == "geometric":
        p = rng.beta(params.get("alpha", 6.0), params.get("beta", 2.0), size=n)
        theta = (1.0 - p) / p
        return {"z": rng.geometric(p).astype(float) - 1.0, "theta": theta, "family": family, "noise_var": None}
    raise UnknownScenario(f"unknown conjugate family {family!r}")


def custom(rng, n=1000, prior=None, model="gaussian", noise_cov=1.0, exposure=1.0):
    """Draw from a discrete prior ``{"atoms", "weights"}`` and a named likelihood."""
    if prior is None:
        raise UnknownScenario("the custom scenario needs a prior with atoms and weights")
    G = prior if isinstance(prior, DiscreteDistribution) else DiscreteDistribution(prior["atoms"], prior["weights"])
    theta = G.atoms[rng.choice(G.size, size=n, p=G.weights)]
    m = G.dim
    if model == "gaussian":
        cov = np.asarray(noise_cov, dtype=float)
        lik = GaussianHomoscedastic(cov * np.eye(m) if cov.ndim == 0 else cov)
    elif model == "poisson":
        lik = PoissonExposure(np.broadcast_to(np.asarray(exposure, dtype=float), (n, m)).copy())
    else:
        raise UnknownScenario(f"unknown likelihood {model!r} for the custom scenario")
    return Dataset(lik.sample(theta, rng), lik, theta, meta={"scenario": "custom"})


SCENARIOS = {"figure1": figure1, "figure7": figure7, "conjugate": conjugate, "custom": custom}

DEFAULT_METHODS = {
    "figure1": ("B", "VCB", "DCB"),
    "figure7": ("B", "MVCB", "CVCB", "MDCB"),
    "conjugate": ("B", "conjugate"),
    "custom": ("B", "VCB", "DCB"),
}


def parse_scenario(name):
    """Split ``"conjugate(poisson)"`` into ``("conjugate", {"family": "poisson"})``."""
    name = name.strip()
    if "(" in name and name.endswith(")"):
        base, arg = name[:-1].split("(", 1)
        if base != "conjugate":
            raise UnknownScenario(f"unknown scenario {name!r}")
        return base, {"family": arg.strip()}
    if name not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return name, {}


def fit_prior(data, scenario, opts):
    """Scenario-appropriate prior fit (smooth NPMLE for the ``figure1`` scenario)."""
    fit_kw = {"kkt_tol": opts.get("kkt_tol", 1e-4)}
    if scenario == "figure1":
        return smooth_npmle(data, kernel_cov=opts.get("kernel_cov", opts.get("tau2", 0.1)), **fit_kw)
    return npmle(data, grid=opts.get("grid", "exemplar"), k=opts.get("grid_k", 50), **fit_kw)


def _group_variances(values, data):
    labels, xis = constrain.heterogeneity_groups(data.model, data.n)
    out = {}
    for g, xi in enumerate(xis):
        key = "all" if xi is None else f"{float(np.ravel(xi)[0]):g}"
        v = values[labels == g]
        out[f"var_group_{key}"] = float(np.var(v[:, 0], ddof=1)) if v.shape[0] > 1 else float("nan")
    return out


def run_replication(scenario, seed_seq, methods=None, n=None, params=None, opts=None):
    """One replication: draw data, fit the prior, run each method.

    Returns ``(rows, scatter)`` where ``rows`` holds one metrics dict per
    method and ``scatter`` the latent, observed and denoised points.
    """
    params = dict(params or {})
    opts = dict(opts or {})
    if n is not None:
        params["n"] = int(n)
    rng = make_rng(seed_seq)
    methods = tuple(methods or DEFAULT_METHODS[scenario])
    rows, scatter = [], {}
    if scenario == "conjugate":
        draw = conjugate(rng, **params)
        z, theta = draw["z"], draw["theta"]
        scatter["latent"], scatter["observed"] = theta[:, None], z[:, None]
        for method in methods:
            if method == "B":
                den = conjugate_bayes(draw["family"], z, draw["noise_var"])
            elif method == "conjugate":
                den = conjugate_vcb(draw["family"], z, draw["noise_var"])
            else:
                raise UnknownScenario(f"method {method!r} is not available for conjugate scenarios")
            vals = den(z)
            scatter[method] = vals[:, None]
            rows.append(
                {
                    "method": method,
                    "risk": float(np.mean((vals - theta) ** 2)),
                    "mean": float(vals.mean()),
                    "var": float(vals.var(ddof=1)),
                    "slope": float(den.slope[0, 0]),
                    "intercept": float(den.intercept[0]),
                }
            )
        return rows, scatter
    data = SCENARIOS[scenario](rng, **params)
    prior = fit_prior(data, scenario, {**params, **opts})
    scatter["latent"], scatter["observed"] = data.latents, data.standardized
    child = seed_seq.spawn(1)[0]
    for method in methods:
        kw = {}
        if method == "CVCB":
            kw = {"mc_samples": opts.get("mc_samples", 100), "seed": child}
        rep = constrain.denoise(method, data, prior=prior, **kw)
        scatter[method] = rep.values
        metrics = constrain.diagnostics(rep, data, prior)
        metrics.pop("constraint_residuals", None)
        row = {"method": rep.method, "risk": metrics.pop("empirical_risk")}
        row.update(metrics)
        if rep.objective is not None:
            row["objective"] = rep.objective
        if data.model.heterogeneous:
            row.update(_group_variances(rep.values, data))
        if data.m == 1:
            row["var"] = float(np.var(rep.values[:, 0], ddof=1))
        rows.append(row)
    mean, cov = prior_moments(prior)
    for row in rows:
        row["prior_trace"] = float(np.trace(cov))
    return rows, scatter


def _run_one(args):
    k, scenario, ss, methods, n, params, opts = args
    rows, scatter = run_replication(scenario, ss, methods, n, params, opts)
    for row in rows:
        row["replication"] = k
    return rows, scatter


def simulate(scenario, seed=0, replications=1, methods=None, n=None, workers=1, params=None, opts=None):
    """Run ``replications`` independent replications of a scenario.

    Parameters
    ----------
    scenario : str
        ``"figure1"``, ``"figure7"``, ``"conjugate(<family>)"`` or ``"custom"``.
    seed : int
    replications : int
    methods : sequence of str, optional
        Denoisers to run; defaults depend on the scenario.
    n : int, optional
        Sample size override.
    workers : int
        Processes used for replications. Results are ordered by replication
        index whatever the value.
    params, opts : dict, optional
        Scenario parameters and fitting options.

    Returns
    -------
    rows : list of dict
        One record per replication and method.
    scatters : list of dict
        Per replication, arrays keyed by ``"latent"``, ``"observed"`` and the
        method tags.
    """
    base, extra = parse_scenario(scenario)
    params = {**extra, **(params or {})}
    children = np.random.SeedSequence(seed).spawn(replications)
    jobs = [(k, base, ss, methods, n, params, opts) for k, ss in enumerate(children)]
    if workers > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    rows = [row for r, _ in results for row in r]
    return rows, [s for _, s in results]
