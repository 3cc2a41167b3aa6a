"""Likelihood families, datasets and closed-form conjugate denoisers.

Three likelihoods are supported by the nonparametric pipeline:

* :class:`GaussianHomoscedastic` -- ``Z | Θ ~ N(Θ, Σ)`` with one known ``Σ``;
* :class:`GaussianHeteroscedastic` -- ``Z_i | Θ_i ~ N(Θ_i, Σ_i)``;
* :class:`PoissonExposure` -- ``Z_ij | Θ_i ~ Poi(λ_ij Θ_ij)`` independently
  over components.

All of them are mean-parameterised after standardisation: the pipeline works
with ``Z / λ`` in the Poisson case so that ``E[Z / λ | Θ] = Θ``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import bures
from .errors import (
    DegenerateSample,
    DimensionError,
    DomainError,
    EmptyDataset,
    SingularCovariance,
)

LOG_2PI = np.log(2.0 * np.pi)
POISSON_FLOOR = 1e-12


def _chol(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("noise covariance is not positive definite") from exc


class LikelihoodModel:
    """Common interface of the likelihood families."""

    kind = "abstract"

    @property
    def heterogeneous(self):
        return False

    def standardize(self, z):
        return np.asarray(z, dtype=float)

    def log_likelihood_matrix(self, z, atoms):
        """``(n, r)`` matrix of ``log p_{θ_j}(z_i)`` for raw observations ``z``."""
        raise NotImplementedError

    def sample(self, theta, rng):
        """Draw one raw observation per row of ``theta``."""
        raise NotImplementedError

    def row_params(self, i):
        """Heterogeneity value of row ``i`` (``None`` for homogeneous models)."""
        return None

    def subset(self, idx):
        return self

    def at(self, xi, n):
        """Model with ``n`` rows that all share heterogeneity value ``xi``."""
        return self


@dataclass
class GaussianHomoscedastic(LikelihoodModel):
    noise_cov: np.ndarray
    kind = "gaussian"

    def __post_init__(self):
        self.noise_cov = bures.check_symmetric(self.noise_cov)
        bures.psd_sqrt(self.noise_cov)

    @property
    def dim(self):
        return self.noise_cov.shape[0]

    def row_cov(self, i):
        return self.noise_cov

    def log_likelihood_matrix(self, z, atoms):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        C = _chol(self.noise_cov)
        logdet = 2.0 * np.log(np.diag(C)).sum()
        # whitened coordinates make the quadratic form a plain squared distance
        zw = np.linalg.solve(C, z.T).T
        aw = np.linalg.solve(C, atoms.T).T
        d2 = ((zw[:, None, :] - aw[None, :, :]) ** 2).sum(-1)
        m = z.shape[1]
        return -0.5 * (d2 + logdet + m * LOG_2PI)

    def sample(self, theta, rng):
        theta = np.atleast_2d(theta)
        C = np.linalg.cholesky(self.noise_cov + 0.0)
        return theta + rng.standard_normal(theta.shape) @ C.T

    def inflated(self, extra_cov):
        return GaussianHomoscedastic(self.noise_cov + bures.check_symmetric(extra_cov))


@dataclass
class GaussianHeteroscedastic(LikelihoodModel):
    noise_covs: np.ndarray
    kind = "gaussian-het"

    def __post_init__(self):
        covs = np.asarray(self.noise_covs, dtype=float)
        if covs.ndim == 1:
            covs = covs[:, None, None]
        if covs.ndim != 3 or covs.shape[1] != covs.shape[2]:
            raise DimensionError(f"expected (n, m, m) covariances, got {covs.shape}")
        self.noise_covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))

    @property
    def heterogeneous(self):
        return True

    @property
    def dim(self):
        return self.noise_covs.shape[1]

    def __len__(self):
        return self.noise_covs.shape[0]

    def row_cov(self, i):
        return self.noise_covs[i]

    def row_params(self, i):
        return self.noise_covs[i]

    def subset(self, idx):
        return GaussianHeteroscedastic(self.noise_covs[idx])

    def at(self, xi, n):
        xi = bures.as_matrix(xi)
        return GaussianHeteroscedastic(np.broadcast_to(xi, (n,) + xi.shape).copy())

    def log_likelihood_matrix(self, z, atoms):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        if z.shape[0] != len(self):
            raise DimensionError(f"{z.shape[0]} observations but {len(self)} covariances")
        try:
            C = np.linalg.cholesky(self.noise_covs)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance("a row noise covariance is not positive definite") from exc
        logdet = 2.0 * np.log(np.diagonal(C, axis1=1, axis2=2)).sum(1)
        m = z.shape[1]
        if m == 1:
            sd = C[:, 0, 0]
            d2 = ((z - atoms[:, 0][None, :]) / sd[:, None]) ** 2
        else:
            diff = z[:, None, :] - atoms[None, :, :]  # (n, r, m)
            w = np.linalg.solve(C, np.swapaxes(diff, 1, 2))  # (n, m, r)
            d2 = (w**2).sum(1)
        return -0.5 * (d2 + logdet[:, None] + m * LOG_2PI)

    def sample(self, theta, rng):
        theta = np.atleast_2d(theta)
        C = np.linalg.cholesky(self.noise_covs)
        eps = rng.standard_normal(theta.shape)
        return theta + np.einsum("nij,nj->ni", C, eps)

    def inflated(self, extra_cov):
        return GaussianHeteroscedastic(self.noise_covs + bures.check_symmetric(extra_cov)[None])


@dataclass
class PoissonExposure(LikelihoodModel):
    """Independent Poisson components with rate ``exposure * θ``."""

    exposure: np.ndarray
    kind = "poisson"

    def __post_init__(self):
        lam = np.asarray(self.exposure, dtype=float)
        if lam.ndim == 1:
            lam = lam[:, None]
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise DomainError("exposures must be strictly positive")
        self.exposure = lam

    @property
    def heterogeneous(self):
        return True

    @property
    def dim(self):
        return self.exposure.shape[1]

    def __len__(self):
        return self.exposure.shape[0]

    def row_params(self, i):
        return self.exposure[i]

    def subset(self, idx):
        return PoissonExposure(self.exposure[idx])

    def at(self, xi, n):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        return PoissonExposure(np.broadcast_to(xi, (n, xi.size)).copy())

    def standardize(self, z):
        return np.asarray(z, dtype=float) / self.exposure

    def log_likelihood_matrix(self, z, atoms):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        if np.any(atoms < 0):
            raise DomainError("Poisson means must be non-negative")
        theta = np.maximum(atoms, POISSON_FLOOR)
        out = np.zeros((z.shape[0], atoms.shape[0]))
        for k in range(z.shape[1]):
            rate = self.exposure[:, k, None] * theta[None, :, k]
            out += z[:, k, None] * np.log(rate) - rate - gammaln(z[:, k, None] + 1.0)
        return out

    def sample(self, theta, rng):
        theta = np.atleast_2d(theta)
        return rng.poisson(self.exposure * theta).astype(float)


@dataclass
class Dataset:
    """Observations together with the likelihood that generated them.

    ``z`` holds raw observations (counts for Poisson); ``standardized`` is the
    mean-parameterised version used by every denoiser.
    """

    z: np.ndarray
    model: LikelihoodModel
    latents: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        self.z = z
        if z.shape[0] == 0:
            raise EmptyDataset("dataset has no observations")
        if z.shape[1] != self.model.dim:
            raise DimensionError(f"observations have dimension {z.shape[1]}, model {self.model.dim}")
        if self.model.heterogeneous and len(self.model) != z.shape[0]:
            raise DimensionError("heterogeneity parameters do not match the number of rows")
        if isinstance(self.model, PoissonExposure):
            if np.any(z < 0) or np.any(z != np.round(z)):
                raise DomainError("Poisson observations must be non-negative integers")
        if self.latents is not None:
            lat = np.asarray(self.latents, dtype=float)
            self.latents = lat[:, None] if lat.ndim == 1 else lat

    @property
    def n(self):
        return self.z.shape[0]

    @property
    def m(self):
        return self.z.shape[1]

    @property
    def standardized(self):
        return self.model.standardize(self.z)

    def subset(self, idx):
        lat = None if self.latents is None else self.latents[idx]
        return Dataset(self.z[idx], self.model.subset(idx), lat)


@dataclass
class AffineDenoiser:
    """The map ``x -> slope @ x + intercept`` applied row-wise."""

    slope: np.ndarray
    intercept: np.ndarray

    def __post_init__(self):
        self.slope = bures.as_matrix(self.slope) if np.ndim(self.slope) < 2 else np.asarray(self.slope, float)
        self.intercept = np.atleast_1d(np.asarray(self.intercept, dtype=float))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.intercept.size == 1:
            return x * self.slope[0, 0] + self.intercept[0]
        return np.atleast_2d(x) @ self.slope.T + self.intercept

    def to_dict(self):
        return {"slope": self.slope.tolist(), "intercept": self.intercept.tolist()}


def log_density(model, row_index, z, theta):
    """Log-density of the row's likelihood ``P_{θ}`` (or ``P_{θ,ξ_i}``) at ``z``.

    ``z`` is on the raw scale (counts for Poisson).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if isinstance(model, PoissonExposure):
        if np.any(theta < 0):
            raise DomainError("Poisson means must be non-negative")
        lam = model.exposure[row_index]
        rate = lam * theta
        with np.errstate(divide="ignore"):
            terms = np.where(z > 0, z * np.log(rate), 0.0) - rate - gammaln(z + 1.0)
        return float(terms.sum())
    S = model.row_cov(row_index)
    C = _chol(S)
    w = np.linalg.solve(C, z - theta)
    return float(-0.5 * (w @ w) - np.log(np.diag(C)).sum() - 0.5 * z.size * LOG_2PI)


def estimate_noise_cov(model, data):
    """Estimate ``Σ = E[Cov(Z | Θ)]`` on the standardised scale.

    Gaussian models return the known covariance (or the average of the row
    covariances). For Poisson with exposure the diagonal entries are the
    plug-in means ``(1/n) Σ_i Z_ij / λ_ij²``.
    """
    if data.n == 0:
        raise EmptyDataset("cannot estimate a covariance from no data")
    if isinstance(model, GaussianHomoscedastic):
        return model.noise_cov.copy()
    if isinstance(model, GaussianHeteroscedastic):
        return model.noise_covs.mean(0)
    if isinstance(model, PoissonExposure):
        return np.diag((data.z / model.exposure**2).mean(0))
    raise TypeError(f"unsupported model {type(model).__name__}")


# Variance functions V(θ) of the mean-parameterised conjugate families, with
# the constant V''(0) / 2 that appears in the posterior-mean denominator.
CONJUGATE_FAMILIES = {
    "gaussian": (None, 0.0),
    "poisson": (lambda mu: mu, 0.0),
    "exponential": (lambda mu: mu**2, 1.0),
    "geometric": (lambda mu: mu + mu**2, 1.0),
}


def _scalar_sample(data):
    z = data.standardized if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        if z.shape[1] != 1:
            raise DimensionError("conjugate formulas are univariate")
        z = z[:, 0]
    if z.size < 2:
        raise EmptyDataset("need at least two observations")
    return z


def conjugate_bayes(family, data, noise_var=None):
    """Linear EB posterior mean for a conjugate family (univariate)."""
    z = _scalar_sample(data)
    mu, s2 = z.mean(), z.var(ddof=1)
    if s2 <= 0:
        raise DegenerateSample("sample variance is zero")
    V, half_curv = _variance_function(family, noise_var)
    c = (1.0 - V(mu) / s2) / (1.0 + half_curv)
    return AffineDenoiser([[c]], [(1.0 - c) * mu])


def _variance_function(family, noise_var):
    if family not in CONJUGATE_FAMILIES:
        raise ValueError(f"unknown conjugate family {family!r}")
    V, half_curv = CONJUGATE_FAMILIES[family]
    if family == "gaussian":
        if noise_var is None:
            raise ValueError("the Gaussian family needs the noise variance")
        V = lambda mu: float(noise_var)  # noqa: E731
    return V, half_curv


def conjugate_vcb(family, data, noise_var=None):
    """Closed-form empirical variance-constrained denoiser for m = 1.

    With sample mean ``μ̂`` and unbiased sample variance ``ŝ²`` the slope is
    ``sqrt((ŝ² - V(μ̂))_+ / ŝ²) / sqrt(1 + V''(0)/2)`` and the intercept
    ``(1 - slope) μ̂``. For the exponential family the positive part is applied
    as well, although the untruncated expression is the textbook one.

    Parameters
    ----------
    family : {"gaussian", "poisson", "exponential", "geometric"}
    data : Dataset or array_like
        Univariate observations.
    noise_var : float, optional
        Known likelihood variance, required for ``"gaussian"``.

    Returns
    -------
    AffineDenoiser
        Acting directly on the observations.
    """
    if isinstance(data, Dataset) and data.m != 1:
        raise DimensionError("conjugate formulas are univariate")
    z = _scalar_sample(data)
    mu, s2 = z.mean(), z.var(ddof=1)
    if s2 <= 0:
        raise DegenerateSample("sample variance is zero")
    V, half_curv = _variance_function(family, noise_var)
    slope = np.sqrt(max(s2 - V(mu), 0.0) / s2) / np.sqrt(1.0 + half_curv)
    return AffineDenoiser([[slope]], [(1.0 - slope) * mu])


def conditional_cov_of_bayes(model, prior, xi, center, mc_samples=100, seed=0):
    """Monte-Carlo estimate of ``Cov(δ_B(Z; Ξ) | Ξ = ξ)`` around ``center``.

    For every atom ``θ_j`` of the finitely supported ``prior``,
    ``mc_samples`` observations are drawn from ``P_{θ_j, ξ}``, the posterior
    mean under ``prior`` is evaluated at each draw, and the outer products
    ``(δ_B - center)(δ_B - center)ᵀ`` are averaged and weighted by ``w_j``.

    Each atom gets its own child stream of ``SeedSequence(seed)`` (``seed``
    may also be a SeedSequence) so the result does not depend on evaluation
    order.
    """
    from .gmodel import bayes_denoise, posterior_table  # circular at import time

    atoms = np.atleast_2d(prior.atoms)
    weights = prior.weights
    center = np.atleast_1d(np.asarray(center, dtype=float))
    m = atoms.shape[1]
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(atoms.shape[0])
    row_model = model.at(xi, mc_samples)
    acc = np.zeros((m, m))
    for j, (theta, w) in enumerate(zip(atoms, weights)):
        if w <= 0:
            continue
        rng = make_rng(children[j])
        draws = row_model.sample(np.broadcast_to(theta, (mc_samples, m)), rng)
        table = posterior_table(prior, Dataset(draws, row_model), row_model)
        dev = bayes_denoise(table) - center
        acc += w * (dev.T @ dev) / mc_samples
    return 0.5 * (acc + acc.T)


def make_rng(seed):
    """Counter-based Philox generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))
