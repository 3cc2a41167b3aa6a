"""Nonparametric prior estimation (G-modelling) and the Bayes denoiser.

The NPMLE maximises the marginal log-likelihood

    (1/n) Σ_i log Σ_j w_j p_{θ_j}(Z_i)

over mixing weights on a fixed set of candidate atoms. The weights are found
with an active-set sequential quadratic programming method in the spirit of
``mixsqp`` (Kim, Carbonetto, Stephens and Anitescu, 2020); a plain EM solver is
kept as ``method="em"``. Every fit is certified by the KKT gap

    max_j (1/n) Σ_i p_{θ_j}(Z_i) / f̂(Z_i) - 1,

which is zero at the exact optimum.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from . import bures
from .errors import AllAtomsZeroLikelihood, GridTooLarge, NonConvergence
from .models import (
    Dataset,
    GaussianHeteroscedastic,
    GaussianHomoscedastic,
    PoissonExposure,
)

logger = logging.getLogger(__name__)

GRID_CAP = 100_000
# n * r entries of the dense likelihood matrix
MATRIX_CAP = 40_000_000
MERGE_RTOL = 1e-6


@dataclass
class DiscreteDistribution:
    """Weighted atoms in R^m.

    Weights are validated to be non-negative and renormalised to sum to one.
    ``info`` carries fit diagnostics and is ignored by equality.
    """

    atoms: np.ndarray
    weights: np.ndarray
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != atoms.shape[0]:
            raise ValueError(f"{w.size} weights for {atoms.shape[0]} atoms")
        if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise ValueError("weights must be non-negative and not all zero")
        self.atoms = atoms
        self.weights = w / w.sum()

    @classmethod
    def point_mass(cls, theta):
        return cls(np.atleast_2d(np.asarray(theta, dtype=float)), [1.0])

    @classmethod
    def empirical(cls, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def size(self):
        return self.atoms.shape[0]

    @property
    def dim(self):
        return self.atoms.shape[1]

    def prune(self, tol=0.0):
        """Drop atoms with weight ``<= tol`` and renormalise."""
        keep = self.weights > tol
        return DiscreteDistribution(self.atoms[keep], self.weights[keep], dict(self.info))

    def merge(self, radius):
        """Merge atoms closer than ``radius``, summing their weights.

        Merged atoms are placed at the weight-averaged position. Atoms are
        visited in decreasing weight order, so heavy atoms absorb light ones.
        """
        order = np.argsort(-self.weights, kind="stable")
        atoms, weights = self.atoms[order], self.weights[order]
        label = np.full(len(weights), -1)
        n_groups = 0
        for j in range(len(weights)):
            if label[j] >= 0:
                continue
            close = (label < 0) & (np.linalg.norm(atoms - atoms[j], axis=1) < radius)
            label[close] = n_groups
            n_groups += 1
        if n_groups == len(weights):
            return self
        w = np.bincount(label, weights=weights, minlength=n_groups)
        pos = np.stack(
            [np.bincount(label, weights=weights * atoms[:, k], minlength=n_groups) for k in range(self.dim)],
            axis=1,
        )
        return DiscreteDistribution(pos / w[:, None], w, dict(self.info))

    def to_dict(self):
        return {"atoms": self.atoms.tolist(), "weights": self.weights.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d):
        if d.get("kernel_cov") is not None:
            raise ValueError("use SmoothPrior.from_dict for priors with a kernel")
        return cls(d["atoms"], d["weights"])


@dataclass
class SmoothPrior:
    """Gaussian location mixture ``base ⊛ N(0, kernel_cov)``."""

    base: DiscreteDistribution
    kernel_cov: np.ndarray

    def __post_init__(self):
        self.kernel_cov = bures.check_symmetric(self.kernel_cov)
        bures.psd_sqrt(self.kernel_cov)

    @property
    def dim(self):
        return self.base.dim

    @property
    def info(self):
        return self.base.info

    def discretize(self, order=5):
        """Finite approximation by a tensor Gauss-Hermite rule per component.

        Each atom of ``base`` is replaced by ``order ** m`` nodes of the rule
        for ``N(0, kernel_cov)``. The result matches the first ``2 order - 1``
        moments of the mixture exactly.
        """
        nodes, w = hermegauss(order)
        w = w / w.sum()
        m = self.dim
        grids = np.meshgrid(*([nodes] * m), indexing="ij")
        unit = np.stack([g.ravel() for g in grids], axis=1)
        wts = np.prod(np.stack(np.meshgrid(*([w] * m), indexing="ij"), 0).reshape(m, -1), axis=0)
        offsets = unit @ bures.psd_sqrt(self.kernel_cov).T
        atoms = (self.base.atoms[:, None, :] + offsets[None, :, :]).reshape(-1, m)
        weights = (self.base.weights[:, None] * wts[None, :]).ravel()
        return DiscreteDistribution(atoms, weights)

    def to_dict(self):
        d = self.base.to_dict()
        d["kernel_cov"] = self.kernel_cov.tolist()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d):
        return cls(DiscreteDistribution(d["atoms"], d["weights"]), d["kernel_cov"])


def prior_from_dict(d):
    if d.get("kernel_cov") is not None:
        return SmoothPrior.from_dict(d)
    return DiscreteDistribution.from_dict(d)


@dataclass
class PosteriorTable:
    """Posterior responsibilities ``resp[i, j] = P(Θ = θ_j | Z_i)``.

    For a smooth prior the table also keeps, per row, the Gaussian gain
    ``K (K + Σ_i)^{-1}`` and the standardised observation, which together give
    the within-component posterior means.
    """

    resp: np.ndarray
    atoms: np.ndarray
    z: np.ndarray = None
    gains: np.ndarray = None

    @property
    def n(self):
        return self.resp.shape[0]


# ----------------------------------------------------------------------------
# grids


def build_grid(data, model=None, strategy="exemplar", k=50, cap=GRID_CAP, bounds=None):
    """Candidate atoms for the NPMLE.

    Parameters
    ----------
    data : Dataset
    strategy : {"exemplar", "lattice"}
        ``"exemplar"`` uses the (distinct) standardised observations,
        ``"lattice"`` an equispaced grid with ``k`` points per axis over the
        bounding box of the standardised observations.
    k : int
        Points per axis for the lattice.
    cap : int
        Maximum number of atoms.
    bounds : (2, m) array_like, optional
        Lower and upper corners replacing the data bounding box.
    """
    model = data.model if model is None else model
    x = data.standardized
    if strategy == "exemplar":
        atoms = np.unique(x, axis=0)
        if atoms.shape[0] > cap:
            raise GridTooLarge(f"{atoms.shape[0]} exemplar atoms exceed the cap {cap}", size=atoms.shape[0])
        return atoms
    if strategy != "lattice":
        raise ValueError(f"unknown grid strategy {strategy!r}")
    m = x.shape[1]
    if float(k) ** m > cap:
        raise GridTooLarge(f"lattice of {k}^{m} points exceeds the cap {cap}", size=int(k) ** m)
    lo, hi = (x.min(0), x.max(0)) if bounds is None else np.asarray(bounds, dtype=float)
    if isinstance(model, PoissonExposure):
        lo = np.maximum(lo, 0.0)
    axes = [np.linspace(lo[d], hi[d], int(k)) if k > 1 else np.array([lo[d]]) for d in range(m)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def lattice_spacing(atoms_per_axis, lo, hi):
    return (np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)) / max(atoms_per_axis - 1, 1)


# ----------------------------------------------------------------------------
# weights


def _likelihood_matrix(atoms, data, model):
    n, r = data.n, atoms.shape[0]
    if n * r > MATRIX_CAP:
        raise GridTooLarge(f"likelihood matrix {n}x{r} is too large", size=n * r)
    logL = model.log_likelihood_matrix(data.z, atoms)
    shift = logL.max(axis=1)
    bad = ~np.isfinite(shift)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise AllAtomsZeroLikelihood(f"observation {row} has zero likelihood under every atom", row=row)
    return np.exp(logL - shift[:, None]), shift


SUPPORT_TOL = 1e-8


def _kkt(L, w):
    """Two-sided KKT gap: ``g_j <= 1`` everywhere and ``g_j >= 1`` on the support."""
    f = L @ w
    g = (L.T @ (1.0 / f)) / L.shape[0]
    gap = g.max() - 1.0
    on = w > SUPPORT_TOL * w.sum()
    if on.any():
        gap = max(gap, 1.0 - g[on].min())
    return g, float(gap)


def _initial_support(L, size=40):
    r = L.shape[1]
    S = np.unique(np.linspace(0, r - 1, min(r, size)).astype(int))
    uncovered = L[:, S].sum(1) < 1e-200
    if uncovered.any():
        S = np.union1d(S, L[uncovered].argmax(1))
    x = np.zeros(r)
    x[S] = 1.0 / len(S)
    return x


def _sqp_weights(L, kkt_tol, max_iter, inner_max=50, ridge=1e-8):
    """Active-set SQP for min -(1/n) Σ log(L x) + Σ x over x >= 0.

    The unconstrained-sum formulation has the NPMLE weights as its solution
    (the optimum satisfies Σ x = 1 automatically), so only non-negativity
    has to be handled by the active set.
    """
    n, r = L.shape
    x = _initial_support(L)

    def objective(v):
        return -np.mean(np.log(L @ v)) + v.sum()

    it = 0
    for it in range(1, max_iter + 1):
        f = L @ x
        d = 1.0 / f
        grad = 1.0 - (L.T @ d) / n
        if abs(x.sum() - 1.0) < 1e-8 and _kkt(L, x)[1] <= 0.1 * kkt_tol:
            break
        Ld = L * d[:, None]

        def hess_vec(v):
            return Ld.T @ (Ld @ v) / n

        c = grad - hess_vec(x)
        y = x.copy()
        free = y > 0
        for _ in range(inner_max):
            F = np.flatnonzero(free)
            g_y = hess_vec(y) + c
            H = Ld[:, F].T @ Ld[:, F] / n
            # relative ridge: curvature can differ by many orders between atoms
            H[np.diag_indices_from(H)] *= 1.0 + ridge
            p = np.zeros(r)
            p[F] = np.linalg.solve(H, -g_y[F])
            alpha, block = 1.0, -1
            shrinking = (p < 0) & free
            if shrinking.any():
                idx = np.flatnonzero(shrinking)
                ratios = -y[idx] / p[idx]
                kmin = int(np.argmin(ratios))
                if ratios[kmin] < 1.0:
                    alpha, block = ratios[kmin], idx[kmin]
            y = y + alpha * p
            if block >= 0:
                y[block] = 0.0
                free[block] = False
                continue
            # full step: y minimises the model on F, so check the bound multipliers
            mult = hess_vec(y) + c
            mult[free] = np.inf
            j = int(np.argmin(mult))
            if mult[j] >= -1e-12 * max(1.0, np.abs(grad).max()):
                break
            free[j] = True
        step = y - x
        phi0, slope = objective(x), grad @ step
        a = 1.0
        while a > 1e-10:
            trial = x + a * step
            if (L @ trial).min() > 0 and objective(trial) <= phi0 + 1e-2 * a * slope:
                break
            a *= 0.5
        x = np.maximum(trial, 0.0)
    return x, it


def _em_weights(L, kkt_tol, max_iter, check_every=10):
    n, r = L.shape
    w = np.full(r, 1.0 / r)
    f = L @ w
    it = 0
    for it in range(1, max_iter + 1):
        w = w * (L.T @ (1.0 / f)) / n
        f = L @ w
        if it % check_every == 0 and _kkt(L, w)[1] <= 0.5 * kkt_tol:
            break
    return w, it


def fit_weights(atoms, data, model=None, method="sqp", max_iter=5000, kkt_tol=1e-4, prune_tol=1e-12):
    """NPMLE mixing weights over fixed atoms.

    Parameters
    ----------
    atoms : (r, m) array_like
        Candidate support points.
    data : Dataset
    model : LikelihoodModel, optional
        Defaults to ``data.model``.
    method : {"sqp", "em"}
        Active-set SQP (default) or multiplicative EM updates.
    max_iter : int
    kkt_tol : float
        Required bound on the KKT gap of the returned weights. The gap is
        two-sided: ``g_j - 1`` over all candidates and ``1 - g_j`` over atoms
        carrying weight above ``1e-8``, where ``g_j`` is the average
        likelihood ratio ``(1/n) Σ_i p_j(Z_i) / f(Z_i)``. EM iterates until
        it is met.
    prune_tol : float
        Atoms with weight at or below this are dropped from the result.

    Returns
    -------
    DiscreteDistribution
        With ``info`` holding ``loglik``, ``kkt_gap``, ``iterations`` and
        ``method``. The KKT gap is taken over all candidate atoms.

    Raises
    ------
    AllAtomsZeroLikelihood
        If some observation has zero likelihood under every atom.
    NonConvergence
        If the KKT gap is still above ``kkt_tol`` at the end.
    """
    model = data.model if model is None else model
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    L, shift = _likelihood_matrix(atoms, data, model)
    if method == "sqp":
        w, it = _sqp_weights(L, kkt_tol, min(max_iter, 500))
    elif method == "em":
        w, it = _em_weights(L, kkt_tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    w = w / w.sum()
    w[w <= prune_tol] = 0.0
    w = w / w.sum()
    g, gap = _kkt(L, w)
    loglik = float(np.mean(np.log(L @ w) + shift))
    info = {"loglik": loglik, "kkt_gap": gap, "iterations": int(it), "method": method, "candidates": atoms.shape[0]}
    logger.debug("NPMLE fit: %s", info)
    if gap > kkt_tol:
        raise NonConvergence(f"KKT gap {gap:.3e} exceeds {kkt_tol:.1e} after {it} iterations", kkt_gap=gap)
    keep = w > 0
    return DiscreteDistribution(atoms[keep], w[keep], info)


def log_likelihood(prior, data, model=None):
    """Average marginal log-likelihood of ``data`` under a discrete prior."""
    model = data.model if model is None else model
    logL = model.log_likelihood_matrix(data.z, prior.atoms)
    return float(np.mean(logsumexp(logL + np.log(prior.weights)[None, :], axis=1)))


def kkt_gap(prior, data, model=None, atoms=None):
    """Two-sided KKT gap of ``prior`` over candidate ``atoms`` (default: its own atoms)."""
    model = data.model if model is None else model
    atoms = prior.atoms if atoms is None else np.atleast_2d(atoms)
    logf = logsumexp(model.log_likelihood_matrix(data.z, prior.atoms) + np.log(prior.weights), axis=1)

    def ratio(at):
        return np.exp(logsumexp(model.log_likelihood_matrix(data.z, at) - logf[:, None], axis=0) - np.log(data.n))

    support = prior.atoms[prior.weights > SUPPORT_TOL]
    return float(max(ratio(atoms).max() - 1.0, 1.0 - ratio(support).min()))


# ----------------------------------------------------------------------------
# EM refinement


def _responsibilities(prior, data, model):
    logL = model.log_likelihood_matrix(data.z, prior.atoms) + np.log(prior.weights)[None, :]
    norm = logsumexp(logL, axis=1)
    return np.exp(logL - norm[:, None]), float(norm.mean())


def _m_step_atoms(resp, data, model):
    mass = resp.sum(0)
    live = mass > 0
    if isinstance(model, GaussianHomoscedastic):
        atoms = (resp.T @ data.z)[live] / mass[live, None]
    elif isinstance(model, GaussianHeteroscedastic):
        prec = np.linalg.inv(model.noise_covs)
        pz = np.einsum("nij,nj->ni", prec, data.z)
        A = np.einsum("nj,nab->jab", resp[:, live], prec)
        b = resp[:, live].T @ pz
        atoms = np.linalg.solve(A, b[..., None])[..., 0]
    elif isinstance(model, PoissonExposure):
        atoms = (resp.T @ data.z)[live] / (resp.T @ model.exposure)[live]
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    return atoms, live


def em_refine(mix, data, model=None, max_iter=200, tol=1e-9, merge_rtol=MERGE_RTOL):
    """Joint EM over atoms and weights starting from ``mix``.

    The M-step is the exact maximiser for each family: a (precision-weighted)
    responsibility mean for Gaussian likelihoods and ``Σ r z / Σ r λ`` per
    component for Poisson with exposure. Nearby atoms are merged afterwards.
    """
    model = data.model if model is None else model
    prior = DiscreteDistribution(mix.atoms, mix.weights)
    resp, ll = _responsibilities(prior, data, model)
    history = [ll]
    for _ in range(max_iter):
        atoms, live = _m_step_atoms(resp, data, model)
        weights = resp.mean(0)[live]
        candidate = DiscreteDistribution(atoms, weights)
        resp_new, ll_new = _responsibilities(candidate, data, model)
        if ll_new < ll - 1e-10 * (1.0 + abs(ll)):
            raise AssertionError(f"EM decreased the log-likelihood from {ll} to {ll_new}")
        prior, resp = candidate, resp_new
        history.append(ll_new)
        gain, ll = ll_new - ll, ll_new
        if gain < tol:
            break
    x = data.standardized
    diameter = float(np.linalg.norm(x.max(0) - x.min(0)))
    out = prior.merge(merge_rtol * max(diameter, 1e-300))
    out.info = dict(mix.info, loglik=log_likelihood(out, data, model), em_history=history)
    return out


# ----------------------------------------------------------------------------
# smooth NPMLE


def smooth_npmle(data, model=None, kernel_cov=0.0, grid="exemplar", k=50, **fit_opts):
    """NPMLE over Gaussian mixtures with component covariance ``kernel_cov``.

    Since ``N(θ, K) * N(0, Σ_i) = N(θ, K + Σ_i)``, the base measure is the
    ordinary NPMLE under the inflated likelihood.
    """
    model = data.model if model is None else model
    if not isinstance(model, (GaussianHomoscedastic, GaussianHeteroscedastic)):
        raise TypeError("the smooth NPMLE needs a Gaussian likelihood")
    K = bures.as_matrix(kernel_cov) if np.ndim(kernel_cov) else np.eye(model.dim) * float(kernel_cov)
    inflated = model.inflated(K)
    atoms = build_grid(data, inflated, strategy=grid, k=k)
    base = fit_weights(atoms, Dataset(data.z, inflated), inflated, **fit_opts)
    return SmoothPrior(base, K)


def npmle(data, model=None, grid="exemplar", k=50, refine=False, **fit_opts):
    """Fit a discrete NPMLE on a grid, optionally followed by EM refinement."""
    model = data.model if model is None else model
    atoms = build_grid(data, model, strategy=grid, k=k)
    prior = fit_weights(atoms, data, model, **fit_opts)
    if refine:
        prior = em_refine(prior, data, model)
    return prior


# ----------------------------------------------------------------------------
# posterior quantities


def posterior_table(prior, data, model=None):
    """Posterior responsibilities of each atom for each observation."""
    model = data.model if model is None else model
    gains = None
    if isinstance(prior, SmoothPrior):
        K = prior.kernel_cov
        lik_model = model.inflated(K)
        base = prior.base
        if isinstance(model, GaussianHomoscedastic):
            gains = K @ np.linalg.inv(K + model.noise_cov)
        else:
            gains = K[None] @ np.linalg.inv(K[None] + model.noise_covs)
    else:
        lik_model, base = model, prior
    with np.errstate(divide="ignore"):
        logw = np.log(base.weights)
    logL = lik_model.log_likelihood_matrix(data.z, base.atoms) + logw[None, :]
    shift = logL.max(axis=1)
    bad = ~np.isfinite(shift)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise AllAtomsZeroLikelihood(f"observation {row} has zero likelihood under every atom", row=row)
    resp = np.exp(logL - shift[:, None])
    resp /= resp.sum(axis=1, keepdims=True)
    return PosteriorTable(resp, base.atoms, data.standardized if gains is not None else None, gains)


def bayes_denoise(table):
    """Posterior means ``Σ_j resp[i, j] θ_j`` (plus the kernel correction)."""
    values = table.resp @ table.atoms
    if table.gains is not None:
        resid = table.z - values
        if table.gains.ndim == 2:
            values = values + resid @ table.gains.T
        else:
            values = values + np.einsum("nij,nj->ni", table.gains, resid)
    return values


def prior_moments(prior):
    """Mean vector and covariance matrix of a discrete or smooth prior."""
    base = prior.base if isinstance(prior, SmoothPrior) else prior
    w = base.weights
    mean = w @ base.atoms
    dev = base.atoms - mean
    cov = (dev * w[:, None]).T @ dev
    cov = 0.5 * (cov + cov.T)
    if isinstance(prior, SmoothPrior):
        cov = cov + prior.kernel_cov
    return mean, cov


def as_discrete(prior, order=5):
    """Return a finitely supported version of ``prior``."""
    if isinstance(prior, SmoothPrior):
        return prior.discretize(order)
    return prior
