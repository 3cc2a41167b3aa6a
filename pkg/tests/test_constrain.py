import numpy as np
import pytest

from constrained_eb import constrain
from constrained_eb.errors import BayesCovarianceSingular, GridInfeasible
from constrained_eb.gmodel import DiscreteDistribution, bayes_denoise, posterior_table, prior_moments
from constrained_eb.models import Dataset, GaussianHeteroscedastic, GaussianHomoscedastic, make_rng
from constrained_eb.transport import ConstraintSpec, Monomial, cost_matrix, nonnegativity, w2_sq


def gaussian_sample(rng, G, n, s2=1.0):
    theta = G.atoms[rng.choice(G.size, size=n, p=G.weights)]
    model = GaussianHomoscedastic(s2 * np.eye(G.dim))
    return Dataset(model.sample(theta, rng), model, theta)


G3 = DiscreteDistribution([[-2.0], [0.5], [3.0]], [0.3, 0.4, 0.3])


# -- VCB ---------------------------------------------------------------------


def test_vcb_fixed_point():
    rng = make_rng(0)
    data = gaussian_sample(rng, G3, 300)
    b = bayes_denoise(posterior_table(G3, data))
    rep = constrain.variance_constrained(data, bayes=b, target=(b.mean(0), np.cov(b[:, 0], ddof=1)))
    np.testing.assert_allclose(rep.affine.slope, [[1.0]], atol=1e-12)
    np.testing.assert_allclose(rep.values, b, atol=1e-12)


def test_vcb_scalar_closed_form():
    rng = make_rng(1)
    n = 10_000
    theta = rng.standard_normal(n)
    data = Dataset(theta + rng.standard_normal(n), GaussianHomoscedastic(1.0), theta)
    rep = constrain.variance_constrained(data, bayes=data.z / 2)
    # the map acts on δ_B = z/2, so the slope in z is half the transport slope √2
    assert rep.affine.slope[0, 0] == pytest.approx(np.sqrt(2), abs=0.1)
    assert 0.5 * rep.affine.slope[0, 0] == pytest.approx(1 / np.sqrt(2), abs=0.05)


def test_vcb_total_shrinkage():
    rng = make_rng(2)
    data = Dataset(rng.standard_normal(200) * 0.8, GaussianHomoscedastic(1.0))
    mu, A = constrain.target_moments(data)
    assert A[0, 0] == 0.0
    rep = constrain.variance_constrained(data, bayes=np.full(200, mu[0]))
    np.testing.assert_allclose(rep.values, mu[0], atol=1e-15)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_vcb_moment_matching_and_affinity(m):
    rng = make_rng(3 + m)
    G = DiscreteDistribution(rng.standard_normal((5, m)) * 2, rng.dirichlet(np.ones(5)))
    data = gaussian_sample(rng, G, 1000)
    rep = constrain.variance_constrained(data, prior=G)
    mu, A = constrain.target_moments(data)
    assert np.abs(rep.values.mean(0) - mu).max() <= 1e-8
    assert np.linalg.norm(np.atleast_2d(np.cov(rep.values, rowvar=False)) - A) <= 1e-6 * np.linalg.norm(A)
    assert rep.constraint_residuals["mean_residual"] <= 1e-8
    # the output is an exact affine function of the Bayes values
    b = bayes_denoise(posterior_table(G, data))
    X = np.hstack([b, np.ones((b.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(X, rep.values, rcond=None)
    assert np.abs(X @ coef - rep.values).max() <= 1e-10 * (1 + np.abs(rep.values).max())


def test_vcb_singular_bayes_covariance():
    data = Dataset(np.random.default_rng(0).standard_normal((50, 2)) * 3, GaussianHomoscedastic(np.eye(2)))
    b = np.zeros((50, 2))
    b[:, 0] = np.linspace(-1, 1, 50)
    with pytest.raises(BayesCovarianceSingular):
        constrain.variance_constrained(data, bayes=b)
    rep = constrain.variance_constrained(data, bayes=b, pd_ridge=1e-3)
    assert np.isfinite(rep.values).all()


def test_vcb_between_bayes_and_dcb_risk():
    rng = make_rng(5)
    risks = {"B": [], "VCB": [], "DCB": []}
    for _ in range(10):
        data = gaussian_sample(rng, G3, 1500)
        b = bayes_denoise(posterior_table(G3, data))
        reps = {
            "B": b,
            "VCB": constrain.variance_constrained(data, bayes=b, prior=G3, moments="prior").values,
            "DCB": constrain.distribution_constrained(data, bayes=b, prior=G3).values,
        }
        for k, v in reps.items():
            risks[k].append(constrain.diagnostics(v, latents=data.latents)["empirical_risk"])
    r = {k: np.mean(v) for k, v in risks.items()}
    se = {k: np.std(v, ddof=1) / np.sqrt(len(v)) for k, v in risks.items()}
    assert r["B"] <= r["VCB"] + 3 * se["VCB"]
    assert r["VCB"] <= r["DCB"] + 3 * se["DCB"]


# -- heterogeneous variants --------------------------------------------------


def test_mvcb_matches_vcb_on_homogeneous_data():
    rng = make_rng(6)
    data = gaussian_sample(rng, G3, 400)
    mu, A = constrain.target_moments(data)
    s = np.sqrt(A[0, 0])
    prior = DiscreteDistribution([[mu[0] - s], [mu[0] + s]], [0.5, 0.5])
    b = bayes_denoise(posterior_table(G3, data))
    het = Dataset(data.z, GaussianHeteroscedastic(np.ones(data.n)))
    vcb = constrain.variance_constrained(data, bayes=b)
    mvcb = constrain.marginal_variance_constrained(het, bayes=b, prior=prior)
    assert mvcb.method == "MVCB"
    np.testing.assert_allclose(mvcb.values, vcb.values, atol=1e-10)


def test_mvcb_point_mass():
    rng = make_rng(7)
    data = Dataset(rng.standard_normal(30), GaussianHeteroscedastic(rng.uniform(0.5, 2, 30)))
    rep = constrain.marginal_variance_constrained(data, prior=DiscreteDistribution.point_mass([0.7]))
    np.testing.assert_allclose(rep.values, 0.7, atol=1e-15)


def test_cvcb_single_group_agrees_with_mvcb():
    rng = make_rng(8)
    G = DiscreteDistribution([[-1.5], [0.0], [2.0]], [0.3, 0.3, 0.4])
    n, mc = 4000, 4000
    theta = G.atoms[rng.choice(3, size=n, p=G.weights)]
    model = GaussianHeteroscedastic(np.ones(n))
    data = Dataset(model.sample(theta, rng), model, theta)
    cvcb = constrain.conditional_variance_constrained(data, prior=G, mc_samples=mc, seed=1)
    mvcb = constrain.marginal_variance_constrained(data, prior=G)
    M_mc = cvcb.diagnostics["groups"][0]["bayes_cov"][0, 0]
    M_sample = mvcb.diagnostics["bayes_cov"][0, 0]
    # standard errors: per-atom spread of (δ_B - μ)² for the MC estimate, row spread for the sample one
    mu = prior_moments(G)[0][0]
    b = bayes_denoise(posterior_table(G, data))[:, 0]
    se_sample = np.std((b - b.mean()) ** 2, ddof=1) / np.sqrt(n)
    ref = np.random.default_rng(99)
    var_mc = 0.0
    for atom, w in zip(G.atoms[:, 0], G.weights):
        z = atom + ref.standard_normal(20_000)
        f = (bayes_denoise(posterior_table(G, Dataset(z, GaussianHomoscedastic(1.0))))[:, 0] - mu) ** 2
        var_mc += w**2 * f.var() / mc
    assert abs(M_mc - M_sample) <= 3 * np.sqrt(var_mc + se_sample**2)


def test_cvcb_noiseless_group_is_unchanged():
    G = DiscreteDistribution([[-1.0], [2.0]], [0.5, 0.5])
    rng = make_rng(9)
    theta = G.atoms[rng.choice(2, size=40, p=G.weights)]
    model = GaussianHeteroscedastic(np.full(40, 1e-10))
    data = Dataset(model.sample(theta, rng), model, theta)
    rep = constrain.conditional_variance_constrained(data, prior=G, mc_samples=20)
    np.testing.assert_allclose(rep.values, theta, atol=1e-6)


def test_cvcb_is_deterministic_and_groups():
    rng = make_rng(10)
    s2 = rng.choice([0.5, 8.0], size=200)
    model = GaussianHeteroscedastic(s2)
    data = Dataset(model.sample(rng.standard_normal((200, 1)), rng), model)
    prior = DiscreteDistribution(np.linspace(-2, 2, 9), np.exp(-np.linspace(-2, 2, 9) ** 2 / 2))
    a = constrain.conditional_variance_constrained(data, prior=prior, seed=3)
    b = constrain.conditional_variance_constrained(data, prior=prior, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert sorted(g["size"] for g in a.diagnostics["groups"]) == sorted(np.unique(s2, return_counts=True)[1])


# -- DCB ---------------------------------------------------------------------


def test_dcb_self_coupling():
    rng = make_rng(11)
    data = gaussian_sample(rng, G3, 50)
    b = bayes_denoise(posterior_table(G3, data))
    rep = constrain.distribution_constrained(data, bayes=b, prior=DiscreteDistribution.empirical(b))
    np.testing.assert_allclose(rep.values, b, atol=1e-12)
    assert rep.objective == pytest.approx(0.0, abs=1e-12)


def test_dcb_point_mass():
    data = Dataset([0.0, 1.0, 5.0], GaussianHomoscedastic(1.0))
    rep = constrain.distribution_constrained(data, bayes=data.z, prior=DiscreteDistribution.point_mass([2.0]))
    np.testing.assert_allclose(rep.values, 2.0)


def test_dcb_two_points_monotone():
    data = Dataset([0.0, 1.0], GaussianHomoscedastic(1.0))
    rep = constrain.distribution_constrained(data, bayes=[0.0, 1.0], prior=DiscreteDistribution([[0.0], [1.0]], [0.5, 0.5]))
    np.testing.assert_allclose(rep.values, [[0.0], [1.0]])
    assert rep.objective == 0.0


def test_dcb_marginal_law_and_jensen():
    rng = make_rng(12)
    G = DiscreteDistribution(rng.standard_normal((6, 2)) * 2, rng.dirichlet(np.ones(6)))
    data = gaussian_sample(rng, G, 300)
    rep = constrain.distribution_constrained(data, prior=G)
    assert rep.constraint_residuals["col_marginal_residual"] <= 1e-9
    assert w2_sq(DiscreteDistribution.empirical(rep.values), G) <= rep.objective + 1e-12


# -- GCB ---------------------------------------------------------------------


def test_gcb_vacuous_is_nearest_neighbour():
    rng = make_rng(13)
    data = gaussian_sample(rng, G3, 60)
    b = bayes_denoise(posterior_table(G3, data))
    grid = np.linspace(-3, 4, 15)
    spec = ConstraintSpec([Monomial([0])], [1.0])
    rep = constrain.general_constrained(data, bayes=b, prior=G3, constraints=spec, grid=grid)
    nearest = grid[np.argmin(cost_matrix(b, grid), axis=1)]
    np.testing.assert_allclose(rep.values[:, 0], nearest, atol=1e-10)


def test_gcb_two_moments_close_to_vcb():
    rng = make_rng(14)
    data = gaussian_sample(rng, G3, 200)
    b = bayes_denoise(posterior_table(G3, data))
    vcb = constrain.variance_constrained(data, bayes=b, prior=G3, moments="prior")
    gcb = constrain.general_constrained(data, bayes=b, prior=G3)
    grid = constrain.default_grid(data, prior=G3)
    spacing = np.diff(np.unique(grid[:, 0])).max()
    assert np.abs(gcb.values - vcb.values).max() <= 2 * spacing
    assert gcb.constraint_residuals["coupling_residual_max"] <= 1e-8
    mean, var = prior_moments(gcb.prior_used)
    np.testing.assert_allclose(mean, prior_moments(G3)[0], atol=1e-8)


def test_gcb_support_constraint():
    rng = make_rng(15)
    G = DiscreteDistribution([[0.0], [0.3], [3.0]], [0.5, 0.2, 0.3])
    data = gaussian_sample(rng, G, 200)
    b = bayes_denoise(posterior_table(G, data))
    spec = ConstraintSpec([*ConstraintSpec.moments(1, 2).functions, nonnegativity(1)])
    rep = constrain.general_constrained(data, bayes=b, prior=G, constraints=spec)
    assert rep.values.min() >= -1e-8
    assert rep.constraint_residuals["coupling_residual_max"] <= 1e-8


def test_gcb_infeasible_grid():
    data = Dataset([0.0, 1.0], GaussianHomoscedastic(1.0))
    spec = ConstraintSpec([Monomial([1])], [10.0])
    with pytest.raises(GridInfeasible):
        constrain.general_constrained(data, bayes=[0.0, 1.0], prior=G3, constraints=spec, grid=[0.0, 1.0])


# -- diagnostics and dispatch ------------------------------------------------


def test_diagnostics_examples():
    rng = make_rng(16)
    data = gaussian_sample(rng, G3, 100)
    assert constrain.diagnostics(data.latents, latents=data.latents)["empirical_risk"] == 0.0
    zeros = np.zeros((100, 1))
    assert constrain.diagnostics(zeros, latents=data.latents)["empirical_risk"] == pytest.approx(
        np.mean(data.latents**2), rel=1e-14
    )
    rep = constrain.variance_constrained(data, prior=G3)
    metrics = constrain.diagnostics(rep, data)
    assert metrics["mean_residual"] <= 1e-8
    assert "w2_to_prior" in constrain.diagnostics(rep, data, prior=G3)


def test_metrics_are_json_ready():
    import json

    rng = make_rng(17)
    data = gaussian_sample(rng, G3, 80)
    for method in ("B", "VCB", "DCB", "GCB"):
        rep = constrain.denoise(method, data, prior=G3)
        json.dumps(rep.metrics())


def test_unknown_method():
    with pytest.raises(ValueError):
        constrain.denoise("XYZ", Dataset([0.0], GaussianHomoscedastic(1.0)), prior=G3)
