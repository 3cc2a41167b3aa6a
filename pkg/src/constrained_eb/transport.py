"""Exact discrete optimal transport and moment-constrained couplings.

Two linear programs are solved here:

* the transportation problem with both marginals fixed, handed to the
  network simplex of POT (``ot.lp.emd``);
* the coupling problem where only the row marginal is fixed and the column
  masses are tied to the targets through ``Σ_j ψ_ℓ(η_j) colmass_j = t_ℓ``,
  solved by column generation over restricted problems handed to the HiGHS
  simplex through :func:`scipy.optimize.linprog` (the full problem can also
  go to the HiGHS interior-point solver with crossover).

Both return a :class:`Coupling` with dual multipliers, and both certify the
result: dual feasibility of the reduced costs and complementary slackness on
the support of the returned mass.
"""

import itertools
import json
import os

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import (
    CycleLimit,
    EmptyRow,
    Infeasible,
    InfeasibleMarginals,
    NumericalError,
    ProblemTooLarge,
    Unbounded,
)

# POT probes every array backend it can find at import time; the deep learning
# ones are slow to load and never used here.
for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

MAX_ENTRIES = 2_000_000
MARGINAL_TOL = 1e-12
MASS_TOL = 1e-12
DUAL_RTOL = 1e-9
SLACK_RTOL = 1e-8
RESIDUAL_TOL = 1e-8


class Coupling:
    """Non-negative ``n x r`` mass matrix with its LP certificate.

    Attributes
    ----------
    mass : (n, r) ndarray
    row_marginal : (n,) ndarray
    col_marginal : (r,) ndarray or None
        Prescribed column weights for plain OT, ``None`` when the columns
        are only moment constrained.
    objective : float
        ``Σ cost * mass``.
    duals : dict
        ``"row"`` multipliers and either ``"col"`` (plain OT) or
        ``"constraint"`` multipliers.
    residuals : ndarray
        Constraint residuals (column marginals or ψ constraints).
    info : dict
        Solver diagnostics.
    """

    def __init__(self, mass, row_marginal, col_marginal=None, objective=np.nan, duals=None, residuals=None, info=None):
        self.mass = np.asarray(mass, dtype=float)
        self.row_marginal = np.asarray(row_marginal, dtype=float)
        self.col_marginal = None if col_marginal is None else np.asarray(col_marginal, dtype=float)
        self.objective = float(objective)
        self.duals = duals or {}
        self.residuals = np.zeros(0) if residuals is None else np.asarray(residuals, dtype=float)
        self.info = info or {}

    @property
    def shape(self):
        return self.mass.shape

    @property
    def row_sums(self):
        return self.mass.sum(axis=1)

    @property
    def col_sums(self):
        return self.mass.sum(axis=0)

    @property
    def nnz(self):
        return int(np.count_nonzero(self.mass > MASS_TOL))

    def triplets(self):
        i, j = np.nonzero(self.mass)
        return [[int(a), int(b), float(self.mass[a, b])] for a, b in zip(i, j)]

    def to_dict(self):
        n, r = self.shape
        return {"rows": n, "cols": r, "entries": self.triplets()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        mass = np.zeros((d["rows"], d["cols"]))
        for i, j, v in d["entries"]:
            mass[i, j] = v
        return cls(mass, mass.sum(1), mass.sum(0))


def _check_size(n, r):
    if n * r > MAX_ENTRIES:
        raise ProblemTooLarge(f"{n}x{r} coupling exceeds {MAX_ENTRIES} entries; subsample the rows", size=n * r)


def _as_weights(w, name):
    w = np.asarray(w, dtype=float).ravel()
    if np.any(w < 0) or not np.isfinite(w).all():
        raise InfeasibleMarginals(f"{name} must be finite and non-negative")
    if abs(w.sum() - 1.0) > MARGINAL_TOL * max(1, w.size):
        raise InfeasibleMarginals(f"{name} sum to {w.sum():.15g}, not 1", total=float(w.sum()))
    return w


def cost_matrix(x, y):
    """Squared Euclidean costs ``‖x_i - y_j‖²``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    return d


def _certify(reduced, mass, cost_scale):
    """Dual feasibility and complementary slackness gaps of a solution."""
    dual_violation = float(max(0.0, -reduced.min())) if reduced.size else 0.0
    on_support = mass > MASS_TOL
    slack = float(np.abs(reduced[on_support]).max()) if on_support.any() else 0.0
    ok = dual_violation <= DUAL_RTOL * cost_scale and slack <= SLACK_RTOL * max(1.0, cost_scale)
    return {"dual_violation": dual_violation, "slackness_gap": slack, "certified": bool(ok)}


def solve_ot(cost, row_w, col_w, max_iter=10_000_000):
    """Exact optimal transport between two discrete marginals.

    Parameters
    ----------
    cost : (n, r) array_like
        Finite costs.
    row_w, col_w : array_like
        Non-negative marginals, each summing to one.
    max_iter : int
        Pivot budget of the network simplex.

    Returns
    -------
    Coupling
        An optimal basic solution; ``info["certified"]`` reports whether the
        dual certificate holds.

    Raises
    ------
    InfeasibleMarginals
        If a marginal is negative or does not sum to one.
    CycleLimit
        If the pivot budget is exhausted.
    """
    C = np.ascontiguousarray(cost, dtype=float)
    if C.ndim != 2 or not np.isfinite(C).all():
        raise InfeasibleMarginals("cost must be a finite 2-d array")
    a = _as_weights(row_w, "row weights")
    b = _as_weights(col_w, "column weights")
    if C.shape != (a.size, b.size):
        raise InfeasibleMarginals(f"cost shape {C.shape} does not match marginals ({a.size}, {b.size})")
    _check_size(*C.shape)
    # identical totals keep the network simplex from rescaling
    b_in = b * (a.sum() / b.sum())
    mass, log = ot.lp.emd(a, b_in, C, numItermax=int(max_iter), log=True)
    if log["result_code"] != 1:
        if "numItermax" in log.get("warning", "") or log["result_code"] == 3:
            raise CycleLimit(f"network simplex stopped: {log['warning']}", pivots=int(max_iter))
        raise NumericalError(f"network simplex failed: {log['warning']}")
    u, v = np.asarray(log["u"]), np.asarray(log["v"])
    scale = max(float(np.abs(C).max()) if C.size else 0.0, 1e-14)
    cert = _certify(C - u[:, None] - v[None, :], mass, scale)
    objective = float((mass * C).sum())
    return Coupling(
        mass,
        a,
        b,
        objective,
        duals={"row": u, "col": v},
        residuals=mass.sum(0) - b,
        info=dict(cert, solver="network-simplex"),
    )


def barycentric_projection(pi, atoms):
    """Conditional means ``Σ_j π_ij η_j / Σ_j π_ij`` of each row."""
    mass = pi.mass if isinstance(pi, Coupling) else np.asarray(pi, dtype=float)
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    totals = mass.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise EmptyRow(f"row {int(empty[0])} of the coupling carries no mass", row=int(empty[0]))
    return (mass @ atoms) / totals[:, None]


def w2_sq(a, b):
    """Squared 2-Wasserstein distance between two discrete distributions."""
    C = cost_matrix(a.atoms, b.atoms)
    return max(solve_ot(C, a.weights, b.weights).objective, 0.0)


# ----------------------------------------------------------------------------
# constraint functions


class ConstraintFunction:
    name = "psi"

    def __call__(self, atoms):
        raise NotImplementedError


class Monomial(ConstraintFunction):
    """``η ↦ Π_k η_k^{α_k}``."""

    def __init__(self, alpha):
        self.alpha = tuple(int(a) for a in alpha)
        if any(a < 0 for a in self.alpha) or sum(self.alpha) > 4:
            raise ValueError("monomials need non-negative exponents of total degree <= 4")
        self.name = "eta^" + ",".join(map(str, self.alpha))

    def __call__(self, atoms):
        atoms = np.atleast_2d(atoms)
        return np.prod(atoms ** np.asarray(self.alpha)[None, :], axis=1)


class BoxDistance(ConstraintFunction):
    """Euclidean distance to the box ``[lo, hi]`` (bounds may be infinite)."""

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.name = f"dist_box({self.lo.tolist()},{self.hi.tolist()})"

    def __call__(self, atoms):
        atoms = np.atleast_2d(atoms)
        gap = np.maximum(self.lo - atoms, 0.0) + np.maximum(atoms - self.hi, 0.0)
        return np.linalg.norm(gap, axis=1)


class HalfSpaceDistance(ConstraintFunction):
    """Euclidean distance to ``{η : a·η <= b}``."""

    def __init__(self, a, b):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.b = float(b)
        self.name = f"dist_halfspace({self.a.tolist()},{self.b})"

    def __call__(self, atoms):
        atoms = np.atleast_2d(atoms)
        return np.maximum(atoms @ self.a - self.b, 0.0) / np.linalg.norm(self.a)


def moment_functions(m, degree=2):
    """All monomials of total degree ``1..degree`` in ``m`` variables."""
    out = []
    for total in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(m), total):
            alpha = np.bincount(combo, minlength=m)
            out.append(Monomial(alpha))
    return out


def nonnegativity(m):
    """Distance to the non-negative orthant."""
    return BoxDistance(np.zeros(m), np.full(m, np.inf))


class ConstraintSpec:
    """Functions ``ψ_1..ψ_k`` and their targets ``t_1..t_k``."""

    def __init__(self, functions, targets=None):
        self.functions = list(functions)
        if not self.functions:
            raise ValueError("at least one constraint function is required")
        self.targets = None if targets is None else np.asarray(targets, dtype=float).ravel()
        if self.targets is not None and self.targets.size != len(self.functions):
            raise ValueError("one target per constraint function")

    def __len__(self):
        return len(self.functions)

    @property
    def names(self):
        return [f.name for f in self.functions]

    def evaluate(self, atoms):
        """``(k, r)`` matrix of function values at the atoms."""
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        vals = np.stack([np.asarray(f(atoms), dtype=float) for f in self.functions])
        if not np.isfinite(vals).all():
            raise ValueError("constraint functions must be finite on the grid")
        return vals

    def targets_from(self, prior):
        """Targets ``t_ℓ = Σ_j w_j ψ_ℓ(θ_j)`` under a discrete prior."""
        return ConstraintSpec(self.functions, self.evaluate(prior.atoms) @ prior.weights)

    @classmethod
    def moments(cls, m, degree=2, targets=None):
        return cls(moment_functions(m, degree), targets)


# ----------------------------------------------------------------------------
# constrained coupling


def _equality_system(n, r, psi, row_w, targets):
    # variable x[i * r + j] = mass on (row i, column j)
    rows = sparse.kron(sparse.eye(n, format="csr"), np.ones((1, r)), format="csr")
    cols = sparse.kron(np.ones((1, n)), sparse.csr_matrix(psi), format="csr")
    A = sparse.vstack([rows, cols], format="csr")
    b = np.concatenate([row_w, targets])
    return A, b


def _polish(A, b, x, tol):
    """Re-solve the equalities on the support of ``x`` by least squares.

    HiGHS stops at its feasibility tolerance; a basic solution is the unique
    solution of ``A_B x_B = b`` so one least-squares solve on the support
    removes the remaining residual.
    """
    support = np.flatnonzero(x > tol)
    if support.size == 0:
        return x
    AB = A[:, support].toarray()
    xb, *_ = np.linalg.lstsq(AB, b, rcond=None)
    if np.any(xb < 0):
        return x
    out = np.zeros_like(x)
    out[support] = xb
    old = np.abs(A @ x - b).max()
    new = np.abs(A @ out - b).max()
    return out if new <= old else x


def _phase_one(A, b):
    """Minimise the total violation ``Σ |A x - b|`` over ``x >= 0``."""
    n_eq, n_var = A.shape
    I = sparse.eye(n_eq, format="csr")
    A1 = sparse.hstack([A, I, -I], format="csr")
    c = np.concatenate([np.zeros(n_var), np.ones(2 * n_eq)])
    res = linprog(c, A_eq=A1, b_eq=b, bounds=(0, None), method="highs")
    viol = res.x[n_var : n_var + n_eq] + res.x[n_var + n_eq :]
    return float(res.fun), int(np.argmax(viol))


LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _restricted_system(rows, cols, psi, n, row_w, targets, artificial):
    """Equalities over the variables ``(rows[v], cols[v])``.

    With ``artificial`` a pair of slack columns ``±e_ℓ`` is appended for each
    ψ constraint.
    """
    k = psi.shape[0]
    nv = rows.size
    v = np.arange(nv)
    ri = np.concatenate([rows, n + np.repeat(np.arange(k), nv)])
    ci = np.concatenate([v, np.tile(v, k)])
    vals = np.concatenate([np.ones(nv), psi[:, cols].ravel()])
    if artificial:
        ri = np.concatenate([ri, n + np.arange(k), n + np.arange(k)])
        ci = np.concatenate([ci, nv + np.arange(k), nv + k + np.arange(k)])
        vals = np.concatenate([vals, np.ones(k), -np.ones(k)])
    width = nv + (2 * k if artificial else 0)
    A = sparse.csr_matrix((vals, (ri, ci)), shape=(n + k, width))
    return A, np.concatenate([row_w, targets])


def _solve_lp(c, A, b, method="highs-ipm"):
    res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method=method, options=LP_OPTIONS)
    if res.status == 3:
        raise Unbounded("constrained coupling reported unbounded despite finite costs")
    if res.status not in (0, 2):
        raise NumericalError(f"HiGHS failed: {res.message}")
    return res


def _column_generation(C, psi, a, t, per_row=5, add_per_row=3, max_rounds=500):
    """Exact column generation for the constrained coupling LP.

    Each row starts with its ``per_row`` cheapest columns. Phase one drives
    artificial slacks of the ψ constraints to zero, phase two minimises the
    cost; in both phases every reduced cost of the full ``n x r`` problem is
    priced after each restricted solve and the most negative entries of each
    row enter. The method stops when no reduced cost is negative, which is
    the optimality condition of the full problem.
    """
    n, r = C.shape
    k = psi.shape[0]
    active = np.zeros((n, r), dtype=bool)
    near = np.argpartition(C, min(per_row, r) - 1, axis=1)[:, : min(per_row, r)]
    active[np.arange(n)[:, None], near] = True
    scale = max(float(np.abs(C).max()), 1e-14)
    rounds = 0
    for phase in (1, 2):
        tol = DUAL_RTOL * (1.0 if phase == 1 else scale)
        while True:
            rounds += 1
            if rounds > max_rounds:
                raise CycleLimit(f"column generation did not finish in {max_rounds} rounds", rounds=rounds)
            rows, cols = np.nonzero(active)
            A, b = _restricted_system(rows, cols, psi, n, a, t, artificial=(phase == 1))
            if phase == 1:
                c = np.concatenate([np.zeros(rows.size), np.ones(2 * k)])
            else:
                c = C[rows, cols]
            res = _solve_lp(c, A, b)
            y = np.asarray(res.eqlin.marginals)
            u, lam = y[:n], y[n:]
            base = 0.0 if phase == 1 else C
            reduced = base - u[:, None] - (lam @ psi)[None, :]
            reduced[active] = np.inf
            entering = reduced < -tol
            if not entering.any():
                break
            q = min(add_per_row, r)
            best = np.argpartition(reduced, q - 1, axis=1)[:, :q]
            pick = np.zeros_like(active)
            pick[np.arange(n)[:, None], best] = True
            active |= pick & entering
        if phase == 1 and res.fun > RESIDUAL_TOL * (1.0 + np.abs(t).max()):
            art = res.x[rows.size :]
            worst = int(np.argmax(art[:k] + art[k:]))
            return None, {"phase1": float(res.fun), "worst": n + worst, "rounds": rounds}
    return (rows, cols, res, A, b), {"rounds": rounds, "columns": int(rows.size)}


def solve_constrained_coupling(cost, row_w, constraints, grid_atoms, targets=None, method="colgen"):
    """Minimum-cost coupling with fixed rows and ψ-moment constrained columns.

    Solves

        minimise Σ_ij c_ij x_ij
        subject to Σ_j x_ij = row_w_i,  Σ_ij ψ_ℓ(η_j) x_ij = t_ℓ,  x >= 0.

    Parameters
    ----------
    cost : (n, r) array_like
    row_w : (n,) array_like
    constraints : ConstraintSpec
        Must carry targets unless ``targets`` is given.
    grid_atoms : (r, m) array_like
        Column locations ``η_j``.
    targets : array_like, optional
    method : {"colgen", "full"}
        ``"colgen"`` grows a restricted problem by pricing all ``n r``
        reduced costs each round; ``"full"`` hands every variable to the
        solver at once. Both use the HiGHS interior-point method with
        crossover, so the returned point is a vertex.

    Returns
    -------
    Coupling
        ``residuals`` are the ψ-constraint residuals at the coupling level and
        ``duals`` hold the row and constraint multipliers.

    Raises
    ------
    Infeasible
        With the index of the most violated constraint and the optimal
        phase-one objective.
    Unbounded
        Cannot occur for finite costs; raised if the solver claims it.
    """
    C = np.asarray(cost, dtype=float)
    n, r = C.shape
    _check_size(n, r)
    a = _as_weights(row_w, "row weights")
    grid = np.asarray(grid_atoms, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[0] != r:
        raise InfeasibleMarginals(f"{grid.shape[0]} grid atoms for {r} cost columns")
    t = constraints.targets if targets is None else np.asarray(targets, dtype=float).ravel()
    if t is None:
        raise ValueError("constraint targets are missing")
    psi = constraints.evaluate(grid)

    def infeasible(phase1, worst):
        label = f"row {worst}" if worst < n else f"constraint {worst - n} ({constraints.names[worst - n]})"
        raise Infeasible(f"constrained coupling is infeasible; most violated: {label}", constraint=worst, phase1=phase1)

    if method == "colgen":
        found, stats = _column_generation(C, psi, a, t)
        if found is None:
            infeasible(stats["phase1"], stats["worst"])
        rows, cols, res, A, b = found
        x = _polish(A, b, np.maximum(res.x, 0.0), MASS_TOL)
        mass = np.zeros((n, r))
        mass[rows, cols] = x
        solver = "highs-colgen"
    elif method == "full":
        A, b = _equality_system(n, r, psi, a, t)
        res = _solve_lp(C.ravel(), A, b, method="highs-ipm")
        if res.status == 2:
            infeasible(*_phase_one(A, b))
        mass = _polish(A, b, np.maximum(res.x, 0.0), MASS_TOL).reshape(n, r)
        stats = {}
        solver = "highs-ipm"
    else:
        raise ValueError(f"unknown method {method!r}")
    y = np.asarray(res.eqlin.marginals)
    u, lam = y[:n], y[n:]
    reduced = C - u[:, None] - (lam @ psi)[None, :]
    scale = max(float(np.abs(C).max()), 1e-14)
    cert = _certify(reduced, mass, scale)
    resid = psi @ mass.sum(0) - t
    info = dict(cert, solver=solver, iterations=int(res.nit), row_residual=float(np.abs(mass.sum(1) - a).max()), **stats)
    return Coupling(
        mass,
        a,
        None,
        float((C * mass).sum()),
        duals={"row": u, "constraint": lam},
        residuals=resid,
        info=info,
    )
