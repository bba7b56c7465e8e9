"""Reference log-integrals by adaptive Gauss-Hermite quadrature.

Every rule is centred at the integrand's mode and scaled by the Hessian
there, so the transformed integrand is close to the Gauss-Hermite weight and
a modest number of nodes reaches near machine precision.  Each result carries
the change observed when the rule is refined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from .glmm import GlmmModel, build_g
from .laplace_engine import GFunction, laplace_order1, minimize

__all__ = [
    "QuadratureSpec",
    "OracleResult",
    "OracleInfeasible",
    "gauss_hermite",
    "log_integral_1d",
    "exact_loglik_two_level",
    "exact_log_integral_tensor",
    "exact_loglik_tensor",
    "MAX_TENSOR_DIM",
    "MAX_TENSOR_NODES",
]

LOG_2PI = math.log(2.0 * math.pi)
MAX_TENSOR_DIM = 6
MAX_TENSOR_NODES = 30
# grids larger than this are pruned: points whose product weight is more
# than PRUNE_LOG_RATIO (in log) below the largest are dropped, and the
# dropped weight mass is added to the error estimate
FULL_GRID_LIMIT = 2 * 10**6
PRUNE_LOG_RATIO = 46.0


class OracleInfeasible(RuntimeError):
    """The requested quadrature cannot be applied to this model."""


@dataclass(frozen=True)
class QuadratureSpec:
    nodes_per_dim: int | None = None
    adaptive: bool = True
    refinement_check: bool = True

    def __post_init__(self):
        if self.nodes_per_dim is not None and self.nodes_per_dim < 10:
            raise ValueError("nodes_per_dim must be at least 10")

    def nodes(self, default: int) -> int:
        return default if self.nodes_per_dim is None else self.nodes_per_dim


@dataclass(frozen=True)
class OracleResult:
    value: float
    error_estimate: float
    nodes: int
    refined_nodes: int | None
    reliable: bool = True

    def __float__(self):
        return self.value


def gauss_hermite(n: int):
    """Nodes and log-weights of the physicists' rule (weight ``exp(-x^2)``)."""
    x, w = np.polynomial.hermite.hermgauss(n)
    return x, np.log(w)


# -- one-dimensional / factorized -------------------------------------------


def _separable_mode(grad_fn, hess_fn, value_fn, u0, tol=1e-10, max_iter=100):
    """Componentwise Newton for a sum of independent strictly convex 1-D terms."""
    u = np.array(u0, dtype=float)
    f = value_fn(u)
    for _ in range(max_iter):
        grad = grad_fn(u)
        step = -grad / hess_fn(u)
        # the gradient of a large cluster cannot get below rounding, so a
        # negligible Newton step also counts as converged
        if np.all((np.abs(grad) <= tol) | (np.abs(step) <= 1e-10 * (1.0 + np.abs(u)))):
            return u
        alpha = np.ones_like(u)
        # below rounding of f the line search is blind; take the full step
        tiny = 0.5 * np.abs(grad * step) <= 1e-13 * np.maximum(1.0, np.abs(f))
        for _ in range(60):
            trial = u + alpha * step
            f_trial = value_fn(trial)
            bad = ~(tiny | (f_trial <= f + 1e-14 * np.maximum(1.0, np.abs(f))))
            if not np.any(bad):
                break
            alpha = np.where(bad, 0.5 * alpha, alpha)
        u, f = trial, f_trial
    grad = grad_fn(u)
    if np.all((np.abs(grad) <= tol) | (np.abs(grad / hess_fn(u)) <= 1e-10 * (1.0 + np.abs(u)))):
        return u
    raise RuntimeError("per-cluster mode search did not converge")


def log_integral_1d(g: GFunction, spec: QuadratureSpec | None = None) -> OracleResult:
    """``log int exp(-g(u)) du`` for a one-dimensional ``g``."""
    spec = spec or QuadratureSpec()
    if g.dim != 1:
        raise OracleInfeasible("log_integral_1d needs a one-dimensional g")
    u_hat = minimize(g)
    curvature = float(g.hessian(u_hat)[0, 0])
    mode = float(u_hat[0])
    g_hat = g.value(u_hat)

    def rule(n):
        x, logw = gauss_hermite(n)
        if spec.adaptive:
            scale = math.sqrt(2.0 / curvature)
            pts = mode + scale * x
            terms = logw + x**2 - (g.values(pts[:, None]) - g_hat)
            return math.log(scale) + logsumexp(terms) - g_hat
        terms = logw + x**2 - g.values(x[:, None])
        return logsumexp(terms)

    n = spec.nodes(50)
    value = rule(n)
    if not spec.refinement_check:
        return OracleResult(value, float("nan"), n, None)
    refined = rule(2 * n)
    return OracleResult(refined, abs(refined - value), n, 2 * n)


def exact_loglik_two_level(model: GlmmModel, spec: QuadratureSpec | None = None) -> OracleResult:
    """Exact log-likelihood of a model whose integral factorizes by cluster.

    Requires a diagonal ``Sigma`` and a ``Z`` with one non-zero per row; the
    log-likelihood is then a sum of one-dimensional log-integrals, each done
    by adaptive Gauss-Hermite at the cluster's own mode and curvature.
    """
    spec = spec or QuadratureSpec()
    indicator = model.indicator_columns()
    off_diag = model.Sigma - np.diag(np.diag(model.Sigma))
    if indicator is None or np.any(off_diag != 0):
        raise OracleInfeasible("model does not factorize into one-dimensional integrals")
    cols, zvals = indicator
    d, n = model.dim, model.n
    fam = model.family
    var = np.diag(model.Sigma)
    off, y, a = model.offset, model.y, model.weights
    # rows without random effects contribute a constant
    active = zvals != 0
    const = float(np.sum((fam.b(off[~active]) - y[~active] * off[~active]) / a[~active]))
    cols, zvals, off, y, a = cols[active], zvals[active], off[active], y[active], a[active]
    summer = sparse.csr_matrix((np.ones(cols.shape[0]), (cols, np.arange(cols.shape[0]))), shape=(d, cols.shape[0]))
    prior_const = 0.5 * (LOG_2PI + np.log(var))

    def cluster_values(u):
        eta = off + zvals * u[cols]
        return summer @ ((fam.b(eta) - y * eta) / a) + 0.5 * u**2 / var + prior_const

    def cluster_grad(u):
        eta = off + zvals * u[cols]
        return summer @ (zvals * (fam.deriv(1, eta) - y) / a) + u / var

    def cluster_hess(u):
        eta = off + zvals * u[cols]
        return summer @ (zvals**2 * fam.deriv(2, eta) / a) + 1.0 / var

    mode = _separable_mode(cluster_grad, cluster_hess, cluster_values, np.zeros(d))
    curvature = cluster_hess(mode)
    g_hat = cluster_values(mode)
    scale = np.sqrt(2.0 / curvature) if spec.adaptive else np.ones(d)
    center = mode if spec.adaptive else np.zeros(d)

    def rule(nodes):
        x, logw = gauss_hermite(nodes)
        pts = center[:, None] + scale[:, None] * x[None, :]  # (d, nodes)
        eta = off[:, None] + zvals[:, None] * pts[cols]
        data = summer @ ((fam.b(eta) - y[:, None] * eta) / a[:, None])
        gv = data + 0.5 * pts**2 / var[:, None] + prior_const[:, None]
        if spec.adaptive:
            terms = logw[None, :] + x[None, :] ** 2 - (gv - g_hat[:, None])
            per_cluster = np.log(scale) + logsumexp(terms, axis=1) - g_hat
        else:
            terms = logw[None, :] + x[None, :] ** 2 - gv
            per_cluster = logsumexp(terms, axis=1)
        return float(np.sum(per_cluster)) - const

    nodes = spec.nodes(50)
    # far-out nodes may overflow exp; they carry zero weight after logsumexp
    with np.errstate(over="ignore"):
        value = rule(nodes)
        refined = rule(2 * nodes) if spec.refinement_check else None
    if refined is None:
        return OracleResult(value, float("nan"), nodes, None)
    return OracleResult(refined, abs(refined - value), nodes, 2 * nodes)


# -- tensor product -----------------------------------------------------------


def _pruned_grid(d: int, nodes: int, log_ratio: float = np.inf, chunk: int = 2**18):
    """Yield ``(indices, log_weights)`` batches of the pruned tensor grid.

    A point is kept when its product weight is within ``log_ratio`` (in
    log) of the largest product weight; the default keeps the full grid.  Prefixes over the leading
    dimensions are filtered with an optimistic bound, then expanded over the
    last two dimensions batch by batch to bound memory.
    """
    _, logw = gauss_hermite(nodes)
    best = logw.max()
    threshold = d * best - log_ratio
    head = max(d - 2, 1)
    idx = np.arange(nodes)[:, None]
    partial = logw.copy()
    keep = partial + (d - 1) * best >= threshold
    idx, partial = idx[keep], partial[keep]
    for level in range(1, head):
        new = np.tile(np.arange(nodes), idx.shape[0])
        cand_lw = np.repeat(partial, nodes) + logw[new]
        keep = cand_lw + (d - level - 1) * best >= threshold
        idx = np.column_stack([np.repeat(idx, nodes, axis=0)[keep], new[keep]])
        partial = cand_lw[keep]
    if head == d:
        keep = partial >= threshold
        yield idx[keep], partial[keep]
        return
    tail = d - head
    tail_idx = np.array(list(np.ndindex(*(nodes,) * tail)))
    tail_lw = logw[tail_idx].sum(axis=1)
    batch = max(1, chunk // tail_idx.shape[0])
    for start in range(0, idx.shape[0], batch):
        pre, pre_lw = idx[start : start + batch], partial[start : start + batch]
        lw = pre_lw[:, None] + tail_lw[None, :]
        rows, cols = np.nonzero(lw >= threshold)
        yield np.column_stack([pre[rows], tail_idx[cols]]), lw[rows, cols]


def exact_log_integral_tensor(g: GFunction, spec: QuadratureSpec | None = None) -> OracleResult:
    """``log int exp(-g(u)) du`` on a pruned tensor-product adaptive rule.

    The grid is mapped through ``u = u_hat + sqrt(2) L^{-T} x`` where
    ``L L^T`` is the Hessian at the mode.  The refined rule uses
    ``min(2 n, 30)`` nodes per dimension.
    """
    spec = spec or QuadratureSpec()
    d = g.dim
    if d > MAX_TENSOR_DIM:
        raise OracleInfeasible(f"tensor quadrature limited to d <= {MAX_TENSOR_DIM} (got {d})")
    nodes = spec.nodes(20)
    if nodes > MAX_TENSOR_NODES:
        raise OracleInfeasible(f"tensor quadrature limited to {MAX_TENSOR_NODES} nodes per dimension")
    expansion = laplace_order1(g)
    u_hat, g_hat = expansion.u_hat, expansion.g_at_uhat
    if spec.adaptive:
        chol = linalg.cholesky(g.hessian(u_hat), lower=True)
        transform = math.sqrt(2.0) * linalg.solve_triangular(chol, np.eye(d), lower=True, trans="T")
        log_jac = 0.5 * d * math.log(2.0) - 0.5 * expansion.logdet_g2
        center = u_hat
    else:
        transform, log_jac, center = np.eye(d), 0.0, np.zeros(d)

    def rule(n):
        x, logw_1d = gauss_hermite(n)
        terms, kept = [], []
        ratio = PRUNE_LOG_RATIO if n**d > FULL_GRID_LIMIT else np.inf
        for idx, logw in _pruned_grid(d, n, ratio):
            pts = x[idx]
            gv = g.values(center[None, :] + pts @ transform.T)
            shift = g_hat if spec.adaptive else 0.0
            terms.append(logsumexp(logw + np.sum(pts**2, axis=1) - (gv - shift)))
            kept.append(logsumexp(logw))
        dropped = max(0.0, 1.0 - math.exp(logsumexp(kept) - d * logsumexp(logw_1d)))
        total = logsumexp(terms)
        if spec.adaptive:
            return log_jac + total - g_hat, dropped
        return total, dropped

    refined_nodes = min(2 * nodes, MAX_TENSOR_NODES)
    if spec.refinement_check and refined_nodes <= nodes:
        raise OracleInfeasible("refinement needs more nodes than the cap allows; lower nodes_per_dim")
    with np.errstate(over="ignore"):
        value, dropped = rule(nodes)
        if not spec.refinement_check:
            return OracleResult(value, dropped, nodes, None)
        refined, dropped_refined = rule(refined_nodes)
    error = abs(refined - value) + dropped_refined
    return OracleResult(refined, error, nodes, refined_nodes, reliable=error <= 1e-6)


def _independent_blocks(model: GlmmModel) -> list[np.ndarray]:
    """Groups of random effects that no observation or prior term couples."""
    pattern = (model.Z != 0).astype(float)
    coupled = (pattern.T @ pattern != 0) | (np.abs(model.sigma_inv) > 0)
    n_blocks, labels = connected_components(sparse.csr_matrix(coupled), directed=False)
    return [np.flatnonzero(labels == b) for b in range(n_blocks)]


def _sub_model(model: GlmmModel, cols: np.ndarray) -> GlmmModel:
    rows = np.flatnonzero((model.Z[:, cols] != 0).any(axis=1))
    return GlmmModel(
        model.family,
        model.X[rows],
        model.Z[np.ix_(rows, cols)],
        model.beta,
        model.Sigma[np.ix_(cols, cols)],
        model.y[rows],
        model.weights[rows],
    )


def exact_loglik_tensor(model: GlmmModel, spec: QuadratureSpec | None = None, factorize: bool = True) -> OracleResult:
    """Exact log-likelihood by tensor-product adaptive Gauss-Hermite.

    With ``factorize`` the random effects are first split into blocks that
    neither share an observation nor a prior correlation; the integral is
    the product of the block integrals, each done on its own grid.
    """
    if model.dim > MAX_TENSOR_DIM:
        raise OracleInfeasible(f"tensor quadrature limited to d <= {MAX_TENSOR_DIM} (got {model.dim})")
    if not factorize:
        return exact_log_integral_tensor(build_g(model), spec)
    untouched = ~(model.Z != 0).any(axis=1)
    off, y, a = model.offset[untouched], model.y[untouched], model.weights[untouched]
    const = float(np.sum((model.family.b(off) - y * off) / a))
    parts = [exact_log_integral_tensor(build_g(_sub_model(model, cols)), spec) for cols in _independent_blocks(model)]
    error = sum(p.error_estimate for p in parts)
    return OracleResult(
        sum(p.value for p in parts) - const,
        error,
        parts[0].nodes,
        parts[0].refined_nodes,
        reliable=all(p.reliable for p in parts),
    )
