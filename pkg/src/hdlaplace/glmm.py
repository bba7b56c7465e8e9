"""Generalized linear mixed model likelihoods as Laplace-ready objectives.

The likelihood of a GLMM with canonical link is ``int exp(-g(u)) du`` with

    g(u) = sum_i [b(eta_i) - y_i eta_i] / a_i + 1/2 u^T Sigma^{-1} u
           + 1/2 log((2 pi)^d det Sigma),        eta = X beta + Z u.

Derivatives of order three and up are ``sum_i b^(k)(eta_i)/a_i Z_i^{(x)k}``,
which is diagonal whenever each row of ``Z`` has a single non-zero entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial
from scipy import linalg, special

from .laplace_engine import DEFAULT_TRUNCATION, GFunction, LaplaceExpansion, laplace_order1
from .tensor_core import DerivArray, normalize_derivs, ostar_norm

__all__ = [
    "Family",
    "FAMILIES",
    "get_family",
    "GlmmModel",
    "GlmmG",
    "build_g",
    "Hierarchy",
    "MultilevelModel",
    "collapsed_covariance",
    "original_model",
    "reparameterize_multilevel",
    "StructuredInverse",
    "structured_inverse",
    "Condition2Report",
    "check_condition2",
    "two_level_model",
    "simulate_two_level",
    "simulate_multilevel",
    "unbalanced_sizes",
]

LOG_2PI = math.log(2.0 * math.pi)


# -- exponential families ---------------------------------------------------


@lru_cache(maxsize=None)
def _logistic_poly(k: int) -> Polynomial:
    """``b^(k)`` of the logistic log-partition as a polynomial in ``mu``.

    Uses ``d mu / d eta = mu (1 - mu)`` starting from ``b' = mu``.
    """
    if k == 1:
        return Polynomial([0.0, 1.0])
    prev = _logistic_poly(k - 1)
    return prev.deriv() * Polynomial([0.0, 1.0, -1.0])


class Family:
    """Canonical-link exponential family, described by its log-partition ``b``."""

    name: str

    def b(self, eta):
        raise NotImplementedError

    def deriv(self, k: int, eta):
        """k-th derivative of ``b`` (``k >= 1``)."""
        raise NotImplementedError

    def sample(self, eta, rng, weights=None):
        raise NotImplementedError


class Poisson(Family):
    name = "poisson-log"

    def b(self, eta):
        return np.exp(eta)

    def deriv(self, k, eta):
        return np.exp(eta)

    def sample(self, eta, rng, weights=None):
        return rng.poisson(np.exp(eta)).astype(float)


class Bernoulli(Family):
    name = "bernoulli-logit"

    def b(self, eta):
        return np.logaddexp(0.0, eta)

    def deriv(self, k, eta):
        mu = special.expit(eta)
        return _logistic_poly(k)(mu)

    def sample(self, eta, rng, weights=None):
        return rng.binomial(1, special.expit(eta)).astype(float)


class Gaussian(Family):
    """Identity link; with ``a_i`` the residual variance this is the LMM."""

    name = "gaussian-identity"

    def b(self, eta):
        return 0.5 * np.square(eta)

    def deriv(self, k, eta):
        eta = np.asarray(eta, dtype=float)
        if k == 1:
            return eta
        return np.full_like(eta, 1.0 if k == 2 else 0.0)

    def sample(self, eta, rng, weights=None):
        scale = 1.0 if weights is None else np.sqrt(weights)
        return rng.normal(eta, scale)


FAMILIES = {f.name: f for f in (Poisson(), Bernoulli(), Gaussian())}
_ALIASES = {"poisson": "poisson-log", "bernoulli": "bernoulli-logit", "gaussian": "gaussian-identity"}


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    name = _ALIASES.get(family, family)
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None


# -- model and objective ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class GlmmModel:
    """Exponential-family mixed model ``eta = X beta + Z u``, ``u ~ N(0, Sigma)``."""

    family: Family
    X: np.ndarray
    Z: np.ndarray
    beta: np.ndarray
    Sigma: np.ndarray
    y: np.ndarray
    weights: np.ndarray

    def __init__(self, family, X, Z, beta, Sigma, y, weights=None):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        n, d = Z.shape
        X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float)
        if X.ndim < 2:
            X = X.reshape(n, -1)
        beta = np.zeros(X.shape[1]) if beta is None else np.asarray(beta, dtype=float).reshape(-1)
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        if X.shape[0] != n:
            raise ValueError("X needs one row per row of Z")
        if X.shape[1] != beta.shape[0]:
            raise ValueError("X and beta have inconsistent shapes")
        if Sigma.shape != (d, d):
            raise ValueError(f"Sigma must be {d}x{d}")
        if y.shape[0] != n or weights.shape[0] != n:
            raise ValueError("y and weights need one entry per row of Z")
        if np.any(~(weights > 0)):
            raise ValueError("dispersion weights a_i must be positive")
        if not np.allclose(Sigma, Sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Sigma).max())):
            raise ValueError("Sigma must be symmetric")
        try:
            chol = linalg.cholesky(Sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("Sigma must be positive definite") from exc
        for name, val in [
            ("family", get_family(family)),
            ("X", X),
            ("Z", Z),
            ("beta", beta),
            ("Sigma", Sigma),
            ("y", y),
            ("weights", weights),
        ]:
            object.__setattr__(self, name, val)
        object.__setattr__(self, "_sigma_chol", chol)

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    @property
    def offset(self) -> np.ndarray:
        return self.X @ self.beta

    @property
    def sigma_inv(self) -> np.ndarray:
        inv = linalg.cho_solve((self._sigma_chol, True), np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    @property
    def sigma_logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._sigma_chol))))

    def indicator_columns(self):
        """``(cols, vals)`` if each row of Z has at most one non-zero, else None."""
        nonzero = self.Z != 0
        if np.any(nonzero.sum(axis=1) > 1):
            return None
        cols = np.argmax(nonzero, axis=1)
        vals = self.Z[np.arange(self.n), cols]
        return cols, vals

    def normalizers(self) -> np.ndarray:
        """Number of observations involving each random effect."""
        return (self.Z != 0).sum(axis=0).astype(float)


class GlmmG(GFunction):
    """Negative log joint density of ``(y, u)`` as a function of ``u``."""

    def __init__(self, model: GlmmModel, truncation_order: int = DEFAULT_TRUNCATION):
        self.model = model
        self.dim = model.dim
        self.truncation_order = truncation_order
        self._offset = model.offset
        self._sigma_inv = model.sigma_inv
        self._const = 0.5 * (self.dim * LOG_2PI + model.sigma_logdet)
        self._indicator = model.indicator_columns()

    def _eta(self, u):
        return self._offset + self.model.Z @ np.asarray(u, dtype=float).reshape(self.dim)

    def value(self, u):
        u = np.asarray(u, dtype=float).reshape(self.dim)
        m = self.model
        eta = self._eta(u)
        h = np.sum((m.family.b(eta) - m.y * eta) / m.weights)
        return float(h + 0.5 * u @ self._sigma_inv @ u + self._const)

    def values(self, points, chunk: int = 4096):
        m = self.model
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(points.shape[0])
        for start in range(0, points.shape[0], chunk):
            u = points[start : start + chunk]
            eta = self._offset[None, :] + u @ m.Z.T
            h = ((m.family.b(eta) - m.y[None, :] * eta) / m.weights[None, :]).sum(axis=1)
            quad = 0.5 * np.einsum("ni,ij,nj->n", u, self._sigma_inv, u)
            out[start : start + chunk] = h + quad + self._const
        return out

    def gradient(self, u):
        u = np.asarray(u, dtype=float).reshape(self.dim)
        m = self.model
        eta = self._eta(u)
        return m.Z.T @ ((m.family.deriv(1, eta) - m.y) / m.weights) + self._sigma_inv @ u

    def data_hessian(self, u) -> np.ndarray:
        """``Z^T W(u) Z`` with ``W_ii = b''(eta_i) / a_i``."""
        m = self.model
        w = m.family.deriv(2, self._eta(u)) / m.weights
        if self._indicator is not None:
            cols, vals = self._indicator
            return np.diag(np.bincount(cols, weights=w * vals**2, minlength=self.dim))
        return (m.Z * w[:, None]).T @ m.Z

    def hessian(self, u):
        out = self.data_hessian(u) + self._sigma_inv
        return 0.5 * (out + out.T)

    def deriv_array(self, k, u):
        self._check_order(k)
        if k == 2:
            return DerivArray.from_dense(self.hessian(u), symmetrize=True)
        m = self.model
        w = m.family.deriv(k, self._eta(u)) / m.weights
        if self._indicator is not None:
            cols, vals = self._indicator
            return DerivArray.from_diagonal(np.bincount(cols, weights=w * vals**k, minlength=self.dim), k)
        return DerivArray.from_outer(w, m.Z, k)

    def default_normalizers(self) -> np.ndarray:
        return self.model.normalizers()


def build_g(model: GlmmModel, truncation_order: int = DEFAULT_TRUNCATION) -> GlmmG:
    return GlmmG(model, truncation_order)


def two_level_model(family, y, cluster, sigma2, d=None, X=None, beta=None, weights=None) -> GlmmModel:
    """Random-intercept model ``eta_i = x_i^T beta + u_{cluster[i]}``."""
    cluster = np.asarray(cluster, dtype=int)
    d = int(cluster.max()) + 1 if d is None else d
    Z = np.zeros((cluster.shape[0], d))
    Z[np.arange(cluster.shape[0]), cluster] = 1.0
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (d,))
    return GlmmModel(family, X, Z, beta, np.diag(sigma2), y, weights)


# -- multilevel structure ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Nested clustering of level-2 clusters.

    ``cluster_of[i]`` maps each level-2 cluster to its level-``(i + 3)``
    cluster, using contiguous ids ``0 .. d_l - 1``.
    """

    cluster_of: tuple
    cluster_sizes: np.ndarray

    def __init__(self, cluster_of, cluster_sizes):
        maps = tuple(np.asarray(c, dtype=int).reshape(-1) for c in cluster_of)
        sizes = np.asarray(cluster_sizes, dtype=int).reshape(-1)
        d = sizes.shape[0]
        for level, c in enumerate(maps, start=3):
            if c.shape[0] != d:
                raise ValueError(f"level-{level} map must have one entry per level-2 cluster ({d})")
            if c.min() < 0 or set(np.unique(c)) != set(range(int(c.max()) + 1)):
                raise ValueError(f"level-{level} cluster ids must be 0..d_l-1 with none unused")
        for level in range(len(maps) - 1):
            finer, coarser = maps[level], maps[level + 1]
            parent = {}
            for a, b in zip(finer, coarser):
                if parent.setdefault(int(a), int(b)) != int(b):
                    raise ValueError(f"clusters are not nested between levels {level + 3} and {level + 4}")
        object.__setattr__(self, "cluster_of", maps)
        object.__setattr__(self, "cluster_sizes", sizes)

    @property
    def levels(self) -> int:
        return 2 + len(self.cluster_of)

    @property
    def d(self) -> int:
        return self.cluster_sizes.shape[0]

    def n_clusters(self, level: int) -> int:
        if level == 2:
            return self.d
        return int(self.cluster_of[level - 3].max()) + 1

    def level_map(self, level: int) -> np.ndarray:
        if level == 2:
            return np.arange(self.d)
        return self.cluster_of[level - 3]

    @classmethod
    def from_groups(cls, groups, cluster_sizes):
        """Three-level hierarchy from a list of level-3 groups of level-2 ids."""
        d = len(cluster_sizes)
        c3 = np.full(d, -1)
        for gid, members in enumerate(groups):
            c3[list(members)] = gid
        if np.any(c3 < 0):
            raise ValueError("every level-2 cluster must belong to a group")
        return cls([c3], cluster_sizes)


def collapsed_covariance(hierarchy: Hierarchy, sigma2) -> np.ndarray:
    """Covariance of ``v_j = u^(2)_j + sum_l u^(l)_{c_l(j)}``.

    ``sigma2`` lists the variances for levels ``2 .. L``.  Entry ``(j, k)`` is
    the sum of ``sigma_l^2`` over every level at which ``j`` and ``k`` share
    a cluster.
    """
    sigma2 = np.asarray(sigma2, dtype=float).reshape(-1)
    if sigma2.shape[0] != hierarchy.levels - 1:
        raise ValueError(f"need {hierarchy.levels - 1} variances, got {sigma2.shape[0]}")
    out = sigma2[0] * np.eye(hierarchy.d)
    for level in range(3, hierarchy.levels + 1):
        c = hierarchy.level_map(level)
        out = out + sigma2[level - 2] * (c[:, None] == c[None, :])
    return out


@dataclass(frozen=True, eq=False)
class MultilevelModel:
    """Nested random-intercept model with independent per-level effects."""

    family: Family
    y: np.ndarray
    cluster: np.ndarray
    hierarchy: Hierarchy
    sigma2: np.ndarray
    X: np.ndarray | None = None
    beta: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        object.__setattr__(self, "cluster", np.asarray(self.cluster, dtype=int))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "sigma2", np.asarray(self.sigma2, dtype=float).reshape(-1))
        counts = np.bincount(self.cluster, minlength=self.hierarchy.d)
        if counts.shape[0] != self.hierarchy.d or np.any(counts != self.hierarchy.cluster_sizes):
            raise ValueError("hierarchy cluster sizes do not match the observation clusters")
        if self.sigma2.shape[0] != self.hierarchy.levels - 1:
            raise ValueError("need one variance per level 2..L")


def original_model(mm: MultilevelModel) -> GlmmModel:
    """Uncollapsed parameterization with one effect per cluster at each level."""
    h = mm.hierarchy
    n = mm.y.shape[0]
    columns, variances = [], []
    for level in range(2, h.levels + 1):
        ids = h.level_map(level)[mm.cluster]
        block = np.zeros((n, h.n_clusters(level)))
        block[np.arange(n), ids] = 1.0
        columns.append(block)
        variances.append(np.full(h.n_clusters(level), mm.sigma2[level - 2]))
    Z = np.hstack(columns)
    return GlmmModel(mm.family, mm.X, Z, mm.beta, np.diag(np.concatenate(variances)), mm.y, mm.weights)


def reparameterize_multilevel(mm: MultilevelModel) -> GlmmModel:
    """Collapse the nested effects into one effect per level-2 cluster."""
    n = mm.y.shape[0]
    Z = np.zeros((n, mm.hierarchy.d))
    Z[np.arange(n), mm.cluster] = 1.0
    Sigma = collapsed_covariance(mm.hierarchy, mm.sigma2)
    return GlmmModel(mm.family, mm.X, Z, mm.beta, Sigma, mm.y, mm.weights)


# -- Sherman-Morrison recursion ---------------------------------------------


@dataclass
class StructuredInverse:
    """Level-by-level inverses of the collapsed covariance and Hessian.

    Lists are indexed from level 2: ``sigma_inv[0]`` is ``Sigma^[2]``'s
    inverse, ``g_inv[-1]`` is the inverse of the full Hessian.  The
    recursion intermediates start at level 3.
    """

    sigma_inv: list
    g: list
    g_inv: list
    r: list = field(default_factory=list)
    s: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    a: list = field(default_factory=list)
    b: list = field(default_factory=list)

    @property
    def hessian_inverse(self) -> np.ndarray:
        return self.g_inv[-1]


def structured_inverse(mm: MultilevelModel, u_hat) -> StructuredInverse:
    """Invert ``Sigma`` and ``g''(u_hat)`` of the collapsed model by rank-one updates.

    Each level adds ``sigma_l^2 1 1^T`` to every level-``l`` block of the
    covariance, so both inverses follow from Sherman-Morrison:

    * ``Sigma_[l]^{-1} = Sigma_[l-1]^{-1} - sigma_l^2 r r^T / (1 + sigma_l^2 s_c)``
      with ``r`` the within-block row sums of the previous inverse and
      ``s_c`` their block total;
    * ``g^[l] = g^[l-1] - alpha r r^T`` with ``alpha = sigma_l^2 / (1 + sigma_l^2 s_c)``,
      hence ``g_[l]^{-1} = g_[l-1]^{-1} + alpha a a^T / (1 - alpha b_c)``
      where ``a = g_[l-1]^{-1} r`` and ``b_c = r^T a`` within the block.
    """
    h = mm.hierarchy
    model = reparameterize_multilevel(mm)
    eta = model.offset + model.Z @ np.asarray(u_hat, dtype=float)
    w = model.family.deriv(2, eta) / model.weights
    h_diag = np.bincount(mm.cluster, weights=w, minlength=h.d)
    s2 = mm.sigma2[0]
    sinv = np.eye(h.d) / s2
    g = np.diag(h_diag + 1.0 / s2)
    ginv = np.diag(1.0 / (h_diag + 1.0 / s2))
    out = StructuredInverse([sinv], [g], [ginv])
    for level in range(3, h.levels + 1):
        sl = mm.sigma2[level - 2]
        c = h.level_map(level)
        same = c[:, None] == c[None, :]
        r = (sinv * same).sum(axis=1)
        s = np.bincount(c, weights=r)
        denom = 1.0 + sl * s
        if np.any(denom == 0):
            raise ZeroDivisionError(f"1 + sigma^2 s_c vanished at level {level}")
        alpha_c = sl / denom
        alpha = alpha_c[c]
        sinv = sinv - same * alpha[:, None] * np.outer(r, r)
        g = g - same * alpha[:, None] * np.outer(r, r)
        a = (ginv * same) @ r
        b = np.bincount(c, weights=r * a)
        denom_g = 1.0 - alpha_c * b
        if np.any(denom_g == 0):
            raise ZeroDivisionError(f"1 - alpha b_c vanished at level {level}")
        ginv = ginv + same * (alpha / denom_g[c])[:, None] * np.outer(a, a)
        out.sigma_inv.append(sinv)
        out.g.append(g)
        out.g_inv.append(ginv)
        out.r.append(r)
        out.s.append(s)
        out.alpha.append(alpha_c)
        out.a.append(a)
        out.b.append(b)
    return out


# -- normalized-array diagnostics ------------------------------------------


@dataclass
class Condition2Report:
    """Largest O*-norms of the normalized arrays at the minimum."""

    normalizers: np.ndarray
    array_norms: dict
    inverse_norm: float
    u_hat: np.ndarray

    def as_dict(self) -> dict:
        out = {f"f{k}": v for k, v in self.array_norms.items()}
        out["f2_inverse"] = self.inverse_norm
        return out


def check_condition2(g: GFunction, n=None, max_order: int = 4, expansion: LaplaceExpansion | None = None):
    """O*-norms of ``f^(k)`` for ``3 <= k <= max_order`` and of ``[f^(2)]^{-1}``.

    ``n`` defaults to ``g.default_normalizers()`` (observations per effect).
    """
    if n is None:
        n = g.default_normalizers()
    if expansion is None:
        expansion = laplace_order1(g)
    u_hat = expansion.u_hat
    arrays = [g.deriv_array(k, u_hat) for k in range(3, max_order + 1)]
    f_arrays, f_inverse = normalize_derivs(arrays, expansion.inverse2, n)
    norms = {k: ostar_norm(f).max_norm for k, f in zip(range(3, max_order + 1), f_arrays)}
    return Condition2Report(np.asarray(n, dtype=float), norms, ostar_norm(f_inverse).max_norm, u_hat)


# -- simulation ---------------------------------------------------------------


def unbalanced_sizes(d: int, n_total: int | None = None) -> np.ndarray:
    """``ceil(log d)`` observations in each of ``d - 1`` clusters, the rest in the last.

    ``n_total`` defaults to ``10 * d * ceil(log d)``.
    """
    small = math.ceil(math.log(d))
    if n_total is None:
        n_total = 10 * d * small
    last = n_total - (d - 1) * small
    if last < 1:
        raise ValueError("n_total too small for the unbalanced design")
    return np.array([small] * (d - 1) + [last])


def simulate_two_level(family, sizes, sigma2: float, beta0: float, rng) -> GlmmModel:
    """Draw ``u ~ N(0, sigma2 I)`` then responses; intercept-only fixed part."""
    family = get_family(family)
    sizes = np.asarray(sizes, dtype=int)
    cluster = np.repeat(np.arange(sizes.shape[0]), sizes)
    u = rng.normal(0.0, math.sqrt(sigma2), size=sizes.shape[0])
    eta = beta0 + u[cluster]
    y = family.sample(eta, rng)
    X = np.ones((cluster.shape[0], 1))
    return two_level_model(family, y, cluster, sigma2, d=sizes.shape[0], X=X, beta=[beta0])


def simulate_multilevel(family, hierarchy: Hierarchy, sigma2, beta0: float, rng) -> MultilevelModel:
    family = get_family(family)
    sigma2 = np.asarray(sigma2, dtype=float)
    cluster = np.repeat(np.arange(hierarchy.d), hierarchy.cluster_sizes)
    v = rng.normal(0.0, math.sqrt(sigma2[0]), size=hierarchy.d)
    for level in range(3, hierarchy.levels + 1):
        effects = rng.normal(0.0, math.sqrt(sigma2[level - 2]), size=hierarchy.n_clusters(level))
        v = v + effects[hierarchy.level_map(level)]
    eta = beta0 + v[cluster]
    y = family.sample(eta, rng)
    X = np.ones((cluster.shape[0], 1))
    return MultilevelModel(family, y, cluster, hierarchy, sigma2, X, np.array([beta0]))
