"""Laplace approximations of log-integrals and their higher-order corrections.

For ``L = int exp(-g(u)) du`` the first-order approximation to ``log L`` is

    ell1 = -1/2 log det g''(u_hat) + d/2 log(2 pi) - g(u_hat)

and the order-``k`` approximation adds the level-1 through level-(k-1) series
terms.  Each level term is a weighted sum, over classes of connected
bipartitions, of full index contractions of the derivative arrays of ``g``
with the inverse Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg

from .bipartition import enumerate_connected_level, iter_connected, level_shapes
from .tensor_core import DerivArray, contract_bipartition

__all__ = [
    "GFunction",
    "QuadraticG",
    "ExpLinearG",
    "ReparameterizedG",
    "LaplaceExpansion",
    "NotPositiveDefinite",
    "ConvergenceError",
    "minimize",
    "laplace_order1",
    "series_term",
    "level_contribution",
    "laplace_order_k",
    "reparameterize",
    "check_reparameterization_invariance",
    "DEFAULT_TRUNCATION",
]

DEFAULT_TRUNCATION = 6
LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """The Hessian of ``g`` failed a Cholesky factorization."""


class ConvergenceError(RuntimeError):
    pass


class GFunction:
    """Smooth objective ``g`` with derivative arrays up to ``truncation_order``.

    Subclasses implement :meth:`value`, :meth:`gradient` and
    :meth:`deriv_array`.  :meth:`hessian` defaults to the dense order-2
    array and :meth:`values` to a loop over :meth:`value`.
    """

    dim: int
    truncation_order: int = DEFAULT_TRUNCATION

    def value(self, u) -> float:
        raise NotImplementedError

    def gradient(self, u) -> np.ndarray:
        raise NotImplementedError

    def deriv_array(self, k: int, u) -> DerivArray:
        raise NotImplementedError

    def hessian(self, u) -> np.ndarray:
        return self.deriv_array(2, u).to_dense()

    def values(self, points) -> np.ndarray:
        """``g`` at each row of ``points`` (shape ``(N, d)``)."""
        return np.array([self.value(p) for p in np.atleast_2d(points)])

    def _check_order(self, k):
        if k < 2 or k > self.truncation_order:
            raise ValueError(f"derivative order {k} outside [2, {self.truncation_order}]")


class QuadraticG(GFunction):
    """``g(u) = 1/2 (u - center)^T A (u - center) + c``."""

    def __init__(self, a, c: float = 0.0, center=None, truncation_order: int = DEFAULT_TRUNCATION):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.dim = self.a.shape[0]
        self.c = float(c)
        self.center = np.zeros(self.dim) if center is None else np.asarray(center, dtype=float)
        self.truncation_order = truncation_order

    def value(self, u):
        r = np.asarray(u, dtype=float) - self.center
        return 0.5 * r @ self.a @ r + self.c

    def values(self, points):
        r = np.atleast_2d(points) - self.center
        return 0.5 * np.einsum("ni,ij,nj->n", r, self.a, r) + self.c

    def gradient(self, u):
        return self.a @ (np.asarray(u, dtype=float) - self.center)

    def deriv_array(self, k, u):
        self._check_order(k)
        if k == 2:
            return DerivArray.from_dense(self.a, symmetrize=True)
        return DerivArray.from_diagonal(np.zeros(self.dim), k)

    def exact_log_integral(self) -> float:
        _, logdet = np.linalg.slogdet(self.a)
        return -0.5 * logdet + 0.5 * self.dim * LOG_2PI - self.c


class ExpLinearG(GFunction):
    """One-dimensional ``g(u) = n (exp(u) - u)``.

    ``int exp(-g) du = Gamma(n) / n**n``, which makes this the standard test
    case: every derivative of order two or more equals ``n`` at the minimum.
    """

    dim = 1

    def __init__(self, n: float, truncation_order: int = DEFAULT_TRUNCATION):
        self.n = float(n)
        self.truncation_order = truncation_order

    def value(self, u):
        u = float(np.asarray(u).reshape(-1)[0])
        return self.n * (math.exp(u) - u)

    def values(self, points):
        u = np.asarray(points, dtype=float).reshape(-1)
        return self.n * (np.exp(u) - u)

    def gradient(self, u):
        u = float(np.asarray(u).reshape(-1)[0])
        return np.array([self.n * (math.exp(u) - 1.0)])

    def deriv_array(self, k, u):
        self._check_order(k)
        u = float(np.asarray(u).reshape(-1)[0])
        val = self.n * math.exp(u)
        if k == 2:
            return DerivArray.from_dense([[val]])
        return DerivArray.from_diagonal([val], k)

    def exact_log_integral(self) -> float:
        return math.lgamma(self.n) - self.n * math.log(self.n)


class ReparameterizedG(GFunction):
    """``g_v(v) = g(A^{-1} v) + log|det A|`` for ``v = A u``.

    The integral of ``exp(-g_v)`` equals that of ``exp(-g)``.
    """

    def __init__(self, base: GFunction, a):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if a.shape != (base.dim, base.dim):
            raise ValueError("A must be square with the dimension of g")
        sign, logdet = np.linalg.slogdet(a)
        if sign == 0 or not np.isfinite(logdet):
            raise np.linalg.LinAlgError("reparameterization matrix is singular")
        self.base = base
        self.a = a
        self.a_inv = np.linalg.inv(a)
        self.log_abs_det = logdet
        self.condition_number = float(np.linalg.cond(a))
        self.dim = base.dim
        self.truncation_order = base.truncation_order

    def value(self, v):
        return self.base.value(self.a_inv @ np.asarray(v, dtype=float)) + self.log_abs_det

    def values(self, points):
        return self.base.values(np.atleast_2d(points) @ self.a_inv.T) + self.log_abs_det

    def gradient(self, v):
        return self.a_inv.T @ self.base.gradient(self.a_inv @ np.asarray(v, dtype=float))

    def hessian(self, v):
        h = self.base.hessian(self.a_inv @ np.asarray(v, dtype=float))
        out = self.a_inv.T @ h @ self.a_inv
        return 0.5 * (out + out.T)

    def deriv_array(self, k, v):
        self._check_order(k)
        u = self.a_inv @ np.asarray(v, dtype=float)
        if k == 2:
            return DerivArray.from_dense(self.hessian(v), symmetrize=True)
        return self.base.deriv_array(k, u).transform(self.a_inv)


def reparameterize(g: GFunction, a) -> ReparameterizedG:
    return ReparameterizedG(g, a)


def _cholesky(h: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(h, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("Hessian is not positive definite") from exc


def minimize(g: GFunction, u0=None, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Newton's method with step halving.

    Stops once the gradient max-norm is at most ``tol`` or the Newton step is
    negligible relative to ``u``.  Raises
    :class:`NotPositiveDefinite` if a Hessian along the path is not positive
    definite and :class:`ConvergenceError` after ``max_iter`` iterations.
    """
    u = np.zeros(g.dim) if u0 is None else np.array(u0, dtype=float).reshape(g.dim)
    f = g.value(u)
    for _ in range(max_iter):
        grad = g.gradient(u)
        if np.max(np.abs(grad)) <= tol:
            return u
        chol = _cholesky(g.hessian(u))
        step = -linalg.cho_solve((chol, True), grad)
        decrement = -grad @ step
        if np.max(np.abs(step)) <= 1e-12 * (1.0 + np.max(np.abs(u))):
            # gradient is at its rounding floor (large-curvature directions)
            return u + step
        if decrement < 1e-14 * max(1.0, abs(f)):
            # quadratic regime: function values no longer resolve progress
            u = u + step
            f = g.value(u)
            continue
        alpha = 1.0
        for _ in range(60):
            trial = u + alpha * step
            f_trial = g.value(trial)
            if np.isfinite(f_trial) and f_trial <= f - 1e-4 * alpha * decrement:
                break
            alpha *= 0.5
        else:
            raise ConvergenceError("line search failed to decrease g")
        u, f = trial, f_trial
    grad = g.gradient(u)
    if np.max(np.abs(grad)) <= tol:
        return u
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (|grad|={np.max(np.abs(grad)):.3g})")


@dataclass
class LaplaceExpansion:
    """First-order Laplace approximation plus any computed series terms."""

    u_hat: np.ndarray
    g_at_uhat: float
    logdet_g2: float
    ell1: float
    inverse2: np.ndarray
    e_levels: dict[int, float] = field(default_factory=dict)
    derivs: dict[int, DerivArray] = field(default_factory=dict, repr=False)

    def order_k(self, k: int) -> float:
        """``ell1 + e_1 + ... + e_{k-1}``."""
        if k < 1:
            raise ValueError("k must be at least 1")
        missing = [l for l in range(1, k) if l not in self.e_levels]
        if missing:
            raise KeyError(f"levels {missing} have not been computed")
        return self.ell1 + sum(self.e_levels[l] for l in range(1, k))

    def errors(self, ell_exact: float) -> dict[int, float]:
        """``epsilon_k = ell_k - ell`` for every available order."""
        top = max(self.e_levels, default=0) + 1
        return {k: self.order_k(k) - ell_exact for k in range(1, top + 1)}


def laplace_order1(g: GFunction, u0=None, tol: float = 1e-10) -> LaplaceExpansion:
    u_hat = minimize(g, u0, tol=tol)
    h = g.hessian(u_hat)
    chol = _cholesky(h)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    inverse2 = linalg.cho_solve((chol, True), np.eye(g.dim))
    inverse2 = 0.5 * (inverse2 + inverse2.T)
    g_hat = g.value(u_hat)
    ell1 = -0.5 * logdet + 0.5 * g.dim * LOG_2PI - g_hat
    return LaplaceExpansion(u_hat, g_hat, logdet, ell1, inverse2)


def series_term(derivs: Mapping[int, DerivArray], inverse2, level: int, members: bool = False) -> float:
    """Level-``level`` series term from derivative arrays at the minimum.

    ``derivs`` maps each order ``k >= 3`` to the array ``g^(k)``.  Every class
    of connected bipartitions contributes
    ``multiplicity * (-1)^v / (2m)! * contraction``.  With ``members=True``
    the sum runs over every individual bipartition instead (exhaustive, only
    practical for ``2m <= 8``); it is a self-check of the class weights.
    """
    inverse2 = inverse2.to_dense() if isinstance(inverse2, DerivArray) else np.asarray(inverse2, dtype=float)
    max_block = 2 * level + 2
    missing = [k for k in range(3, max_block + 1) if k not in derivs]
    if missing:
        raise ValueError(f"level {level} needs derivative arrays of orders {missing}")
    total = 0.0
    if members:
        for v, m in level_shapes(level):
            coef = (-1) ** v / math.factorial(2 * m)
            for b in iter_connected(v, m):
                arrays = [derivs[len(p)] for p in b.p_blocks]
                total += coef * contract_bipartition(arrays, inverse2, b)
        return total
    for cls in enumerate_connected_level(level):
        rep = cls.representative
        arrays = [derivs[len(p)] for p in rep.p_blocks]
        coef = cls.multiplicity * (-1) ** rep.v / math.factorial(2 * rep.m)
        total += coef * contract_bipartition(arrays, inverse2, rep)
    return total


def _ensure_derivs(g: GFunction, expansion: LaplaceExpansion, level: int):
    max_block = 2 * level + 2
    if g.truncation_order < max_block:
        raise ValueError(
            f"level {level} needs derivatives up to order {max_block}; g is truncated at {g.truncation_order}"
        )
    for k in range(3, max_block + 1):
        if k not in expansion.derivs:
            expansion.derivs[k] = g.deriv_array(k, expansion.u_hat)
    return expansion.derivs


def level_contribution(g: GFunction, expansion: LaplaceExpansion, level: int) -> float:
    """Compute, store and return ``e_level`` for ``g`` at ``expansion.u_hat``."""
    if level < 1:
        raise ValueError("level must be at least 1")
    derivs = _ensure_derivs(g, expansion, level)
    value = series_term(derivs, expansion.inverse2, level)
    expansion.e_levels[level] = value
    return value


def laplace_order_k(g: GFunction, k: int, u0=None) -> LaplaceExpansion:
    """Expansion carrying the series terms needed for ``order_k(k)``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if g.truncation_order < 2 * k:
        raise ValueError(f"order {k} needs derivatives up to order {2 * k}")
    expansion = laplace_order1(g, u0)
    for level in range(1, k):
        level_contribution(g, expansion, level)
    return expansion


def check_reparameterization_invariance(g: GFunction, a, k: int, u0=None) -> float:
    """``|ell_k(g) - ell_k(g_v)|`` for the linear change of variables ``v = A u``."""
    original = laplace_order_k(g, k, u0)
    g_v = ReparameterizedG(g, a)
    v0 = None if u0 is None else g_v.a @ np.asarray(u0, dtype=float)
    transformed = laplace_order_k(g_v, k, v0)
    return abs(original.order_k(k) - transformed.order_k(k))
