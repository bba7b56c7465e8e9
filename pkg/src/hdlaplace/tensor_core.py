"""Symmetric derivative arrays and the contractions built on them.

A :class:`DerivArray` holds the order-k array of partial derivatives of a
scalar function at a point.  Three storage layouts are supported:

``dense``
    the full ``(d,) * k`` array.
``diagonal``
    only the entries ``A[j, ..., j]``; everything off the diagonal is zero.
    Random-intercept mixed models produce these for every ``k >= 3``.
``outer``
    a weighted sum of symmetric rank-one terms ``sum_r w_r z_r^{(x)k}``,
    stored as ``weights`` (r,) and ``loadings`` (r, d).  This is the natural
    form of ``sum_i b^(k)(eta_i) Z_i^{(x)k}`` for a general design matrix.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DerivArray",
    "OStarReport",
    "ContractionTooLarge",
    "ostar_norm",
    "contract_bipartition",
    "normalize_derivs",
    "index_product",
    "DENSE_ENTRY_LIMIT",
    "CONTRACTION_FLOP_LIMIT",
]

# largest number of entries an `outer` array is expanded to
DENSE_ENTRY_LIMIT = 10**7
# largest optimized einsum cost accepted by contract_bipartition
CONTRACTION_FLOP_LIMIT = 10**10

_STORAGES = ("dense", "diagonal", "outer")


class ContractionTooLarge(RuntimeError):
    """Raised when a contraction or dense expansion exceeds the size caps."""


@dataclass(frozen=True, eq=False)
class DerivArray:
    """Order-``order`` symmetric array over ``dim`` indices.

    Use the :meth:`from_dense`, :meth:`from_diagonal` and
    :meth:`from_outer` constructors rather than calling this directly.
    """

    order: int
    dim: int
    storage: str
    values: np.ndarray
    loadings: np.ndarray | None = None

    def __post_init__(self):
        if self.storage not in _STORAGES:
            raise ValueError(f"unknown storage {self.storage!r}")
        if self.order < 1 or self.dim < 1:
            raise ValueError("order and dim must be positive")

    # -- constructors -----------------------------------------------------
    @classmethod
    def from_dense(cls, values, symmetrize: bool = False, atol: float = 1e-12):
        """Wrap a dense array, optionally symmetrizing it first.

        Without ``symmetrize`` the input must already be symmetric to
        within ``atol`` relative to its largest entry.
        """
        values = np.array(values, dtype=float)
        k = values.ndim
        if k == 0 or len(set(values.shape)) != 1:
            raise ValueError(f"dense array must be (d,)*k, got shape {values.shape}")
        if k >= 2:
            if symmetrize:
                values = _symmetrize(values)
            else:
                scale = max(1.0, float(np.max(np.abs(values))))
                for perm in _adjacent_swaps(k):
                    if not np.allclose(values, values.transpose(perm), rtol=0.0, atol=atol * scale):
                        raise ValueError("dense derivative array is not symmetric")
        values.setflags(write=False)
        return cls(k, values.shape[0], "dense", values)

    @classmethod
    def from_diagonal(cls, diagonal, order: int):
        diagonal = np.array(diagonal, dtype=float).reshape(-1)
        diagonal.setflags(write=False)
        return cls(order, diagonal.shape[0], "diagonal", diagonal)

    @classmethod
    def from_outer(cls, weights, loadings, order: int):
        """Array ``sum_r weights[r] * loadings[r]^{(x)order}``."""
        weights = np.array(weights, dtype=float).reshape(-1)
        loadings = np.array(loadings, dtype=float)
        if loadings.ndim != 2 or loadings.shape[0] != weights.shape[0]:
            raise ValueError("loadings must have shape (len(weights), d)")
        weights.setflags(write=False)
        loadings.setflags(write=False)
        return cls(order, loadings.shape[1], "outer", weights, loadings)

    # -- access -----------------------------------------------------------
    @property
    def is_diagonal(self) -> bool:
        return self.storage == "diagonal"

    def entry(self, index: Sequence[int]) -> float:
        index = tuple(int(i) for i in index)
        if len(index) != self.order:
            raise IndexError(f"expected {self.order} indices, got {len(index)}")
        if self.storage == "dense":
            return float(self.values[index])
        if self.storage == "diagonal":
            return float(self.values[index[0]]) if len(set(index)) == 1 else 0.0
        prod = self.weights.copy()
        for i in index:
            prod = prod * self.loadings[:, i]
        return float(prod.sum())

    @property
    def weights(self) -> np.ndarray:
        if self.storage != "outer":
            raise AttributeError("only outer-sum arrays carry weights")
        return self.values

    def to_dense(self) -> np.ndarray:
        if self.storage == "dense":
            return np.array(self.values)
        if self.dim**self.order > DENSE_ENTRY_LIMIT:
            raise ContractionTooLarge(
                f"dense expansion of order-{self.order} array with d={self.dim} "
                f"exceeds {DENSE_ENTRY_LIMIT} entries"
            )
        if self.storage == "diagonal":
            out = np.zeros((self.dim,) * self.order)
            idx = np.arange(self.dim)
            out[(idx,) * self.order] = self.values
            return out
        letters = "abcdefghijklmnopq"[: self.order]
        subs = "r," + ",".join("r" + c for c in letters) + "->" + letters
        return np.einsum(subs, self.values, *([self.loadings] * self.order), optimize=True)

    # -- algebra ----------------------------------------------------------
    def transform(self, basis: np.ndarray) -> "DerivArray":
        """Return the array in new coordinates ``u = basis @ v``.

        Entry ``(a_1..a_k)`` of the result is
        ``sum_j A[j_1..j_k] basis[j_1, a_1] ... basis[j_k, a_k]``, i.e. the
        derivative array of ``v -> g(basis @ v)``.
        """
        basis = np.asarray(basis, dtype=float)
        if basis.shape[0] != self.dim:
            raise ValueError("basis rows must match array dimension")
        if self.storage == "dense":
            out = self.values
            for axis in range(self.order):
                out = np.moveaxis(np.tensordot(out, basis, axes=([axis], [0])), -1, axis)
            return DerivArray.from_dense(out, symmetrize=True)
        if self.storage == "diagonal":
            return DerivArray.from_outer(self.values, basis, self.order)
        return DerivArray.from_outer(self.values, self.loadings @ basis, self.order)

    def normalize(self, n) -> "DerivArray":
        """Entrywise ``A[j] * prod_i n[j_i] ** (-1/k)``."""
        n = _check_normalizers(n, self.dim)
        scale = n ** (-1.0 / self.order)
        if self.storage == "diagonal":
            return DerivArray.from_diagonal(self.values / n, self.order)
        if self.storage == "outer":
            return DerivArray.from_outer(self.values, self.loadings * scale, self.order)
        out = np.array(self.values)
        for axis in range(self.order):
            shape = [1] * self.order
            shape[axis] = self.dim
            out = out * scale.reshape(shape)
        return DerivArray.from_dense(out, symmetrize=True)


@dataclass(frozen=True)
class OStarReport:
    """Absolute row sums ``A^i_j`` (shape ``(k, d)``) and their maximum."""

    per_axis_row_sums: np.ndarray
    max_norm: float


def _symmetrize(values: np.ndarray) -> np.ndarray:
    k = values.ndim
    perms = list(itertools.permutations(range(k)))
    avg = sum(values.transpose(p) for p in perms) / len(perms)
    # read every entry from its sorted index so permuted reads are bit-identical
    idx = np.sort(np.indices(values.shape).reshape(k, -1), axis=0)
    return avg[tuple(idx)].reshape(values.shape)


def _adjacent_swaps(k: int):
    for i in range(k - 1):
        perm = list(range(k))
        perm[i], perm[i + 1] = perm[i + 1], perm[i]
        yield tuple(perm)


def _check_normalizers(n, d: int) -> np.ndarray:
    n = np.asarray(n, dtype=float).reshape(-1)
    if n.shape[0] != d:
        raise ValueError(f"expected {d} normalizers, got {n.shape[0]}")
    if np.any(~(n > 0)):
        raise ValueError("normalizers must be strictly positive")
    return n


def _same_signed_terms(a: "DerivArray") -> bool:
    w, z = a.values, a.loadings
    weights_one_sign = bool(np.all(w >= 0) or np.all(w <= 0))
    return weights_one_sign and bool(np.all(z >= 0) or np.all(z <= 0))


def ostar_norm(a) -> OStarReport:
    """Row sums of absolute entries along every axis.

    For axis ``i`` and index ``j`` this is the sum of ``|A|`` over all
    entries whose ``i``-th index equals ``j``.  Accepts a :class:`DerivArray`
    or any ``(d,) * k`` ndarray (not necessarily symmetric).
    """
    if isinstance(a, DerivArray):
        if a.storage == "diagonal":
            rows = np.tile(np.abs(a.values), (a.order, 1))
            return OStarReport(rows, float(rows.max()))
        if a.storage == "outer" and _same_signed_terms(a):
            # every entry has one sign, so |sum| = sum of |terms| and the row
            # sum of w_r * z_r^{(x)k} is |w_r| z_rj (sum_i |z_ri|)^(k-1)
            z = np.abs(a.loadings)
            per_axis = (np.abs(a.values) * z.sum(axis=1) ** (a.order - 1)) @ z
            rows = np.tile(per_axis, (a.order, 1))
            return OStarReport(rows, float(rows.max()))
        values = a.to_dense()
    else:
        values = np.asarray(a, dtype=float)
    absval = np.abs(values)
    k = absval.ndim
    if k == 0:
        raise ValueError("ostar_norm needs at least one axis")
    rows = np.stack(
        [absval.sum(axis=tuple(ax for ax in range(k) if ax != i)) if k > 1 else absval for i in range(k)]
    )
    return OStarReport(rows, float(rows.max()))


def index_product(a: np.ndarray, s: Sequence[int], b: np.ndarray, t: Sequence[int], k: int) -> np.ndarray:
    """Array ``C`` of order ``k`` with ``C[j] = a[j_s] * b[j_t]``.

    ``s`` and ``t`` list the positions of ``j`` feeding each factor; their
    union must be ``range(k)``.
    """
    s, t = list(s), list(t)
    if set(s) | set(t) != set(range(k)):
        raise ValueError("s and t must cover every index position")
    letters = "abcdefghijklmnopqrstuvwxyz"
    subs = "".join(letters[i] for i in s) + "," + "".join(letters[i] for i in t) + "->" + letters[:k]
    return np.einsum(subs, a, b)


_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


def _einsum_spec(blocks, arrays, inverse2, pairs):
    """Subscripts and operands for the full index sum of a bipartition."""
    letters = iter(_LETTERS)
    element_letter = {}
    terms, operands = [], []
    for block, arr in zip(blocks, arrays):
        if arr.storage == "diagonal":
            shared = next(letters)
            for a in block:
                element_letter[a] = shared
            terms.append(shared)
            operands.append(arr.values)
        else:
            for a in block:
                element_letter[a] = next(letters)
            if arr.storage == "dense":
                terms.append("".join(element_letter[a] for a in block))
                operands.append(arr.values)
            else:
                rank = next(letters)
                terms.append(rank)
                operands.append(arr.values)
                for a in block:
                    terms.append(rank + element_letter[a])
                    operands.append(arr.loadings)
    for a, b in pairs:
        terms.append(element_letter[a] + element_letter[b])
        operands.append(inverse2)
    return ",".join(terms) + "->", operands


_FLOP_RE = re.compile(r"Optimized FLOP count:\s*([0-9.eE+]+)")


def contract_bipartition(arrays_by_block, inverse2, pq) -> float:
    """Full index sum of derivative arrays over a bipartition.

    Computes ``sum_j prod_{p in P} A_p[j_p] * prod_{q in Q} G[j_q]`` over
    ``j`` in ``[0, d)^{2m}``.  The ``(-1)^v / (2m)!`` prefactor is left to
    the caller.

    Parameters
    ----------
    arrays_by_block : mapping or sequence
        Either a mapping from each P-block (tuple) to its array, or a
        sequence aligned with ``pq.p_blocks``.
    inverse2 : DerivArray or ndarray
        The inverse of the second-derivative matrix.
    pq : Bipartition
        Supplies ``p_blocks`` and ``q_blocks`` over elements ``0..2m-1``.

    Diagonal blocks collapse all of their indices to a single summation
    index, and outer-sum blocks are contracted through their loadings, so
    neither is ever expanded to dense form.
    """
    blocks = [tuple(p) for p in pq.p_blocks]
    if isinstance(arrays_by_block, Mapping):
        arrays = [arrays_by_block[p] for p in blocks]
    else:
        arrays = list(arrays_by_block)
    if len(arrays) != len(blocks):
        raise ValueError("one array is required per P-block")
    if isinstance(inverse2, DerivArray):
        if inverse2.order != 2:
            raise ValueError("inverse2 must have order 2")
        inverse2 = inverse2.to_dense()
    inverse2 = np.asarray(inverse2, dtype=float)
    d = inverse2.shape[0]
    if inverse2.shape != (d, d):
        raise ValueError("inverse2 must be a square matrix")
    for block, arr in zip(blocks, arrays):
        if arr.order != len(block):
            raise ValueError(f"block {block} has size {len(block)} but array has order {arr.order}")
        if arr.dim != d:
            raise ValueError(f"array dimension {arr.dim} does not match inverse2 dimension {d}")
    subs, operands = _einsum_spec(blocks, arrays, inverse2, pq.q_blocks)
    path, info = np.einsum_path(subs, *operands, optimize="greedy")
    match = _FLOP_RE.search(info)
    if match and float(match.group(1)) > CONTRACTION_FLOP_LIMIT:
        raise ContractionTooLarge(
            f"contraction needs about {float(match.group(1)):.3g} flops (limit {CONTRACTION_FLOP_LIMIT:.0e})"
        )
    return float(np.einsum(subs, *operands, optimize=path))


def normalize_derivs(g_arrays, inverse2, n):
    """Normalized derivative arrays ``f^(k)`` and ``[f^(2)]^{-1}``.

    ``f[j_1..j_k] = g[j_1..j_k] * prod_i n[j_i]^(-1/k)`` for each array in
    ``g_arrays``, and the normalized inverse Hessian is
    ``sqrt(n_j n_k) * inverse2[j, k]``.
    """
    if isinstance(inverse2, DerivArray):
        inverse2 = inverse2.to_dense()
    inverse2 = np.asarray(inverse2, dtype=float)
    n = _check_normalizers(n, inverse2.shape[0])
    root = np.sqrt(n)
    f_inverse2 = DerivArray.from_dense(root[:, None] * inverse2 * root[None, :], symmetrize=True)
    f_arrays = [arr.normalize(n) for arr in g_arrays]
    return f_arrays, f_inverse2
