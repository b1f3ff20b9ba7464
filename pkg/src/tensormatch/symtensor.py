"""Compressed symmetric tensors over R^4 and the SS-HOPM Z-eigenpair solver.

A symmetric tensor of order ``n`` stores one value per exponent pattern
``(e0, e1, e2, e3)`` with ``sum(e) = n``; ``mult`` counts the full index tuples
that realize each pattern. Patterns are ordered graded-lex descending, e.g.
``(4,0,0,0), (3,1,0,0), (3,0,1,0), ...``; this order is used in every file and API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError
from .so3 import canonicalize, random_unit_quaternions

DIM = 4
ADAPTIVE_TAU = 1e-6


@dataclass(frozen=True, eq=False)
class MultiIndexTable:
    n: int
    entries: np.ndarray
    mult: np.ndarray
    index: dict = field(repr=False)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, MultiIndexTable) and self.n == other.n

    def __hash__(self):
        return hash(self.n)


def _patterns(n: int, d: int = DIM):
    if d == 1:
        yield (n,)
        return
    for first in range(n, -1, -1):
        for rest in _patterns(n - first, d - 1):
            yield (first,) + rest


def _multinomial(e) -> int:
    out = math.factorial(sum(e))
    for k in e:
        out //= math.factorial(k)
    return out


@lru_cache(maxsize=None)
def _table(n: int) -> MultiIndexTable:
    entries = np.array(list(_patterns(n)), dtype=np.int64)
    mult = np.array([_multinomial(e) for e in entries], dtype=np.float64)
    index = {tuple(int(k) for k in e): i for i, e in enumerate(entries)}
    return MultiIndexTable(n, entries, mult, index)


def multi_index_table(n: int) -> MultiIndexTable:
    """Canonical table for even order ``n >= 2``; it has ``C(n+3, 3)`` entries."""
    if n < 2 or n % 2:
        raise ConfigurationError(f"tensor order must be even and >= 2, got {n}")
    return _table(n)


@lru_cache(maxsize=None)
def _contraction_plan(n: int):
    # (A x^{n-1})_j = Σ_β A[β + e_j] · multinomial(β) · x^β over |β| = n - 1.
    low = _table(n - 1)
    high = _table(n)
    idx = np.empty((DIM, len(low)), dtype=np.int64)
    for j in range(DIM):
        for b, beta in enumerate(low.entries):
            e = [int(k) for k in beta]
            e[j] += 1
            idx[j, b] = high.index[tuple(e)]
    return idx, low.mult, low.entries


@lru_cache(maxsize=None)
def _hessian_plan(n: int):
    # (A x^{n-2})_{ij} = Σ_β A[β + e_i + e_j] · multinomial(β) · x^β over |β| = n - 2.
    low = _table(n - 2)
    high = _table(n)
    idx = np.empty((DIM, DIM, len(low)), dtype=np.int64)
    for i in range(DIM):
        for j in range(DIM):
            for b, beta in enumerate(low.entries):
                e = [int(k) for k in beta]
                e[i] += 1
                e[j] += 1
                idx[i, j, b] = high.index[tuple(e)]
    return idx, low.mult, low.entries


def monomials(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """``x^e`` for every pattern; ``x`` has shape ``(..., 4)``."""
    x = np.asarray(x, dtype=np.float64)
    top = int(entries.max()) if entries.size else 0
    # pw[..., j, k] = x_j^k by repeated multiplication, so x^0 = 1 exactly.
    pw = np.ones(x.shape + (top + 1,))
    for k in range(1, top + 1):
        pw[..., k] = pw[..., k - 1] * x
    out = pw[..., 0, entries[:, 0]]
    for j in range(1, DIM):
        out = out * pw[..., j, entries[:, j]]
    return out


@dataclass(eq=False)
class SymTensor:
    table: MultiIndexTable
    comp: np.ndarray

    def __post_init__(self):
        self.comp = np.asarray(self.comp, dtype=np.float64)
        if self.comp.shape != (len(self.table),):
            raise ConfigurationError(
                f"expected {len(self.table)} components for order {self.table.n}, got {self.comp.shape}"
            )

    @property
    def n(self) -> int:
        return self.table.n

    def __mul__(self, s: float) -> "SymTensor":
        return SymTensor(self.table, self.comp * s)

    __rmul__ = __mul__

    def __add__(self, other: "SymTensor") -> "SymTensor":
        _same_table(self, other)
        return SymTensor(self.table, self.comp + other.comp)

    @classmethod
    def zeros(cls, n: int) -> "SymTensor":
        t = multi_index_table(n)
        return cls(t, np.zeros(len(t)))


def _same_table(a: SymTensor, b: SymTensor):
    if a.table.n != b.table.n:
        raise ConfigurationError(f"tensor order mismatch: {a.table.n} vs {b.table.n}")


def power_components(q: np.ndarray, n: int) -> np.ndarray:
    """Components of ``q^⊙n`` for one vector ``(4,)`` or a batch ``(N, 4)``."""
    return monomials(q, multi_index_table(n).entries)


def tensor_power(q, n: int) -> SymTensor:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (DIM,) or not np.all(np.isfinite(q)):
        raise ConfigurationError(f"tensor_power needs a finite 4-vector, got {q!r}")
    return SymTensor(multi_index_table(n), power_components(q, n))


def tensor_dot(a: SymTensor, b: SymTensor) -> float:
    _same_table(a, b)
    return float(np.sum(a.table.mult * a.comp * b.comp))


def frobenius(a: SymTensor) -> float:
    return math.sqrt(float(np.sum(a.table.mult * a.comp * a.comp)))


def evaluate(comp: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    """``φ(x) = A·x^⊙n``; ``comp`` may be ``(K,)`` and ``x`` a batch."""
    t = multi_index_table(n)
    return monomials(x, t.entries) @ (t.mult * comp)


def sphere_moments(table: MultiIndexTable) -> np.ndarray:
    """``E[q^e]`` per table entry for q uniform on S^3; zero if any exponent is odd."""
    n = table.n
    den = math.prod(DIM + 2 * i for i in range(n // 2))
    out = np.zeros(len(table))
    for i, e in enumerate(table.entries):
        if not any(k % 2 for k in e):
            # E[∏ x_j^{2k_j}] = ∏ (2k_j - 1)!! / (4 · 6 · ... · (n + 2))
            out[i] = math.prod(math.prod(range(1, int(k), 2)) for k in e) / den
    return out


def contract_components(comp: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    """``A x^{n-1}`` for ``comp`` ``(K,)`` and ``x`` ``(4,)`` or ``(N, 4)``."""
    idx, low_mult, low_entries = _contraction_plan(n)
    g = comp[idx] * low_mult  # (4, K_low)
    return monomials(x, low_entries) @ g.T


def contract_matrix_components(comp: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    """``A x^{n-2}`` as a symmetric ``(..., 4, 4)`` matrix."""
    idx, low_mult, low_entries = _hessian_plan(n)
    g = comp[idx] * low_mult  # (4, 4, K_low)
    return np.einsum("...k,ijk->...ij", monomials(x, low_entries), g)


def contract(a: SymTensor, q) -> np.ndarray:
    """``A q^{n-1}``; satisfies ``∇(A·q^⊙n) = n A q^{n-1}``."""
    return contract_components(a.comp, np.asarray(q, dtype=np.float64), a.n)


@dataclass
class ZEigenpair:
    lam: float
    q: np.ndarray
    iterations: int
    converged: bool
    residual: float = float("nan")
    restart: int = -1
    history: list = field(default_factory=list, repr=False)


def sshopm(a: SymTensor, restarts: int = 16, alpha="auto", tol: float = 1e-10,
           max_iter: int = 500, seed: int = 0, keep_history: bool = False) -> ZEigenpair:
    """Dominant Z-eigenpair by the shifted symmetric higher-order power method.

    Every restart iterates ``x <- normalize(A x^{n-1} + alpha x)`` from its own
    start (the identity quaternion, then seeded random unit vectors); all
    restarts advance together as one batch. ``alpha="auto"`` uses
    ``n * ||A||_F``, which makes the shifted objective convex on the sphere, so
    ``λ_k = A x_k^n`` never decreases. ``alpha="adaptive"`` recomputes the
    smallest shift that keeps the objective locally convex at each iterate,
    ``max(0, τ/n - (n-1) λ_min(A x^{n-2}))`` with ``τ = 1e-6``; it converges far
    faster on flat objectives.

    The pair with the largest λ is returned (ties: lowest restart index), with
    ``q`` canonicalized to a nonnegative real part. ``converged`` reports whether
    that run's step fell below ``tol`` within ``max_iter`` iterations.
    """
    n = a.n
    if n % 2:
        raise ConfigurationError("sshopm needs an even order")
    if restarts < 1:
        raise ConfigurationError("sshopm needs at least one restart")
    frob = frobenius(a)
    if frob == 0.0:
        return ZEigenpair(0.0, np.array([1.0, 0.0, 0.0, 0.0]), 0, False, 0.0, 0)
    adaptive = alpha == "adaptive"
    shift = n * frob if alpha == "auto" else (0.0 if adaptive else float(alpha))

    x = np.empty((restarts, DIM))
    x[0] = (1.0, 0.0, 0.0, 0.0)
    if restarts > 1:
        x[1:] = random_unit_quaternions(restarts - 1, seed)
    lam = evaluate(a.comp, x, n)
    active = np.ones(restarts, dtype=bool)
    iters = np.zeros(restarts, dtype=np.int64)
    history = [lam.copy()] if keep_history else []

    for _ in range(max_iter):
        if not active.any():
            break
        xa = x[active]
        if adaptive:
            h_min = np.linalg.eigvalsh(contract_matrix_components(a.comp, xa, n))[:, 0]
            shift = np.maximum(0.0, ADAPTIVE_TAU / n - (n - 1) * h_min)[:, None]
        y = contract_components(a.comp, xa, n) + shift * xa
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        step = np.linalg.norm(y - xa, axis=1)
        x[active] = y
        lam[active] = evaluate(a.comp, y, n)
        iters[active] += 1
        done = np.flatnonzero(active)[step <= tol]
        active[done] = False
        if keep_history:
            history.append(lam.copy())

    best = int(np.argmax(lam))
    q = x[best]
    residual = float(np.linalg.norm(contract_components(a.comp, q, n) - lam[best] * q))
    hist = np.array(history).T.tolist() if keep_history else []
    return ZEigenpair(float(lam[best]), canonicalize(q), int(iters[best]), not bool(active[best]),
                      residual, best, hist)
