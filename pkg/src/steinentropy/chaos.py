"""Finite-basis Wiener chaos algebra.

Random variables are polynomials in ``n`` i.i.d. standard Gaussians
``G_1..G_n`` written in the Hermite product basis

    F = sum_alpha c_alpha * prod_i H_{alpha_i}(G_i),

with ``H_m`` the probabilists' Hermite polynomials.  Basis indices are
1-based, exactly as the coordinates ``G_i`` are numbered.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import rng
from .errors import DimensionMismatchError, OrderCapError

DEFAULT_ORDER_CAP = 16
DEFAULT_BASIS_DIM = 8


def hermite_eval(m: int, x):
    """H_m(x) by the recurrence H_{k+1} = x H_k - k H_{k-1}. Works on arrays."""
    if m < 0:
        raise ValueError("Hermite degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if m == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = x.copy()
    for k in range(1, m):
        h_prev, h = h, x * h - k * h_prev
    return h if h.ndim else float(h)


def hermite_table(max_degree: int, x: np.ndarray) -> list[np.ndarray]:
    """[H_0(x), ..., H_max_degree(x)]."""
    x = np.asarray(x, dtype=float)
    out = [np.ones_like(x)]
    if max_degree >= 1:
        out.append(x.copy())
    for k in range(1, max_degree):
        out.append(x * out[k] - k * out[k - 1])
    return out


@lru_cache(maxsize=None)
def _linearization(a: int, b: int) -> tuple[tuple[int, float], ...]:
    # H_a H_b = sum_k k! C(a,k) C(b,k) H_{a+b-2k}
    return tuple(
        (a + b - 2 * k, float(math.factorial(k) * math.comb(a, k) * math.comb(b, k)))
        for k in range(min(a, b) + 1)
    )


@dataclass(frozen=True)
class MultiIndex:
    """Sparse multi-index: sorted ``(basis_index, exponent)`` pairs, exponents >= 1."""

    entries: tuple[tuple[int, int], ...] = ()
    weight: int = field(default=0, compare=False)

    def __post_init__(self):
        entries = tuple(sorted((int(i), int(e)) for i, e in self.entries if int(e) != 0))
        idx = [i for i, _ in entries]
        if len(set(idx)) != len(idx):
            raise ValueError(f"repeated basis index in {self.entries}")
        if any(i < 1 for i in idx) or any(e < 0 for _, e in entries):
            raise ValueError(f"invalid multi-index {self.entries}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "weight", sum(e for _, e in entries))

    @classmethod
    def of(cls, mapping: Mapping[int, int] | None = None, **_) -> "MultiIndex":
        return cls(tuple((mapping or {}).items()))

    @classmethod
    def _raw(cls, entries: tuple[tuple[int, int], ...]) -> "MultiIndex":
        # trusted constructor: entries already canonical
        obj = object.__new__(cls)
        object.__setattr__(obj, "entries", entries)
        object.__setattr__(obj, "weight", sum(e for _, e in entries))
        return obj

    def __hash__(self):
        return hash(self.entries)

    @property
    def max_index(self) -> int:
        return self.entries[-1][0] if self.entries else 0

    def factorial(self) -> float:
        """alpha! = prod_i alpha_i!"""
        out = 1.0
        for _, e in self.entries:
            out *= math.factorial(e)
        return out

    def as_dict(self) -> dict[int, int]:
        return dict(self.entries)

    def __str__(self):
        return ",".join(f"{i}:{e}" for i, e in self.entries)


EMPTY = MultiIndex()


@lru_cache(maxsize=200_000)
def _monomial_product(a: tuple, b: tuple) -> tuple[tuple[tuple, float], ...]:
    """Expand Phi(a) * Phi(b) in the Hermite product basis."""
    fixed: list[tuple[int, int]] = []
    shared: list[tuple[int, tuple[tuple[int, float], ...]]] = []
    da, db = dict(a), dict(b)
    for i in sorted(set(da) | set(db)):
        if i in da and i in db:
            shared.append((i, _linearization(da[i], db[i])))
        else:
            fixed.append((i, da.get(i, db.get(i))))
    if not shared:
        return ((tuple(fixed), 1.0),)
    out = []
    for choice in itertools.product(*(opts for _, opts in shared)):
        coef = 1.0
        ent = list(fixed)
        for (i, _), (deg, c) in zip(shared, choice):
            coef *= c
            if deg:
                ent.append((i, deg))
        out.append((tuple(sorted(ent)), coef))
    return tuple(out)


class ChaosElement:
    """Immutable coefficient table ``{MultiIndex: c_alpha}`` over ``basis_dim`` coordinates."""

    __slots__ = ("basis_dim", "_coeffs", "max_order")

    def __init__(self, basis_dim: int, coeffs: Mapping[MultiIndex, float] | None = None):
        if basis_dim < 1:
            raise ValueError("basis_dim must be >= 1")
        clean: dict[MultiIndex, float] = {}
        for k, v in (coeffs or {}).items():
            if not isinstance(k, MultiIndex):
                k = MultiIndex(tuple(k.items()) if isinstance(k, Mapping) else tuple(k))
            if k.max_index > basis_dim:
                raise DimensionMismatchError(f"multi-index {k} exceeds basis_dim={basis_dim}")
            v = float(v)
            if v != 0.0:
                clean[k] = clean.get(k, 0.0) + v
        self.basis_dim = int(basis_dim)
        self._coeffs = MappingProxyType({k: v for k, v in clean.items() if v != 0.0})
        self.max_order = max((k.weight for k in self._coeffs), default=0)

    # construction helpers -------------------------------------------------
    @classmethod
    def constant(cls, value: float, basis_dim: int) -> "ChaosElement":
        return cls(basis_dim, {EMPTY: value})

    @classmethod
    def zero(cls, basis_dim: int) -> "ChaosElement":
        return cls(basis_dim)

    @classmethod
    def hermite(cls, degree: int, index: int, basis_dim: int, coeff: float = 1.0) -> "ChaosElement":
        """coeff * H_degree(G_index)."""
        return cls(basis_dim, {MultiIndex(((index, degree),)): coeff})

    @classmethod
    def from_terms(cls, basis_dim: int, terms: Mapping) -> "ChaosElement":
        """Build from ``{((i, e), ...): c}`` or ``{{i: e}: c}``-style keys."""
        return cls(basis_dim, {
            (k if isinstance(k, MultiIndex) else MultiIndex(tuple(k))): v for k, v in terms.items()
        })

    @classmethod
    def _raw(cls, basis_dim: int, coeffs: dict) -> "ChaosElement":
        obj = object.__new__(cls)
        obj.basis_dim = basis_dim
        obj._coeffs = MappingProxyType({k: v for k, v in coeffs.items() if v != 0.0})
        obj.max_order = max((k.weight for k in obj._coeffs), default=0)
        return obj

    # basic accessors ------------------------------------------------------
    @property
    def coeffs(self) -> Mapping[MultiIndex, float]:
        return self._coeffs

    def __len__(self):
        return len(self._coeffs)

    def __iter__(self):
        return iter(self._coeffs.items())

    @property
    def mean(self) -> float:
        return self._coeffs.get(EMPTY, 0.0)

    @property
    def orders(self) -> set[int]:
        return {k.weight for k in self._coeffs}

    def is_pure(self, q: int) -> bool:
        return all(k.weight == q for k in self._coeffs)

    def is_centered(self) -> bool:
        return EMPTY not in self._coeffs

    def l2_norm_sq(self) -> float:
        """E[F^2] = sum alpha! c_alpha^2."""
        return sum(k.factorial() * v * v for k, v in self._coeffs.items())

    def projection(self, q: int) -> "ChaosElement":
        return ChaosElement._raw(self.basis_dim, {k: v for k, v in self._coeffs.items() if k.weight == q})

    def scale_by_order(self, factor) -> "ChaosElement":
        """Multiply each weight-q coefficient by ``factor(q)``."""
        return ChaosElement._raw(self.basis_dim, {k: v * factor(k.weight) for k, v in self._coeffs.items()})

    def centered(self) -> "ChaosElement":
        return ChaosElement._raw(self.basis_dim, {k: v for k, v in self._coeffs.items() if k.weight})

    # arithmetic -----------------------------------------------------------
    def _check(self, other: "ChaosElement"):
        if self.basis_dim != other.basis_dim:
            raise DimensionMismatchError(f"basis_dim {self.basis_dim} != {other.basis_dim}")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = ChaosElement.constant(other, self.basis_dim)
        self._check(other)
        out = dict(self._coeffs)
        for k, v in other._coeffs.items():
            out[k] = out.get(k, 0.0) + v
        return ChaosElement._raw(self.basis_dim, out)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, ChaosElement):
            return chaos_product(self, other)
        s = float(other)
        return ChaosElement._raw(self.basis_dim, {k: v * s for k, v in self._coeffs.items()})

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return self * (1.0 / float(other))

    def __eq__(self, other):
        if not isinstance(other, ChaosElement):
            return NotImplemented
        return self.basis_dim == other.basis_dim and dict(self._coeffs) == dict(other._coeffs)

    def __hash__(self):
        return hash((self.basis_dim, frozenset(self._coeffs.items())))

    def allclose(self, other: "ChaosElement", atol: float = 1e-12) -> bool:
        self._check(other)
        keys = set(self._coeffs) | set(other._coeffs)
        return all(abs(self._coeffs.get(k, 0.0) - other._coeffs.get(k, 0.0)) <= atol for k in keys)

    def __repr__(self):
        terms = " + ".join(f"{v:.6g}*Phi({k})" for k, v in sorted(self._coeffs.items(), key=lambda kv: kv[0].entries))
        return f"ChaosElement(n={self.basis_dim}, {terms or '0'})"

    # evaluation -----------------------------------------------------------
    def evaluate(self, points) -> np.ndarray | float:
        return evaluate_chaos(self, points)

    # serialization --------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"basis_dim {self.basis_dim}"]
        for k, v in sorted(self._coeffs.items(), key=lambda kv: (kv[0].weight, kv[0].entries)):
            lines.append(f"{k} = {format(v, '.17g')}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ChaosElement":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not lines or not lines[0].startswith("basis_dim"):
            raise ValueError("chaos text must start with 'basis_dim <n>'")
        n = int(lines[0].split()[1])
        coeffs: dict[MultiIndex, float] = {}
        for ln in lines[1:]:
            lhs, _, rhs = ln.partition("=")
            if not _:
                raise ValueError(f"malformed chaos line: {ln!r}")
            lhs = lhs.strip()
            pairs = []
            if lhs:
                for tok in lhs.split(","):
                    i, e = tok.split(":")
                    pairs.append((int(i), int(e)))
            key = MultiIndex(tuple(pairs))
            coeffs[key] = coeffs.get(key, 0.0) + float(rhs)
        return cls(n, coeffs)


def evaluate_chaos(elem: ChaosElement, point) -> np.ndarray | float:
    """sum_alpha c_alpha prod_i H_{alpha_i}(point_i) for one point or an (m, n) array of points."""
    x = np.asarray(point, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != elem.basis_dim:
        raise DimensionMismatchError(
            f"point dimension {x.shape[-1] if x.ndim else 0} != basis_dim {elem.basis_dim}")
    need: dict[int, int] = {}
    for k in elem.coeffs:
        for i, e in k.entries:
            need[i] = max(need.get(i, 0), e)
    tables = {i: hermite_table(e, x[:, i - 1]) for i, e in need.items()}
    out = np.zeros(x.shape[0])
    for k, c in elem.coeffs.items():
        term = np.full(x.shape[0], c)
        for i, e in k.entries:
            term *= tables[i][e]
        out += term
    return float(out[0]) if single else out


def chaos_product(a: ChaosElement, b: ChaosElement, order_cap: int | None = None) -> ChaosElement:
    """Pointwise product via Hermite linearization."""
    a._check(b)
    if order_cap is not None and a.max_order + b.max_order > order_cap:
        raise OrderCapError(
            f"product order {a.max_order + b.max_order} exceeds order cap {order_cap}")
    out: dict[tuple, float] = {}
    for ka, va in a.coeffs.items():
        for kb, vb in b.coeffs.items():
            for ent, c in _monomial_product(ka.entries, kb.entries):
                out[ent] = out.get(ent, 0.0) + va * vb * c
    return ChaosElement._raw(a.basis_dim, {MultiIndex._raw(k): v for k, v in out.items()})


def inner_product(a: ChaosElement, b: ChaosElement) -> float:
    """E[ab] = sum alpha! a_alpha b_alpha."""
    a._check(b)
    if len(a) > len(b):
        a, b = b, a
    bc = b.coeffs
    return sum(k.factorial() * v * bc[k] for k, v in a.coeffs.items() if k in bc)


def _fold(elems: Sequence[ChaosElement]) -> ChaosElement:
    out = elems[0]
    for e in elems[1:]:
        out = chaos_product(out, e)
    return out


def exact_moment(elems: Sequence[ChaosElement], order_cap: int = DEFAULT_ORDER_CAP) -> float:
    """E[prod elems], exactly, read off the constant coefficient of the product."""
    elems = list(elems)
    if not elems:
        return 1.0
    n = elems[0].basis_dim
    for e in elems:
        if e.basis_dim != n:
            raise DimensionMismatchError("all elements must share basis_dim")
    total = sum(e.max_order for e in elems)
    if total > order_cap:
        raise OrderCapError(f"total product order {total} exceeds order cap {order_cap}")
    if len(elems) == 1:
        return elems[0].mean
    # the last multiplication only needs its constant term
    half = len(elems) // 2
    return inner_product(_fold(elems[:half]), _fold(elems[half:]))


def covariance(a: ChaosElement, b: ChaosElement) -> float:
    return exact_moment([a, b]) - a.mean * b.mean


def fourth_moment_norm(components: Sequence[ChaosElement], order_cap: int = DEFAULT_ORDER_CAP) -> float:
    """E[||F||^4] as E[S^2] with S = sum_j F_j^2."""
    for c in components:
        if 4 * c.max_order > order_cap:
            raise OrderCapError(f"fourth moment of order-{c.max_order} element exceeds order cap {order_cap}")
    s = components[0] * components[0]
    for c in components[1:]:
        s = s + c * c
    return inner_product(s, s)


class ChaoticVector:
    """d-tuple of chaos elements with exact covariance."""

    def __init__(self, components: Sequence[ChaosElement], orders: Sequence[int | None] | None = None):
        comps = tuple(components)
        if not comps:
            raise ValueError("need at least one component")
        n = comps[0].basis_dim
        if any(c.basis_dim != n for c in comps):
            raise DimensionMismatchError("components must share basis_dim")
        if orders is None:
            orders = tuple(next(iter(c.orders)) if len(c.orders) == 1 else None for c in comps)
        orders = tuple(orders)
        if len(orders) != len(comps):
            raise ValueError("orders length must match components")
        for c, q in zip(comps, orders):
            if q is not None and not c.is_pure(q):
                raise ValueError(f"component declared pure chaos {q} has orders {sorted(c.orders)}")
        self.components = comps
        self.orders = orders
        self.basis_dim = n
        d = len(comps)
        cov = np.empty((d, d))
        for i in range(d):
            for j in range(i, d):
                cov[i, j] = cov[j, i] = covariance(comps[i], comps[j])
        self.covariance = cov

    @property
    def d(self) -> int:
        return len(self.components)

    @property
    def chaotic(self) -> bool:
        return all(q is not None and q >= 1 for q in self.orders)

    @property
    def centered(self) -> bool:
        return all(c.is_centered() for c in self.components)

    def __getitem__(self, i) -> ChaosElement:
        return self.components[i]

    def __iter__(self):
        return iter(self.components)

    def __len__(self):
        return len(self.components)

    def evaluate(self, gaussians: np.ndarray) -> np.ndarray:
        """(m, d) array of component values."""
        return np.column_stack([evaluate_chaos(c, gaussians) for c in self.components])


@dataclass(frozen=True)
class SampleBatch:
    """Seeded Gaussian rows plus named evaluated columns."""

    seed: int
    gaussians: np.ndarray
    evaluations: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        m = self.gaussians.shape[0]
        for name, col in self.evaluations.items():
            if np.shape(col)[0] != m:
                raise ValueError(f"column {name!r} has length {np.shape(col)[0]} != {m}")
        self.gaussians.setflags(write=False)
        for col in self.evaluations.values():
            col.setflags(write=False)
        object.__setattr__(self, "evaluations", MappingProxyType(dict(self.evaluations)))

    @property
    def m(self) -> int:
        return self.gaussians.shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.evaluations[name]

    def with_columns(self, **cols: np.ndarray) -> "SampleBatch":
        merged = dict(self.evaluations)
        merged.update({k: np.asarray(v, dtype=float) for k, v in cols.items()})
        return SampleBatch(self.seed, self.gaussians, merged)

    def evaluate(self, elem: ChaosElement) -> np.ndarray:
        return evaluate_chaos(elem, self.gaussians)

    def f_matrix(self, d: int) -> np.ndarray:
        return np.column_stack([self.evaluations[f"F{i + 1}"] for i in range(d)])


def sample_batch(vec: ChaoticVector | ChaosElement, m: int, seed: int) -> SampleBatch:
    """m Gaussian rows from the counter-based stream for ``seed``; columns F1..Fd."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if isinstance(vec, ChaosElement):
        vec = ChaoticVector([vec], orders=[None])
    g = rng.gaussian_rows(seed, rng.STREAM_CHAOS, m, vec.basis_dim)
    cols = {f"F{i + 1}": evaluate_chaos(c, g) for i, c in enumerate(vec.components)}
    return SampleBatch(int(seed), g, cols)


def isserlis_fourth_norm(cov: np.ndarray) -> float:
    """E||Z||^4 for Z ~ N(0, cov): (tr C)^2 + 2 tr(C^2)."""
    cov = np.asarray(cov, dtype=float)
    return float(np.trace(cov) ** 2 + 2.0 * np.sum(cov * cov))


def pure_chaos_basis(q: int, basis_dim: int) -> list[MultiIndex]:
    """All multi-indices of weight q on basis_dim coordinates."""
    out = []
    for combo in itertools.combinations_with_replacement(range(1, basis_dim + 1), q):
        counts: dict[int, int] = {}
        for i in combo:
            counts[i] = counts.get(i, 0) + 1
        out.append(MultiIndex(tuple(counts.items())))
    return out


def random_chaos(q: int | Iterable[int], basis_dim: int, n_terms: int, gen: np.random.Generator,
                 normalize: bool = True) -> ChaosElement:
    """Sparse random element supported on chaoses ``q`` (an int or an iterable of orders)."""
    qs = [q] if isinstance(q, int) else list(q)
    coeffs: dict[MultiIndex, float] = {}
    for _ in range(n_terms):
        order = int(gen.choice(qs))
        basis = pure_chaos_basis(order, basis_dim) if order else [EMPTY]
        k = basis[int(gen.integers(len(basis)))]
        coeffs[k] = coeffs.get(k, 0.0) + float(gen.standard_normal())
    elem = ChaosElement(basis_dim, coeffs)
    if normalize and elem.l2_norm_sq() > 0:
        elem = elem / math.sqrt(elem.l2_norm_sq())
    return elem
