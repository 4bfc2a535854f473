"""Sparse polynomial zonotopes with tensor-valued coefficients.

A polynomial zonotope here is the set

    { c + sum_i g_i prod_j x_j^{E_ij} + r : x in [-1, 1]^p, |r| <= rem },

where every coefficient ``g_i`` has the same shape as the center (a scalar, a
vector or a 3x3 matrix).  Indeterminates carry globally unique integer ids so
that independent objects can be combined while dependencies on shared
indeterminates are tracked exactly.  The remainder ``rem`` is an independent
axis-aligned interval radius; it absorbs truncation and Taylor errors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_GENERATORS = 200

_ids = itertools.count(1)


def new_id() -> int:
    """Allocate a fresh indeterminate id."""
    return next(_ids)


@dataclass(frozen=True)
class IntervalBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if np.any(lo > hi):
            raise ValueError("interval lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self):
        return 0.5 * (self.upper - self.lower)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


# bilinear products on batches: X (na, *Sa), Y (nb, *Sb) -> (na, nb, *S)
def _outer_mul(X, Y):
    sa, sb = X.shape[1:], Y.shape[1:]
    nd = max(len(sa), len(sb))
    Xr = X.reshape((X.shape[0], 1) + (1,) * (nd - len(sa)) + sa)
    Yr = Y.reshape((1, Y.shape[0]) + (1,) * (nd - len(sb)) + sb)
    return Xr * Yr


def _outer_matmul(X, Y):
    if Y.ndim == 2:
        return np.matmul(X[:, None], Y[None, :, :, None])[..., 0]
    return np.matmul(X[:, None], Y[None])


def _single(op, x, y):
    return op(np.asarray(x)[None], np.asarray(y)[None])[0, 0]


def _is_const(x) -> bool:
    return not isinstance(x, PolyZonotope)


class PolyZonotope:
    """Polynomial zonotope with shape-``S`` coefficients.

    Parameters
    ----------
    center : array of shape S
    coeffs : (ng, *S) array
    expmat : (ng, nid) int array
    ids : (nid,) int array of indeterminate ids
    rem : array of shape S, optional
        Nonnegative independent interval radius.
    range_clip : (lo, hi), optional
        Known hard range of the set; ``bound`` intersects with it.  It is
        dropped by arithmetic, which stays sound.
    """

    __slots__ = ("center", "coeffs", "expmat", "ids", "rem", "range_clip")

    def __init__(self, center, coeffs=None, expmat=None, ids=None, rem=None, range_clip=None):
        c = np.array(center, dtype=float)
        S = c.shape
        if coeffs is None:
            coeffs = np.zeros((0,) + S)
        G = np.asarray(coeffs, dtype=float).reshape((-1,) + S)
        ng = G.shape[0]
        ids = np.zeros(0, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64).reshape(-1)
        E = np.zeros((ng, ids.size), dtype=np.int64) if expmat is None else np.asarray(expmat, dtype=np.int64)
        E = E.reshape(ng, ids.size)
        if np.any(E < 0):
            raise ValueError("exponents must be nonnegative")
        if np.unique(ids).size != ids.size:
            raise ValueError("duplicate indeterminate ids")
        r = np.zeros(S) if rem is None else np.broadcast_to(np.asarray(rem, dtype=float), S).copy()
        if np.any(r < 0):
            raise ValueError("remainder radii must be nonnegative")
        self.center, self.coeffs, self.expmat, self.ids, self.rem = c, G, E, ids, r
        self.range_clip = range_clip

    # construction -------------------------------------------------------------
    @classmethod
    def constant(cls, value) -> "PolyZonotope":
        return cls(value)

    @classmethod
    def from_generator(cls, center, generator, ident: int | None = None, power: int = 1) -> "PolyZonotope":
        """``center + generator * x**power`` on indeterminate ``ident`` (fresh if None)."""
        ident = new_id() if ident is None else ident
        g = np.asarray(generator, dtype=float)
        return cls(center, g[None], [[power]], [ident])

    @classmethod
    def from_interval(cls, lower, upper, ident: int | None = None) -> "PolyZonotope":
        lo, hi = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
        return cls.from_generator(0.5 * (lo + hi), 0.5 * (hi - lo), ident)

    # basic properties -----------------------------------------------------
    @property
    def shape(self):
        return self.center.shape

    @property
    def n_generators(self) -> int:
        return self.coeffs.shape[0]

    def copy(self) -> "PolyZonotope":
        return PolyZonotope(self.center, self.coeffs.copy(), self.expmat.copy(), self.ids.copy(), self.rem.copy(), self.range_clip)

    def __repr__(self):
        return f"PolyZonotope(shape={self.shape}, ng={self.n_generators}, ids={self.ids.tolist()})"

    def abs_max(self) -> np.ndarray:
        """Entrywise upper bound on the absolute value of any member."""
        return np.abs(self.center) + np.abs(self.coeffs).sum(axis=0) + self.rem

    # id alignment ------------------------------------------------------------
    def _expanded(self, ids: np.ndarray) -> np.ndarray:
        """Exponent matrix re-indexed onto the sorted id list ``ids``."""
        E = np.zeros((self.n_generators, ids.size), dtype=np.int64)
        if self.ids.size:
            cols = np.searchsorted(ids, self.ids)
            E[:, cols] = self.expmat
        return E

    # compaction ---------------------------------------------------------------
    @staticmethod
    def _build(center, G, E, ids, rem, max_gens=DEFAULT_MAX_GENERATORS) -> "PolyZonotope":
        """Merge equal monomials, fold constants, drop zeros and unused ids, cap size."""
        center = np.array(center, dtype=float)
        rem = np.array(rem, dtype=float)
        S = center.shape
        if G.shape[0]:
            E = np.asarray(E, dtype=np.int64)
            uniq, inv = _unique_rows(E)
            if uniq.shape[0] < E.shape[0]:
                Gm = np.zeros((uniq.shape[0],) + S)
                np.add.at(Gm, inv, G)
                G, E = Gm, uniq
            const = ~E.any(axis=1)
            if const.any():
                center = center + G[const].sum(axis=0)
                G, E = G[~const], E[~const]
            nz = np.abs(G).reshape(G.shape[0], -1).max(axis=1, initial=0.0) > 0 if G.shape[0] else np.zeros(0, bool)
            G, E = G[nz], E[nz]
        if G.shape[0] > max_gens:
            norms = np.sqrt((G.reshape(G.shape[0], -1) ** 2).sum(axis=1))
            order = np.argsort(-norms, kind="stable")
            keep, drop = order[:max_gens], order[max_gens:]
            Gd, Ed = G[drop], E[drop]
            even = np.all(Ed % 2 == 0, axis=1)
            # even monomials range over [0, 1]: shift by half, keep half as radius
            center = center + 0.5 * Gd[even].sum(axis=0)
            rem = rem + 0.5 * np.abs(Gd[even]).sum(axis=0) + np.abs(Gd[~even]).sum(axis=0)
            keep = np.sort(keep)
            G, E = G[keep], E[keep]
        used = E.any(axis=0) if E.shape[0] else np.zeros(E.shape[1], bool)
        return PolyZonotope._raw(center, G, E[:, used], np.asarray(ids, dtype=np.int64)[used], rem)

    @classmethod
    def _raw(cls, center, G, E, ids, rem, range_clip=None) -> "PolyZonotope":
        """Construct without validation (internal, inputs already consistent)."""
        obj = cls.__new__(cls)
        obj.center, obj.coeffs, obj.expmat, obj.ids, obj.rem = center, G, E, ids, rem
        obj.range_clip = range_clip
        return obj

    # arithmetic --------------------------------------------------------------
    def __neg__(self):
        return PolyZonotope(-self.center, -self.coeffs, self.expmat, self.ids, self.rem)

    def __add__(self, other):
        if _is_const(other):
            return PolyZonotope(self.center + np.asarray(other, dtype=float), self.coeffs, self.expmat, self.ids, self.rem)
        return pz_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other if not _is_const(other) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return pz_mul(self, other)

    def __rmul__(self, other):
        return pz_mul(other, self)

    def __matmul__(self, other):
        return pz_matmul(self, other)

    def __rmatmul__(self, other):
        return pz_matmul(other, self)

    def __getitem__(self, idx):
        """Entry selection, e.g. ``pz[0]`` of a vector or ``pz[:, 2]`` of a matrix."""
        if not isinstance(idx, tuple):
            idx = (idx,)
        return PolyZonotope._build(
            self.center[idx], self.coeffs[(slice(None),) + idx], self.expmat, self.ids, self.rem[idx]
        )

    # evaluation ----------------------------------------------------------------
    def _monomials(self, values: dict) -> tuple[np.ndarray, np.ndarray]:
        """Monomial values for assigned ids and a mask of the assigned columns."""
        assigned = np.array([i in values for i in self.ids.tolist()], dtype=bool)
        m = np.ones(self.n_generators)
        for col in np.flatnonzero(assigned):
            v = float(values[int(self.ids[col])])
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"indeterminate {int(self.ids[col])} value {v} outside [-1, 1]")
            m = m * v ** self.expmat[:, col]
        return m, assigned

    def slice(self, values: dict) -> "PolyZonotope":
        """Substitute values for some indeterminates.

        Parameters
        ----------
        values : dict
            Maps indeterminate id to a value in [-1, 1].  Ids absent from this
            set are ignored.
        """
        m, assigned = self._monomials(values)
        G = self.coeffs * m.reshape((-1,) + (1,) * len(self.shape))
        E = self.expmat.copy()
        E[:, assigned] = 0
        return PolyZonotope._build(self.center, G, E, self.ids, self.rem)

    def evaluate(self, values: dict) -> np.ndarray:
        """Polynomial value at a full assignment (unassigned ids count as 0 only if absent from all terms)."""
        out = self.slice(values)
        if out.n_generators:
            raise ValueError(f"unassigned indeterminates {out.ids.tolist()}")
        return out.center

    def bound(self, even_refine: bool = True) -> IntervalBox:
        """Interval enclosure of the set."""
        lo = self.center - self.rem
        hi = self.center + self.rem
        if self.n_generators:
            G = self.coeffs
            if even_refine and self.expmat.shape[1]:
                even = np.all(self.expmat % 2 == 0, axis=1)
            else:
                even = np.zeros(self.n_generators, dtype=bool)
            Ge, Go = G[even], np.abs(G[~even])
            lo = lo + np.minimum(Ge, 0).sum(axis=0) - Go.sum(axis=0)
            hi = hi + np.maximum(Ge, 0).sum(axis=0) + Go.sum(axis=0)
        if self.range_clip is not None:
            clo, chi = self.range_clip
            lo = np.minimum(np.maximum(lo, clo), chi)
            hi = np.maximum(np.minimum(hi, chi), clo)
        return IntervalBox(lo, hi)

    def split(self, ids) -> tuple["PolyZonotope", "PolyZonotope"]:
        """Split into terms depending only on ``ids`` (plus center) and the rest (plus remainder)."""
        ids = np.asarray(list(ids), dtype=np.int64)
        inside = np.isin(self.ids, ids)
        only = ~self.expmat[:, ~inside].any(axis=1) if self.n_generators else np.zeros(0, bool)
        a = PolyZonotope._build(self.center, self.coeffs[only], self.expmat[only], self.ids, np.zeros(self.shape))
        b = PolyZonotope._build(np.zeros(self.shape), self.coeffs[~only], self.expmat[~only], self.ids, self.rem)
        return a, b


def _unique_rows(E: np.ndarray):
    """Unique exponent rows and the inverse map, via scalar keys when they fit in int64."""
    n, m = E.shape
    if n == 0 or m == 0:
        return E[:1] if n else E, np.zeros(n, dtype=np.intp)
    base = int(E.max()) + 1
    if m * np.log2(max(base, 2)) < 62:
        key = E @ (base ** np.arange(m, dtype=np.int64))
        _, first, inv = np.unique(key, return_index=True, return_inverse=True)
        return E[first], inv.reshape(-1)
    uniq, inv = np.unique(E, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1)


def _align(a: PolyZonotope, b: PolyZonotope):
    ids = np.union1d(a.ids, b.ids).astype(np.int64)
    return ids, a._expanded(ids), b._expanded(ids)


def pz_add(a: PolyZonotope, b: PolyZonotope, max_gens: int = DEFAULT_MAX_GENERATORS) -> PolyZonotope:
    """Exact sum on shared indeterminates."""
    if _is_const(a):
        return b + a
    if _is_const(b):
        return a + b
    try:
        S = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}") from exc
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    ids, Ea, Eb = _align(a, b)
    G = np.concatenate([a.coeffs, b.coeffs])
    E = np.concatenate([Ea, Eb])
    return PolyZonotope._build(a.center + b.center, G, E, ids, a.rem + b.rem, max_gens)


def pz_scale(a: PolyZonotope, s) -> PolyZonotope:
    """Multiply by a constant scalar or broadcastable constant array."""
    s = np.asarray(s, dtype=float)
    return PolyZonotope._build(a.center * s, a.coeffs * s, a.expmat, a.ids, a.rem * np.abs(s))


def _product(a, b, op, max_gens):
    if _is_const(a) and _is_const(b):
        return PolyZonotope(_single(op, np.asarray(a, float), np.asarray(b, float)))
    if _is_const(b):
        B = np.asarray(b, dtype=float)
        center = _single(op, a.center, B)
        G = op(a.coeffs, B[None])[:, 0] if a.n_generators else np.zeros((0,) + center.shape)
        rem = _single(op, a.rem, np.abs(B))
        return PolyZonotope._build(center, G, a.expmat, a.ids, rem, max_gens)
    if _is_const(a):
        A = np.asarray(a, dtype=float)
        center = _single(op, A, b.center)
        G = op(A[None], b.coeffs)[0] if b.n_generators else np.zeros((0,) + center.shape)
        rem = _single(op, np.abs(A), b.rem)
        return PolyZonotope._build(center, G, b.expmat, b.ids, rem, max_gens)
    ids, Ea, Eb = _align(a, b)
    TA = np.concatenate([a.center[None], a.coeffs])
    TB = np.concatenate([b.center[None], b.coeffs])
    EA = np.concatenate([np.zeros((1, ids.size), np.int64), Ea])
    EB = np.concatenate([np.zeros((1, ids.size), np.int64), Eb])
    P = op(TA, TB)
    S = P.shape[2:]
    G = P.reshape((-1,) + S)
    E = (EA[:, None, :] + EB[None, :, :]).reshape(EA.shape[0] * EB.shape[0], ids.size)
    center = G[0]
    Aabs = np.abs(a.center) + np.abs(a.coeffs).sum(axis=0)
    Babs = np.abs(b.center) + np.abs(b.coeffs).sum(axis=0)
    rem = _single(op, a.rem, Babs) + _single(op, Aabs, b.rem) + _single(op, a.rem, b.rem)
    return PolyZonotope._build(center, G[1:], E[1:], ids, rem, max_gens)


def pz_mul(a, b, max_gens: int = DEFAULT_MAX_GENERATORS) -> PolyZonotope:
    """Entrywise (broadcasting) product; scalar times vector is the common case."""
    sa = np.shape(a.center if isinstance(a, PolyZonotope) else a)
    sb = np.shape(b.center if isinstance(b, PolyZonotope) else b)
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise ValueError(f"dimension mismatch {sa} vs {sb}") from exc
    if sa and sb and sa != sb:
        raise ValueError(f"dimension mismatch {sa} vs {sb}")
    return _product(a, b, _outer_mul, max_gens)


def pz_matmul(a, b, max_gens: int = DEFAULT_MAX_GENERATORS) -> PolyZonotope:
    """Matrix product of a 3x3 PZ (or constant) with a matrix or vector PZ (or constant)."""
    sa = np.shape(a.center if isinstance(a, PolyZonotope) else a)
    sb = np.shape(b.center if isinstance(b, PolyZonotope) else b)
    if len(sa) != 2 or len(sb) not in (1, 2) or sa[1] != sb[0]:
        raise ValueError(f"dimension mismatch {sa} @ {sb}")
    return _product(a, b, _outer_matmul, max_gens)


def stack(parts, max_gens: int = DEFAULT_MAX_GENERATORS) -> PolyZonotope:
    """Stack scalar PZs (or constants) into a vector PZ."""
    parts = [p if isinstance(p, PolyZonotope) else PolyZonotope(p) for p in parts]
    n = len(parts)
    ids = np.unique(np.concatenate([p.ids for p in parts])).astype(np.int64) if n else np.zeros(0, np.int64)
    center = np.array([p.center for p in parts], dtype=float)
    rem = np.array([p.rem for p in parts], dtype=float)
    Gs, Es = [], []
    for k, p in enumerate(parts):
        g = np.zeros((p.n_generators, n))
        g[:, k] = p.coeffs
        Gs.append(g)
        Es.append(p._expanded(ids))
    return PolyZonotope._build(center, np.concatenate(Gs), np.concatenate(Es), ids, rem, max_gens)


def make_time_partition(T: float, n_t: int) -> list[PolyZonotope]:
    """Split ``[0, T]`` into ``n_t`` equal subintervals, each on a fresh indeterminate."""
    if not T > 0:
        raise ValueError("T must be positive")
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    dt = T / n_t
    edges = np.linspace(0.0, T, n_t + 1)
    edges[-1] = T
    return [PolyZonotope.from_generator(0.5 * (edges[i] + edges[i + 1]), 0.5 * (edges[i + 1] - edges[i])) for i in range(n_t)]


def _taylor(pz: PolyZonotope, order: int, derivs, max_gens: int) -> PolyZonotope:
    if order < 1:
        raise ValueError("Taylor order must be >= 1")
    if pz.shape != ():
        raise ValueError("sin/cos need a scalar polynomial zonotope")
    c0 = float(pz.center)
    delta = pz - c0
    box = delta.bound(even_refine=True)
    r = float(max(abs(box.lower), abs(box.upper)))
    out = PolyZonotope(derivs[0](c0))
    power = PolyZonotope(1.0)
    for n in range(1, order + 1):
        power = pz_mul(power, delta, max_gens)
        coef = derivs[n % 4](c0) / math.factorial(n)
        if coef != 0.0:
            out = pz_add(out, pz_scale(power, coef), max_gens)
    lagrange = r ** (order + 1) / math.factorial(order + 1)
    res = PolyZonotope(out.center, out.coeffs, out.expmat, out.ids, out.rem + lagrange, range_clip=(-1.0, 1.0))
    return res


_SIN_DERIVS = (np.sin, np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x))
_COS_DERIVS = (np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x), np.sin)


def pz_sin(pz: PolyZonotope, order: int = 4, max_gens: int = DEFAULT_MAX_GENERATORS) -> PolyZonotope:
    """Sound Taylor enclosure of ``sin`` over a scalar PZ."""
    return _taylor(pz, order, _SIN_DERIVS, max_gens)


def pz_cos(pz: PolyZonotope, order: int = 4, max_gens: int = DEFAULT_MAX_GENERATORS) -> PolyZonotope:
    """Sound Taylor enclosure of ``cos`` over a scalar PZ."""
    return _taylor(pz, order, _COS_DERIVS, max_gens)
