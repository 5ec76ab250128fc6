"""Sparse Fourier-Taylor series in the variables (x, y, q, qbar).

A term is ``c * exp(i<k,x>) * y^alpha * q^beta * qbar^gamma`` with ``k`` and
``alpha`` of length ``n`` (tangential directions) and ``beta``/``gamma``
indexed by the normal lattice sites.  A :class:`Series` stores its terms as a
dense exponent table (one row per term, columns ``[k | alpha | beta | gamma]``)
plus a complex coefficient vector.  Rows are kept unique, nonzero and sorted
lexicographically, so two series over the same meta compare equal iff their
term maps are equal.

The column layout coincides with the layout of a phase-space state vector
``[x | y | q | qbar]``, which the evaluator relies on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .phase import Tangent, as_state

# Rows materialised per product block before aggregation.
_CHUNK_ROWS = 400_000
_FLUSH_ROWS = 2_000_000
_MAX_CAP = 60


class MetaMismatch(ValueError):
    """Raised when two series over different truncation metadata are combined."""


def norm2(site) -> float:
    """Euclidean length |j|_2 of a lattice site."""
    return math.sqrt(sum(c * c for c in site))


def _site(s) -> tuple:
    if isinstance(s, (int, np.integer)):
        return (int(s),)
    return tuple(int(c) for c in s)


@dataclass(frozen=True)
class SeriesMeta:
    """Truncation data shared by every series taking part in one computation."""

    n: int
    tangential: tuple
    sites: tuple
    degree_cap: int
    fourier_cap: int

    def __post_init__(self):
        tang = tuple(_site(s) for s in self.tangential)
        sites = tuple(_site(s) for s in self.sites)
        object.__setattr__(self, "tangential", tang)
        object.__setattr__(self, "sites", sites)
        if len(tang) != self.n:
            raise ValueError(f"n={self.n} but {len(tang)} tangential sites given")
        if len(set(sites)) != len(sites):
            raise ValueError("normal sites must be distinct")
        if set(sites) & set(tang):
            raise ValueError("tangential and normal sites overlap")
        dims = {len(s) for s in tang + sites}
        if len(dims) > 1:
            raise ValueError("sites of mixed dimension")
        if not (0 <= self.degree_cap <= _MAX_CAP and 0 <= self.fourier_cap <= _MAX_CAP):
            raise ValueError(f"caps must lie in [0, {_MAX_CAP}]")

    @property
    def m(self) -> int:
        return len(self.sites)

    @property
    def d(self) -> int:
        s = self.tangential + self.sites
        return len(s[0]) if s else 0

    @property
    def width(self) -> int:
        return 2 * self.n + 2 * self.m

    @cached_property
    def site_index(self) -> dict:
        return {s: i for i, s in enumerate(self.sites)}

    @cached_property
    def site_array(self) -> np.ndarray:
        return np.array(self.sites, dtype=np.int64).reshape(self.m, self.d)

    @cached_property
    def tangential_array(self) -> np.ndarray:
        return np.array(self.tangential, dtype=np.int64).reshape(self.n, self.d)

    @cached_property
    def packing(self):
        """Balanced-radix layout turning an exponent row into a few int64 keys.

        The map row -> keys is linear, so the key of a product monomial is the
        sum of the keys of its factors, and the lexicographic order of key
        tuples equals the lexicographic order of rows.
        """
        n = self.n
        bits = np.zeros(self.width, np.int64)
        signed = np.zeros(self.width, np.bool_)
        if self.fourier_cap > 0:
            bits[:n] = int(math.ceil(math.log2(self.fourier_cap + 1))) + 1
            signed[:n] = True
        if self.degree_cap > 0:
            bits[n:] = int(math.ceil(math.log2(self.degree_cap + 1)))
        word_of = np.zeros(self.width, np.int64)
        w, used = 0, 0
        for c in range(self.width):
            if used + bits[c] > 62:
                w, used = w + 1, 0
            word_of[c] = w
            used += bits[c]
        shift = np.zeros(self.width, np.int64)
        for c in range(self.width):
            shift[c] = sum(bits[c2] for c2 in range(c + 1, self.width) if word_of[c2] == word_of[c])
        scale = np.where(bits > 0, np.left_shift(np.int64(1), shift), 0).astype(np.int64)
        return {"bits": bits, "signed": signed, "word_of": word_of, "scale": scale, "nwords": w + 1}

    def with_caps(self, degree_cap=None, fourier_cap=None) -> "SeriesMeta":
        return SeriesMeta(
            self.n,
            self.tangential,
            self.sites,
            self.degree_cap if degree_cap is None else degree_cap,
            self.fourier_cap if fourier_cap is None else fourier_cap,
        )

    # column helpers
    def col_k(self, i):
        return i

    def col_alpha(self, i):
        return self.n + i

    def col_q(self, j):
        return 2 * self.n + j

    def col_qbar(self, j):
        return 2 * self.n + self.m + j

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "tangential": [list(s) for s in self.tangential],
            "sites": [list(s) for s in self.sites],
            "degree_cap": self.degree_cap,
            "fourier_cap": self.fourier_cap,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SeriesMeta":
        return cls(
            int(d["n"]),
            tuple(tuple(s) for s in d["tangential"]),
            tuple(tuple(s) for s in d["sites"]),
            int(d["degree_cap"]),
            int(d["fourier_cap"]),
        )


@dataclass(frozen=True)
class Term:
    k: tuple
    alpha: tuple
    beta: dict
    gamma: dict
    coeff: complex

    @property
    def order(self) -> int:
        return 2 * sum(self.alpha) + sum(self.beta.values()) + sum(self.gamma.values())


# --------------------------------------------------------------------------
# exponent-table helpers


def _orders(meta: SeriesMeta, exps: np.ndarray) -> np.ndarray:
    n = meta.n
    e = exps.astype(np.int64, copy=False)
    return 2 * e[:, n : 2 * n].sum(axis=1) + e[:, 2 * n :].sum(axis=1)


def _kabs(meta: SeriesMeta, exps: np.ndarray) -> np.ndarray:
    return np.abs(exps[:, : meta.n].astype(np.int64)).sum(axis=1)


def _pack_rows(exps: np.ndarray) -> list:
    """Pack rows into uint64 words whose lexicographic order is the row order."""
    from ._kernels import pack_rows

    lo = exps.min(axis=0).astype(np.int64)
    span = exps.max(axis=0).astype(np.int64) - lo
    bits = np.ceil(np.log2(span + 1)).astype(np.int64)
    word_of = np.zeros(len(bits), np.int64)
    w, used = 0, 0
    for c, b in enumerate(bits):
        if used + b > 64:
            w, used = w + 1, 0
        word_of[c] = w
        used += b
    return list(pack_rows(np.ascontiguousarray(exps), lo, bits, word_of, w + 1))


def _aggregate(exps: np.ndarray, coeffs: np.ndarray):
    """Merge duplicate rows, drop exact zeros, sort rows lexicographically.

    Duplicates are summed in their input order.
    """
    if exps.shape[0] == 0:
        return exps, coeffs
    words = _pack_rows(exps)
    order = np.lexsort(words[::-1])
    if len(order) > 1:
        diff = np.zeros(len(order) - 1, bool)
        for w in words:
            ws = w[order]
            diff |= ws[1:] != ws[:-1]
        starts = np.concatenate([[True], diff])
    else:
        starts = np.ones(1, bool)
    gid_sorted = np.cumsum(starts) - 1
    inv = np.empty(len(order), np.int64)
    inv[order] = gid_sorted
    ng = int(gid_sorted[-1]) + 1
    re = np.bincount(inv, weights=coeffs.real, minlength=ng)
    im = np.bincount(inv, weights=coeffs.imag, minlength=ng)
    out = exps[order[starts]]
    c = re + 1j * im
    keep = c != 0
    return np.ascontiguousarray(out[keep]), c[keep]


def _encode(meta, exps):
    from ._kernels import encode_keys

    pk = meta.packing
    return encode_keys(np.ascontiguousarray(exps, dtype=np.int8), pk["word_of"], pk["scale"], pk["nwords"])


def _decode(meta, keys):
    from ._kernels import decode_keys

    pk = meta.packing
    return decode_keys(np.ascontiguousarray(keys), pk["word_of"], pk["bits"], pk["signed"], meta.width)


def _aggregate_keys(keys: np.ndarray, coeffs: np.ndarray):
    """Sum coefficients of equal keys (in input order), drop zeros, sort by key."""
    from ._kernels import hash_aggregate

    if keys.shape[1] == 0:
        return keys, coeffs
    uk, re, im = hash_aggregate(np.ascontiguousarray(keys), np.ascontiguousarray(coeffs.real),
                                np.ascontiguousarray(coeffs.imag))
    c = re + 1j * im
    keep = c != 0
    uk, c = uk[:, keep], c[keep]
    order = np.lexsort(uk[::-1])
    return np.ascontiguousarray(uk[:, order]), c[order]


class _Accumulator:
    """Collects product keys and aggregates them in bounded memory."""

    def __init__(self, meta):
        self.meta = meta
        self.keys = []
        self.coeffs = []
        self.rows = 0
        self.dropped = 0.0

    def push(self, k, c):
        if len(c):
            self.keys.append(k)
            self.coeffs.append(c)
            self.rows += len(c)
            if self.rows > _FLUSH_ROWS:
                self._flush()

    def _flush(self):
        k, c = _aggregate_keys(np.concatenate(self.keys, axis=1), np.concatenate(self.coeffs))
        self.keys, self.coeffs, self.rows = [k], [c], len(c)

    def result(self):
        if not self.keys:
            return np.zeros((self.meta.packing["nwords"], 0), np.int64), np.zeros(0, complex)
        return _aggregate_keys(np.concatenate(self.keys, axis=1), np.concatenate(self.coeffs))


@dataclass
class _Rows:
    """Terms in key form with the data needed to apply the caps."""

    keys: np.ndarray     # (nwords, T)
    coeffs: np.ndarray
    orders: np.ndarray
    kvec: np.ndarray     # (T, n)


def _products(acc, meta, A: _Rows, B: _Rows, chop: float = 0.0):
    """Push all products of rows of A with rows of B that respect the caps.

    Products with ``|a b| < chop`` are not formed; like the products above the
    caps, their l1 mass is added to ``acc.dropped``.
    """
    if len(A.coeffs) == 0 or len(B.coeffs) == 0:
        return
    cap, kcap = meta.degree_cap, meta.fourier_cap
    oa, ob = A.orders, B.orders
    order_b = np.argsort(ob, kind="stable")
    ob_sorted = ob[order_b]
    abs_b = np.abs(B.coeffs[order_b])
    tail_b = np.concatenate([np.cumsum(abs_b[::-1])[::-1], [0.0]])
    abs_a = np.abs(A.coeffs)
    n = meta.n
    for o in np.unique(oa):
        ia_all = np.nonzero(oa == o)[0]
        nb = int(np.searchsorted(ob_sorted, cap - o, side="right"))
        # products whose order exceeds the cap are never formed
        acc.dropped += float(abs_a[ia_all].sum() * tail_b[nb])
        if nb == 0:
            continue
        # eligible B rows by decreasing magnitude, so each A row pairs with a prefix
        by_mag = np.argsort(-abs_b[:nb], kind="stable")
        ib_all = order_b[:nb][by_mag]
        mag = abs_b[:nb][by_mag]
        if chop > 0:
            suffix = np.concatenate([np.cumsum(mag[::-1])[::-1], [0.0]])
            with np.errstate(divide="ignore"):
                need = chop / abs_a[ia_all]
            counts = np.searchsorted(-mag, -need, side="right")
            acc.dropped += float((abs_a[ia_all] * suffix[counts]).sum())
            keep = counts > 0
            ia_all, counts = ia_all[keep], counts[keep]
        else:
            counts = np.full(len(ia_all), nb)
        if len(ia_all) == 0:
            continue
        ends = np.cumsum(counts)
        s0 = 0
        while s0 < len(ia_all):
            base = ends[s0 - 1] if s0 else 0
            s1 = max(s0 + 1, int(np.searchsorted(ends, base + _CHUNK_ROWS, side="right")))
            cnt = counts[s0:s1]
            ia = np.repeat(ia_all[s0:s1], cnt)
            starts = np.repeat(np.cumsum(cnt) - cnt, cnt)
            ib = ib_all[np.arange(len(ia)) - starts]
            c = A.coeffs[ia] * B.coeffs[ib]
            k = A.keys[:, ia] + B.keys[:, ib]
            if n:
                ok = np.abs(A.kvec[ia] + B.kvec[ib]).sum(axis=1) <= kcap
                if not ok.all():
                    acc.dropped += float(np.abs(c[~ok]).sum())
                    k, c = k[:, ok], c[ok]
            acc.push(k, c)
            s0 = s1


# --------------------------------------------------------------------------


class Series:
    """Immutable truncated Fourier-Taylor series.

    ``dropped_mass`` records the l1 mass of products discarded by the caps
    when the series was produced by :func:`multiply`, :func:`poisson_bracket`
    or :func:`truncate`; it does not take part in equality.
    """

    def __init__(self, meta: SeriesMeta, exps=None, coeffs=None, dropped_mass: float = 0.0,
                 _canonical: bool = False):
        self.meta = meta
        w = meta.width
        if exps is None:
            exps = np.zeros((0, w), np.int8)
            coeffs = np.zeros(0, complex)
        exps = np.asarray(exps)
        coeffs = np.asarray(coeffs, dtype=complex).ravel()
        if exps.ndim != 2 or exps.shape[1] != w or exps.shape[0] != coeffs.shape[0]:
            raise ValueError(f"exponent table must have shape (T, {w})")
        if not _canonical:
            e64 = exps.astype(np.int64)
            if (e64[:, meta.n :] < 0).any():
                raise ValueError("negative power")
            exps = e64.astype(np.int8)
            ok = (_orders(meta, exps) <= meta.degree_cap) & (_kabs(meta, exps) <= meta.fourier_cap)
            if not ok.all():
                dropped_mass += float(np.abs(coeffs[~ok]).sum())
                exps, coeffs = exps[ok], coeffs[ok]
            keys, coeffs = _aggregate_keys(_encode(meta, exps), coeffs)
            exps = _decode(meta, keys)
            self._keys = keys
        exps.setflags(write=False)
        coeffs.setflags(write=False)
        self.exps = exps
        self.coeffs = coeffs
        self.dropped_mass = float(dropped_mass)
        self._evaluator = None

    _keys = None

    @classmethod
    def _from_keys(cls, meta, keys, coeffs, dropped_mass=0.0):
        W = cls(meta, _decode(meta, keys), coeffs, dropped_mass=dropped_mass, _canonical=True)
        W._keys = keys
        return W

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = _encode(self.meta, self.exps)
        return self._keys

    # ---- construction ----------------------------------------------------
    @classmethod
    def zero(cls, meta):
        return cls(meta)

    @classmethod
    def from_terms(cls, meta: SeriesMeta, terms: Iterable):
        """Build from ``(k, alpha, beta, gamma, coeff)`` tuples or :class:`Term`.

        ``beta`` and ``gamma`` map normal sites to powers.
        """
        rows, cs = [], []
        for t in terms:
            if isinstance(t, Term):
                t = (t.k, t.alpha, t.beta, t.gamma, t.coeff)
            k, alpha, beta, gamma, c = t
            row = np.zeros(meta.width, np.int64)
            row[: meta.n] = k if k is not None and len(k) else 0
            row[meta.n : 2 * meta.n] = alpha if alpha is not None and len(alpha) else 0
            for s, p in (beta or {}).items():
                row[meta.col_q(meta.site_index[_site(s)])] += p
            for s, p in (gamma or {}).items():
                row[meta.col_qbar(meta.site_index[_site(s)])] += p
            rows.append(row)
            cs.append(c)
        if not rows:
            return cls(meta)
        return cls(meta, np.array(rows), np.array(cs, dtype=complex))

    @classmethod
    def monomial(cls, meta, coeff=1.0, k=None, alpha=None, beta=None, gamma=None):
        return cls.from_terms(meta, [(k, alpha, beta, gamma, coeff)])

    @classmethod
    def constant(cls, meta, c):
        return cls.monomial(meta, c)

    @classmethod
    def y(cls, meta, i, coeff=1.0):
        a = [0] * meta.n
        a[i] = 1
        return cls.monomial(meta, coeff, alpha=a)

    @classmethod
    def q(cls, meta, site, coeff=1.0):
        return cls.monomial(meta, coeff, beta={site: 1})

    @classmethod
    def qbar(cls, meta, site, coeff=1.0):
        return cls.monomial(meta, coeff, gamma={site: 1})

    @classmethod
    def fourier(cls, meta, k, coeff=1.0):
        return cls.monomial(meta, coeff, k=k)

    # ---- inspection -------------------------------------------------------
    def __len__(self):
        return len(self.coeffs)

    def __bool__(self):
        return len(self.coeffs) > 0

    def __iter__(self):
        return iter(self.terms())

    def terms(self) -> list:
        meta, n, m = self.meta, self.meta.n, self.meta.m
        out = []
        for row, c in zip(self.exps.astype(int), self.coeffs):
            beta = {meta.sites[j]: int(row[2 * n + j]) for j in np.nonzero(row[2 * n : 2 * n + m])[0]}
            gamma = {meta.sites[j]: int(row[2 * n + m + j]) for j in np.nonzero(row[2 * n + m :])[0]}
            out.append(Term(tuple(int(v) for v in row[:n]), tuple(int(v) for v in row[n : 2 * n]),
                            beta, gamma, complex(c)))
        return out

    @cached_property
    def orders(self) -> np.ndarray:
        """2|alpha| + |beta| + |gamma| for every term."""
        return _orders(self.meta, self.exps)

    @property
    def z_degrees(self) -> np.ndarray:
        return self.exps[:, 2 * self.meta.n :].astype(np.int64).sum(axis=1)

    @property
    def k_abs(self) -> np.ndarray:
        return _kabs(self.meta, self.exps)

    @cached_property
    def k(self) -> np.ndarray:
        return self.exps[:, : self.meta.n].astype(np.int64)

    @property
    def alpha(self) -> np.ndarray:
        n = self.meta.n
        return self.exps[:, n : 2 * n].astype(np.int64)

    @property
    def beta(self) -> np.ndarray:
        n, m = self.meta.n, self.meta.m
        return self.exps[:, 2 * n : 2 * n + m].astype(np.int64)

    @property
    def gamma(self) -> np.ndarray:
        n, m = self.meta.n, self.meta.m
        return self.exps[:, 2 * n + m :].astype(np.int64)

    def l1(self) -> float:
        return float(np.abs(self.coeffs).sum())

    def select(self, mask) -> "Series":
        mask = np.asarray(mask, dtype=bool)
        W = Series(self.meta, self.exps[mask], self.coeffs[mask], _canonical=True)
        if self._keys is not None:
            W._keys = self._keys[:, mask]
        return W

    def split(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return self.select(mask), self.select(~mask)

    def coefficient(self, k=None, alpha=None, beta=None, gamma=None) -> complex:
        probe = Series.monomial(self.meta, 1.0, k, alpha, beta, gamma)
        hit = np.nonzero((self.exps == probe.exps[0]).all(axis=1))[0]
        return complex(self.coeffs[hit[0]]) if len(hit) else 0j

    def map_coeffs(self, fn) -> "Series":
        return Series(self.meta, self.exps, fn(self.coeffs))

    def conj_partner(self) -> "Series":
        """Series whose terms are the complex-conjugate monomials, coefficients conjugated."""
        n, m = self.meta.n, self.meta.m
        e = self.exps.copy()
        e[:, :n] = -e[:, :n]
        e[:, 2 * n :] = np.concatenate([self.exps[:, 2 * n + m :], self.exps[:, 2 * n : 2 * n + m]], axis=1)
        return Series(self.meta, e, np.conj(self.coeffs))

    def is_real(self, tol=1e-12) -> bool:
        """True if the series takes real values on {qbar = conj(q), x, y real}."""
        diff = self - self.conj_partner()
        return diff.l1() <= tol * max(1.0, self.l1())

    def with_meta(self, meta: SeriesMeta) -> "Series":
        """Re-cap to a meta that differs only in the caps."""
        if (meta.n, meta.tangential, meta.sites) != (self.meta.n, self.meta.tangential, self.meta.sites):
            raise MetaMismatch("with_meta can only change caps")
        return Series(meta, self.exps, self.coeffs)

    # ---- arithmetic -------------------------------------------------------
    def _check(self, other):
        if not isinstance(other, Series):
            return NotImplemented
        if other.meta != self.meta:
            raise MetaMismatch("series have different metadata")
        return other

    def __add__(self, other):
        if isinstance(other, (int, float, complex)):
            other = Series.constant(self.meta, other)
        self._check(other)
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        W = Series(self.meta, self.exps, -self.coeffs, _canonical=True)
        W._keys = self._keys
        return W

    def __sub__(self, other):
        if isinstance(other, (int, float, complex)):
            other = Series.constant(self.meta, other)
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            if other == 0:
                return Series(self.meta)
            W = Series(self.meta, self.exps, self.coeffs * other, _canonical=True)
            W._keys = self._keys
            return W
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self * (1.0 / other)

    def __eq__(self, other):
        if not isinstance(other, Series):
            return NotImplemented
        return (self.meta == other.meta and self.exps.shape == other.exps.shape
                and bool((self.exps == other.exps).all()) and bool((self.coeffs == other.coeffs).all()))

    def __hash__(self):
        return hash((self.meta, self.exps.tobytes(), self.coeffs.tobytes()))

    def __repr__(self):
        return f"Series({len(self)} terms, n={self.meta.n}, m={self.meta.m}, caps=({self.meta.degree_cap},{self.meta.fourier_cap}))"

    # ---- calculus ----------------------------------------------------------
    def derivative(self, var: str, index: int) -> "Series":
        """Partial derivative in ``x``, ``y``, ``q`` or ``qbar`` component ``index``."""
        e, c = _derivative(self.meta, self.exps, self.coeffs, var, index)
        return Series(self.meta, e, c)

    def evaluator(self):
        if self._evaluator is None:
            from ._kernels import Evaluator

            self._evaluator = Evaluator(self)
        return self._evaluator

    def __call__(self, w) -> complex:
        return self.evaluator().value(as_state(w, self.meta))

    def gradient(self, w) -> np.ndarray:
        return self.evaluator().gradient(as_state(w, self.meta))[1]

    # ---- serialisation -------------------------------------------------------
    def to_text(self) -> str:
        return dumps_text(self)

    def to_json(self) -> str:
        return dumps_json(self)


def _derivative(meta, exps, coeffs, var, index):
    n, m = meta.n, meta.m
    if var == "x":
        col = index
        mask = exps[:, col] != 0
        return exps[mask], coeffs[mask] * (1j * exps[mask, col])
    col = {"y": n + index, "q": 2 * n + index, "qbar": 2 * n + m + index}[var]
    mask = exps[:, col] > 0
    e = exps[mask].copy()
    c = coeffs[mask] * e[:, col]
    e[:, col] -= 1
    return e, c


def _rows(W: Series) -> _Rows:
    return _Rows(W.keys, W.coeffs, W.orders, W.k)


def _derivative_rows(W: Series, var: str, index: int) -> _Rows:
    meta = W.meta
    n, m = meta.n, meta.m
    if var == "x":
        kc = W.exps[:, index]
        mask = kc != 0
        return _Rows(W.keys[:, mask], W.coeffs[mask] * (1j * kc[mask]), W.orders[mask], W.k[mask])
    col = {"y": n + index, "q": 2 * n + index, "qbar": 2 * n + m + index}[var]
    pw = W.exps[:, col]
    mask = pw > 0
    keys = W.keys[:, mask].copy()
    pk = meta.packing
    keys[pk["word_of"][col]] -= pk["scale"][col]
    drop = 2 if var == "y" else 1
    return _Rows(keys, W.coeffs[mask] * pw[mask], W.orders[mask] - drop, W.k[mask])


def _same_meta(a, b):
    if a.meta != b.meta:
        raise MetaMismatch("series have different metadata")


def add(a: Series, b: Series) -> Series:
    _same_meta(a, b)
    keys, c = _aggregate_keys(np.concatenate([a.keys, b.keys], axis=1), np.concatenate([a.coeffs, b.coeffs]))
    return Series._from_keys(a.meta, keys, c)


def multiply(a: Series, b: Series, chop: float = 0.0) -> Series:
    """Product truncated to the caps; discarded l1 mass goes to ``dropped_mass``."""
    _same_meta(a, b)
    acc = _Accumulator(a.meta)
    _products(acc, a.meta, _rows(a), _rows(b), chop)
    k, c = acc.result()
    return Series._from_keys(a.meta, k, c, acc.dropped)


def _half_bracket(U: Series, V: Series, chop: float = 0.0):
    """<U_x, V_y> + i sum_j U_{q_j} V_{qbar_j}."""
    meta = U.meta
    acc = _Accumulator(meta)
    pairs = [("x", "y", i, 1.0) for i in range(meta.n)] + [("q", "qbar", j, 1j) for j in range(meta.m)]
    for va, vb, idx, fac in pairs:
        A = _derivative_rows(U, va, idx)
        if len(A.coeffs) == 0:
            continue
        B = _derivative_rows(V, vb, idx)
        if len(B.coeffs) == 0:
            continue
        A.coeffs = A.coeffs * fac
        _products(acc, meta, A, B, chop)
    k, c = acc.result()
    return k, c, acc.dropped


def poisson_bracket(U: Series, V: Series, chop: float = 0.0) -> Series:
    """{U,V} = <U_x,V_y> - <U_y,V_x> + i sum_j (U_{q_j} V_{qbar_j} - U_{qbar_j} V_{q_j}).

    Built as the difference of two half-brackets, which makes the result
    exactly antisymmetric in floating point.  Elementary products smaller than
    ``chop`` in absolute value are skipped and counted in ``dropped_mass``.
    """
    _same_meta(U, V)
    ka, ca, da = _half_bracket(U, V, chop)
    kb, cb, db = _half_bracket(V, U, chop)
    k, c = _aggregate_keys(np.concatenate([ka, kb], axis=1), np.concatenate([ca, -cb]))
    return Series._from_keys(U.meta, k, c, da + db)


def truncate(W: Series, degree_cap: int, fourier_cap: int) -> Series:
    """Drop terms above the caps (meta is unchanged); report dropped l1 mass."""
    if degree_cap < 0 or fourier_cap < 0:
        raise ValueError("caps must be nonnegative")
    keep = (W.orders <= degree_cap) & (W.k_abs <= fourier_cap)
    dropped = float(np.abs(W.coeffs[~keep]).sum())
    return Series(W.meta, W.exps[keep], W.coeffs[keep], dropped_mass=dropped, _canonical=True)


def momentum_residual(t, meta: SeriesMeta | None = None) -> np.ndarray:
    """sum_i k_i j_i + sum_j (beta_j - gamma_j) j for a Term, or per term of a Series."""
    if isinstance(t, Series):
        return t.k @ t.meta.tangential_array + (t.beta - t.gamma) @ t.meta.site_array
    d = len(meta.tangential[0]) if meta and meta.tangential else None
    if d is None:
        some = next(iter(t.beta or t.gamma), None)
        d = len(_site(some)) if some is not None else (meta.d if meta else 0)
    r = np.zeros(d, dtype=np.int64)
    if meta is not None:
        for ki, ji in zip(t.k, meta.tangential):
            r += ki * np.array(ji)
    for s, p in t.beta.items():
        r += p * np.array(_site(s))
    for s, p in t.gamma.items():
        r -= p * np.array(_site(s))
    return r


def vector_field(W: Series, w) -> Tangent:
    """X_W = (W_y, -W_x, i J W_z) at the point ``w``: dq = i W_qbar, dqbar = -i W_q."""
    meta = W.meta
    g = W.gradient(w)
    n, m = meta.n, meta.m
    return Tangent(g[n : 2 * n], -g[:n], 1j * g[2 * n + m :], -1j * g[2 * n : 2 * n + m])


# --------------------------------------------------------------------------
# serialisation

_HEADER = "# beamkam-series v1"


def _fmt_site(s):
    return ",".join(str(c) for c in s)


def _fmt_powers(meta, row, offset):
    parts = [f"{_fmt_site(meta.sites[j])}:{int(row[offset + j])}" for j in np.nonzero(row[offset : offset + meta.m])[0]]
    return " ".join(parts) if parts else "-"


def dumps_text(W: Series) -> str:
    meta = W.meta
    n, m = meta.n, meta.m
    lines = [
        _HEADER,
        f"# n={n} degree_cap={meta.degree_cap} fourier_cap={meta.fourier_cap} d={meta.d}",
        "# tangential=" + ";".join(_fmt_site(s) for s in meta.tangential),
        "# sites=" + ";".join(_fmt_site(s) for s in meta.sites),
        "# k | alpha | beta | gamma | re | im",
    ]
    for row, c in zip(W.exps.astype(int), W.coeffs):
        lines.append(" | ".join([
            ",".join(str(v) for v in row[:n]) or "-",
            ",".join(str(v) for v in row[n : 2 * n]) or "-",
            _fmt_powers(meta, row, 2 * n),
            _fmt_powers(meta, row, 2 * n + m),
            repr(float(c.real)),
            repr(float(c.imag)),
        ]))
    return "\n".join(lines) + "\n"


def _parse_sites(s, d):
    if not s:
        return ()
    return tuple(tuple(int(v) for v in p.split(",")) for p in s.split(";"))


def loads_text(text: str) -> Series:
    head = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    key, val = tok.split("=", 1)
                    head[key] = val
        elif line.strip():
            body.append(line)
    if "n" not in head:
        raise ValueError("missing series header")
    d = int(head["d"])
    meta = SeriesMeta(int(head["n"]), _parse_sites(head.get("tangential", ""), d),
                      _parse_sites(head.get("sites", ""), d), int(head["degree_cap"]),
                      int(head["fourier_cap"]))
    rows, cs = [], []
    for line in body:
        fk, fa, fb, fg, fre, fim = (f.strip() for f in line.split("|"))
        row = np.zeros(meta.width, np.int64)
        if fk != "-":
            row[: meta.n] = [int(v) for v in fk.split(",")]
        if fa != "-":
            row[meta.n : 2 * meta.n] = [int(v) for v in fa.split(",")]
        for field_, col in ((fb, meta.col_q), (fg, meta.col_qbar)):
            if field_ == "-":
                continue
            for tok in field_.split():
                s, p = tok.rsplit(":", 1)
                row[col(meta.site_index[tuple(int(v) for v in s.split(","))])] = int(p)
        rows.append(row)
        cs.append(complex(float(fre), float(fim)))
    if not rows:
        return Series(meta)
    return Series(meta, np.array(rows), np.array(cs))


def _json_float(v: float) -> str:
    return repr(v) if math.isfinite(v) else json.dumps(v)


def _site_lists(Z: np.ndarray, site_txt) -> list:
    """Per row, the JSON text of the nonzero (site, power) pairs of ``Z``."""
    rows, cols = np.nonzero(Z)
    pieces = [f"[{site_txt[j]}, {p}]" for j, p in zip(cols.tolist(), Z[rows, cols].tolist())]
    bounds = np.searchsorted(rows, np.arange(len(Z) + 1)).tolist()
    return [", ".join(pieces[bounds[i] : bounds[i + 1]]) for i in range(len(Z))]


def dumps_json(W: Series) -> str:
    meta = W.meta
    n, m = meta.n, meta.m
    site_txt = [json.dumps(list(s)) for s in meta.sites]
    E = W.exps.astype(np.int64)
    beta = _site_lists(E[:, 2 * n : 2 * n + m], site_txt)
    gamma = _site_lists(E[:, 2 * n + m :], site_txt)
    k_txt = [json.dumps(r) for r in E[:, :n].tolist()]
    a_txt = [json.dumps(r) for r in E[:, n : 2 * n].tolist()]
    recs = [f'{{"k": {k}, "alpha": {a}, "beta": [{b}], "gamma": [{g}], '
            f'"re": {_json_float(c.real)}, "im": {_json_float(c.imag)}}}'
            for k, a, b, g, c in zip(k_txt, a_txt, beta, gamma, W.coeffs.tolist())]
    head = json.dumps({"format": "beamkam-series", "meta": meta.to_dict()})
    return head[:-1] + ', "terms": [' + ", ".join(recs) + "]}"


def loads_json(text: str) -> Series:
    obj = json.loads(text)
    meta = SeriesMeta.from_dict(obj["meta"])
    recs = obj["terms"]
    if not recs:
        return Series(meta)
    n, m = meta.n, meta.m
    idx = {tuple(s): j for s, j in meta.site_index.items()}
    E = np.zeros((len(recs), meta.width), np.int64)
    cs = np.empty(len(recs), complex)
    for i, r in enumerate(recs):
        row = E[i]
        if n:
            row[:n] = r["k"]
            row[n : 2 * n] = r["alpha"]
        for s, p in r["beta"]:
            row[2 * n + idx[tuple(s)]] += p
        for s, p in r["gamma"]:
            row[2 * n + m + idx[tuple(s)]] += p
        cs[i] = complex(r["re"], r["im"])
    return Series(meta, E, cs)
