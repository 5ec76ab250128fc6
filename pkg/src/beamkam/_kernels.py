"""Compiled evaluation of a series and its gradient at a state vector."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _ipow(z, p):
    r = 1.0 + 0.0j
    for _ in range(p):
        r *= z
    return r


@njit(cache=True)
def _eval(coeffs, kx, slot_var, slot_pow, state, n, kmax, grad):
    T = coeffs.shape[0]
    S = slot_var.shape[1]
    table = np.empty((n, 2 * kmax + 1), dtype=np.complex128)
    for i in range(n):
        e = np.exp(1j * state[i])
        einv = np.exp(-1j * state[i])
        table[i, kmax] = 1.0
        for p in range(1, kmax + 1):
            table[i, kmax + p] = table[i, kmax + p - 1] * e
            table[i, kmax - p] = table[i, kmax - p + 1] * einv
    want = grad.shape[0] > 0
    fac = np.empty(S, dtype=np.complex128)
    dfac = np.empty(S, dtype=np.complex128)
    prefix = np.empty(S + 1, dtype=np.complex128)
    total = 0.0 + 0.0j
    for t in range(T):
        ph = coeffs[t]
        for i in range(n):
            ph *= table[i, kmax + kx[t, i]]
        prefix[0] = 1.0
        for s in range(S):
            v = slot_var[t, s]
            if v < 0:
                fac[s] = 1.0
                dfac[s] = 0.0
            else:
                p = slot_pow[t, s]
                zp = _ipow(state[v], p - 1)
                fac[s] = zp * state[v]
                dfac[s] = p * zp
            prefix[s + 1] = prefix[s] * fac[s]
        val = ph * prefix[S]
        total += val
        if want:
            for i in range(n):
                if kx[t, i] != 0:
                    grad[i] += 1j * kx[t, i] * val
            suffix = 1.0 + 0.0j
            for s in range(S - 1, -1, -1):
                v = slot_var[t, s]
                if v >= 0:
                    grad[v] += ph * prefix[s] * dfac[s] * suffix
                suffix *= fac[s]
    return total


@njit(cache=True)
def pack_rows(exps, lo, bits, word_of, nwords):
    """Pack int8 rows into uint64 words, most significant column first."""
    T, W = exps.shape
    out = np.zeros((nwords, T), dtype=np.uint64)
    for t in range(T):
        for c in range(W):
            b = bits[c]
            if b == 0:
                continue
            w = word_of[c]
            out[w, t] = (out[w, t] << np.uint64(b)) | np.uint64(exps[t, c] - lo[c])
    return out


@njit(cache=True)
def encode_keys(exps, word_of, scale, nwords):
    """Linear keys: key[w] = sum over columns c of word w of e_c * 2^shift_c."""
    T, W = exps.shape
    out = np.zeros((nwords, T), dtype=np.int64)
    for t in range(T):
        for c in range(W):
            if scale[c] != 0:
                out[word_of[c], t] += np.int64(exps[t, c]) * scale[c]
    return out


@njit(cache=True)
def decode_keys(keys, word_of, bits, signed, W):
    nwords, T = keys.shape
    out = np.zeros((T, W), dtype=np.int8)
    cur = np.empty(nwords, dtype=np.int64)
    for t in range(T):
        for w in range(nwords):
            cur[w] = keys[w, t]
        for c in range(W - 1, -1, -1):
            b = bits[c]
            if b == 0:
                continue
            w = word_of[c]
            full = np.int64(1) << b
            v = cur[w] & (full - 1)
            if signed[c] and v >= (full >> 1):
                v -= full
            out[t, c] = v
            cur[w] = (cur[w] - v) >> b
    return out


@njit(cache=True)
def _mix(h):
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return h


@njit(cache=True)
def hash_aggregate(keys, re, im):
    """Sum values of equal key columns in input order; unique keys in first-seen order."""
    nw, R = keys.shape
    size = 1
    while size < 2 * R:
        size <<= 1
    mask = np.uint64(size - 1)
    slot = -np.ones(size, dtype=np.int64)
    ukeys = np.empty((nw, R), dtype=np.int64)
    ure = np.zeros(R)
    uim = np.zeros(R)
    U = 0
    for r in range(R):
        h = np.uint64(0x9E3779B97F4A7C15)
        for w in range(nw):
            h = _mix(h ^ np.uint64(keys[w, r]))
        pos = h & mask
        while True:
            u = slot[pos]
            if u == -1:
                slot[pos] = U
                for w in range(nw):
                    ukeys[w, U] = keys[w, r]
                ure[U] = re[r]
                uim[U] = im[r]
                U += 1
                break
            same = True
            for w in range(nw):
                if ukeys[w, u] != keys[w, r]:
                    same = False
                    break
            if same:
                ure[u] += re[r]
                uim[u] += im[r]
                break
            pos = (pos + np.uint64(1)) & mask
    return ukeys[:, :U], ure[:U], uim[:U]


class Evaluator:
    """Flattened form of a series: per term the Fourier vector and its nonzero powers."""

    def __init__(self, W):
        meta = W.meta
        n = meta.n
        e = W.exps.astype(np.int64)
        self.n = n
        self.width = meta.width
        self.coeffs = np.ascontiguousarray(W.coeffs, dtype=np.complex128)
        self.kx = np.ascontiguousarray(e[:, :n])
        powers = e[:, n:]
        S = int((powers > 0).sum(axis=1).max()) if len(e) else 0
        S = max(S, 1)
        self.slot_var = -np.ones((len(e), S), dtype=np.int64)
        self.slot_pow = np.zeros((len(e), S), dtype=np.int64)
        for t in range(len(e)):
            nz = np.nonzero(powers[t])[0]
            self.slot_var[t, : len(nz)] = nz + n
            self.slot_pow[t, : len(nz)] = powers[t, nz]
        self.kmax = int(np.abs(self.kx).max()) if self.kx.size else 0

    def value(self, state) -> complex:
        state = np.ascontiguousarray(state, dtype=np.complex128)
        return complex(_eval(self.coeffs, self.kx, self.slot_var, self.slot_pow, state, self.n, self.kmax,
                             np.zeros(0, np.complex128)))

    def gradient(self, state):
        state = np.ascontiguousarray(state, dtype=np.complex128)
        g = np.zeros(self.width, dtype=np.complex128)
        v = _eval(self.coeffs, self.kx, self.slot_var, self.slot_pow, state, self.n, self.kmax, g)
        return complex(v), g


@njit(cache=True)
def _field(coeffs, kx, slot_var, slot_pow, state, n, m, kmax, grad, out):
    """X_W at ``state`` written into ``out``: (W_y, -W_x, i W_qbar, -i W_q)."""
    grad[:] = 0.0
    _eval(coeffs, kx, slot_var, slot_pow, state, n, kmax, grad)
    for i in range(n):
        out[i] = grad[n + i]
        out[n + i] = -grad[i]
    for j in range(m):
        out[2 * n + j] = 1j * grad[2 * n + m + j]
        out[2 * n + m + j] = -1j * grad[2 * n + j]


@njit(cache=True)
def _half_n(st, n, m, omega, rot, dt):
    for i in range(n):
        st[i] += 0.5 * dt * omega[i]
    for j in range(m):
        st[2 * n + j] *= rot[j]
        st[2 * n + m + j] *= np.conj(rot[j])


@njit(cache=True)
def strang_run(coeffs, kx, slot_var, slot_pow, n, m, kmax, omega, Omega, state0, dt, nsteps, stride,
               tol, maxit):
    """Symmetric splitting: exact half-step of N, implicit midpoint for the rest, half-step of N.

    Returns sampled states (every ``stride`` steps, first row the initial state)
    and the largest number of fixed-point iterations used in one step
    (``maxit + 1`` flags non-convergence).
    """
    W = state0.shape[0]
    out = np.empty((nsteps // stride + 1, W), dtype=np.complex128)
    st = state0.copy()
    out[0] = st
    rot = np.empty(m, dtype=np.complex128)
    for j in range(m):
        rot[j] = np.exp(0.5j * Omega[j] * dt)
    grad = np.zeros(W, dtype=np.complex128)
    f = np.zeros(W, dtype=np.complex128)
    new = np.empty(W, dtype=np.complex128)
    mid = np.empty(W, dtype=np.complex128)
    has_p = coeffs.shape[0] > 0
    worst = 0
    k = 1
    for step in range(nsteps):
        _half_n(st, n, m, omega, rot, dt)
        if has_p:
            _field(coeffs, kx, slot_var, slot_pow, st, n, m, kmax, grad, f)
            for c in range(W):
                new[c] = st[c] + dt * f[c]
            used = maxit + 1
            for it in range(maxit):
                for c in range(W):
                    mid[c] = 0.5 * (st[c] + new[c])
                _field(coeffs, kx, slot_var, slot_pow, mid, n, m, kmax, grad, f)
                diff = 0.0
                scale = 1.0
                for c in range(W):
                    cand = st[c] + dt * f[c]
                    d = abs(cand - new[c])
                    if d > diff:
                        diff = d
                    if abs(cand) > scale:
                        scale = abs(cand)
                    new[c] = cand
                if diff <= tol * scale:
                    used = it + 1
                    break
            if used > worst:
                worst = used
            st[:] = new
        _half_n(st, n, m, omega, rot, dt)
        if (step + 1) % stride == 0:
            out[k] = st
            k += 1
    return out[:k], worst
