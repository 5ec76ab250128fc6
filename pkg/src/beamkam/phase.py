"""Phase-space points and tangent vectors.

Internally a point is a complex state vector ``[x | y | q | qbar]``.  On the
real subspace ``x, y`` are real and ``qbar = conj(q)``; flows that leave this
subspace (complex times, unresolved rounding) are still representable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PhasePoint:
    x: np.ndarray
    y: np.ndarray
    q: np.ndarray
    qbar: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=complex).ravel()
        self.y = np.asarray(self.y, dtype=complex).ravel()
        self.q = np.asarray(self.q, dtype=complex).ravel()
        self.qbar = np.conj(self.q) if self.qbar is None else np.asarray(self.qbar, dtype=complex).ravel()

    @property
    def z(self):
        return self.q

    def to_state(self) -> np.ndarray:
        return np.concatenate([self.x, self.y, self.q, self.qbar])

    @classmethod
    def from_state(cls, state, n: int, m: int) -> "PhasePoint":
        s = np.asarray(state, dtype=complex)
        return cls(s[:n], s[n : 2 * n], s[2 * n : 2 * n + m], s[2 * n + m : 2 * n + 2 * m])

    def reality_defect(self) -> float:
        """Distance of the point from the real subspace."""
        parts = [np.abs(self.x.imag), np.abs(self.y.imag), np.abs(self.qbar - np.conj(self.q))]
        return float(max((p.max() for p in parts if p.size), default=0.0))


@dataclass
class Tangent:
    dx: np.ndarray
    dy: np.ndarray
    dq: np.ndarray
    dqbar: np.ndarray

    def to_state(self) -> np.ndarray:
        return np.concatenate([self.dx, self.dy, self.dq, self.dqbar])


def as_state(w, meta) -> np.ndarray:
    if isinstance(w, (PhasePoint, Tangent)):
        s = w.to_state()
    else:
        s = np.asarray(w, dtype=complex).ravel()
    if s.shape[0] != meta.width:
        raise ValueError(f"state has length {s.shape[0]}, expected {meta.width}")
    return s
