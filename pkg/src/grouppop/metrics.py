"""Weak distances and pairings between measures on the orthant.

Measures may be empirical (atoms), grid densities or step densities; all
are reduced to ``pair(measure, f)``.  The bounded-Lipschitz distance is
estimated from below by a fixed bank of functions that are 1-Lipschitz and
bounded by 1 by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .pde import DensityGrid
from .scaling import EmpiricalMeasure, StepDensity


def pair(measure, f: Callable) -> float:
    """``<f, measure>``: atom sum, midpoint cell sum, or per-cell Gauss rule."""
    if isinstance(measure, (EmpiricalMeasure, DensityGrid, StepDensity)):
        return measure.pair(f)
    raise TypeError(f"cannot pair with {type(measure).__name__}")


def moments(measure) -> tuple[float, np.ndarray]:
    """Mass and the vector of first moments ``int u_k measure(du)``."""
    ell = _ntypes(measure)
    mass = pair(measure, lambda u: np.ones(len(u)))
    first = np.array([pair(measure, lambda u, k=k: u[:, k]) for k in range(ell)])
    return mass, first


def _ntypes(measure) -> int:
    if isinstance(measure, DensityGrid):
        return measure.grid.ntypes
    return measure.ntypes


def _values(measure, points_fn) -> np.ndarray:
    """Pairings of every bank member with ``measure`` (vectorised)."""
    if isinstance(measure, EmpiricalMeasure):
        if len(measure.weights) == 0:
            return np.zeros(points_fn(np.zeros((0, measure.ntypes))).shape[0])
        return points_fn(measure.locations) @ measure.weights
    if isinstance(measure, DensityGrid):
        return points_fn(measure.grid.points()) @ measure.values.ravel() * measure.grid.volume
    if isinstance(measure, StepDensity):
        if len(measure.heights) == 0:
            return np.zeros(points_fn(np.zeros((0, measure.ntypes))).shape[0])
        ell = measure.ntypes
        x, w = np.polynomial.legendre.leggauss(4)
        x, w = 0.5 * (x + 1.0), 0.5 * w
        offs = np.stack([g.ravel() for g in np.meshgrid(*([x] * ell), indexing="ij")], axis=1)
        wts = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w] * ell), indexing="ij")], axis=1), axis=1)
        pts = ((measure.corners[:, None, :] + offs[None, :, :]) / measure.n).reshape(-1, ell)
        cellw = (measure.heights[:, None] * wts[None, :]).ravel() * measure.cell_volume
        return points_fn(pts) @ cellw
    raise TypeError(f"cannot pair with {type(measure).__name__}")


@dataclass
class TestFunctionBank:
    """Deterministic ramps and tents followed by seeded random cosines.

    Members, in order: the constant 1; ramps ``clip(u_k - a, -1, 1)``;
    tents ``max(0, w - |u - c|)``; cosines ``a cos(omega . u + b)`` with
    ``a = min(1, 1/|omega|)``.  Each is 1-Lipschitz and bounded by 1.
    Banks of different sizes with the same seed are prefixes of one
    sequence.
    """

    ntypes: int
    size: int = 512
    seed: int = 0
    upper: float = 6.0
    __test__ = False  # not a pytest class

    kinds: list = field(init=False, repr=False)

    def __post_init__(self):
        ell = self.ntypes
        ramps = []
        for k in range(ell):
            for a in np.arange(0.0, self.upper + 1e-9, 0.25):
                ramps.append((k, float(a)))
        tents = []
        widths = (1.0, 0.5, 0.25) if ell == 1 else (1.0, 0.5)
        for w in widths:
            spacing = w / 2 if ell == 1 else w
            axis = np.arange(0.0, self.upper + 1e-9, spacing)
            for c in np.stack([g.ravel() for g in np.meshgrid(*([axis] * ell), indexing="ij")], axis=1):
                tents.append((w, c))
        det = 1 + len(ramps) + len(tents)
        nrand = max(0, self.size - det)
        rng = np.random.default_rng(self.seed)
        omega = rng.normal(scale=2.0, size=(nrand, ell))
        phase = rng.uniform(0, 2 * np.pi, size=nrand)
        self._ramp_k = np.array([r[0] for r in ramps], dtype=int)
        self._ramp_a = np.array([r[1] for r in ramps])
        self._tent_w = np.array([t[0] for t in tents])
        self._tent_c = np.array([t[1] for t in tents]).reshape(-1, ell)
        self._omega = omega
        self._phase = phase
        self._amp = np.minimum(1.0, 1.0 / np.maximum(np.linalg.norm(omega, axis=1), 1e-300))
        self.kinds = (["constant"] + ["ramp"] * len(ramps) + ["tent"] * len(tents) + ["cosine"] * nrand)[: self.size]

    def __len__(self) -> int:
        return self.size

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        """``(size, P)`` matrix of member values at the rows of ``u``."""
        u = np.atleast_2d(np.asarray(u, float))
        rows = [np.ones((1, len(u)))]
        if len(self._ramp_k):
            rows.append(np.clip(u[:, self._ramp_k].T - self._ramp_a[:, None], -1.0, 1.0))
        if len(self._tent_w):
            d = np.linalg.norm(u[None, :, :] - self._tent_c[:, None, :], axis=2)
            rows.append(np.maximum(0.0, self._tent_w[:, None] - d))
        if len(self._omega):
            rows.append(self._amp[:, None] * np.cos(self._omega @ u.T + self._phase[:, None]))
        return np.vstack(rows)[: self.size]

    def member(self, j: int) -> Callable:
        return lambda u: self.evaluate(u)[j]


@dataclass(frozen=True)
class RhoEstimate:
    """Lower bound on the bounded-Lipschitz distance from a fixed bank."""

    value: float
    bank_size: int
    seed: int
    argmax: int

    def __float__(self) -> float:
        return self.value

    def as_dict(self) -> dict:
        return {"rho_w_lower_bound": self.value, "bank_size": self.bank_size, "bank_seed": self.seed}


def bank_pairings(measure, bank: TestFunctionBank) -> np.ndarray:
    return _values(measure, bank.evaluate)


def rho_w(mu, nu, bank: TestFunctionBank) -> RhoEstimate:
    diff = np.abs(bank_pairings(mu, bank) - bank_pairings(nu, bank))
    j = int(np.argmax(diff))
    return RhoEstimate(float(diff[j]), len(bank), bank.seed, j)


# ----------------------------------------------------------------------------
# Smooth square-integrable test functions for density pairings


@dataclass
class GBank:
    """Sixteen smooth, bounded, square-integrable functions on the orthant."""

    ntypes: int
    upper: float = 6.0

    def __post_init__(self):
        rng = np.random.default_rng(20231)
        ell = self.ntypes
        centres = np.linspace(0.5, 0.75 * self.upper, 12)
        self._centres = [np.full(ell, c) for c in centres] + [rng.uniform(0.5, 0.6 * self.upper, ell) for _ in range(2)]
        self._scales = [0.5 if j % 2 == 0 else 1.0 for j in range(12)] + [0.75, 0.75]

    def __len__(self) -> int:
        return 16

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        rows = []
        for c, s in zip(self._centres, self._scales):
            rows.append(np.exp(-np.sum((u - c) ** 2, axis=1) / (2 * s * s)))
        r = np.sum(u, axis=1)
        rows.append(r * np.exp(-r))                       # size-weighted, peaks at |u| = 1
        rows.append(np.sin(r) * np.exp(-0.5 * r))
        return np.vstack(rows)


def pairing_gaps(step: StepDensity, target: DensityGrid, gbank: GBank) -> np.ndarray:
    """``|<g, step> - <g, target>|`` for every ``g`` in the bank."""
    return np.abs(_values(step, gbank.evaluate) - _values(target, gbank.evaluate))


def lp_pairing_convergence(steps: dict, target: dict, gbank: GBank) -> list[dict]:
    """Gap table.

    ``steps`` maps ``(n, m)`` to ``{t: [StepDensity per replica]}`` and
    ``target`` maps ``t`` to the limit ``DensityGrid``.  Each row reports the
    median over replicas of every per-``g`` gap, plus the median of the
    per-replica maximum.
    """
    rows = []
    for (n, m), by_time in steps.items():
        for t, reps in sorted(by_time.items()):
            gaps = np.array([pairing_gaps(s, target[t], gbank) for s in reps])
            rows.append({
                "n": n, "m": m, "t": t,
                "gaps": np.median(gaps, axis=0).tolist(),
                "max_gap_median": float(np.median(gaps.max(axis=1))),
            })
    return rows
