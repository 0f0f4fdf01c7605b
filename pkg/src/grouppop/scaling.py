"""Scaled observables of a population at scale ``(n, m)``.

Compositions ``i`` sit at ``u = i/n`` on the orthant and group counts are
divided by ``m``.  Two views are provided: the empirical measure (atoms) and
the step density ``X(floor(n u)) / m`` on cells of side ``1/n``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import FissionLaw, Population, RateSpec, box_lattice, eta


@dataclass(frozen=True)
class ScalingParams:
    n: int
    m: int

    def __post_init__(self):
        if int(self.n) != self.n or int(self.m) != self.m or self.n < 1 or self.m < 1:
            raise ValueError(f"scaling parameters must be positive integers, got n={self.n}, m={self.m}")


@dataclass
class EmpiricalMeasure:
    """Atoms ``locations[j]`` (rows) with weights ``weights[j]``."""

    locations: np.ndarray
    weights: np.ndarray

    @property
    def ntypes(self) -> int:
        return self.locations.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def pair(self, f: Callable) -> float:
        if len(self.weights) == 0:
            return 0.0
        return float(np.dot(self.weights, f(self.locations)))

    def __add__(self, other: "EmpiricalMeasure") -> "EmpiricalMeasure":
        locs = np.vstack([self.locations, other.locations])
        w = np.concatenate([self.weights, other.weights])
        uniq, inv = np.unique(locs, axis=0, return_inverse=True)
        return EmpiricalMeasure(uniq, np.bincount(inv.ravel(), weights=w, minlength=len(uniq)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"u{k + 1}" for k in range(self.ntypes)] + ["weight"])
        for loc, wt in zip(self.locations, self.weights):
            w.writerow([repr(float(x)) for x in loc] + [repr(float(wt))])
        return buf.getvalue()


def empirical_measure(pop: Population, s: ScalingParams) -> EmpiricalMeasure:
    items = sorted(pop.items())
    if not items:
        return EmpiricalMeasure(np.zeros((0, pop.ntypes)), np.zeros(0))
    comps = np.array([c for c, _ in items], dtype=float)
    counts = np.array([x for _, x in items], dtype=float)
    return EmpiricalMeasure(comps / s.n, counts / s.m)


@dataclass(frozen=True)
class HatRates:
    """Rates of the ``(n, m)`` model read off at ``floor(n u)``.

    ``epsilon`` follows ``rates.extinction_scaling``; ``epsilon_lln`` is
    ``m * eps`` and ``epsilon_lp`` is ``m n**l * eps`` regardless of mode.
    """

    rates: RateSpec
    scaling: ScalingParams

    def _eval(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        comps = np.floor(self.scaling.n * u + 1e-12).astype(np.int64)
        return self.rates.rescaled(self.scaling.n, self.scaling.m).evaluate(comps)

    def birth(self, u):
        return self._eval(u)["birth"]

    def death(self, u):
        return self._eval(u)["death"]

    def migration(self, u):
        return self._eval(u)["migration"]

    def fission(self, u):
        return self._eval(u)["fission"]

    def epsilon_lln(self, u):
        return self._eval(u)["extinction"] * self.scaling.m

    def epsilon_lp(self, u):
        return self._eval(u)["extinction"] * self.scaling.m * float(self.scaling.n) ** self.rates.ntypes

    def epsilon(self, u):
        if self.rates.extinction_scaling == "lln":
            return self.epsilon_lln(u)
        return self.epsilon_lp(u)


def hat_rates(rates: RateSpec, s: ScalingParams) -> HatRates:
    return HatRates(rates, s)


def hat_eta_pairing(law: FissionLaw, s: ScalingParams, u, f: Callable) -> float:
    """``sum_{i'} f(i'/n) eta(floor(n u), i')`` over the box below ``floor(n u)``."""
    i = tuple(int(v) for v in np.floor(s.n * np.asarray(u, dtype=float) + 1e-12))
    if not any(i):
        return 0.0
    children = [c for c in box_lattice(i) if any(c)]
    weights = np.array([eta(law, i, c) for c in children])
    vals = np.asarray(f(np.array(children, dtype=float) / s.n), dtype=float)
    if vals.ndim == 2:
        return (weights[:, None] * vals).sum(axis=0)
    return float(np.dot(weights, vals))


@dataclass
class StepDensity:
    """Piecewise-constant density ``X(i)/m`` on the cells ``[i/n, (i+1)/n)``."""

    corners: np.ndarray   # (P, l) integer compositions
    heights: np.ndarray   # (P,)
    n: int

    @property
    def ntypes(self) -> int:
        return self.corners.shape[1]

    @property
    def cell_volume(self) -> float:
        return float(self.n) ** (-self.ntypes)

    def total(self) -> float:
        return float(self.heights.sum() * self.cell_volume)

    def __call__(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        idx = np.floor(self.n * u + 1e-12).astype(np.int64)
        lookup = {tuple(c): h for c, h in zip(self.corners.tolist(), self.heights)}
        return np.array([lookup.get(tuple(r), 0.0) for r in idx.tolist()])

    def pair(self, g: Callable, order: int = 4) -> float:
        """``int g(u) Xhat(u) du`` with tensor Gauss-Legendre inside each cell."""
        if len(self.heights) == 0:
            return 0.0
        ell = self.ntypes
        x, w = np.polynomial.legendre.leggauss(order)
        x, w = 0.5 * (x + 1.0), 0.5 * w
        grids = np.meshgrid(*([x] * ell), indexing="ij")
        offs = np.stack([g_.ravel() for g_ in grids], axis=1)          # (Q, l)
        wts = np.prod(np.stack(np.meshgrid(*([w] * ell), indexing="ij")), axis=0).ravel()
        pts = (self.corners[:, None, :] + offs[None, :, :]) / self.n   # (P, Q, l)
        vals = np.asarray(g(pts.reshape(-1, ell)), dtype=float).reshape(len(self.heights), -1)
        return float(np.sum(self.heights * (vals @ wts)) * self.cell_volume)


def density_step_function(pop: Population, s: ScalingParams) -> StepDensity:
    items = sorted(pop.items())
    if not items:
        return StepDensity(np.zeros((0, pop.ntypes), dtype=np.int64), np.zeros(0), s.n)
    comps = np.array([c for c, _ in items], dtype=np.int64)
    counts = np.array([x for _, x in items], dtype=float)
    return StepDensity(comps, counts / s.m, s.n)
