"""Independent reference computations used by the tests.

Nothing here imports the package; each oracle is a slow, literal
computation of the quantity under test.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np


def totals(groups: dict, ntypes: int):
    """Group count and per-type individual totals by direct summation."""
    count = sum(groups.values())
    ind = [sum(c[k] * x for c, x in groups.items()) for k in range(ntypes)]
    return count, tuple(ind)


def uniform_box_outcomes(comp):
    """Every equally likely box draw ``d`` and the multiset of nonzero pieces it yields."""
    for d in itertools.product(*(range(c + 1) for c in comp)):
        rest = tuple(c - x for c, x in zip(comp, d))
        yield tuple(sorted(p for p in (tuple(d), rest) if any(p)))


def uniform_box_eta(comp, child) -> float:
    """Expected number of ``child`` pieces, averaging over the enumerated draws."""
    outs = list(uniform_box_outcomes(comp))
    return sum(o.count(tuple(child)) for o in outs) / len(outs)


def uniform_box_partition_probs(comp) -> dict:
    outs = Counter(uniform_box_outcomes(comp))
    total = sum(outs.values())
    return {k: v / total for k, v in outs.items()}


def channel_propensities(groups: dict, beta, delta, mu, phi, eps) -> list:
    """Per-group enumeration: every group contributes its own channels.

    ``beta``, ``delta``, ``mu`` map a composition to a per-capita tuple,
    ``phi`` and ``eps`` map it to a scalar.
    """
    xstar = sum(groups.values())
    out = []
    for comp, x in groups.items():
        for _ in range(x):  # one group at a time
            for name, fn in (("birth", beta), ("death", delta), ("migration", mu)):
                for k, r in enumerate(fn(comp)):
                    if comp[k] > 0 and r > 0:
                        out.append((name, comp, k, comp[k] * r))
            if phi(comp) > 0:
                out.append(("fission", comp, None, phi(comp)))
            if eps(comp) > 0:
                out.append(("extinction", comp, None, eps(comp) * xstar))
    return out


def lattice_sup(fn, box):
    """Maximum of ``fn`` over every nonzero lattice point in ``[0, box]``, with its argmax."""
    best, arg = -math.inf, None
    for p in itertools.product(*(range(b + 1) for b in box)):
        if not any(p):
            continue
        v = fn(p)
        if v > best:
            best, arg = v, p
    return best, arg


def yule_mean(i0: float, beta: float, t: float) -> float:
    return i0 * math.exp(beta * t)


def riccati_mass(r0: float, eps: float, t: float) -> float:
    return r0 / (1.0 + eps * r0 * t)


def transport_exact(x0, c: float, t: float):
    """Solution of ``x_t + (c u x)_u = 0``: ``e^{-ct} x0(u e^{-ct})``."""
    return lambda u: math.exp(-c * t) * x0(u * math.exp(-c * t))


def gaussian_bump(center: float, sd: float):
    return lambda u: np.exp(-((np.asarray(u, float) - center) ** 2) / (2 * sd * sd))


def two_atom_bl(d: float) -> float:
    """Bounded-Lipschitz distance between unit atoms at 0 and ``d``: ``min(d, 2)``."""
    return min(d, 2.0)


def linear_moment_solution(c: float, i0: float, t: float) -> float:
    return i0 * math.exp(c * t)


def midpoint_integral(f, lo: float, hi: float, cells: int) -> float:
    h = (hi - lo) / cells
    x = lo + h * (np.arange(cells) + 0.5)
    return float(np.sum(f(x)) * h)
