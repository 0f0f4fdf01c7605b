"""Domain types shared by the simulator and the PDE solver.

A group is identified by its *composition*, a tuple of per-type individual
counts.  A :class:`Population` is a sparse multiset of compositions.  Rates
come from a small registry of closed forms (:func:`make_rate`) bundled into
a :class:`RateSpec` for one ``(n, m)`` scaling, and fission outcomes come
from a :class:`FissionLaw`.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

Composition = tuple  # tuple[int, ...]

INT64_MAX = 2**63 - 1


class ConfigurationError(ValueError):
    """Raised for unknown registry names or malformed parameters."""


def as_composition(counts: Iterable[int]) -> Composition:
    comp = tuple(int(c) for c in counts)
    if not comp:
        raise ValueError("composition needs at least one type")
    for c in comp:
        if c < 0:
            raise ValueError(f"negative count in composition {comp}")
        if c > INT64_MAX:
            raise OverflowError(f"composition {comp} exceeds 64-bit counts")
    return comp


def size(comp: Composition) -> int:
    """Number of individuals in a group, ``|i|``."""
    return sum(comp)


def unit(ntypes: int, k: int) -> Composition:
    return tuple(1 if j == k else 0 for j in range(ntypes))


def shift(comp: Composition, k: int, delta: int) -> Composition:
    """``comp + delta * e_k``."""
    out = list(comp)
    out[k] += delta
    if out[k] < 0:
        raise ValueError(f"cannot remove type {k} from {comp}")
    if out[k] > INT64_MAX:
        raise OverflowError(f"composition overflow at {comp}")
    return tuple(out)


def leq(a: Composition, b: Composition) -> bool:
    """Entrywise partial order ``a <= b``."""
    return all(x <= y for x, y in zip(a, b))


def is_zero(comp: Composition) -> bool:
    return not any(comp)


def box_lattice(upper: Composition) -> Iterator[Composition]:
    """All integer points of the box ``[0, upper]`` (including the origin)."""
    return itertools.product(*(range(u + 1) for u in upper))


# ----------------------------------------------------------------------------
# Population


class Population:
    """Sparse map composition -> positive group count with cached totals."""

    __slots__ = ("ntypes", "_groups", "_ngroups", "_individuals")

    def __init__(self, ntypes: int, groups: Mapping[Composition, int] | None = None):
        if ntypes < 1:
            raise ValueError("ntypes must be >= 1")
        self.ntypes = ntypes
        self._groups: dict[Composition, int] = {}
        self._ngroups = 0
        self._individuals = [0] * ntypes
        if groups:
            for comp, count in groups.items():
                self.add(comp, count)

    def add(self, comp: Iterable[int], count: int = 1) -> None:
        comp = as_composition(comp)
        if len(comp) != self.ntypes:
            raise ValueError(f"composition {comp} does not have {self.ntypes} types")
        if count < 0:
            raise ValueError("use remove() for negative counts")
        if count == 0:
            return
        if is_zero(comp):
            raise ValueError("the zero composition cannot be stored")
        new = self._groups.get(comp, 0) + count
        if new > INT64_MAX:
            raise OverflowError("group count overflow")
        self._groups[comp] = new
        self._ngroups += count
        for k, c in enumerate(comp):
            self._individuals[k] += c * count

    def remove(self, comp: Iterable[int], count: int = 1) -> None:
        comp = tuple(int(c) for c in comp)
        have = self._groups.get(comp, 0)
        if count > have:
            raise ValueError(f"cannot remove {count} groups {comp}; only {have} present")
        if count == 0:
            return
        if have == count:
            del self._groups[comp]
        else:
            self._groups[comp] = have - count
        self._ngroups -= count
        for k, c in enumerate(comp):
            self._individuals[k] -= c * count

    def count(self, comp: Composition) -> int:
        return self._groups.get(tuple(comp), 0)

    def items(self):
        return self._groups.items()

    def compositions(self):
        return self._groups.keys()

    def as_dict(self) -> dict[Composition, int]:
        return dict(self._groups)

    def copy(self) -> "Population":
        new = Population(self.ntypes)
        new._groups = dict(self._groups)
        new._ngroups = self._ngroups
        new._individuals = list(self._individuals)
        return new

    @property
    def group_count(self) -> int:
        return self._ngroups

    @property
    def individuals(self) -> tuple[int, ...]:
        return tuple(self._individuals)

    def recompute_totals(self) -> tuple[int, tuple[int, ...]]:
        """Totals from scratch, ignoring the caches."""
        ngroups = sum(self._groups.values())
        ind = [0] * self.ntypes
        for comp, count in self._groups.items():
            for k, c in enumerate(comp):
                ind[k] += c * count
        return ngroups, tuple(ind)

    def __len__(self) -> int:
        return len(self._groups)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Population):
            return NotImplemented
        return self.ntypes == other.ntypes and self._groups == other._groups

    def __repr__(self) -> str:
        body = ", ".join(f"{c}: {x}" for c, x in sorted(self._groups.items()))
        return f"Population(ntypes={self.ntypes}, {{{body}}})"


def totals(pop: Population) -> tuple[int, tuple[int, ...]]:
    """Return ``(X*, sum_i i X(i))``: the group count and per-type individual totals."""
    return pop.group_count, pop.individuals


# ----------------------------------------------------------------------------
# Rate registry
#
# Every form evaluates on integer compositions (``discrete``, rows of a
# (P, ntypes) array, with the group-size scale n) and on the orthant
# (``limit``, rows of a (P, ntypes) float array).


class RateForm:
    name = "abstract"

    def discrete(self, comps: np.ndarray, n: int) -> np.ndarray:
        raise NotImplementedError

    def limit(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def is_constant(self) -> bool:
        return False

    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class ConstantRate(RateForm):
    value: float
    name = "constant"

    def discrete(self, comps, n):
        return np.full(np.shape(comps)[0], float(self.value))

    def limit(self, u):
        return np.full(np.shape(u)[0], float(self.value))

    def is_constant(self):
        return True

    def params(self):
        return {"value": self.value}


@dataclass(frozen=True)
class AffineRate(RateForm):
    """``intercept + slopes . (i / n)``; limit ``intercept + slopes . u``."""

    intercept: float
    slopes: tuple
    name = "affine"

    def discrete(self, comps, n):
        c = np.asarray(comps, dtype=float) / n
        return self.intercept + c @ np.asarray(self.slopes, dtype=float)

    def limit(self, u):
        return self.intercept + np.asarray(u, dtype=float) @ np.asarray(self.slopes, dtype=float)

    def is_constant(self):
        return not any(self.slopes)

    def params(self):
        return {"intercept": self.intercept, "slopes": list(self.slopes)}


def _fractions(x: np.ndarray) -> np.ndarray:
    tot = x.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(tot > 0, x / np.where(tot > 0, tot, 1.0), 0.0)
    return frac


@dataclass(frozen=True)
class FrequencyRate(RateForm):
    """``intercept + slopes . (i / |i|)`` with ``0/0 = 0``; scale-free."""

    intercept: float
    slopes: tuple
    name = "frequency"

    def discrete(self, comps, n):
        return self.intercept + _fractions(np.asarray(comps, dtype=float)) @ np.asarray(self.slopes, float)

    def limit(self, u):
        return self.intercept + _fractions(np.asarray(u, dtype=float)) @ np.asarray(self.slopes, float)

    def is_constant(self):
        return not any(self.slopes)

    def params(self):
        return {"intercept": self.intercept, "slopes": list(self.slopes)}


@dataclass(frozen=True)
class LogisticRate(RateForm):
    """``value / (1 + exp(steepness (|i|/n - midpoint)))``."""

    value: float
    steepness: float
    midpoint: float
    name = "logistic"

    def _eval(self, s):
        return self.value / (1.0 + np.exp(self.steepness * (s - self.midpoint)))

    def discrete(self, comps, n):
        return self._eval(np.asarray(comps, dtype=float).sum(axis=1) / n)

    def limit(self, u):
        return self._eval(np.asarray(u, dtype=float).sum(axis=1))

    def is_constant(self):
        return self.steepness == 0

    def params(self):
        return {"value": self.value, "steepness": self.steepness, "midpoint": self.midpoint}


@dataclass(frozen=True)
class Remark2Fission(RateForm):
    """``scale * prod(i_k + 1) exp(-|i|/n) / n**l``; limit ``scale * prod(u_k) exp(-|u|)``."""

    scale: float = 1.0
    name = "remark2"

    def discrete(self, comps, n):
        c = np.asarray(comps, dtype=float)
        ell = c.shape[1]
        return self.scale * np.prod(c + 1.0, axis=1) * np.exp(-c.sum(axis=1) / n) / float(n) ** ell

    def limit(self, u):
        u = np.asarray(u, dtype=float)
        return self.scale * np.prod(u, axis=1) * np.exp(-u.sum(axis=1))

    def params(self):
        return {"scale": self.scale}


RATE_FORMS: dict[str, Callable[..., RateForm]] = {
    "constant": lambda value=0.0: ConstantRate(float(value)),
    "affine": lambda intercept=0.0, slopes=(): AffineRate(float(intercept), tuple(float(s) for s in slopes)),
    "frequency": lambda intercept=0.0, slopes=(): FrequencyRate(float(intercept), tuple(float(s) for s in slopes)),
    "logistic": lambda value=1.0, steepness=1.0, midpoint=0.0: LogisticRate(float(value), float(steepness), float(midpoint)),
    "remark2": lambda scale=1.0: Remark2Fission(float(scale)),
}


def make_rate(spec: Mapping | float | int | RateForm, ntypes: int = 1) -> RateForm:
    """Build a rate form from ``{"form": name, **params}`` or a bare number."""
    if isinstance(spec, RateForm):
        return spec
    if isinstance(spec, (int, float)):
        return ConstantRate(float(spec))
    spec = dict(spec)
    name = spec.pop("form", "constant")
    if name not in RATE_FORMS:
        raise ConfigurationError(f"unknown rate form {name!r}; known: {sorted(RATE_FORMS)}")
    try:
        form = RATE_FORMS[name](**spec)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for rate form {name!r}: {exc}") from None
    slopes = getattr(form, "slopes", None)
    if slopes is not None and len(slopes) not in (0, ntypes):
        raise ConfigurationError(f"rate form {name!r} needs {ntypes} slopes, got {len(slopes)}")
    if slopes is not None and len(slopes) == 0:
        form = type(form)(form.intercept, (0.0,) * ntypes)
    return form


EXTINCTION_SCALINGS = ("lln", "lp")


@dataclass(frozen=True)
class RateSpec:
    """Rate functions of one ``(n, m)`` model.

    ``birth``, ``death`` and ``migration`` hold one form per type (per-capita
    rates).  ``fission`` is per group.  ``extinction`` is given in scaled units:
    the per-group-per-group rate is ``extinction / m`` (``scaling="lln"``) or
    ``extinction / (m n**l)`` (``scaling="lp"``).
    """

    ntypes: int
    birth: tuple
    death: tuple
    migration: tuple
    fission: RateForm
    extinction: RateForm
    n: int = 1
    m: int = 1
    extinction_scaling: str = "lln"

    def __post_init__(self):
        for name in ("birth", "death", "migration"):
            if len(getattr(self, name)) != self.ntypes:
                raise ConfigurationError(f"{name} needs {self.ntypes} forms")
        if self.extinction_scaling not in EXTINCTION_SCALINGS:
            raise ConfigurationError(f"extinction scaling must be one of {EXTINCTION_SCALINGS}")
        if self.n < 1 or self.m < 1:
            raise ConfigurationError("n and m must be >= 1")

    @classmethod
    def constant(cls, ntypes=1, birth=0.0, death=0.0, migration=0.0, fission=0.0,
                 extinction=0.0, n=1, m=1, extinction_scaling="lln") -> "RateSpec":
        def per_type(v):
            v = np.broadcast_to(np.asarray(v, dtype=float), (ntypes,))
            return tuple(ConstantRate(float(x)) for x in v)
        return cls(ntypes, per_type(birth), per_type(death), per_type(migration),
                   make_rate(fission), make_rate(extinction), n, m, extinction_scaling)

    def rescaled(self, n: int, m: int) -> "RateSpec":
        return RateSpec(self.ntypes, self.birth, self.death, self.migration, self.fission,
                        self.extinction, n, m, self.extinction_scaling)

    @property
    def extinction_divisor(self) -> float:
        if self.extinction_scaling == "lln":
            return float(self.m)
        return float(self.m) * float(self.n) ** self.ntypes

    def evaluate(self, comps: np.ndarray) -> dict[str, np.ndarray]:
        """Vectorised rates at the rows of ``comps``.

        Per-capita arrays are (P, ntypes) and zeroed where ``i_k = 0``;
        ``extinction`` is the raw per-pair rate ``epsilon(i)``.
        """
        comps = np.atleast_2d(np.asarray(comps, dtype=np.int64))
        present = comps > 0
        out = {}
        for name in ("birth", "death", "migration"):
            cols = [f.discrete(comps, self.n) for f in getattr(self, name)]
            out[name] = np.where(present, np.column_stack(cols), 0.0)
        out["fission"] = self.fission.discrete(comps, self.n)
        out["extinction"] = self.extinction.discrete(comps, self.n) / self.extinction_divisor
        return out

    def group_rates(self, comp: Composition):
        """Per-capita ``(beta, delta, mu)`` tuples, ``phi`` and ``epsilon`` for one composition."""
        r = self.evaluate(np.asarray([comp]))
        return (tuple(r["birth"][0]), tuple(r["death"][0]), tuple(r["migration"][0]),
                float(r["fission"][0]), float(r["extinction"][0]))

    def is_zero(self) -> bool:
        forms = list(self.birth) + list(self.death) + list(self.migration) + [self.fission, self.extinction]
        return all(f.is_constant() and f.limit(np.zeros((1, self.ntypes)))[0] == 0 for f in forms)


# ----------------------------------------------------------------------------
# Fission laws


class FissionLaw:
    """Random partition of a composition into nonzero pieces.

    ``sample`` only needs ``rng.random()`` so that both numpy generators and
    the simulator's buffered uniform stream can drive it.
    """

    name = "abstract"
    max_pieces = 1
    analytic = True

    def sample(self, comp: Composition, rng) -> list[Composition]:
        raise NotImplementedError

    def eta(self, comp: Composition, child: Composition) -> float:
        """Expected number of ``child`` pieces (analytic laws only)."""
        raise NotImplementedError

    def second_moment(self, comp: Composition, child: Composition) -> float:
        """``E theta_i(child)**2``."""
        return self.cross_moment(comp, child, child)

    def cross_moment(self, comp: Composition, a: Composition, b: Composition) -> float:
        """``E theta_i(a) theta_i(b)``."""
        raise NotImplementedError

    def piece_count_moments(self, comp: Composition) -> tuple[float, float]:
        """Mean and second moment of the number of pieces."""
        raise NotImplementedError

    def params(self) -> dict:
        return {}


class UniformBoxLaw(FissionLaw):
    """Split ``i`` into ``{d, i - d}`` with ``d`` uniform on the box ``[0, i]``.

    Zero pieces are dropped, so ``d = 0`` and ``d = i`` both give the
    nonproper outcome ``{i}``.  ``eta(i, j) = 2 / prod(i_k + 1)`` for
    ``0 < j <= i``.
    """

    name = "uniform_box"
    max_pieces = 2

    def sample(self, comp, rng):
        d = tuple(int(rng.random() * (c + 1)) for c in comp)
        rest = tuple(c - x for c, x in zip(comp, d))
        return [p for p in (d, rest) if any(p)]

    @staticmethod
    def _outcomes(comp) -> int:
        return math.prod(c + 1 for c in comp)

    def eta(self, comp, child):
        if is_zero(child) or not leq(child, comp):
            return 0.0
        return 2.0 / self._outcomes(comp)

    def cross_moment(self, comp, a, b):
        # theta(j) = 1{d = j} + 1{d = i - j} for nonzero j <= i
        if is_zero(a) or is_zero(b) or not leq(a, comp) or not leq(b, comp):
            return 0.0
        ca = (a, tuple(c - x for c, x in zip(comp, a)))
        cb = (b, tuple(c - x for c, x in zip(comp, b)))
        hits = sum(1 for x in ca for y in cb if x == y)
        return hits / self._outcomes(comp)

    def piece_count_moments(self, comp):
        p = self._outcomes(comp)
        nonproper = 2.0 / p if p > 1 else 1.0
        return 2.0 - nonproper, 4.0 - 3.0 * nonproper


class NonproperLaw(FissionLaw):
    """Always returns the parent unchanged."""

    name = "nonproper"
    max_pieces = 1

    def sample(self, comp, rng):
        return [tuple(comp)]

    def eta(self, comp, child):
        return 1.0 if tuple(child) == tuple(comp) else 0.0

    def cross_moment(self, comp, a, b):
        return 1.0 if tuple(a) == tuple(comp) and tuple(b) == tuple(comp) else 0.0

    def piece_count_moments(self, comp):
        return 1.0, 1.0


class MultinomialLaw(FissionLaw):
    """Each individual joins one of ``pieces`` bins uniformly; empty bins are dropped.

    Treated as sampled-only: ``eta`` is estimated by Monte Carlo (see
    :func:`estimate_eta`).
    """

    name = "multinomial"
    analytic = False

    def __init__(self, pieces: int = 2):
        if pieces < 1:
            raise ConfigurationError("multinomial law needs pieces >= 1")
        self.max_pieces = int(pieces)

    def sample(self, comp, rng):
        b = self.max_pieces
        bins = [[0] * len(comp) for _ in range(b)]
        for k, c in enumerate(comp):
            for _ in range(c):
                bins[int(rng.random() * b)][k] += 1
        return [tuple(x) for x in bins if any(x)]

    def params(self):
        return {"pieces": self.max_pieces}


FISSION_LAWS: dict[str, Callable[..., FissionLaw]] = {
    "uniform_box": UniformBoxLaw,
    "remark2": UniformBoxLaw,
    "nonproper": NonproperLaw,
    "multinomial": MultinomialLaw,
}


def make_law(spec: Mapping | str | FissionLaw) -> FissionLaw:
    if isinstance(spec, FissionLaw):
        return spec
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in FISSION_LAWS:
        raise ConfigurationError(f"unknown fission law {name!r}; known: {sorted(FISSION_LAWS)}")
    try:
        return FISSION_LAWS[name](**spec)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for fission law {name!r}: {exc}") from None


@dataclass
class EtaEstimate:
    comp: Composition
    samples: int
    counts: Counter
    squares: Counter

    def mean(self, child) -> float:
        return self.counts.get(tuple(child), 0) / self.samples

    def stderr(self, child) -> float:
        mean = self.mean(child)
        var = self.squares.get(tuple(child), 0) / self.samples - mean * mean
        return math.sqrt(max(var, 0.0) / self.samples)


def estimate_eta(law: FissionLaw, comp: Composition, samples: int, rng) -> EtaEstimate:
    """Monte-Carlo piece counts ``theta_i(j)`` averaged over ``samples`` partitions."""
    counts: Counter = Counter()
    squares: Counter = Counter()
    comp = tuple(comp)
    for _ in range(samples):
        per = Counter(law.sample(comp, rng))
        for piece, c in per.items():
            counts[piece] += c
            squares[piece] += c * c
    return EtaEstimate(comp, samples, counts, squares)


_ETA_CACHE: dict = {}


def eta(law: FissionLaw, comp: Composition, child: Composition, *, samples: int = 100_000,
        seed: int = 0) -> float:
    """Expected number of ``child`` groups produced when ``comp`` fissions.

    Analytic laws answer exactly; sampled-only laws are estimated once per
    ``(law, comp, samples, seed)`` and cached.
    """
    comp, child = tuple(comp), tuple(child)
    if is_zero(comp):
        raise ValueError("eta undefined for the zero composition")
    if is_zero(child) or not leq(child, comp):
        return 0.0
    if law.analytic:
        return law.eta(comp, child)
    key = (law.name, tuple(sorted(law.params().items())), comp, samples, seed)
    est = _ETA_CACHE.get(key)
    if est is None:
        est = estimate_eta(law, comp, samples, np.random.default_rng([seed, *comp]))
        _ETA_CACHE[key] = est
    return est.mean(child)


def sample_partition(law: FissionLaw, comp: Composition, rng) -> list[Composition]:
    comp = tuple(comp)
    if is_zero(comp):
        raise ValueError("cannot fission the zero composition")
    return law.sample(comp, rng)


# ----------------------------------------------------------------------------
# Bound validation


@dataclass(frozen=True)
class DeclaredBounds:
    """Upper bounds on the per-capita rate ``beta^k + delta^k + mu^k`` (max over
    types present), on ``phi`` and on the scaled extinction rate (``m eps`` or
    ``m n^l eps``)."""

    individual: float | None = None
    fission: float | None = None
    extinction: float | None = None


@dataclass(frozen=True)
class BoundViolation:
    function: str
    point: Composition
    value: float
    bound: float


@dataclass
class BoundsReport:
    box: Composition
    sup: dict = field(default_factory=dict)  # function -> (value, point)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {
            "box": list(self.box),
            "ok": self.ok,
            "sup": {k: {"value": v, "point": list(p)} for k, (v, p) in sorted(self.sup.items())},
            "violations": [
                {"function": v.function, "point": list(v.point), "value": v.value, "bound": v.bound}
                for v in self.violations
            ],
        }


def rate_bounds_check(rates: RateSpec, law: FissionLaw, box, bounds: DeclaredBounds | None = None) -> BoundsReport:
    """Scan every nonzero lattice point of ``[0, box]`` and compare against ``bounds``.

    The report always carries the lattice supremum of each function; a
    violation names the function and the point where it is largest.
    Negative rates are violations regardless of the declared bounds.
    """
    bounds = bounds or DeclaredBounds()
    box = tuple(int(b) for b in np.broadcast_to(np.asarray(box), (rates.ntypes,)))
    if any(b < 0 for b in box):
        raise ValueError("box must be nonnegative")
    grids = np.meshgrid(*(np.arange(b + 1) for b in box), indexing="ij")
    comps = np.column_stack([g.ravel() for g in grids])[1:]  # drop the origin
    report = BoundsReport(box=box)
    if comps.size == 0:
        return report
    r = rates.evaluate(comps)
    per_capita = r["birth"] + r["death"] + r["migration"]
    values = {
        "individual": per_capita.max(axis=1),
        "fission": r["fission"],
        "extinction": r["extinction"] * rates.extinction_divisor,
    }
    for name in ("birth", "death", "migration"):
        low = r[name].min(axis=1)
        j = int(np.argmin(low))
        if low[j] < 0:
            report.violations.append(BoundViolation(name, tuple(int(x) for x in comps[j]), float(low[j]), 0.0))
    for name, vals in values.items():
        j = int(np.argmax(vals))
        point = tuple(int(x) for x in comps[j])
        report.sup[name] = (float(vals[j]), point)
        lo = int(np.argmin(vals))
        if vals[lo] < 0:
            report.violations.append(BoundViolation(name, tuple(int(x) for x in comps[lo]), float(vals[lo]), 0.0))
        declared = getattr(bounds, name)
        if declared is not None and vals[j] > declared:
            report.violations.append(BoundViolation(name, point, float(vals[j]), float(declared)))
    if law.max_pieces < 1:
        report.violations.append(BoundViolation("fission_law", box, float(law.max_pieces), 1.0))
    return report
