"""Exact event simulation of the group-structured population.

Groups with equal composition are exchangeable, so the simulator keeps one
*slot* per composition and runs Gillespie's direct method over aggregated
channels.  Three Fenwick trees hold the slot weights: ``X(i) a(i)`` for the
individual-level and fission channels, ``X(i) eps(i)`` for extinction (the
total is multiplied by ``X*``), and ``X(i)`` for sampling migration
destinations.

Compensators are integrated lazily.  Between two changes of ``X(i)`` every
integrand is ``X(i)`` times a global quantity (``X*``, ``1/X*``,
``Q_k/X*``), so each slot stores the global cumulative integrals at its last
change and settles up when it next changes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import Composition, FissionLaw, Population, RateSpec

BIRTH, DEATH, MIGRATION, FISSION, EXTINCTION = "birth", "death", "migration", "fission", "extinction"

FAMILIES = ("B", "D", "M", "Mbar", "Fbar", "F", "E")

REBUILD_EVERY = 1 << 16


class ContractViolation(RuntimeError):
    pass


class FissionConservationError(RuntimeError):
    pass


class UniformStream:
    """Buffered uniforms on [0, 1) drawn in blocks from a numpy generator."""

    __slots__ = ("_gen", "_buf", "_pos", "_block")

    def __init__(self, gen: np.random.Generator, block: int = 8192):
        self._gen = gen
        self._block = block
        self._buf = gen.random(block).tolist()
        self._pos = 0

    def random(self) -> float:
        if self._pos == self._block:
            self._buf = self._gen.random(self._block).tolist()
            self._pos = 0
        x = self._buf[self._pos]
        self._pos += 1
        return x


class Fenwick:
    """Binary indexed tree over nonnegative float weights."""

    __slots__ = ("size", "tree", "weights")

    def __init__(self, capacity: int = 16):
        self.size = 1
        while self.size < capacity:
            self.size <<= 1
        self.tree = [0.0] * (self.size + 1)
        self.weights = [0.0] * self.size

    def grow(self, capacity: int) -> None:
        weights = self.weights
        size = self.size
        while size < capacity:
            size <<= 1
        self.size = size
        self.weights = weights + [0.0] * (size - len(weights))
        self.rebuild()

    def rebuild(self) -> None:
        tree = [0.0] + list(self.weights)
        n = self.size
        for i in range(1, n + 1):
            j = i + (i & -i)
            if j <= n:
                tree[j] += tree[i]
        self.tree = tree

    def add(self, idx: int, delta: float) -> None:
        self.weights[idx] += delta
        tree = self.tree
        n = self.size
        i = idx + 1
        while i <= n:
            tree[i] += delta
            i += i & -i

    @property
    def total(self) -> float:
        return self.tree[self.size]

    def find(self, value: float) -> tuple[int, float]:
        """Slot whose cumulative interval contains ``value`` and the offset into it."""
        tree = self.tree
        pos = 0
        step = self.size
        while step:
            nxt = pos + step
            if nxt <= self.size and tree[nxt] <= value:
                value -= tree[nxt]
                pos = nxt
            step >>= 1
        if pos >= self.size:  # rounding past the end
            pos = self.size - 1
            while pos > 0 and self.weights[pos] <= 0:
                pos -= 1
            value = self.weights[pos]
        weights = self.weights
        if weights[pos] <= 0:
            # value landed exactly on a boundary next to empty slots
            nxt = pos
            while nxt < self.size and weights[nxt] <= 0:
                nxt += 1
            if nxt < self.size:
                return nxt, 0.0
            while pos > 0 and weights[pos] <= 0:
                pos -= 1
            return pos, weights[pos]
        return pos, min(value, weights[pos])


@dataclass
class EventRecord:
    time: float
    kind: str
    source: Composition
    k: int | None = None
    destination: Composition | None = None
    offspring: tuple = ()
    noop: bool = False


@dataclass
class Snapshot:
    t: float
    population: Population
    counters: dict | None = None       # family -> {key: count}
    integrals: dict | None = None      # composition -> (S0, S1, S2, (S3_k...))
    pair_integrals: dict | None = None  # (i, j) -> integral of X(i) X(j) / X*


@dataclass
class Trajectory:
    ntypes: int
    rates: RateSpec
    law: FissionLaw
    initial: Population
    snapshots: list
    final: Snapshot
    events: list | None
    event_count: int
    fission_events: int
    seed: object = None
    extinct_at: float | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])


class Simulator:
    """Direct-method simulator; one instance owns one population."""

    def __init__(self, rates: RateSpec, law: FissionLaw, population: Population, rng,
                 *, log_events: bool = False, track_pairs: Iterable = (), check_fission: bool = True):
        self.rates = rates
        self.law = law
        self.ntypes = rates.ntypes
        if population.ntypes != self.ntypes:
            raise ValueError("population and rates disagree on the number of types")
        if isinstance(rng, np.random.Generator):
            rng = UniformStream(rng)
        self.rng = rng
        self.log_events = log_events
        self.events: list | None = [] if log_events else None
        self.check_fission = check_fission
        self.t = 0.0
        self.event_count = 0
        self.fission_events = 0
        self.initial = population.copy()

        ell = self.ntypes
        self.index: dict[Composition, int] = {}
        self.comps: list[Composition] = []
        self.X: list[int] = []
        self.a: list[float] = []          # per-group rate of individual + fission channels
        self.eps: list[float] = []
        self.q: list[list[float]] = []    # per-group migration propensity per type
        self.chan_cum: list[list[float]] = []
        self.chan_kind: list[list[tuple]] = []
        self.rates_cache: list[tuple] = []
        # lazy integral bookkeeping per slot
        self.last_t: list[float] = []
        self.last_g: list[list[float]] = []
        self.S: list[list[float]] = []    # [S0, S1, S2, S3_0, ..., S3_{l-1}]

        self.tree_a = Fenwick(64)
        self.tree_e = Fenwick(64)
        self.tree_g = Fenwick(64)
        self.xstar = 0
        self.Q = [0.0] * ell
        self.G = [0.0, 0.0] + [0.0] * ell  # int X*, int 1/X*, int Q_k/X*

        self.counters = {f: {} for f in FAMILIES}

        self.pairs: dict[tuple, list] = {}  # (slot_i, slot_j) -> [integral, last G2]
        self.slot_pairs: dict[int, list] = {}
        for comp in population.compositions():
            self._slot(comp)
        for i, j in track_pairs:
            si, sj = self._slot(tuple(i)), self._slot(tuple(j))
            key = (si, sj)
            if key not in self.pairs:
                self.pairs[key] = [0.0, 0.0]
                self.slot_pairs.setdefault(si, []).append(key)
                if sj != si:
                    self.slot_pairs.setdefault(sj, []).append(key)
        for comp, count in population.items():
            self._change(comp, count)

    # -- slot management -------------------------------------------------

    def _slot(self, comp: Composition) -> int:
        slot = self.index.get(comp)
        if slot is not None:
            return slot
        ell = self.ntypes
        beta, delta, mu, phi, eps = self.rates.group_rates(comp)
        cum, kinds = [], []
        acc = 0.0
        for kind, per_capita in ((BIRTH, beta), (DEATH, delta), (MIGRATION, mu)):
            for k in range(ell):
                r = comp[k] * per_capita[k]
                if r > 0:
                    acc += r
                    cum.append(acc)
                    kinds.append((kind, k))
        if phi > 0:
            acc += phi
            cum.append(acc)
            kinds.append((FISSION, None))
        slot = len(self.comps)
        self.index[comp] = slot
        self.comps.append(comp)
        self.X.append(0)
        self.a.append(acc)
        self.eps.append(eps)
        self.q.append([comp[k] * mu[k] for k in range(ell)])
        self.chan_cum.append(cum)
        self.chan_kind.append(kinds)
        self.rates_cache.append((beta, delta, mu, phi, eps))
        self.last_t.append(self.t)
        self.last_g.append(list(self.G))
        self.S.append([0.0] * (3 + ell))
        if slot >= self.tree_a.size:
            cap = 2 * self.tree_a.size
            self.tree_a.grow(cap)
            self.tree_e.grow(cap)
            self.tree_g.grow(cap)
        return slot

    def _flush(self, slot: int) -> None:
        x = self.X[slot]
        G = self.G
        if x:
            lg = self.last_g[slot]
            S = self.S[slot]
            S[0] += x * (self.t - self.last_t[slot])
            S[1] += x * (G[0] - lg[0])
            S[2] += x * x * (G[1] - lg[1])
            for k in range(self.ntypes):
                S[3 + k] += x * (G[2 + k] - lg[2 + k])
        self.last_t[slot] = self.t
        self.last_g[slot] = list(G)
        pairs = self.slot_pairs.get(slot)
        if pairs:
            X = self.X
            for key in pairs:
                rec = self.pairs[key]
                rec[0] += X[key[0]] * X[key[1]] * (G[1] - rec[1])
                rec[1] = G[1]

    def _change(self, comp: Composition, delta: int) -> None:
        slot = self.index.get(comp)
        if slot is None:
            slot = self._slot(comp)
        self._flush(slot)
        new = self.X[slot] + delta
        if new < 0:
            raise ContractViolation(f"negative group count for {comp}")
        self.X[slot] = new
        a = self.a[slot]
        if a:
            self.tree_a.add(slot, delta * a)
        e = self.eps[slot]
        if e:
            self.tree_e.add(slot, delta * e)
        self.tree_g.add(slot, float(delta))
        self.xstar += delta
        q = self.q[slot]
        Q = self.Q
        for k in range(self.ntypes):
            if q[k]:
                Q[k] += delta * q[k]

    def _rebuild(self) -> None:
        for tree, w in ((self.tree_a, self.a), (self.tree_e, self.eps)):
            for s in range(len(self.comps)):
                tree.weights[s] = self.X[s] * w[s]
            tree.rebuild()
        for s in range(len(self.comps)):
            self.tree_g.weights[s] = float(self.X[s])
        self.tree_g.rebuild()
        self.Q = [sum(self.X[s] * self.q[s][k] for s in range(len(self.comps))) for k in range(self.ntypes)]

    def _advance(self, t_new: float) -> None:
        dt = t_new - self.t
        xs = self.xstar
        if xs > 0 and dt > 0:
            G = self.G
            G[0] += xs * dt
            G[1] += dt / xs
            for k in range(self.ntypes):
                G[2 + k] += self.Q[k] / xs * dt
        self.t = t_new

    # -- dynamics --------------------------------------------------------

    def total_rate(self) -> float:
        return self.tree_a.total + self.xstar * self.tree_e.total

    def population(self) -> Population:
        pop = Population(self.ntypes)
        for comp, slot in self.index.items():
            x = self.X[slot]
            if x:
                pop.add(comp, x)
        return pop

    def next_time(self) -> float:
        """Draw the next event epoch (``inf`` if no event can occur)."""
        if self.xstar == 0:
            return math.inf
        total = self.total_rate()
        if total <= 0:
            return math.inf
        return self.t - math.log(1.0 - self.rng.random()) / total

    def fire(self, t_event: float) -> EventRecord | None:
        """Advance to ``t_event`` and apply one event chosen by propensity."""
        if self.xstar <= 0:
            raise ContractViolation("step called with no groups left")
        self._advance(t_event)
        self.event_count += 1
        if self.event_count % REBUILD_EVERY == 0:
            self._rebuild()
        ta = self.tree_a.total
        total = ta + self.xstar * self.tree_e.total
        r = self.rng.random() * total
        if r < ta:
            slot, off = self.tree_a.find(r)
            x = self.X[slot]
            off = off / x if x else 0.0
            cum = self.chan_cum[slot]
            c = 0
            last = len(cum) - 1
            while c < last and cum[c] <= off:
                c += 1
            kind, k = self.chan_kind[slot][c]
        else:
            slot, _ = self.tree_e.find((r - ta) / self.xstar)
            kind, k = EXTINCTION, None
        comp = self.comps[slot]
        return self._apply(kind, comp, k)

    def _apply(self, kind: str, comp: Composition, k) -> EventRecord | None:
        cnt = self.counters
        rec = None
        if kind == BIRTH:
            key = (comp, k)
            cnt["B"][key] = cnt["B"].get(key, 0) + 1
            new = _bump(comp, k, 1)
            self._change(comp, -1)
            self._change(new, 1)
            if self.log_events:
                rec = EventRecord(self.t, kind, comp, k, offspring=(new,))
        elif kind == DEATH:
            key = (comp, k)
            cnt["D"][key] = cnt["D"].get(key, 0) + 1
            new = _bump(comp, k, -1)
            self._change(comp, -1)
            if any(new):
                self._change(new, 1)
            if self.log_events:
                rec = EventRecord(self.t, kind, comp, k, offspring=(new,) if any(new) else ())
        elif kind == MIGRATION:
            dslot, _ = self.tree_g.find(self.rng.random() * self.xstar)
            dest = self.comps[dslot]
            if dest == comp:
                if self.log_events:
                    rec = EventRecord(self.t, kind, comp, k, destination=dest, noop=True)
            else:
                key = (comp, k)
                cnt["Mbar"][key] = cnt["Mbar"].get(key, 0) + 1
                dkey = (dest, k)
                cnt["M"][dkey] = cnt["M"].get(dkey, 0) + 1
                src_new = _bump(comp, k, -1)
                dest_new = _bump(dest, k, 1)
                self._change(comp, -1)
                if any(src_new):
                    self._change(src_new, 1)
                self._change(dest, -1)
                self._change(dest_new, 1)
                if self.log_events:
                    rec = EventRecord(self.t, kind, comp, k, destination=dest,
                                      offspring=(src_new, dest_new))
        elif kind == FISSION:
            pieces = self.law.sample(comp, self.rng)
            if self.check_fission:
                _check_partition(comp, pieces, self.law.max_pieces)
            self.fission_events += 1
            cnt["Fbar"][comp] = cnt["Fbar"].get(comp, 0) + 1
            F = cnt["F"]
            self._change(comp, -1)
            for p in pieces:
                F[(comp, p)] = F.get((comp, p), 0) + 1
                self._change(p, 1)
            if self.log_events:
                rec = EventRecord(self.t, kind, comp, offspring=tuple(pieces))
        else:
            cnt["E"][comp] = cnt["E"].get(comp, 0) + 1
            self._change(comp, -1)
            if self.log_events:
                rec = EventRecord(self.t, kind, comp)
        if rec is not None:
            self.events.append(rec)
        return rec

    def step(self) -> EventRecord:
        """Fire exactly one event and return its record."""
        if self.xstar <= 0:
            raise ContractViolation("step called at X* = 0")
        t_next = self.next_time()
        if math.isinf(t_next):
            raise ContractViolation("no event can occur: all propensities vanish")
        log = self.log_events
        self.log_events = True
        if self.events is None:
            self.events = []
        try:
            rec = self.fire(t_next)
        finally:
            self.log_events = log
        if not log:
            self.events.pop()
        return rec

    # -- snapshots -------------------------------------------------------

    def settle(self) -> None:
        """Bring all lazy integrals up to the current time."""
        for slot in range(len(self.comps)):
            self._flush(slot)

    def snapshot(self, with_counters: bool) -> Snapshot:
        snap = Snapshot(self.t, self.population())
        if with_counters:
            self.settle()
            snap.counters = {f: dict(v) for f, v in self.counters.items()}
            snap.integrals = {
                comp: (S[0], S[1], S[2], tuple(S[3:]))
                for comp, S in zip(self.comps, self.S)
            }
            snap.pair_integrals = {
                (self.comps[i], self.comps[j]): rec[0] for (i, j), rec in self.pairs.items()
            }
        return snap

    def run(self, horizon: float, sample_times: Sequence[float] = (), record_counters: bool = True):
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        times = sorted(float(t) for t in sample_times if 0 <= t <= horizon)
        snaps = []
        ti = 0
        while ti < len(times) and times[ti] <= self.t:
            snaps.append(self.snapshot(record_counters))
            ti += 1
        extinct_at = None
        while True:
            t_next = self.next_time()
            while ti < len(times) and times[ti] < min(t_next, horizon + 1.0):
                if times[ti] > horizon:
                    break
                if times[ti] >= t_next:
                    break
                self._advance(times[ti])
                snaps.append(self.snapshot(record_counters))
                ti += 1
            if t_next > horizon:
                if self.xstar == 0 and extinct_at is None:
                    extinct_at = self.t
                break
            self.fire(t_next)
            if self.xstar == 0:
                extinct_at = self.t
        self._advance(horizon)
        while ti < len(times):
            snaps.append(self.snapshot(record_counters))
            ti += 1
        final = self.snapshot(True)
        return Trajectory(self.ntypes, self.rates, self.law, self.initial, snaps, final,
                          self.events, self.event_count, self.fission_events, extinct_at=extinct_at)


def _bump(comp: Composition, k: int, delta: int) -> Composition:
    out = list(comp)
    out[k] += delta
    return tuple(out)


def _check_partition(comp, pieces, bound) -> None:
    if not pieces or len(pieces) > bound:
        raise FissionConservationError(f"{len(pieces)} pieces from {comp} (bound {bound})")
    total = [0] * len(comp)
    for p in pieces:
        if not any(p):
            raise FissionConservationError(f"zero piece in partition of {comp}")
        for k, c in enumerate(p):
            total[k] += c
    if tuple(total) != tuple(comp):
        raise FissionConservationError(f"pieces {pieces} do not sum to {comp}")


@dataclass
class Scenario:
    rates: RateSpec
    law: FissionLaw
    initial: Population
    sample_times: tuple = ()
    log_events: bool = False
    record_counters: bool = True
    track_pairs: tuple = ()


def simulate(scenario: Scenario, horizon: float, seed) -> Trajectory:
    """Run one replica; identical ``seed`` gives an identical event sequence."""
    rng = np.random.default_rng(seed)
    sim = Simulator(scenario.rates, scenario.law, scenario.initial, rng,
                    log_events=scenario.log_events, track_pairs=scenario.track_pairs)
    traj = sim.run(horizon, scenario.sample_times, scenario.record_counters)
    traj.seed = seed
    return traj


def aggregate_rates(pop: Population, rates: RateSpec) -> tuple[list, float]:
    """Channel table ``[(kind, composition, k, propensity), ...]`` and its total.

    Propensities are exact: ``X(i) i_k beta^k(i)``, ``X(i) i_k delta^k(i)``,
    ``X(i) i_k mu^k(i)``, ``X(i) phi(i)`` and ``X(i) X* eps(i)``.
    """
    if pop.group_count == 0:
        raise ContractViolation("aggregate_rates needs a nonempty population")
    xstar = pop.group_count
    table = []
    for comp, x in sorted(pop.items()):
        beta, delta, mu, phi, eps = rates.group_rates(comp)
        for kind, per_capita in ((BIRTH, beta), (DEATH, delta), (MIGRATION, mu)):
            for k in range(pop.ntypes):
                p = x * comp[k] * per_capita[k]
                if p > 0:
                    table.append((kind, comp, k, p))
        if phi > 0:
            table.append((FISSION, comp, None, x * phi))
        if eps > 0:
            table.append((EXTINCTION, comp, None, x * xstar * eps))
    return table, math.fsum(p for *_, p in table)


# ----------------------------------------------------------------------------
# Balance reconstruction


def reconstruct_population(initial: Population, counters: dict) -> Population:
    """Rebuild ``X_T`` from ``X_0`` and the cumulative counters alone.

    Each counter key contributes its balance terms: an ``i``-group loses
    on ``B^k(i)``, ``D^k(i)``, ``M^k(i)``, ``Mbar^k(i)``, ``Fbar(i)``,
    ``E(i)`` and gains on ``B^k(i - e_k)``, ``D^k(i + e_k)``,
    ``M^k(i - e_k)``, ``Mbar^k(i + e_k)`` and ``F(i', i)``.
    """
    ell = initial.ntypes
    net: dict = {}

    def add(comp, v):
        if any(comp):
            net[comp] = net.get(comp, 0) + v

    for comp, x in initial.items():
        add(comp, x)
    for (comp, k), v in counters["B"].items():
        add(comp, -v)
        add(_bump(comp, k, 1), v)
    for (comp, k), v in counters["D"].items():
        add(comp, -v)
        add(_bump(comp, k, -1), v)
    for (comp, k), v in counters["M"].items():
        add(comp, -v)
        add(_bump(comp, k, 1), v)
    for (comp, k), v in counters["Mbar"].items():
        add(comp, -v)
        add(_bump(comp, k, -1), v)
    for comp, v in counters["Fbar"].items():
        add(comp, -v)
    for (parent, child), v in counters["F"].items():
        add(child, v)
    for comp, v in counters["E"].items():
        add(comp, -v)
    pop = Population(ell)
    for comp, v in net.items():
        if v < 0:
            raise ContractViolation(f"counters imply negative count for {comp}")
        if v:
            pop.add(comp, v)
    return pop


# ----------------------------------------------------------------------------
# Martingale diagnostics


@dataclass(frozen=True)
class Selector:
    """A counter, or a sum of counters, of one family.

    ``comp=None`` sums over every composition (parent composition for
    ``F``); ``child=None`` on ``F`` sums over all offspring compositions.
    """

    family: str
    comp: Composition | None = None
    k: int = 0
    child: Composition | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown counter family {self.family!r}")


def _counter_value(counters: dict, sel: Selector) -> float:
    fam = counters[sel.family]
    if sel.family in ("B", "D", "M", "Mbar"):
        if sel.comp is None:
            return float(sum(v for (c, k), v in fam.items() if k == sel.k))
        return float(fam.get((tuple(sel.comp), sel.k), 0))
    if sel.family in ("Fbar", "E"):
        if sel.comp is None:
            return float(sum(fam.values()))
        return float(fam.get(tuple(sel.comp), 0))
    total = 0
    for (parent, child), v in fam.items():
        if sel.comp is not None and parent != tuple(sel.comp):
            continue
        if sel.child is not None and child != tuple(sel.child):
            continue
        total += v
    return float(total)


def _comps_for(snap: Snapshot, sel: Selector):
    if sel.comp is None:
        return list(snap.integrals)
    return [tuple(sel.comp)] if tuple(sel.comp) in snap.integrals else []


def _compensator_value(traj: Trajectory, snap: Snapshot, sel: Selector, kind: str = "compensator") -> float:
    rates, law = traj.rates, traj.law
    k = sel.k
    total = 0.0
    for comp in _comps_for(snap, sel):
        S0, S1, S2, S3 = snap.integrals[comp]
        beta, delta, mu, phi, eps = rates.group_rates(comp)
        fam = sel.family
        if fam == "B":
            total += comp[k] * beta[k] * S0
        elif fam == "D":
            total += comp[k] * delta[k] * S0
        elif fam == "Mbar":
            total += comp[k] * mu[k] * (S0 - S2)
        elif fam == "M":
            total += S3[k] - comp[k] * mu[k] * S2
        elif fam == "Fbar":
            total += phi * S0
        elif fam == "E":
            total += eps * S1
        elif fam == "F":
            if phi == 0 or S0 == 0:
                continue
            if sel.child is None:
                mean, second = law.piece_count_moments(comp)
                weight = mean if kind == "compensator" else second
            else:
                child = tuple(sel.child)
                if kind == "compensator":
                    weight = law.eta(comp, child) if law.analytic else _mc_eta(law, comp, child)
                else:
                    weight = law.second_moment(comp, child)
            total += phi * weight * S0
    return total


def _mc_eta(law, comp, child):
    from .model import eta
    return eta(law, comp, child)


def _require_counters(traj: Trajectory):
    snaps = [s for s in traj.snapshots if s.integrals is not None]
    if not snaps:
        raise ValueError("trajectory carries no compensator integrals; simulate with record_counters=True")
    return snaps


def compensator_residual(traj: Trajectory, sel: Selector) -> tuple[np.ndarray, np.ndarray]:
    """Times and values of ``N_t = counter_t - compensator_t`` over the snapshots."""
    snaps = _require_counters(traj)
    times = np.array([s.t for s in snaps])
    vals = np.array([_counter_value(s.counters, sel) - _compensator_value(traj, s, sel) for s in snaps])
    return times, vals


def counter_series(traj: Trajectory, sel: Selector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    snaps = _require_counters(traj)
    return (np.array([s.t for s in snaps]),
            np.array([_counter_value(s.counters, sel) for s in snaps]),
            np.array([_compensator_value(traj, s, sel) for s in snaps]))


def predicted_qv(traj: Trajectory, sel: Selector, other: Selector | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predictable quadratic variation ``<N>`` (or covariation ``<N, N'>``).

    Supported covariations: ``(F, Fbar)`` with a common parent (or both
    summed over parents), ``(F(i, j), F(i, j'))``, and ``(M^k(i), Mbar^k(j))``
    for pairs tracked by the simulator or summed over all compositions.
    """
    snaps = _require_counters(traj)
    times = np.array([s.t for s in snaps])
    if other is None or other == sel:
        vals = [_compensator_value(traj, s, sel, kind="qv") if sel.family == "F"
                else _compensator_value(traj, s, sel) for s in snaps]
        return times, np.array(vals)
    pair = {sel.family, other.family}
    if pair == {"F", "Fbar"}:
        f, fbar = (sel, other) if sel.family == "F" else (other, sel)
        if f.comp != fbar.comp:
            return times, np.zeros(len(snaps))
        return times, np.array([_compensator_value(traj, s, f) for s in snaps])
    if sel.family == "F" and other.family == "F":
        if sel.comp is None or sel.comp != other.comp or sel.child is None or other.child is None:
            raise ValueError("F covariation needs a common parent and explicit children")
        parent = tuple(sel.comp)
        vals = []
        for s in snaps:
            if parent not in s.integrals:
                vals.append(0.0)
                continue
            S0 = s.integrals[parent][0]
            phi = traj.rates.group_rates(parent)[3]
            vals.append(phi * traj.law.cross_moment(parent, tuple(sel.child), tuple(other.child)) * S0)
        return times, np.array(vals)
    if pair == {"M", "Mbar"}:
        m, mbar = (sel, other) if sel.family == "M" else (other, sel)
        if m.k != mbar.k:
            return times, np.zeros(len(snaps))
        k = m.k
        if m.comp is None and mbar.comp is None:
            return times, np.array([_compensator_value(traj, s, Selector("Mbar", None, k)) for s in snaps])
        if m.comp is None or mbar.comp is None:
            raise ValueError("migration covariation needs both compositions or neither")
        i, j = tuple(m.comp), tuple(mbar.comp)
        if i == j:
            return times, np.zeros(len(snaps))
        rate = j[k] * traj.rates.group_rates(j)[2][k]
        vals = []
        for s in snaps:
            key = (i, j) if (i, j) in s.pair_integrals else (j, i)
            if key not in s.pair_integrals:
                raise ValueError(f"pair {(i, j)} was not tracked; pass track_pairs to the scenario")
            vals.append(rate * s.pair_integrals[key])
        return times, np.array(vals)
    return times, np.zeros(len(snaps))
