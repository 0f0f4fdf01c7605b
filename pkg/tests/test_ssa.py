import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grouppop.model import NonproperLaw, Population, RateSpec, UniformBoxLaw, totals
from grouppop.ssa import (
    ContractViolation,
    Fenwick,
    Scenario,
    Selector,
    Simulator,
    aggregate_rates,
    compensator_residual,
    counter_series,
    predicted_qv,
    reconstruct_population,
    simulate,
)

from . import oracles


class Scripted:
    """Replays fixed uniforms."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


def const_rates(ntypes=1, **kw):
    return RateSpec.constant(ntypes, **kw)


# -- channel table -------------------------------------------------------


def test_single_birth_channel():
    table, total = aggregate_rates(Population(1, {(2,): 3}), const_rates(birth=1.0))
    assert table == [("birth", (2,), 0, 6.0)]
    assert total == 6.0


def test_extinction_propensities_use_current_group_total():
    table, _ = aggregate_rates(Population(1, {(1,): 2, (2,): 1}), const_rates(extinction=0.5))
    ext = {comp: p for kind, comp, _, p in table if kind == "extinction"}
    assert ext == {(1,): 3.0, (2,): 1.5}


@settings(max_examples=50, deadline=None)
@given(
    st.dictionaries(st.tuples(st.integers(0, 4), st.integers(0, 4)), st.integers(1, 4), max_size=6),
    st.lists(st.floats(0, 2), min_size=5, max_size=5),
)
def test_channel_table_matches_per_group_enumeration(groups, r):
    groups = {c: x for c, x in groups.items() if any(c)}
    if not groups:
        return
    rates = const_rates(2, birth=r[0], death=r[1], migration=r[2], fission=r[3], extinction=r[4])
    table, total = aggregate_rates(Population(2, groups), rates)
    naive = oracles.channel_propensities(
        groups, lambda c: (r[0],) * 2, lambda c: (r[1],) * 2, lambda c: (r[2],) * 2,
        lambda c: r[3], lambda c: r[4])
    agg = defaultdict(float)
    for kind, comp, k, p in naive:
        agg[(kind, comp, k)] += p
    mine = {(kind, comp, k): p for kind, comp, k, p in table}
    assert mine.keys() == agg.keys()
    for key, p in agg.items():
        assert mine[key] == pytest.approx(p, rel=1e-12)
    assert total == pytest.approx(math.fsum(agg.values()), rel=1e-12)


def test_fenwick_find_and_update():
    tree = Fenwick(4)
    for i, w in enumerate([1.0, 0.0, 2.0, 3.0, 4.0]):
        if i >= tree.size:
            tree.grow(2 * tree.size)
        tree.add(i, w)
    assert tree.total == pytest.approx(10.0)
    assert tree.find(0.5)[0] == 0
    assert tree.find(1.5)[0] == 2
    assert tree.find(9.99)[0] == 4
    tree.add(4, -4.0)
    assert tree.find(5.9)[0] == 3


# -- single events -------------------------------------------------------


def test_forced_death_empties_population():
    sim = Simulator(const_rates(death=1.0), NonproperLaw(), Population(1, {(1,): 1}), np.random.default_rng(0))
    rec = sim.step()
    assert rec.kind == "death"
    assert sim.population().as_dict() == {}
    assert sim.counters["D"] == {((1,), 0): 1}
    with pytest.raises(ContractViolation):
        sim.step()


def test_fission_into_two_pieces_updates_counters():
    sim = Simulator(const_rates(fission=1.0), UniformBoxLaw(), Population(1, {(3,): 1}), Scripted([0.5, 0.5, 0.3]))
    rec = sim.step()
    assert rec.kind == "fission"
    assert sorted(rec.offspring) == [(1,), (2,)]
    assert sim.population().as_dict() == {(1,): 1, (2,): 1}
    assert sim.counters["Fbar"] == {(3,): 1}
    assert sim.counters["F"] == {((3,), (1,)): 1, ((3,), (2,)): 1}


def test_migration_onto_same_composition_is_a_noop():
    sim = Simulator(const_rates(migration=1.0), NonproperLaw(), Population(1, {(2,): 2}), np.random.default_rng(3))
    for _ in range(20):
        rec = sim.step()
        assert rec.kind == "migration" and rec.noop
    assert sim.population().as_dict() == {(2,): 2}
    assert sim.counters["M"] == {} and sim.counters["Mbar"] == {}


def test_migration_between_compositions_moves_one_individual():
    sim = Simulator(const_rates(migration=1.0), NonproperLaw(), Population(1, {(3,): 1, (1,): 1}),
                    np.random.default_rng(1))
    rec = sim.step()
    while rec.noop:
        assert not sim.counters["M"]
        rec = sim.step()
    src, dest = rec.source, rec.destination
    assert src != dest
    assert sim.counters["Mbar"] == {(src, 0): 1}
    assert sim.counters["M"] == {(dest, 0): 1}
    assert totals(sim.population())[1] == (4,)


# -- whole-run invariants ------------------------------------------------


def _pop_stats(pop):
    n, ind = totals(pop)
    return n, sum(ind)


def test_per_event_changes_follow_event_kind():
    rates = const_rates(2, birth=1.0, death=1.2, migration=0.8, fission=0.6, extinction=0.05)
    pop = Population(2, {(1, 0): 4, (0, 1): 3, (2, 1): 3, (3, 3): 2})
    sim = Simulator(rates, UniformBoxLaw(), pop, np.random.default_rng(9))
    kinds = set()
    for _ in range(3000):
        if sim.xstar == 0:
            break
        before = sim.population()
        xs0, size0 = _pop_stats(before)
        rec = sim.step()
        xs1, size1 = _pop_stats(sim.population())
        kinds.add(rec.kind)
        src_singleton = sum(rec.source) == 1
        if rec.kind == "birth":
            assert (xs1 - xs0, size1 - size0) == (0, 1)
        elif rec.kind == "death":
            assert (xs1 - xs0, size1 - size0) == (-1 if src_singleton else 0, -1)
        elif rec.kind == "migration":
            # a singleton's emigration empties its group
            expect = 0 if rec.noop or not src_singleton else -1
            assert (xs1 - xs0, size1 - size0) == (expect, 0)
        elif rec.kind == "fission":
            assert (xs1 - xs0, size1 - size0) == (len(rec.offspring) - 1, 0)
        else:
            assert (xs1 - xs0, size1 - size0) == (-1, -sum(rec.source))
    assert kinds == {"birth", "death", "migration", "fission", "extinction"}


@settings(max_examples=25, deadline=None)
@given(
    st.dictionaries(st.tuples(st.integers(0, 5), st.integers(0, 5)), st.integers(1, 5), min_size=1, max_size=5),
    st.lists(st.floats(0, 1.5), min_size=5, max_size=5),
    st.integers(0, 2**32 - 1),
    st.sampled_from(["uniform_box", "nonproper"]),
)
def test_balance_reconstruction_is_exact(groups, r, seed, law):
    groups = {c: x for c, x in groups.items() if any(c)}
    if not groups:
        return
    pop = Population(2, groups)
    rates = const_rates(2, birth=r[0], death=r[1], migration=r[2], fission=r[3], extinction=r[4] / 10)
    traj = simulate(Scenario(rates, UniformBoxLaw() if law == "uniform_box" else NonproperLaw(), pop), 1.0, seed)
    assert reconstruct_population(pop, traj.final.counters) == traj.final.population
    for fam, table in traj.final.counters.items():
        assert all(isinstance(v, int) and v > 0 for v in table.values())
        if fam in ("B", "D", "Mbar"):
            assert all(comp[k] > 0 for comp, k in table)


def test_counters_start_at_zero_and_never_decrease():
    rates = const_rates(birth=1.0, death=1.0, migration=0.5, fission=0.5, extinction=0.1)
    pop = Population(1, {(1,): 5, (4,): 5})
    traj = simulate(Scenario(rates, UniformBoxLaw(), pop, sample_times=tuple(np.linspace(0, 1, 11))), 1.0, 4)
    assert all(not v for v in traj.snapshots[0].counters.values())
    for sel in [Selector("B"), Selector("D"), Selector("M"), Selector("Mbar"), Selector("F"), Selector("E")]:
        _, values, _ = counter_series(traj, sel)
        assert np.all(np.diff(values) >= 0)


def test_total_extinction_is_absorbing():
    traj = simulate(Scenario(const_rates(extinction=50.0), NonproperLaw(), Population(1, {(1,): 3}),
                             sample_times=(0.5, 1.0)), 1.0, 0)
    assert traj.extinct_at is not None and traj.extinct_at < 0.5
    assert traj.final.population.group_count == 0
    assert traj.snapshots[-1].t == 1.0


def test_zero_rates_give_constant_trajectory_and_zero_residuals():
    pop = Population(1, {(2,): 3})
    traj = simulate(Scenario(const_rates(), UniformBoxLaw(), pop, sample_times=(0.0, 0.5, 1.0)), 1.0, 1)
    assert traj.event_count == 0
    assert all(s.population == pop for s in traj.snapshots)
    for fam in ("B", "D", "M", "Mbar", "Fbar", "F", "E"):
        assert np.all(compensator_residual(traj, Selector(fam))[1] == 0)
        assert np.all(predicted_qv(traj, Selector(fam))[1] == 0)


def test_same_seed_gives_identical_counters():
    rates = const_rates(birth=1.0, death=0.9, migration=0.4, fission=0.3, extinction=0.1)
    pop = Population(1, {(3,): 10})
    a = simulate(Scenario(rates, UniformBoxLaw(), pop, log_events=True), 2.0, 77)
    b = simulate(Scenario(rates, UniformBoxLaw(), pop, log_events=True), 2.0, 77)
    assert a.final.counters == b.final.counters
    assert a.events == b.events
    c = simulate(Scenario(rates, UniformBoxLaw(), pop), 2.0, 78)
    assert c.final.counters != a.final.counters


# -- statistics ----------------------------------------------------------


def test_pure_birth_matches_yule_mean():
    beta, t = 0.8, 1.0
    pop = Population(1, {(1,): 10})
    finals = [totals(simulate(Scenario(const_rates(birth=beta), NonproperLaw(), pop), t, [3, r]).final.population)[1][0]
              for r in range(200)]
    mean, se = np.mean(finals), np.std(finals, ddof=1) / math.sqrt(200)
    assert abs(mean - oracles.yule_mean(10, beta, t)) <= 3 * se


def test_birth_residual_is_centred_with_predicted_variance():
    rates = const_rates(birth=1.0, death=0.7, migration=0.3, fission=0.2, extinction=0.02)
    pop = Population(1, {(1,): 5, (2,): 5, (4,): 5})
    N, qv = [], []
    for r in range(200):
        traj = simulate(Scenario(rates, UniformBoxLaw(), pop, sample_times=(1.0,)), 1.0, [8, r])
        N.append(compensator_residual(traj, Selector("B"))[1][-1])
        qv.append(predicted_qv(traj, Selector("B"))[1][-1])
    N = np.array(N)
    assert abs(N.mean()) <= 3 * N.std(ddof=1) / math.sqrt(len(N))
    assert abs(N.var(ddof=1) / np.mean(qv) - 1) <= 0.15


def test_birth_qv_equals_birth_compensator():
    rates = const_rates(birth=1.3, death=0.4)
    traj = simulate(Scenario(rates, NonproperLaw(), Population(1, {(2,): 4}), sample_times=(0.5, 1.0)), 1.0, 2)
    sel = Selector("B", (2,), 0)
    assert np.array_equal(predicted_qv(traj, sel)[1], counter_series(traj, sel)[2])


def test_compensator_integrals_against_frozen_population():
    # with only nonproper fission the population never changes, so S0 = X t exactly
    rates = const_rates(fission=2.0, extinction=0.0)
    pop = Population(1, {(3,): 4, (1,): 2})
    traj = simulate(Scenario(rates, NonproperLaw(), pop, sample_times=(1.5,)), 1.5, 0)
    _, _, comp = counter_series(traj, Selector("Fbar", (3,)))
    assert comp[-1] == pytest.approx(2.0 * 4 * 1.5, rel=1e-12)


def test_fission_covariance_matches_replicas():
    rates = const_rates(birth=1.0, death=1.0, fission=1.0)
    pop = Population(1, {(3,): 20})
    f, fbar = Selector("F", (3,), 0, (1,)), Selector("Fbar", (3,))
    nf, nfb, pred = [], [], []
    for r in range(500):
        traj = simulate(Scenario(rates, UniformBoxLaw(), pop, sample_times=(1.0,)), 1.0, [21, r])
        nf.append(compensator_residual(traj, f)[1][-1])
        nfb.append(compensator_residual(traj, fbar)[1][-1])
        pred.append(predicted_qv(traj, f, fbar)[1][-1])
    emp = np.cov(nf, nfb)[0, 1]
    assert abs(emp / np.mean(pred) - 1) <= 0.20


def test_tracked_migration_pair_covariance():
    rates = const_rates(migration=1.0, birth=0.5, death=0.5)
    pop = Population(1, {(2,): 10, (3,): 10})
    i, j = (3,), (2,)
    m, mbar = Selector("M", i, 0), Selector("Mbar", j, 0)
    a, b, pred = [], [], []
    for r in range(400):
        traj = simulate(Scenario(rates, NonproperLaw(), pop, sample_times=(0.5,), track_pairs=((i, j),)), 0.5, [5, r])
        a.append(compensator_residual(traj, m)[1][-1])
        b.append(compensator_residual(traj, mbar)[1][-1])
        pred.append(predicted_qv(traj, m, mbar)[1][-1])
    assert abs(np.cov(a, b)[0, 1] / np.mean(pred) - 1) <= 0.25


def test_untracked_pair_is_refused():
    rates = const_rates(migration=1.0)
    traj = simulate(Scenario(rates, NonproperLaw(), Population(1, {(2,): 2, (3,): 2}), sample_times=(0.5,)), 0.5, 0)
    with pytest.raises(ValueError):
        predicted_qv(traj, Selector("M", (3,), 0), Selector("Mbar", (2,), 0))
