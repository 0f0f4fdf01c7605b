import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grouppop.model import NonproperLaw, Population, RateSpec, Remark2Fission, UniformBoxLaw, make_rate, totals
from grouppop.scaling import (
    ScalingParams,
    density_step_function,
    empirical_measure,
    hat_eta_pairing,
    hat_rates,
)

from . import oracles

populations = st.dictionaries(
    st.tuples(st.integers(0, 9), st.integers(0, 9)), st.integers(1, 6), max_size=8
).map(lambda d: {c: x for c, x in d.items() if any(c)})


def remark2_rates(ntypes=1):
    zero = tuple(make_rate(0.0) for _ in range(ntypes))
    return RateSpec(ntypes, zero, zero, zero, Remark2Fission(), make_rate(0.5))


def test_empty_population_gives_zero_measure():
    lam = empirical_measure(Population(1), ScalingParams(4, 10))
    assert lam.mass == 0.0
    assert lam.pair(lambda u: u[:, 0]) == 0.0


def test_single_atom_measure():
    lam = empirical_measure(Population(1, {(3,): 2}), ScalingParams(3, 2))
    assert lam.locations.tolist() == [[1.0]]
    assert lam.weights.tolist() == [1.0]
    assert lam.mass == 1.0


@settings(max_examples=40, deadline=None)
@given(populations, st.integers(1, 20), st.integers(1, 50))
def test_mass_is_group_count_over_m(groups, n, m):
    pop = Population(2, groups)
    assert empirical_measure(pop, ScalingParams(n, m)).mass == pytest.approx(totals(pop)[0] / m)


@settings(max_examples=40, deadline=None)
@given(populations, populations)
def test_measure_is_additive_in_the_population(a, b):
    s = ScalingParams(3, 7)
    union = Population(2, a)
    for c, x in b.items():
        union.add(c, x)
    joint = empirical_measure(union, s)
    summed = empirical_measure(Population(2, a), s) + empirical_measure(Population(2, b), s)
    f = lambda u: np.sin(u[:, 0]) + u[:, 1] ** 2  # noqa: E731
    assert joint.pair(f) == pytest.approx(summed.pair(f), abs=1e-12)
    assert joint.mass == pytest.approx(summed.mass, abs=1e-12)


def test_scaling_params_must_be_positive_integers():
    with pytest.raises(ValueError):
        ScalingParams(0, 3)
    with pytest.raises(ValueError):
        ScalingParams(2, 1.5)


# -- rescaled rates ------------------------------------------------------


def test_constant_hat_rate_ignores_n():
    rates = RateSpec.constant(1, birth=1.7)
    for n in (1, 10, 100):
        vals = hat_rates(rates, ScalingParams(n, 5)).birth(np.array([[1.3], [2.0]]))
        assert np.allclose(vals, 1.7)
    # below 1/n the composition is empty and per-capita rates vanish
    assert hat_rates(rates, ScalingParams(1, 5)).birth(np.array([[0.3]]))[0, 0] == 0.0


def test_remark2_hat_fission_value():
    hr = hat_rates(remark2_rates(), ScalingParams(10, 1))
    assert hr.fission(np.array([[0.25]]))[0] == pytest.approx(0.3 * math.exp(-0.2), rel=1e-14)


def test_remark2_hat_fission_converges_to_limit():
    u = np.linspace(0.0, 5.0, 501)[:, None]
    limit = Remark2Fission().limit(u)
    sups = [np.max(np.abs(hat_rates(remark2_rates(), ScalingParams(n, 1)).fission(u) - limit))
            for n in (10, 40, 160)]
    assert sups[0] > sups[1] > sups[2]
    assert sups[2] < 0.01


def test_extinction_scalings_differ_by_n_to_the_l_pointwise():
    hr = hat_rates(remark2_rates(2), ScalingParams(7, 3))
    u = np.random.default_rng(0).uniform(0, 3, size=(50, 2))
    assert np.allclose(hr.epsilon_lp(u), hr.epsilon_lln(u) * 49.0, rtol=1e-14)


# -- offspring pairing ---------------------------------------------------


@pytest.mark.parametrize("law", [UniformBoxLaw(), NonproperLaw()])
def test_eta_pairing_identities(law):
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(1, 12))
        u = rng.uniform(0, 3, size=2)
        s = ScalingParams(n, 1)
        ones = hat_eta_pairing(law, s, u, lambda v: np.ones(len(v)))
        assert ones <= law.max_pieces + 1e-12
        ident = hat_eta_pairing(law, s, u, lambda v: v)
        expect = np.floor(n * u + 1e-12) / n
        assert np.allclose(ident, expect, rtol=0, atol=1e-12)


def test_remark2_eta_pairing_converges_to_uniform_kernel():
    u = 1.7
    f = lambda v: np.cos(np.atleast_2d(v)[:, 0])  # noqa: E731
    target = oracles.midpoint_integral(lambda x: np.cos(x) * 2.0 / u, 0.0, u, 20000)
    errs = [abs(hat_eta_pairing(UniformBoxLaw(), ScalingParams(n, 1), [u], f) - target) for n in (10, 40, 160)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.02


# -- step densities ------------------------------------------------------


def test_single_group_step_density_is_an_indicator():
    step = density_step_function(Population(1, {(1,): 1}), ScalingParams(1, 1))
    vals = step(np.array([[0.5], [1.0], [1.5], [1.999], [2.0]]))
    assert vals.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


@settings(max_examples=40, deadline=None)
@given(populations, st.integers(1, 10), st.integers(1, 30))
def test_step_density_integral(groups, n, m):
    pop = Population(2, groups)
    step = density_step_function(pop, ScalingParams(n, m))
    assert step.total() == pytest.approx(totals(pop)[0] / (m * n * n))


def test_step_pairing_matches_refined_cell_quadrature():
    pop = Population(2, {(1, 2): 3, (4, 0): 2, (2, 2): 1})
    n, m = 4, 5
    step = density_step_function(pop, ScalingParams(n, m))
    g = lambda u: np.exp(-u[:, 0]) * np.cos(u[:, 1])  # noqa: E731
    ref = 0.0
    for (i, j), x in pop.items():
        fx = oracles.midpoint_integral(lambda a: np.exp(-a), i / n, (i + 1) / n, 400)
        fy = oracles.midpoint_integral(np.cos, j / n, (j + 1) / n, 400)
        ref += x / m * fx * fy
    assert step.pair(g) == pytest.approx(ref, abs=1e-8)
