import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iotquarantine.analytics import (
    AnalyticScenario,
    brute_force_p_detect,
    check_envelope,
    contribution_nonzero_types,
    fig3_rows,
    legit_rate_distribution,
    malicious_excess_distribution,
    p_detect_general,
    p_detect_general_curve,
    p_detect_special,
    p_flow_contains_malicious,
    rate_lattice,
    table2_rows,
)
from iotquarantine.catalog import Catalog, DeviceTypeSpec, builtin_factory_catalog, exact
from iotquarantine.errors import CapacityError, EnvelopeError

from oracles import legit_sum_enumeration, literal_general, naive_joint


def small_catalog(sizes, periods, probs):
    types = tuple(DeviceTypeSpec(i, f"t{i}", p, s) for i, (s, p) in enumerate(zip(sizes, periods)))
    return Catalog(types, tuple(probs))


four_type = st.builds(
    lambda sizes, periods, w: small_catalog(sizes, periods, [x / sum(w) for x in w]),
    st.lists(st.integers(1, 60), min_size=4, max_size=4),
    st.lists(st.sampled_from([0.5, 1, 2, 5, 10, 50]), min_size=4, max_size=4),
    st.lists(st.integers(1, 10), min_size=4, max_size=4),
)


def test_table2_values():
    got = [round(v, 1) for _, v in table2_rows()]
    assert got == [39.4, 63.4, 77.9, 86.7, 92.0]


@pytest.mark.parametrize("n,p,expected", [(10, 0.0, 0.0), (10, 1.0, 1.0), (1, 0.3, 0.3), (2, 0.5, 0.75)])
def test_p_flow_contains_malicious(n, p, expected):
    assert p_flow_contains_malicious(n, p) == pytest.approx(expected)


def test_builtin_lattice():
    lat = rate_lattice(builtin_factory_catalog())
    assert lat.unit == 800
    assert lat.steps == (3, 1000, 150, 30)
    assert not lat.quantized


def test_quantization_warns():
    cat = small_catalog([1, 1], [3, 1], [0.5, 0.5])  # 8000/3 bit/s
    with pytest.warns(UserWarning):
        assert rate_lattice(cat).quantized


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_legit_distribution_matches_enumeration(n):
    cat = builtin_factory_catalog()
    dist = legit_rate_distribution(AnalyticScenario(n=n, catalog=cat))
    want = legit_sum_enumeration(n, cat.rates, cat.type_probabilities)
    got = {round(i * dist.unit): p for i, p in enumerate(dist.mass) if p > 0}
    assert got.keys() == want.keys()
    for key, p in want.items():
        assert got[key] == pytest.approx(p, rel=1e-12)
    assert dist.total() == pytest.approx(1.0)


def test_excess_distribution_mass():
    dist = malicious_excess_distribution(AnalyticScenario(n=20, p_m=0.1))
    assert dist.total() == pytest.approx(1.0)
    assert dist.mass[0] == pytest.approx(0.9**20)


def test_cell_limit():
    with pytest.raises(CapacityError):
        p_detect_general(AnalyticScenario(n=1000), max_cells=10_000)


def test_general_trivial_cases():
    assert p_detect_general(AnalyticScenario(n=1)) == pytest.approx(1.0)
    assert math.isnan(p_detect_general(AnalyticScenario(p_m=0.0)))
    assert p_detect_general(AnalyticScenario(f_m=1.0)) == 0.0


def test_general_fig3_anchors():
    curve = p_detect_general_curve(AnalyticScenario(), [50, 65, 100, 150])
    assert curve[0] == pytest.approx(1.0, abs=1e-6)
    assert curve[1] > 0.999
    assert curve[2] == pytest.approx(0.92994, abs=5e-5)
    assert curve[3] == pytest.approx(0.89234, abs=5e-5)


def test_curve_matches_pointwise():
    base = AnalyticScenario(p_m=0.02, f_m=30)
    ns = [3, 40, 17, 90]
    curve = p_detect_general_curve(base, ns)
    for n, v in zip(ns, curve):
        assert v == pytest.approx(p_detect_general(base.replace(n=n)), abs=1e-13)


@settings(max_examples=25, deadline=None)
@given(four_type, st.integers(1, 6), st.floats(0.05, 0.9), st.integers(2, 40), st.integers(1000, 3000))
def test_general_matches_literal_sums(cat, n, p_m, f_m, tr_milli):
    t_r = tr_milli / 1000
    s = AnalyticScenario(n=n, p_m=p_m, f_m=f_m, t_r=t_r, catalog=cat)
    want = literal_general(n, p_m, exact(f_m), exact(t_r), [t.exact_rate for t in cat.types], cat.type_probabilities)
    assert p_detect_general(s) == pytest.approx(want, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(four_type, st.integers(1, 4), st.floats(0.05, 0.9), st.integers(2, 40), st.integers(1000, 3000))
def test_brute_force_matches_naive_enumeration(cat, n, p_m, f_m, tr_milli):
    t_r = tr_milli / 1000
    s = AnalyticScenario(n=n, p_m=p_m, f_m=f_m, t_r=t_r, catalog=cat)
    want = naive_joint(n, p_m, exact(f_m), exact(t_r), [t.exact_rate for t in cat.types], cat.type_probabilities)
    assert brute_force_p_detect(s) == pytest.approx(want, abs=1e-12)


def test_brute_force_limit():
    with pytest.raises(CapacityError):
        brute_force_p_detect(AnalyticScenario(n=13))
    assert math.isnan(brute_force_p_detect(AnalyticScenario(n=3, p_m=0.0)))


def test_independent_and_joint_models_differ():
    s = AnalyticScenario(n=5, p_m=0.2, f_m=2, t_r=1.5)
    assert brute_force_p_detect(s) == pytest.approx(0.21271, abs=1e-5)
    assert p_detect_general(s) == pytest.approx(0.27728, abs=1e-5)


@pytest.mark.parametrize("n", [1, 10, 50, 70, 100, 150, 300])
def test_special_equals_general_in_published_configuration(n):
    s = AnalyticScenario(n=n)
    assert p_detect_special(s) == pytest.approx(p_detect_general(s), abs=1e-9)


def test_contribution_nonzero_types_plugin():
    want = (1 - (1 - 0.0075) ** 100) / (1 - (1 - 0.01) ** 100)
    assert contribution_nonzero_types(AnalyticScenario(n=100)) == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(0.83438, abs=1e-5)


def test_envelope_violation():
    s = AnalyticScenario(n=100, f_m=5, t_r=1.5)
    with pytest.raises(EnvelopeError):
        check_envelope(s)
    with pytest.raises(EnvelopeError):
        p_detect_special(s)
    with pytest.raises(EnvelopeError):
        p_detect_special(AnalyticScenario(n=600))


def test_envelope_guarantee_outside_published_configuration():
    s = AnalyticScenario(n=3, p_m=0.2, f_m=100, t_r=1.01)
    check_envelope(s)
    assert p_detect_special(s) == pytest.approx(p_detect_general(s), abs=1e-12)


def test_fig3_rows_columns():
    rows = fig3_rows([50, 100])
    assert rows[0]["p_detect_general"] == pytest.approx(1.0)
    assert set(rows[1]) >= {"n", "p_detect_general", "p_detect_special", "contribution_nonzero_types"}


def test_threshold_below_one_rejected():
    with pytest.raises(ValueError):
        AnalyticScenario(t_r=0.9)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 120), st.floats(0.001, 0.2), st.integers(1, 50), st.floats(1.0, 2.0), st.floats(0.0, 0.5))
def test_monotone_in_threshold_and_factor(n, p_m, f_m, t_r, bump):
    s = AnalyticScenario(n=n, p_m=p_m, f_m=f_m, t_r=t_r)
    base = p_detect_general(s)
    assert 0.0 <= base <= 1.0
    assert p_detect_general(s.replace(t_r=t_r + bump)) <= base + 1e-12
    assert p_detect_general(s.replace(f_m=f_m + 10)) >= base - 1e-12


def test_special_matches_simulation_two_devices():
    from iotquarantine.montecarlo import ExperimentSpec, run_experiment
    from iotquarantine.traffic import ScenarioParams

    s = AnalyticScenario(n=2, p_m=0.5)
    m = run_experiment(ExperimentSpec(ScenarioParams(n=2, p_m=0.5), 1_000_000, 8))
    assert p_detect_special(s) == 1.0
    assert m.detect_given_malicious == 1.0


def test_contribution_all_malicious_nonzero_type():
    cat = builtin_factory_catalog().with_probabilities([0.0, 1 / 3, 1 / 3, 1 / 3])
    assert contribution_nonzero_types(AnalyticScenario(n=10, catalog=cat)) == pytest.approx(1.0)
