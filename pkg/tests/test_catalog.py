import json

import pytest
from hypothesis import given, strategies as st

from iotquarantine.catalog import Catalog, DeviceTypeSpec, builtin_factory_catalog, legit_rate, load_catalog, mean_rate


def test_legit_rate_manufacturing_cell():
    assert legit_rate(DeviceTypeSpec(0, "cell", 50, 15)) == 2400


def test_legit_rate_machine_tools():
    assert legit_rate(DeviceTypeSpec(0, "tools", 0.5, 50)) == 800_000


def test_legit_rate_unit_identity():
    assert legit_rate(DeviceTypeSpec(0, "slow", 1000, 1)) == 8


def test_builtin_catalog_matches_factory_table():
    cat = builtin_factory_catalog()
    assert [t.transmission_period for t in cat.types] == [50, 0.5, 2, 5]
    assert [t.frame_size for t in cat.types] == [15, 50, 30, 15]
    assert cat.rates == [2400, 800_000, 120_000, 24_000]
    assert all(isinstance(r, int) for r in cat.rates)
    assert cat.type_probabilities == (0.25, 0.25, 0.25, 0.25)
    assert [t.name for t in cat.types] == ["manufacturing cell", "machine tools", "printing machines", "packaging machines"]


def test_mean_rate_builtin():
    assert mean_rate(builtin_factory_catalog()) == 236_600


def test_mean_rate_degenerate_mixtures():
    cat = builtin_factory_catalog()
    assert mean_rate(cat.with_probabilities([1, 0, 0, 0])) == 2400
    single = Catalog((DeviceTypeSpec(0, "only", 5, 15),), (1.0,))
    assert mean_rate(single) == 24_000


@given(st.floats(0, 1), st.lists(st.floats(0.01, 1), min_size=4, max_size=4), st.lists(st.floats(0.01, 1), min_size=4, max_size=4))
def test_mean_rate_linear_in_probabilities(a, w1, w2):
    cat = builtin_factory_catalog()
    p = [x / sum(w1) for x in w1]
    q = [x / sum(w2) for x in w2]
    mix = [a * x + (1 - a) * y for x, y in zip(p, q)]
    mix = [m / sum(mix) for m in mix]
    expected = a * mean_rate(cat.with_probabilities(p)) + (1 - a) * mean_rate(cat.with_probabilities(q))
    assert mean_rate(cat.with_probabilities(mix)) == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize(
    "period,size",
    [(0, 10), (-1, 10), (10, 0)],
)
def test_spec_rejects_non_positive(period, size):
    with pytest.raises(ValueError):
        DeviceTypeSpec(0, "bad", period, size)


def test_catalog_validation():
    t = DeviceTypeSpec(0, "a", 10, 10)
    with pytest.raises(ValueError):
        Catalog((t,), (0.9,))
    with pytest.raises(ValueError):
        Catalog((DeviceTypeSpec(1, "a", 10, 10),), (1.0,))
    with pytest.raises(ValueError):
        Catalog((t, DeviceTypeSpec(1, "b", 1, 1)), (1.5, -0.5))
    Catalog((t, DeviceTypeSpec(1, "b", 1, 1)), (0.3, 0.7))


def test_catalog_json_roundtrip(tmp_path):
    cat = builtin_factory_catalog()
    path = tmp_path / "cat.json"
    path.write_text(json.dumps(cat.to_dict()))
    loaded = load_catalog(path)
    assert loaded.rates == cat.rates
    assert loaded.type_probabilities == cat.type_probabilities
    assert loaded.types[0].metadata["communication_range_m"] == "50 to 100"


def test_catalog_json_unknown_field_rejected():
    with pytest.raises(ValueError):
        Catalog.from_dict({"types": [{"name": "x", "transmission_period_ms": 1, "frame_size_bytes": 1, "colour": "red"}]})


def test_fractional_rates_allowed():
    spec = DeviceTypeSpec(0, "odd", 3, 1)
    assert legit_rate(spec) == pytest.approx(8000 / 3)
