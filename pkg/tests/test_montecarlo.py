import json
import math

import numpy as np
import pytest

from iotquarantine.catalog import Catalog, DeviceTypeSpec
from iotquarantine.montecarlo import (
    ExperimentSpec,
    derive_seed,
    run_experiment,
    run_round,
    sweep,
    sweep_to_csv,
    sweep_to_json,
)
from iotquarantine.traffic import ScenarioParams


def metrics(rounds=20_000, seed=1, **kw):
    return run_experiment(ExperimentSpec(ScenarioParams(**kw), rounds, seed))


def test_deterministic_under_seed():
    a = metrics(5000, seed=9, n=60, p_m=0.02)
    b = metrics(5000, seed=9, n=60, p_m=0.02)
    assert a.to_dict() == b.to_dict()


def test_worker_count_does_not_change_results():
    spec = ExperimentSpec(ScenarioParams(n=80, p_m=0.01), 9000, 4)
    assert run_experiment(spec, workers=1).to_dict() == run_experiment(spec, workers=3).to_dict()


def test_zero_malicious_probability():
    m = metrics(3000, p_m=0.0)
    assert m.flagged_flow_ratio == 0.0
    assert m.legit_quarantined_ratio == 0.0
    assert math.isnan(m.malicious_quarantined_ratio)
    assert math.isnan(m.detect_given_malicious)
    assert m.to_dict()["malicious_quarantined_ratio"] is None


def test_all_malicious_large_factor_flags_everything():
    m = metrics(2000, p_m=1.0, f_m=100, n=30)
    assert m.flagged_flow_ratio == 1.0
    assert m.malicious_quarantined_ratio == 1.0


def test_f_m_one_never_flags():
    m = metrics(2000, p_m=0.5, f_m=1.0, n=30)
    assert m.flagged_flow_ratio == 0.0
    assert m.malicious_quarantined_ratio == 0.0


def test_single_device_flow():
    m = metrics(5000, n=1, p_m=0.1)
    assert m.detect_given_malicious == 1.0
    assert m.legit_quarantined_ratio == 0.0


def test_ratios_and_counts_consistent():
    m = metrics(20_000, n=100, p_m=0.01)
    t = m.tally
    assert 0 <= m.malicious_quarantined_ratio <= 1
    assert t.malicious_total + t.legit_total == 100 * t.rounds
    assert t.malicious_quarantined == pytest.approx(m.malicious_quarantined_ratio * t.malicious_total)
    assert sum(t.by_type_total) == t.malicious_total
    assert t.flagged <= t.rounds_with_malicious  # ties never flag all-legit flows


def test_flagged_flows_equal_detections_with_malicious():
    m = metrics(10_000, n=100, p_m=0.01)
    assert m.flagged_flow_ratio * m.tally.rounds == m.tally.flagged_with_malicious


def test_legit_only_flows_never_flagged_nondivisible():
    cat = Catalog((DeviceTypeSpec(0, "a", 3, 7), DeviceTypeSpec(1, "b", 7, 11)), (0.5, 0.5))
    m = metrics(5000, n=12, p_m=0.0, s_p=0.9, catalog=cat)
    assert m.flagged_flow_ratio == 0.0


def test_se_close_to_spread_over_seeds():
    values = [metrics(4000, seed=s, n=100, p_m=0.01, f_m=20).malicious_quarantined_ratio for s in range(12)]
    se = metrics(4000, seed=0, n=100, p_m=0.01, f_m=20).malicious_quarantined_se
    assert 0.4 < np.std(values, ddof=1) / se < 2.0


def test_run_round_returns_population(rng):
    pop, verdict = run_round(ScenarioParams(n=10), rng)
    assert len(pop) == 10
    assert verdict.expected_rate > 0


def test_sweep_rows_and_seeds():
    base = ExperimentSpec(ScenarioParams(n=50), 2000, 11)
    rows = sweep(base, "p_m", [0.01, 0.02])
    assert [v for v, _ in rows] == [0.01, 0.02]
    assert derive_seed(11, 0) != derive_seed(11, 1)
    csv_text = sweep_to_csv("p_m", rows)
    assert csv_text.splitlines()[0].startswith("p_m,malicious_quarantined_ratio")
    assert len(csv_text.strip().splitlines()) == 3
    data = json.loads(sweep_to_json("p_m", rows))
    assert len(data["rows"]) == 2


@pytest.mark.parametrize("param,grid", [("colour", [1]), ("p_m", [])])
def test_sweep_rejects_bad_input(param, grid):
    with pytest.raises(ValueError):
        sweep(ExperimentSpec(ScenarioParams(), 10, 1), param, grid)


def test_rounds_must_be_positive():
    with pytest.raises(ValueError):
        ExperimentSpec(ScenarioParams(), 0, 1)
