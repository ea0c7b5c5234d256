import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scacopf import case_model as cm
from conftest import make_bus, make_gen, make_line, two_bus_net, five_bus_net


MINIMAL_CASE = {
    "buses": [
        {"id": "B1", "v_min": 0.9, "v_max": 1.1, "base_kv": 230.0},
        {"id": "B2", "v_min": 0.9, "v_max": 1.1, "base_kv": 230.0,
         "p_load": 0.8, "q_load": 0.2},
    ],
    "generators": [
        {"id": "G1", "bus": "B1", "p_min": 0.0, "p_max": 2.0,
         "q_min": -1.0, "q_max": 1.0, "alpha": 1.0,
         "cost": [[1.0, 10.0], [2.5, 20.0]]},
    ],
    "lines": [
        {"id": "L1", "origin": "B1", "destination": "B2",
         "g": 0.5, "b": -5.0, "b_ch": 0.02, "r_max": 2.0, "r_max_ctg": 2.2},
    ],
    "transformers": [],
    "contingencies": [],
    "penalty": {"breakpoints": [0.02, 0.1], "slopes": [1e3, 5e3, 1e6]},
    "reference_bus": "B1",
}


def test_load_two_bus_case(tmp_path):
    path = tmp_path / "case.json"
    path.write_text(json.dumps(MINIMAL_CASE))
    net = cm.load_case(path)
    assert len(net.buses) == 2
    assert len(net.lines) == 1
    assert len(net.generators) == 1
    assert net.reference_bus == "B1"


def test_malformed_json_raises(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(cm.CaseError):
        cm.load_case(path)


def test_unknown_bus_reference_named():
    doc = json.loads(json.dumps(MINIMAL_CASE))
    doc["lines"][0]["destination"] = "B99"
    with pytest.raises(cm.CaseValidationError) as exc:
        cm.loads_case(json.dumps(doc))
    assert "B99" in str(exc.value)


def test_zero_tau_transformer_rejected():
    doc = json.loads(json.dumps(MINIMAL_CASE))
    doc["transformers"] = [{
        "id": "T1", "origin": "B1", "destination": "B2", "g": 0.1, "b": -2.0,
        "tau": 0.0, "theta_shift": 0.0, "g_mag": 0.0, "b_mag": 0.0,
        "s_max": 1.0, "s_max_ctg": 1.0,
    }]
    with pytest.raises(cm.CaseValidationError) as exc:
        cm.loads_case(json.dumps(doc))
    assert "tau > 0" in str(exc.value)


def test_validation_collects_all_violations():
    doc = json.loads(json.dumps(MINIMAL_CASE))
    doc["buses"][0]["v_min"] = -0.1
    doc["lines"][0]["r_max"] = 0.0
    with pytest.raises(cm.CaseValidationError) as exc:
        cm.loads_case(json.dumps(doc))
    assert len(exc.value.violations) >= 2


def test_round_trip_equality(net5, tmp_path):
    path = tmp_path / "case.json"
    cm.write_case(net5, path)
    again = cm.load_case(path)
    assert again == net5


def test_round_trip_text(net2):
    assert cm.loads_case(cm.dumps_case(net2)) == net2


# --- preprocessing -----------------------------------------------------------

def parallel_line_net():
    l1 = make_line("LA", "B1", "B2")
    l2 = make_line("LB", "B1", "B2")
    return two_bus_net(
        lines=(l1, l2),
        contingencies=(
            cm.Contingency("C-LA", "line-outage", "LA", ("G1",)),
            cm.Contingency("C-LB", "line-outage", "LB", ("G1",)),
        ),
    )


def test_parallel_lines_marked_and_contingency_removed():
    net = parallel_line_net()
    new, report = cm.preprocess(net)
    assert report.line_rating_groups == (("LA", "LB"),)
    # brute-force duplicate detection over parameter tuples agrees
    keys = {}
    for e in net.lines:
        keys.setdefault((tuple(sorted((e.origin, e.destination))), e.g, e.b,
                         e.b_ch, e.r_max, e.r_max_ctg), []).append(e.id)
    dup_classes = [sorted(v) for v in keys.values() if len(v) > 1]
    assert dup_classes == [["LA", "LB"]]
    assert report.removed_contingencies == (("C-LB", "C-LA"),)
    assert [k.id for k in new.contingencies] == ["C-LA"]


def test_rating_skip_retained_under_member_outage():
    net = parallel_line_net()
    _, report = cm.preprocess(net)
    assert report.skip_rating_ids() == {"LB"}
    assert report.skip_rating_ids(outaged="LA") == set()
    assert report.skip_rating_ids(outaged="LB") == set()


def test_colocated_generator_aggregate_bounds():
    net = two_bus_net(generators=(
        make_gen("G1", "B1", q_min=-1.0, q_max=1.0),
        make_gen("G2", "B1", q_min=-2.0, q_max=3.0),
    ))
    _, report = cm.preprocess(net)
    assert report.reactive_groups == (("B1", ("G1", "G2"), -3.0, 4.0),)


def test_preprocess_identity_on_clean_net(net5):
    new, report = cm.preprocess(net5)
    assert new == net5
    assert report.removed_contingencies == ()
    assert report.line_rating_groups == ()
    assert report.reactive_groups == ()


def test_preprocess_idempotent():
    net = parallel_line_net()
    once, r1 = cm.preprocess(net)
    twice, r2 = cm.preprocess(once)
    assert twice == once
    assert r2.removed_contingencies == ()
    assert r2.line_rating_groups == r1.line_rating_groups


def test_no_removal_without_identical_counterpart(net5):
    # every outaged component in net5 is electrically unique; brute-force
    # pairwise comparison confirms, and preprocess removes nothing
    new, report = cm.preprocess(net5)
    for a in net5.lines:
        for b in net5.lines:
            if a.id < b.id:
                assert (a.g, a.b, a.r_max) != (b.g, b.b, b.r_max) or \
                    {a.origin, a.destination} != {b.origin, b.destination}
    assert report.removed_contingencies == ()
    assert len(new.contingencies) == len(net5.contingencies)


# --- reactive disaggregation -------------------------------------------------

def test_disaggregate_symmetric_zero():
    gens = [make_gen("G1", "B1", q_min=-1, q_max=1),
            make_gen("G2", "B1", q_min=-1, q_max=1)]
    assert cm.disaggregate_reactive(0.0, gens) == [0.0, 0.0]


def test_disaggregate_forced_upper():
    gens = [make_gen("G1", "B1", q_min=0, q_max=1),
            make_gen("G2", "B1", q_min=0, q_max=3)]
    assert cm.disaggregate_reactive(4.0, gens) == [1.0, 3.0]


def test_disaggregate_proportional():
    gens = [make_gen("G1", "B1", q_min=0, q_max=2),
            make_gen("G2", "B1", q_min=0, q_max=2)]
    out = cm.disaggregate_reactive(2.0, gens)
    assert out == [1.0, 1.0]


def test_disaggregate_infeasible_raises():
    gens = [make_gen("G1", "B1", q_min=0, q_max=1)]
    with pytest.raises(ValueError):
        cm.disaggregate_reactive(2.0, gens)


@given(st.lists(st.tuples(st.floats(-5, 0), st.floats(0, 5)), min_size=1, max_size=6),
       st.floats(0, 1))
def test_disaggregate_sums_and_bounds(ranges, frac):
    gens = [make_gen(f"G{i}", "B1", q_min=lo, q_max=hi)
            for i, (lo, hi) in enumerate(ranges)]
    lo = sum(g.q_min for g in gens)
    hi = sum(g.q_max for g in gens)
    target = lo + frac * (hi - lo)
    out = cm.disaggregate_reactive(target, gens)
    assert abs(sum(out) - target) <= 1e-12 * max(1.0, abs(target))
    for g, q in zip(gens, out):
        assert g.q_min - 1e-12 <= q <= g.q_max + 1e-12
