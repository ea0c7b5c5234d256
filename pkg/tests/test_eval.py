"""Tests for the fast/full contingency evaluation engines."""

import numpy as np
import pytest

from conftest import make_bus, make_gen, make_line

from scacopf import compl, eval as ev, nlp, scopf
from scacopf.acpf import balance_residuals
from scacopf.case_model import Contingency, Network, PenaltyConfig


@pytest.fixture(scope="module")
def solved5():
    from conftest import five_bus_net
    net = five_bus_net()
    prob = scopf.build_base_problem(net)
    sol = nlp.solve_nlp(prob, tol=1e-8)
    assert sol.status == "optimal"
    return net, prob.meta.extract_base(sol.x)


def idle_gen_net():
    """G2 is idle at the base optimum, so outaging it changes nothing."""
    net = Network(
        buses=(make_bus("B1"), make_bus("B2", p_load=0.8, q_load=0.2)),
        generators=(
            make_gen("G1", "B1"),
            make_gen("G2", "B2", p_min=0.0, p_max=0.0, q_min=0.0, q_max=0.0),
        ),
        lines=(make_line("L1", "B1", "B2"),),
        transformers=(),
        contingencies=(
            Contingency("KG2", "generator-outage", "G2", ("G1",)),
        ),
        penalty_config=PenaltyConfig(),
        reference_bus="B1",
    )
    return net


def test_fast_zero_penalty_on_noop_outage():
    net = idle_gen_net()
    prob = scopf.build_base_problem(net)
    sol = nlp.solve_nlp(prob, tol=1e-8)
    base = prob.meta.extract_base(sol.x)
    res = ev.fast_evaluate(net, net.contingency("KG2"), base)
    assert res.method == "fast"
    assert res.penalty == pytest.approx(0.0, abs=1e-8)


def test_upper_bound_property(solved5):
    # fast penalty is an upper bound on the full optimum for the same
    # segments: full seeded with the fast result's segment assignment
    net, base = solved5
    for k in net.contingencies:
        fast = ev.fast_evaluate(net, k, base)
        full = ev.full_evaluate(net, k, base, init_compl=fast.compl)
        assert fast.penalty >= full.penalty - 1e-6


def test_full_not_worse_than_initial_segment_nlp(solved5):
    net, base = solved5
    for k in net.contingencies:
        if k.kind == "generator-outage":
            st = compl.init_generator_outage(net, k, base)
        else:
            st = compl.init_default(net, k)
        prob = scopf.build_contingency_problem(net, k, base, st)
        sol = nlp.solve_nlp(prob, tol=1e-8)
        point = prob.meta.extract_ctg(sol.x, k.id)
        repriced = scopf.slacks_from_state(
            net, scopf.flows_from_state(net, point.state, k.outaged),
            k.outaged, ctg_ratings=True, delta=point.delta)
        init_pen = scopf.point_penalty(net, repriced, k.outaged)
        full = ev.full_evaluate(net, k, base)
        assert full.penalty <= init_pen + 1e-9


def test_penalty_is_explicit_and_slack_consistent(solved5):
    net, base = solved5
    for k in net.contingencies:
        for res in (ev.fast_evaluate(net, k, base),
                    ev.full_evaluate(net, k, base)):
            # reported penalty equals the priced slacks of the returned point
            assert res.penalty == pytest.approx(
                scopf.point_penalty(net, res.point, k.outaged), abs=1e-12)
            # slacks absorb balance residuals exactly
            bal = balance_residuals(net, res.point.state, k.outaged)
            np.testing.assert_allclose(
                bal.p_resid + res.point.sig_p_plus - res.point.sig_p_minus,
                0.0, atol=1e-8)
            np.testing.assert_allclose(
                bal.q_resid + res.point.sig_q_plus - res.point.sig_q_minus,
                0.0, atol=1e-8)
            assert res.penalty >= 0.0


def test_fast_infinite_cutoff_runs_loop(solved5):
    net, base = solved5
    k = net.contingency("CL2")
    with_inf = ev.fast_evaluate(net, k, base, cutoff=np.inf)
    with_zero = ev.fast_evaluate(net, k, base, cutoff=0.0)
    assert with_inf.penalty == pytest.approx(with_zero.penalty, abs=1e-12)


def test_fast_newton_failure_falls_back(solved5, monkeypatch):
    net, base = solved5
    k = net.contingency("CG2")
    from scacopf.nlp import SquareResult

    def broken(fun, jac, x0, **kw):
        return SquareResult(np.full_like(np.asarray(x0, float), np.nan),
                            "failed", 1, np.inf)

    monkeypatch.setattr(ev, "solve_square", broken)
    res = ev.fast_evaluate(net, k, base)
    assert res.status == "fallback"
    assert np.isfinite(res.penalty)
    # the fallback equals the projected base point's priced slacks
    st = compl.init_generator_outage(net, k, base)
    fb = compl.project_response(st, net, k, base, base)
    assert res.penalty == pytest.approx(
        scopf.point_penalty(net, fb, k.outaged), abs=1e-12)


def test_full_degrades_to_fast_on_nlp_failure(solved5, monkeypatch):
    net, base = solved5
    k = net.contingency("CL2")

    real = nlp.solve_nlp

    def broken(prob, **kw):
        sol = real(prob, **{**kw, "max_iter": 1})
        sol.status = "numerical_failure"
        return sol

    monkeypatch.setattr(ev, "solve_nlp", broken)
    res = ev.full_evaluate(net, k, base)
    assert res.method == "fast"
    assert res.status == "degraded"
    assert np.isfinite(res.penalty)


def test_prescreen_low_fast_penalty_skips_full(solved5):
    net, base = solved5
    res = ev.prescreen_then_evaluate(net, net.contingency("CT1"), base)
    assert res.method == "fast"
    assert res.penalty <= ev.default_cutoff(net)


def test_prescreen_escalates_to_full(solved5):
    net, base = solved5
    res = ev.prescreen_then_evaluate(net, net.contingency("CG2"), base)
    assert res.method == "full"
    fast = ev.fast_evaluate(net, net.contingency("CG2"), base)
    assert fast.penalty > ev.default_cutoff(net)
    assert res.penalty <= fast.penalty + 1e-9


def test_default_cutoff_value(net5):
    # one slack at the 2e-2 threshold prices on the first penalty segment
    assert ev.default_cutoff(net5) == pytest.approx(2e-2 * 1e3, rel=1e-12)


def test_deterministic_budget_reproducible(solved5):
    net, base = solved5
    k = net.contingency("CG2")
    a = ev.full_evaluate(net, k, base, time_limit=5.0, deterministic=True)
    b = ev.full_evaluate(net, k, base, time_limit=5.0, deterministic=True)
    assert a.penalty == b.penalty
    np.testing.assert_array_equal(a.point.state.v, b.point.state.v)


def test_evaluation_result_fields(solved5):
    net, base = solved5
    res = ev.fast_evaluate(net, net.contingency("CL2"), base,
                           base_tag="base-1")
    assert res.contingency_id == "CL2"
    assert res.base_tag == "base-1"
    assert res.elapsed >= 0.0
