import math

import numpy as np
import pytest

from scacopf import acpf
from scacopf.acpf import CaseLayout, FlowState
from conftest import make_line, make_xf, two_bus_net


def random_state(net, rng, layout=None):
    nb = len(net.buses)
    ng = len(net.generators)
    nbr = len(net.branches)
    return FlowState(
        v=rng.uniform(0.9, 1.1, nb),
        theta=rng.uniform(-0.4, 0.4, nb),
        bcs=rng.uniform(-0.2, 0.2, nb),
        p_gen=rng.uniform(0.0, 1.5, ng),
        q_gen=rng.uniform(-1.0, 1.0, ng),
        flows=rng.uniform(-1.0, 1.0, (nbr, 4)),
    )


def test_equal_voltage_zero_flow():
    line = make_line("L", "A", "B", g=0.5, b=-5.0, b_ch=0.0)
    p_o, q_o, p_d, q_d = acpf.line_flows(line, 1.0, 1.0, 0.3, 0.3)
    assert abs(p_o) < 1e-15
    assert abs(q_o) < 1e-15


def test_line_reactive_hand_value():
    line = make_line("L", "A", "B", g=0.0, b=-1.0, b_ch=0.2)
    _, q_o, _, _ = acpf.line_flows(line, 1.0, 1.0, 0.0, 0.0)
    assert q_o == pytest.approx(-(-1.0 + 0.1) * 1.0 + (-1.0) * 1.0)
    assert q_o == pytest.approx(-0.1)


def test_line_role_reversal_symmetry(rng):
    for _ in range(20):
        g, b, bch = rng.uniform(0, 1), rng.uniform(-10, -1), rng.uniform(0, 0.5)
        v_o, v_d = rng.uniform(0.9, 1.1, 2)
        th_o, th_d = rng.uniform(-0.5, 0.5, 2)
        line = make_line("L", "A", "B", g=g, b=b, b_ch=bch)
        _, _, p_d, q_d = acpf.line_flows(line, v_o, v_d, th_o, th_d)
        # destination formula equals origin formula with roles swapped
        rev = make_line("L", "B", "A", g=g, b=b, b_ch=bch)
        p_o2, q_o2, _, _ = acpf.line_flows(rev, v_d, v_o, th_d, th_o)
        assert p_d == pytest.approx(p_o2, rel=1e-12, abs=1e-14)
        assert q_d == pytest.approx(q_o2, rel=1e-12, abs=1e-14)


def test_transformer_degenerates_to_line(rng):
    for _ in range(10):
        g, b = rng.uniform(0, 1), rng.uniform(-10, -1)
        v_o, v_d = rng.uniform(0.9, 1.1, 2)
        th_o, th_d = rng.uniform(-0.5, 0.5, 2)
        xf = make_xf("T", "A", "B", g=g, b=b, tau=1.0, theta_shift=0.0,
                     g_mag=0.0, b_mag=0.0)
        line = make_line("L", "A", "B", g=g, b=b, b_ch=0.0)
        np.testing.assert_allclose(
            acpf.transformer_flows(xf, v_o, v_d, th_o, th_d),
            acpf.line_flows(line, v_o, v_d, th_o, th_d), rtol=1e-12, atol=1e-14)


def test_transformer_hand_value():
    xf = make_xf("T", "A", "B", g=0.0, b=-1.0, tau=2.0, theta_shift=0.0,
                 g_mag=0.0, b_mag=0.0)
    p_o, q_o, _, _ = acpf.transformer_flows(xf, 1.0, 1.0, 0.1, 0.1)
    assert p_o == pytest.approx(0.0, abs=1e-15)
    assert q_o == pytest.approx(-(-0.25) * 1.0 + (-0.5) * 1.0)
    assert q_o == pytest.approx(-0.25)


def test_transformer_zero_origin_voltage():
    xf = make_xf("T", "A", "B")
    p_o, q_o, _, _ = acpf.transformer_flows(xf, 0.0, 1.0, 0.2, -0.1)
    assert p_o == 0.0
    assert q_o == 0.0


def test_isolated_bus_zero_residual():
    net = two_bus_net(
        buses=(two_bus_net().buses[0],
               two_bus_net().buses[1].__class__(
                   id="B2", v_min=0.9, v_max=1.1, base_kv=230.0)),
    )
    state = FlowState(np.ones(2), np.zeros(2), np.zeros(2),
                      np.zeros(1), np.zeros(1), np.zeros((1, 4)))
    # exclude the only line so bus 2 is isolated with no load
    bal = acpf.balance_residuals(net, state, outaged="L1")
    assert bal.p_resid[1] == 0.0
    assert bal.q_resid[1] == 0.0


def test_direct_cancellation(net2):
    state = FlowState(np.ones(2), np.zeros(2), np.zeros(2),
                      np.array([0.8]), np.array([0.2]), np.zeros((1, 4)))
    bal = acpf.balance_residuals(net2, state, outaged="L1")
    # G1 at B1 injects 0.8; B2 load is 0.8 with no branches in service
    assert bal.p_resid[0] == pytest.approx(0.8)
    assert bal.p_resid[1] == pytest.approx(-0.8)


def dense_balance_oracle(net, state, outaged=None):
    """Independent dense evaluation of the per-bus balance sums."""
    nb = len(net.buses)
    p = np.zeros(nb)
    q = np.zeros(nb)
    for i, bus in enumerate(net.buses):
        gens = [gi for gi, g in enumerate(net.generators)
                if g.bus == bus.id and g.id != outaged]
        p[i] = sum(state.p_gen[gi] for gi in gens) - bus.p_load \
            - bus.g_fs * state.v[i] ** 2
        q[i] = sum(state.q_gen[gi] for gi in gens) - bus.q_load \
            + (bus.b_fs + state.bcs[i]) * state.v[i] ** 2
        for bi, br in enumerate(net.branches):
            if br.id == outaged:
                continue
            if br.origin == bus.id:
                p[i] -= state.flows[bi, 0]
                q[i] -= state.flows[bi, 1]
            if br.destination == bus.id:
                p[i] -= state.flows[bi, 2]
                q[i] -= state.flows[bi, 3]
    return p, q


def test_balance_matches_dense_oracle(net5, rng):
    state = random_state(net5, rng)
    for outaged in (None, "G2", "L2", "T1"):
        bal = acpf.balance_residuals(net5, state, outaged)
        p_ref, q_ref = dense_balance_oracle(net5, state, outaged)
        np.testing.assert_allclose(bal.p_resid, p_ref, atol=1e-14)
        np.testing.assert_allclose(bal.q_resid, q_ref, atol=1e-14)


def test_rating_three_four_five(net2):
    state = FlowState(np.array([1.0, 1.0]), np.zeros(2), np.zeros(2),
                      np.zeros(1), np.zeros(1),
                      np.array([[3.0, 4.0, 0.0, 0.0]]))
    net = two_bus_net(lines=(make_line("L1", "B1", "B2", r_max=5.0, r_max_ctg=5.0),))
    lhs_o, lhs_d, rhs_o, rhs_d = acpf.rating_values(net, state)
    assert lhs_o[0] == pytest.approx(25.0)
    assert rhs_o[0] == pytest.approx(5.0)
    assert lhs_d[0] == pytest.approx(0.0)


def test_squared_form_equivalent_to_norm_form(net5, rng):
    for _ in range(200):
        state = random_state(net5, rng)
        sigma = rng.uniform(0, 0.5)
        lhs_o, _, rhs_o, _ = acpf.rating_values(net5, state)
        for bi in range(len(net5.branches)):
            squared_ok = lhs_o[bi] <= (rhs_o[bi] + sigma) ** 2
            norm_ok = math.sqrt(lhs_o[bi]) <= rhs_o[bi] + sigma
            assert squared_ok == norm_ok


def test_resistive_dissipation(rng):
    # for a lossy line with no charging, p_o + p_d >= 0 on random states
    for _ in range(1000):
        g = rng.uniform(0.0, 2.0)
        b = rng.uniform(-10.0, -0.5)
        line = make_line("L", "A", "B", g=g, b=b, b_ch=0.0)
        v_o, v_d = rng.uniform(0.9, 1.1, 2)
        th_o, th_d = rng.uniform(-0.6, 0.6, 2)
        p_o, _, p_d, _ = acpf.line_flows(line, v_o, v_d, th_o, th_d)
        assert p_o + p_d >= -1e-12


# --- derivative checks -------------------------------------------------------

def fd_jacobian(fun, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2 * h)
    return J


@pytest.mark.parametrize("outaged", [None, "G2", "L2", "T1"])
def test_jacobian_matches_finite_differences(net5, rng, outaged):
    layout = CaseLayout(net5, outaged)
    for _ in range(5):
        state = random_state(net5, rng)
        x0 = layout.pack(state)

        def expr(x):
            return acpf.expression_values(layout, layout.unpack(x))

        J, _ = acpf.jacobians(net5, state, outaged, layout=layout)
        J_fd = fd_jacobian(expr, x0)
        scale = np.maximum(np.abs(J_fd), 1.0)
        assert np.max(np.abs(J.toarray() - J_fd) / scale) < 1e-5


def test_flow_rows_have_no_bcs_columns(net5, rng):
    layout = CaseLayout(net5)
    state = random_state(net5, rng)
    J, _ = acpf.jacobians(net5, state, layout=layout)
    n_flow_rows = len(layout.flow_rows)
    bcs_cols = J.toarray()[:n_flow_rows, layout.bcs0:layout.bcs0 + layout.nb]
    assert np.all(bcs_cols == 0.0)


def test_hessian_matches_finite_differences(net5, rng):
    layout = CaseLayout(net5)
    state = random_state(net5, rng)
    x0 = layout.pack(state)
    weights = rng.uniform(-1, 1, layout.nrows)

    def weighted(x):
        return float(weights @ acpf.expression_values(layout, layout.unpack(x)))

    H = acpf.hessians(net5, state, weights=weights, layout=layout).toarray()
    H_full = H + H.T - np.diag(np.diag(H))
    H_fd = fd_jacobian(lambda x: fd_jacobian(weighted, x, 1e-4).ravel(), x0, 1e-4)
    scale = np.maximum(np.abs(H_fd), 1.0)
    assert np.max(np.abs(H_full - H_fd) / scale) < 1e-4


def test_hessian_lower_triangle_symmetric(net5, rng):
    layout = CaseLayout(net5)
    state = random_state(net5, rng)
    H = acpf.hessians(net5, state, layout=layout)
    assert np.all(H.row >= H.col)
    Hd = H.toarray()
    full = Hd + Hd.T - np.diag(np.diag(Hd))
    np.testing.assert_allclose(full, full.T)
