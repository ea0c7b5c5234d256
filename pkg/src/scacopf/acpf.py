"""Polar AC power-flow expressions, residuals, ratings, and sparse derivatives.

Every branch-side flow expression has the common form

    F = K v_x^2 + (P cos d + Q sin d) v_o v_d,      d = th_o - th_d - phi,

where (K, P, Q), the squared-voltage side x, and the phase offset phi depend
on the branch type and side.  All first and second derivatives below are
analytic evaluations of this form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .case_model import Line, Network, Transformer

__all__ = [
    "FlowState",
    "BalanceResiduals",
    "CaseLayout",
    "line_flows",
    "transformer_flows",
    "branch_flows",
    "flow_jacobian",
    "flow_hessians",
    "balance_residuals",
    "rating_values",
    "jacobians",
    "hessians",
]


@dataclass
class FlowState:
    """Full per-case variable assignment (per-unit, angles in radians)."""

    v: np.ndarray
    theta: np.ndarray
    bcs: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    # flows[b] = (p_o, q_o, p_d, q_d) for branch b (lines then transformers)
    flows: np.ndarray

    def copy(self):
        return FlowState(self.v.copy(), self.theta.copy(), self.bcs.copy(),
                         self.p_gen.copy(), self.q_gen.copy(), self.flows.copy())


@dataclass
class BalanceResiduals:
    p_resid: np.ndarray
    q_resid: np.ndarray


def _side_coeffs(br):
    """Per-side (K, P, Q, x_is_origin) tuples for (p_o, q_o, p_d, q_d), plus phi."""
    if isinstance(br, Line):
        g, b = br.g, br.b
        bs = b + br.b_ch / 2.0
        return [
            (g, -g, -b, True),
            (-bs, b, -g, True),
            (g, -g, b, False),
            (-bs, b, g, False),
        ], 0.0
    g, b = br.g, br.b
    t = br.tau
    return [
        (g / t**2 + br.g_mag, -g / t, -b / t, True),
        (-(b / t**2 + br.b_mag), b / t, -g / t, True),
        (g, -g / t, b / t, False),
        (-b, b / t, g / t, False),
    ], br.theta_shift


def branch_flows(br, v_o, v_d, th_o, th_d):
    """Flows (p_o, q_o, p_d, q_d) into a line or transformer from both ends."""
    coeffs, phi = _side_coeffs(br)
    d = th_o - th_d - phi
    c, s = math.cos(d), math.sin(d)
    vv = v_o * v_d
    out = np.empty(4)
    for i, (K, P, Q, at_origin) in enumerate(coeffs):
        vx = v_o if at_origin else v_d
        out[i] = K * vx * vx + (P * c + Q * s) * vv
    return out


def line_flows(line, v_o, v_d, th_o, th_d):
    p_o, q_o, p_d, q_d = branch_flows(line, v_o, v_d, th_o, th_d)
    return p_o, q_o, p_d, q_d


def transformer_flows(xf, v_o, v_d, th_o, th_d):
    p_o, q_o, p_d, q_d = branch_flows(xf, v_o, v_d, th_o, th_d)
    return p_o, q_o, p_d, q_d


def flow_jacobian(br, v_o, v_d, th_o, th_d):
    """4x4 Jacobian of (p_o, q_o, p_d, q_d) w.r.t. (v_o, v_d, th_o, th_d)."""
    coeffs, phi = _side_coeffs(br)
    d = th_o - th_d - phi
    c, s = math.cos(d), math.sin(d)
    vv = v_o * v_d
    J = np.zeros((4, 4))
    for i, (K, P, Q, at_origin) in enumerate(coeffs):
        T = P * c + Q * s
        Tp = -P * s + Q * c
        J[i, 0] = (2.0 * K * v_o if at_origin else 0.0) + T * v_d
        J[i, 1] = (0.0 if at_origin else 2.0 * K * v_d) + T * v_o
        J[i, 2] = Tp * vv
        J[i, 3] = -Tp * vv
    return J


def flow_hessians(br, v_o, v_d, th_o, th_d):
    """Stack of four symmetric 4x4 Hessians, one per flow component."""
    coeffs, phi = _side_coeffs(br)
    d = th_o - th_d - phi
    c, s = math.cos(d), math.sin(d)
    vv = v_o * v_d
    H = np.zeros((4, 4, 4))
    for i, (K, P, Q, at_origin) in enumerate(coeffs):
        T = P * c + Q * s
        Tp = -P * s + Q * c
        h = H[i]
        if at_origin:
            h[0, 0] = 2.0 * K
        else:
            h[1, 1] = 2.0 * K
        h[0, 1] = h[1, 0] = T
        h[0, 2] = h[2, 0] = Tp * v_d
        h[0, 3] = h[3, 0] = -Tp * v_d
        h[1, 2] = h[2, 1] = Tp * v_o
        h[1, 3] = h[3, 1] = -Tp * v_o
        h[2, 2] = h[3, 3] = -T * vv
        h[2, 3] = h[3, 2] = T * vv
    return H


class CaseLayout:
    """Flat variable layout and expression-row bookkeeping for one case.

    Variable order: v, theta, bcs (per bus), p_gen, q_gen (per generator),
    then (p_o, q_o, p_d, q_d) per branch with lines before transformers.
    Rows: flow expressions for in-service branches, then per-bus P and Q
    balance, then origin/destination rating expressions for in-service
    branches.  The outaged component (if any) contributes no rows and its
    generator/flow columns are never referenced.
    """

    def __init__(self, net: Network, outaged=None):
        self.net = net
        self.outaged = outaged
        nb = len(net.buses)
        ng = len(net.generators)
        nbr = len(net.branches)
        self.nb, self.ng, self.nbr = nb, ng, nbr
        self.v0 = 0
        self.th0 = nb
        self.bcs0 = 2 * nb
        self.p0 = 3 * nb
        self.q0 = 3 * nb + ng
        self.fl0 = 3 * nb + 2 * ng
        self.nvar = 3 * nb + 2 * ng + 4 * nbr

        self.in_service = [
            (bi, br) for bi, br in enumerate(net.branches) if br.id != outaged
        ]
        self.avail_gens = [
            (gi, g) for gi, g in enumerate(net.generators) if g.id != outaged
        ]
        self.flow_rows = [("flow", bi, comp) for bi, _ in self.in_service for comp in range(4)]
        self.bal_rows = ([("balP", i) for i in range(nb)] + [("balQ", i) for i in range(nb)])
        self.rating_rows = [(side, bi) for bi, _ in self.in_service for side in ("ratO", "ratD")]
        self.rows = self.flow_rows + self.bal_rows + self.rating_rows
        self.nrows = len(self.rows)

    def flow_col(self, bi, comp):
        return self.fl0 + 4 * bi + comp

    def pack(self, state: FlowState):
        x = np.empty(self.nvar)
        nb, ng = self.nb, self.ng
        x[self.v0:self.v0 + nb] = state.v
        x[self.th0:self.th0 + nb] = state.theta
        x[self.bcs0:self.bcs0 + nb] = state.bcs
        x[self.p0:self.p0 + ng] = state.p_gen
        x[self.q0:self.q0 + ng] = state.q_gen
        x[self.fl0:] = state.flows.reshape(-1)
        return x

    def unpack(self, x):
        nb, ng = self.nb, self.ng
        return FlowState(
            v=x[self.v0:self.v0 + nb].copy(),
            theta=x[self.th0:self.th0 + nb].copy(),
            bcs=x[self.bcs0:self.bcs0 + nb].copy(),
            p_gen=x[self.p0:self.p0 + ng].copy(),
            q_gen=x[self.q0:self.q0 + ng].copy(),
            flows=x[self.fl0:].reshape(self.nbr, 4).copy(),
        )

    def branch_ends(self, br):
        return self.net.bus_index(br.origin), self.net.bus_index(br.destination)


def balance_residuals(net, state, outaged=None):
    """Per-bus active/reactive mismatch before slacks, excluding the outage."""
    nb = len(net.buses)
    p = np.zeros(nb)
    q = np.zeros(nb)
    for i, bus in enumerate(net.buses):
        vi = state.v[i]
        p[i] = -bus.p_load - bus.g_fs * vi * vi
        q[i] = -bus.q_load + (bus.b_fs + state.bcs[i]) * vi * vi
    for gi, g in enumerate(net.generators):
        if g.id == outaged:
            continue
        i = net.bus_index(g.bus)
        p[i] += state.p_gen[gi]
        q[i] += state.q_gen[gi]
    for bi, br in enumerate(net.branches):
        if br.id == outaged:
            continue
        o, d = net.bus_index(br.origin), net.bus_index(br.destination)
        p_o, q_o, p_d, q_d = state.flows[bi]
        p[o] -= p_o
        q[o] -= q_o
        p[d] -= p_d
        q[d] -= q_d
    return BalanceResiduals(p, q)


def rating_values(net, state, use_ctg_ratings=False):
    """Squared-flow magnitudes and un-squared rating bases for every branch.

    Returns (lhs_o, lhs_d, rhs_base_o, rhs_base_d) arrays over branches.  For
    a line the rating base is ``r_max * v`` at the corresponding end; for a
    transformer it is ``s_max`` at both ends.  Slacks are not applied here.
    """
    nbr = len(net.branches)
    lhs_o = np.empty(nbr)
    lhs_d = np.empty(nbr)
    rhs_o = np.empty(nbr)
    rhs_d = np.empty(nbr)
    for bi, br in enumerate(net.branches):
        o, d = net.bus_index(br.origin), net.bus_index(br.destination)
        p_o, q_o, p_d, q_d = state.flows[bi]
        lhs_o[bi] = p_o * p_o + q_o * q_o
        lhs_d[bi] = p_d * p_d + q_d * q_d
        if isinstance(br, Line):
            r = br.r_max_ctg if use_ctg_ratings else br.r_max
            rhs_o[bi] = r * state.v[o]
            rhs_d[bi] = r * state.v[d]
        else:
            smax = br.s_max_ctg if use_ctg_ratings else br.s_max
            rhs_o[bi] = smax
            rhs_d[bi] = smax
    return lhs_o, lhs_d, rhs_o, rhs_d


def expression_values(layout: CaseLayout, state: FlowState, use_ctg_ratings=False):
    """Values of all flow/balance/rating expressions in row order.

    Flow rows are the flow expressions themselves (functions of v, theta);
    balance rows follow `balance_residuals`; rating rows are
    ``lhs - rhs_base**2`` with no slack applied.
    """
    net = layout.net
    vals = np.empty(layout.nrows)
    r = 0
    for bi, br in layout.in_service:
        o, d = layout.branch_ends(br)
        vals[r:r + 4] = branch_flows(br, state.v[o], state.v[d],
                                     state.theta[o], state.theta[d])
        r += 4
    bal = balance_residuals(net, state, layout.outaged)
    nb = layout.nb
    vals[r:r + nb] = bal.p_resid
    vals[r + nb:r + 2 * nb] = bal.q_resid
    r += 2 * nb
    lhs_o, lhs_d, rhs_o, rhs_d = rating_values(net, state, use_ctg_ratings)
    for bi, _ in layout.in_service:
        vals[r] = lhs_o[bi] - rhs_o[bi] ** 2
        vals[r + 1] = lhs_d[bi] - rhs_d[bi] ** 2
        r += 2
    return vals


def jacobians(net, state, outaged=None, use_ctg_ratings=False, layout=None):
    """Sparse first derivatives of all flow/balance/rating expressions.

    Returns ``(J, layout)`` with J a CSR matrix of shape
    ``(layout.nrows, layout.nvar)`` and deterministic entry ordering.
    """
    if layout is None:
        layout = CaseLayout(net, outaged)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    r = 0
    for bi, br in layout.in_service:
        o, d = layout.branch_ends(br)
        J = flow_jacobian(br, state.v[o], state.v[d], state.theta[o], state.theta[d])
        cvars = (layout.v0 + o, layout.v0 + d, layout.th0 + o, layout.th0 + d)
        for comp in range(4):
            for j, col in enumerate(cvars):
                add(r + comp, col, J[comp, j])
        r += 4

    nb = layout.nb
    rP, rQ = r, r + nb
    for i, bus in enumerate(net.buses):
        vi = state.v[i]
        add(rP + i, layout.v0 + i, -2.0 * bus.g_fs * vi)
        add(rQ + i, layout.v0 + i, 2.0 * (bus.b_fs + state.bcs[i]) * vi)
        add(rQ + i, layout.bcs0 + i, vi * vi)
    for gi, g in layout.avail_gens:
        i = net.bus_index(g.bus)
        add(rP + i, layout.p0 + gi, 1.0)
        add(rQ + i, layout.q0 + gi, 1.0)
    for bi, br in layout.in_service:
        o, d = layout.branch_ends(br)
        add(rP + o, layout.flow_col(bi, 0), -1.0)
        add(rQ + o, layout.flow_col(bi, 1), -1.0)
        add(rP + d, layout.flow_col(bi, 2), -1.0)
        add(rQ + d, layout.flow_col(bi, 3), -1.0)
    r += 2 * nb

    for bi, br in layout.in_service:
        o, d = layout.branch_ends(br)
        p_o, q_o, p_d, q_d = state.flows[bi]
        add(r, layout.flow_col(bi, 0), 2.0 * p_o)
        add(r, layout.flow_col(bi, 1), 2.0 * q_o)
        add(r + 1, layout.flow_col(bi, 2), 2.0 * p_d)
        add(r + 1, layout.flow_col(bi, 3), 2.0 * q_d)
        if isinstance(br, Line):
            rr = br.r_max_ctg if use_ctg_ratings else br.r_max
            add(r, layout.v0 + o, -2.0 * rr * rr * state.v[o])
            add(r + 1, layout.v0 + d, -2.0 * rr * rr * state.v[d])
        r += 2

    J = sparse.coo_matrix((vals, (rows, cols)), shape=(layout.nrows, layout.nvar))
    return J.tocsr(), layout


def hessians(net, state, outaged=None, weights=None, use_ctg_ratings=False, layout=None):
    """Weighted sum of expression Hessians as a lower-triangle COO matrix.

    ``weights`` is a vector over expression rows (defaults to all ones); the
    result is the lower triangle of ``sum_r weights[r] * hess(expr_r)``.
    """
    if layout is None:
        layout = CaseLayout(net, outaged)
    if weights is None:
        weights = np.ones(layout.nrows)
    rows, cols, vals = [], [], []

    def add(a, b, v):
        if v == 0.0:
            return
        if a < b:
            a, b = b, a
        rows.append(a)
        cols.append(b)
        vals.append(v)

    r = 0
    for bi, br in layout.in_service:
        o, d = layout.branch_ends(br)
        w = weights[r:r + 4]
        if np.any(w):
            H = flow_hessians(br, state.v[o], state.v[d], state.theta[o], state.theta[d])
            Hw = np.tensordot(w, H, axes=1)
            cvars = (layout.v0 + o, layout.v0 + d, layout.th0 + o, layout.th0 + d)
            for a in range(4):
                for b in range(a + 1):
                    add(cvars[a], cvars[b], Hw[a, b])
        r += 4

    nb = layout.nb
    for i, bus in enumerate(net.buses):
        wP = weights[r + i]
        wQ = weights[r + nb + i]
        vi = state.v[i]
        add(layout.v0 + i, layout.v0 + i,
            -2.0 * bus.g_fs * wP + 2.0 * (bus.b_fs + state.bcs[i]) * wQ)
        add(layout.v0 + i, layout.bcs0 + i, 2.0 * vi * wQ)
    r += 2 * nb

    for bi, br in layout.in_service:
        for side in range(2):
            w = weights[r + side]
            if w == 0.0:
                continue
            cp = layout.flow_col(bi, 2 * side)
            cq = layout.flow_col(bi, 2 * side + 1)
            add(cp, cp, 2.0 * w)
            add(cq, cq, 2.0 * w)
            if isinstance(br, Line):
                rr = br.r_max_ctg if use_ctg_ratings else br.r_max
                end = br.origin if side == 0 else br.destination
                i = net.bus_index(end)
                add(layout.v0 + i, layout.v0 + i, -2.0 * rr * rr * w)
        r += 2

    H = sparse.coo_matrix((vals, (rows, cols)), shape=(layout.nvar, layout.nvar))
    H.sum_duplicates()
    return H
