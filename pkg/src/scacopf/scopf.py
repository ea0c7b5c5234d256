"""Concrete NLP instances: base-case dispatch, single-contingency penalty
minimization, and the master problem over a selected contingency subset.

Piecewise-linear generation costs and constraint-violation penalties are
realized with epigraph auxiliary variables and affine inequalities.  Flow
definitions stay as explicit equations over flow variables (no elimination).
Every branch rating pair shares one nonnegative slack entering inside the
square of the rating bound; bus balance carries split +/- slack pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .acpf import CaseLayout, FlowState, branch_flows, expression_values, \
    balance_residuals, rating_values, jacobians, hessians
from .case_model import Line, Network, PenaltyConfig
from .nlp import NlpProblem

__all__ = [
    "OperatingPoint",
    "MasterSpec",
    "CaseStructure",
    "generation_cost",
    "penalty_cost",
    "point_penalty",
    "slacks_from_state",
    "build_base_problem",
    "build_contingency_problem",
    "build_master_problem",
    "total_score",
]

INF = float("inf")


@dataclass
class OperatingPoint:
    """A flow state plus the slack bundles of one case (base or contingency).

    Slack arrays are indexed in network order; entries for an outaged branch
    are zero.  `delta` is the response perturbation of a contingency point.
    """

    state: FlowState
    sig_p_plus: np.ndarray
    sig_p_minus: np.ndarray
    sig_q_plus: np.ndarray
    sig_q_minus: np.ndarray
    sig_s: np.ndarray
    delta: float = 0.0

    def copy(self):
        return OperatingPoint(
            state=self.state.copy(),
            sig_p_plus=self.sig_p_plus.copy(),
            sig_p_minus=self.sig_p_minus.copy(),
            sig_q_plus=self.sig_q_plus.copy(),
            sig_q_minus=self.sig_q_minus.copy(),
            sig_s=self.sig_s.copy(),
            delta=self.delta,
        )

    def slack_vector(self):
        """All slacks in canonical order: bus P, bus Q, line, transformer."""
        return np.concatenate([
            self.sig_p_plus + self.sig_p_minus,
            self.sig_q_plus + self.sig_q_minus,
            self.sig_s,
        ])


# --- piecewise-linear functions ----------------------------------------------

def _pwl_segments(breaks_and_slopes):
    """[(start, slope, value_at_start)] for a curve given as (break, slope)."""
    segs = []
    start = 0.0
    val = 0.0
    for brk, slope in breaks_and_slopes:
        segs.append((start, slope, val))
        val += slope * (brk - start)
        start = brk
    return segs, start, val


def _pwl_value(segs, last_start, last_val, last_slope, x):
    if x >= last_start:
        return last_val + last_slope * (x - last_start)
    for start, slope, val in reversed(segs):
        if x >= start:
            return val + slope * (x - start)
    # below the first knot: extrapolate the first slope
    start, slope, val = segs[0]
    return val + slope * (x - start)


def _cost_pieces(curve):
    segs, last_start, last_val = _pwl_segments(curve)
    last_slope = curve[-1][1] if curve else 0.0
    return segs, last_start, last_val, last_slope


def _penalty_pieces(cfg: PenaltyConfig):
    segs, last_start, last_val = _pwl_segments(zip(cfg.breakpoints, cfg.slopes))
    return segs, last_start, last_val, cfg.slopes[-1]


def _affine_lines(segs, last_start, last_val, last_slope):
    """Supporting lines (slope, intercept) whose max equals the convex PWL."""
    lines = [(slope, val - slope * start) for start, slope, val in segs]
    lines.append((last_slope, last_val - last_slope * last_start))
    # the last segment of `segs` and the tail line coincide when segs is empty
    dedup = []
    for ln in lines:
        if not dedup or ln != dedup[-1]:
            dedup.append(ln)
    return dedup


def generation_cost(net: Network, p_gen):
    """Total convex piecewise-linear generation cost at active outputs p_gen."""
    total = 0.0
    for gi, g in enumerate(net.generators):
        if not g.cost_curve:
            continue
        total += _pwl_value(*_cost_pieces(g.cost_curve), float(p_gen[gi]))
    return total


def penalty_cost(cfg: PenaltyConfig, slack_total):
    """Convex piecewise-linear penalty of one nonnegative slack value."""
    s = float(slack_total)
    if s <= 0.0:
        return 0.0
    return _pwl_value(*_penalty_pieces(cfg), s)


def point_penalty(net: Network, point: OperatingPoint, outaged=None):
    """Explicit penalty of an operating point: sum over all its slacks."""
    cfg = net.penalty_config
    total = 0.0
    for i in range(len(net.buses)):
        total += penalty_cost(cfg, point.sig_p_plus[i])
        total += penalty_cost(cfg, point.sig_p_minus[i])
        total += penalty_cost(cfg, point.sig_q_plus[i])
        total += penalty_cost(cfg, point.sig_q_minus[i])
    for bi, br in enumerate(net.branches):
        if br.id == outaged:
            continue
        total += penalty_cost(cfg, point.sig_s[bi])
    return total


def slacks_from_state(net: Network, state: FlowState, outaged=None,
                      ctg_ratings=False, delta=0.0):
    """Operating point whose slacks exactly absorb the state's residuals.

    This is the unique minimal-slack assignment making the point feasible;
    flows in `state` are trusted as given.
    """
    bal = balance_residuals(net, state, outaged)
    lhs_o, lhs_d, rhs_o, rhs_d = rating_values(net, state, ctg_ratings)
    nbr = len(net.branches)
    sig_s = np.zeros(nbr)
    for bi, br in enumerate(net.branches):
        if br.id == outaged:
            continue
        need_o = np.sqrt(lhs_o[bi]) - rhs_o[bi]
        need_d = np.sqrt(lhs_d[bi]) - rhs_d[bi]
        sig_s[bi] = max(0.0, need_o, need_d)
    return OperatingPoint(
        state=state.copy(),
        sig_p_plus=np.maximum(0.0, -bal.p_resid),
        sig_p_minus=np.maximum(0.0, bal.p_resid),
        sig_q_plus=np.maximum(0.0, -bal.q_resid),
        sig_q_minus=np.maximum(0.0, bal.q_resid),
        sig_s=sig_s,
        delta=delta,
    )


def flows_from_state(net: Network, state: FlowState, outaged=None):
    """Recompute branch flow variables from voltages via the flow equations."""
    out = state.copy()
    for bi, br in enumerate(net.branches):
        if br.id == outaged:
            out.flows[bi] = 0.0
            continue
        o, d = net.bus_index(br.origin), net.bus_index(br.destination)
        out.flows[bi] = branch_flows(br, state.v[o], state.v[d],
                                     state.theta[o], state.theta[d])
    return out


def default_start(net: Network, outaged=None, ctg_ratings=False):
    """Neutral interior starting point: midpoints, zero angles, defined flows."""
    nb = len(net.buses)
    ng = len(net.generators)
    state = FlowState(
        v=np.array([(b.v_min + b.v_max) / 2 for b in net.buses]),
        theta=np.zeros(nb),
        bcs=np.array([(b.bcs_min + b.bcs_max) / 2 for b in net.buses]),
        p_gen=np.array([(g.p_min + g.p_max) / 2 for g in net.generators]),
        q_gen=np.array([(g.q_min + g.q_max) / 2 for g in net.generators]),
        flows=np.zeros((len(net.branches), 4)),
    )
    state = flows_from_state(net, state, outaged)
    return slacks_from_state(net, state, outaged, ctg_ratings)


# --- problem assembly --------------------------------------------------------

class _Block:
    """Variables and rows of one case (base or one contingency).

    Block-local variable order: live state columns (per `CaseLayout` with the
    outaged generator/branch columns removed), bus slack quadruple, shared
    rating slacks for rated branches, penalty epigraph auxiliaries (one per
    slack), then cost epigraph auxiliaries (base block only).
    Equality rows: flow definitions, P/Q balance, reference angle.
    Inequality rows: rating pairs, penalty epigraph, cost epigraph.
    """

    def __init__(self, net: Network, outaged=None, ctg_ratings=False,
                 skip_rating=(), with_cost=False, pen_weight=1.0):
        self.net = net
        self.outaged = outaged
        self.ctg_ratings = ctg_ratings
        self.pen_weight = pen_weight
        lay = CaseLayout(net, outaged)
        self.layout = lay
        nb, ng = lay.nb, lay.ng

        dead = set()
        if outaged is not None:
            for gi, g in enumerate(net.generators):
                if g.id == outaged:
                    dead.update((lay.p0 + gi, lay.q0 + gi))
            for bi, br in enumerate(net.branches):
                if br.id == outaged:
                    dead.update(lay.flow_col(bi, c) for c in range(4))
        self.keep = np.array([c for c in range(lay.nvar) if c not in dead],
                             dtype=int)
        self.pos = np.full(lay.nvar, -1, dtype=int)
        self.pos[self.keep] = np.arange(len(self.keep))
        self.n_state = len(self.keep)

        skip = set(skip_rating)
        self.rated = [(bi, br) for bi, br in lay.in_service if br.id not in skip]
        nr = len(self.rated)
        o = self.n_state
        self.sPp0, self.sPm0 = o, o + nb
        self.sQp0, self.sQm0 = o + 2 * nb, o + 3 * nb
        self.sS0 = o + 4 * nb
        self.n_slacks = 4 * nb + nr
        self.pen0 = self.sS0 + nr
        self.cost_gens = ([(gi, g) for gi, g in lay.avail_gens if g.cost_curve]
                          if with_cost else [])
        self.cost0 = self.pen0 + self.n_slacks
        self.nvar = self.cost0 + len(self.cost_gens)

        self.pen_lines = _affine_lines(*_penalty_pieces(net.penalty_config))
        self.cost_lines = [
            (gi, _affine_lines(*_cost_pieces(g.cost_curve)))
            for gi, g in self.cost_gens
        ]

        m = len(lay.in_service)
        self.eq_flow0 = 0
        self.eq_bal0 = 4 * m
        self.eq_ref = 4 * m + 2 * nb
        self.n_eq = self.eq_ref + 1
        self.ineq_rat0 = 0
        self.ineq_pen0 = 2 * nr
        self.ineq_cost0 = self.ineq_pen0 + self.n_slacks * len(self.pen_lines)
        self.n_ineq = self.ineq_cost0 + sum(len(lines) for _, lines in self.cost_lines)
        self.ref_idx = net.bus_index(net.reference_bus)

        # acpf expression-row dispositions: (kind, target row) per layout row
        self.rat_row = {}
        for j, (bi, _) in enumerate(self.rated):
            self.rat_row[bi] = self.ineq_rat0 + 2 * j
        self._svc_pos = {bi: j for j, (bi, _) in enumerate(lay.in_service)}

    def bounds(self):
        lay, net = self.layout, self.net
        lb_full = np.full(lay.nvar, -INF)
        ub_full = np.full(lay.nvar, INF)
        for i, bus in enumerate(net.buses):
            lb_full[lay.v0 + i], ub_full[lay.v0 + i] = bus.v_min, bus.v_max
            lb_full[lay.bcs0 + i], ub_full[lay.bcs0 + i] = bus.bcs_min, bus.bcs_max
        for gi, g in enumerate(net.generators):
            lb_full[lay.p0 + gi], ub_full[lay.p0 + gi] = g.p_min, g.p_max
            lb_full[lay.q0 + gi], ub_full[lay.q0 + gi] = g.q_min, g.q_max
        lb = np.full(self.nvar, -INF)
        ub = np.full(self.nvar, INF)
        lb[:self.n_state] = lb_full[self.keep]
        ub[:self.n_state] = ub_full[self.keep]
        # balance/rating slacks and penalty auxiliaries are nonnegative
        lb[self.n_state:self.pen0 + self.n_slacks] = 0.0
        return lb, ub

    def objective_coefs(self):
        c = np.zeros(self.nvar)
        c[self.pen0:self.pen0 + self.n_slacks] = self.pen_weight
        c[self.cost0:] = 1.0
        return c

    def state_of(self, xb):
        full = np.zeros(self.layout.nvar)
        full[self.keep] = xb[:self.n_state]
        return self.layout.unpack(full)

    def point_of(self, xb):
        state = self.state_of(xb)
        nb = self.layout.nb
        sig_s = np.zeros(self.layout.nbr)
        for j, (bi, _) in enumerate(self.rated):
            sig_s[bi] = xb[self.sS0 + j]
        return OperatingPoint(
            state=state,
            sig_p_plus=xb[self.sPp0:self.sPp0 + nb].copy(),
            sig_p_minus=xb[self.sPm0:self.sPm0 + nb].copy(),
            sig_q_plus=xb[self.sQp0:self.sQp0 + nb].copy(),
            sig_q_minus=xb[self.sQm0:self.sQm0 + nb].copy(),
            sig_s=sig_s,
        )

    def inject(self, point: OperatingPoint):
        xb = np.zeros(self.nvar)
        xb[:self.n_state] = self.layout.pack(point.state)[self.keep]
        nb = self.layout.nb
        xb[self.sPp0:self.sPp0 + nb] = point.sig_p_plus
        xb[self.sPm0:self.sPm0 + nb] = point.sig_p_minus
        xb[self.sQp0:self.sQp0 + nb] = point.sig_q_plus
        xb[self.sQm0:self.sQm0 + nb] = point.sig_q_minus
        cfg = self.net.penalty_config
        for j, (bi, _) in enumerate(self.rated):
            xb[self.sS0 + j] = point.sig_s[bi]
        for j in range(self.n_slacks):
            s = xb[self.n_state + j] if j < 4 * nb else xb[self.sS0 + (j - 4 * nb)]
            xb[self.pen0 + j] = penalty_cost(cfg, s)
        for j, (gi, g) in enumerate(self.cost_gens):
            xb[self.cost0 + j] = _pwl_value(*_cost_pieces(g.cost_curve),
                                            point.state.p_gen[gi])
        return xb

    def _slack_col(self, j):
        return self.n_state + j if j < 4 * self.layout.nb \
            else self.sS0 + (j - 4 * self.layout.nb)

    def eq_values(self, xb):
        lay = self.layout
        state = self.state_of(xb)
        expr = expression_values(lay, state, self.ctg_ratings)
        m = len(lay.in_service)
        nb = lay.nb
        out = np.empty(self.n_eq)
        r = 0
        for j, (bi, _) in enumerate(lay.in_service):
            for comp in range(4):
                out[r] = xb[self.pos[lay.flow_col(bi, comp)]] - expr[4 * j + comp]
                r += 1
        balP = expr[4 * m:4 * m + nb]
        balQ = expr[4 * m + nb:4 * m + 2 * nb]
        out[r:r + nb] = balP + xb[self.sPp0:self.sPp0 + nb] - xb[self.sPm0:self.sPm0 + nb]
        out[r + nb:r + 2 * nb] = balQ + xb[self.sQp0:self.sQp0 + nb] - xb[self.sQm0:self.sQm0 + nb]
        out[self.eq_ref] = state.theta[self.ref_idx]
        return out

    def ineq_values(self, xb):
        lay = self.layout
        state = self.state_of(xb)
        out = np.empty(self.n_ineq)
        lhs_o, lhs_d, rhs_o, rhs_d = rating_values(self.net, state, self.ctg_ratings)
        for j, (bi, _) in enumerate(self.rated):
            s = xb[self.sS0 + j]
            out[self.ineq_rat0 + 2 * j] = lhs_o[bi] - (rhs_o[bi] + s) ** 2
            out[self.ineq_rat0 + 2 * j + 1] = lhs_d[bi] - (rhs_d[bi] + s) ** 2
        r = self.ineq_pen0
        nlines = len(self.pen_lines)
        for j in range(self.n_slacks):
            s = xb[self._slack_col(j)]
            u = xb[self.pen0 + j]
            for slope, intercept in self.pen_lines:
                out[r] = slope * s + intercept - u
                r += 1
        for j, ((gi, _), lines) in enumerate(zip(self.cost_gens, self.cost_lines)):
            p = xb[self.pos[lay.p0 + gi]]
            t = xb[self.cost0 + j]
            for slope, intercept in lines[1]:
                out[r] = slope * p + intercept - t
                r += 1
        return out

    def jac_entries(self, xb, eq_off, ineq_off, col_off):
        """COO triples for both Jacobians; rows offset into the global system."""
        lay = self.layout
        state = self.state_of(xb)
        J, _ = jacobians(self.net, state, self.outaged, self.ctg_ratings, lay)
        Jc = J.tocoo()
        m = len(lay.in_service)
        nb = lay.nb
        eq_r, eq_c, eq_v = [], [], []
        iq_r, iq_c, iq_v = [], [], []

        for r, c, v in zip(Jc.row, Jc.col, Jc.data):
            cc = self.pos[c]
            if cc < 0:
                continue
            cc += col_off
            if r < 4 * m:  # flow expression row -> eq: x_flow - expr
                eq_r.append(eq_off + self.eq_flow0 + r)
                eq_c.append(cc)
                eq_v.append(-v)
            elif r < 4 * m + 2 * nb:  # balance row
                eq_r.append(eq_off + self.eq_bal0 + (r - 4 * m))
                eq_c.append(cc)
                eq_v.append(v)
            else:  # rating row: (layout order) pairs per in-service branch
                rr = r - (4 * m + 2 * nb)
                bi = lay.in_service[rr // 2][0]
                if bi not in self.rat_row:
                    continue
                iq_r.append(ineq_off + self.rat_row[bi] + (rr % 2))
                iq_c.append(cc)
                iq_v.append(v)

        # flow-definition unit entries
        r = 0
        for j, (bi, _) in enumerate(lay.in_service):
            for comp in range(4):
                eq_r.append(eq_off + self.eq_flow0 + r)
                eq_c.append(col_off + self.pos[lay.flow_col(bi, comp)])
                eq_v.append(1.0)
                r += 1
        # balance slack entries
        for i in range(nb):
            for col, sgn, row in (
                (self.sPp0 + i, 1.0, i), (self.sPm0 + i, -1.0, i),
                (self.sQp0 + i, 1.0, nb + i), (self.sQm0 + i, -1.0, nb + i),
            ):
                eq_r.append(eq_off + self.eq_bal0 + row)
                eq_c.append(col_off + col)
                eq_v.append(sgn)
        # reference angle
        eq_r.append(eq_off + self.eq_ref)
        eq_c.append(col_off + self.pos[lay.th0 + self.ref_idx])
        eq_v.append(1.0)

        # rating slack terms: d/ds [-(rhs + s)^2] = -2 (rhs + s); for lines the
        # acpf rhs derivative wrt v misses the -2 r s cross term
        _, _, rhs_o, rhs_d = rating_values(self.net, state, self.ctg_ratings)
        for j, (bi, br) in enumerate(self.rated):
            s = xb[self.sS0 + j]
            for side, rhs in ((0, rhs_o[bi]), (1, rhs_d[bi])):
                row = ineq_off + self.rat_row[bi] + side
                iq_r.append(row)
                iq_c.append(col_off + self.sS0 + j)
                iq_v.append(-2.0 * (rhs + s))
                if isinstance(br, Line):
                    rr_ = br.r_max_ctg if self.ctg_ratings else br.r_max
                    end = br.origin if side == 0 else br.destination
                    i = self.net.bus_index(end)
                    iq_r.append(row)
                    iq_c.append(col_off + self.pos[lay.v0 + i])
                    iq_v.append(-2.0 * rr_ * s)

        # penalty epigraph
        r = self.ineq_pen0
        for j in range(self.n_slacks):
            for slope, _ in self.pen_lines:
                iq_r.extend((ineq_off + r, ineq_off + r))
                iq_c.extend((col_off + self._slack_col(j), col_off + self.pen0 + j))
                iq_v.extend((slope, -1.0))
                r += 1
        # cost epigraph
        for j, ((gi, _), lines) in enumerate(zip(self.cost_gens, self.cost_lines)):
            for slope, _ in lines[1]:
                iq_r.extend((ineq_off + r, ineq_off + r))
                iq_c.extend((col_off + self.pos[lay.p0 + gi], col_off + self.cost0 + j))
                iq_v.extend((slope, -1.0))
                r += 1

        return (eq_r, eq_c, eq_v), (iq_r, iq_c, iq_v)

    def hess_entries(self, xb, lam_eq, lam_ineq, col_off):
        """Lower-triangle COO triples of this block's Lagrangian Hessian.

        lam_eq / lam_ineq are this block's slices of the global multipliers.
        The objective is linear, so only constraint curvature contributes.
        """
        lay = self.layout
        state = self.state_of(xb)
        m = len(lay.in_service)
        nb = lay.nb
        weights = np.zeros(lay.nrows)
        weights[:4 * m] = -lam_eq[self.eq_flow0:self.eq_flow0 + 4 * m]
        weights[4 * m:4 * m + 2 * nb] = lam_eq[self.eq_bal0:self.eq_bal0 + 2 * nb]
        rr = 4 * m + 2 * nb
        for j, (bi, _) in enumerate(self.rated):
            pos_in = self._svc_pos[bi]
            weights[rr + 2 * pos_in] = lam_ineq[self.rat_row[bi]]
            weights[rr + 2 * pos_in + 1] = lam_ineq[self.rat_row[bi] + 1]
        H = hessians(self.net, state, self.outaged, weights, self.ctg_ratings, lay)
        rows, cols, vals = [], [], []
        for a, b, v in zip(H.row, H.col, H.data):
            aa, bb = self.pos[a], self.pos[b]
            rows.append(col_off + aa)
            cols.append(col_off + bb)
            vals.append(v)
        # rating slack curvature: -(rhs+s)^2 gives d2/ds2 = -2 and, for lines,
        # d2/(dv ds) = -2 r
        for j, (bi, br) in enumerate(self.rated):
            scol = col_off + self.sS0 + j
            for side in range(2):
                w = lam_ineq[self.rat_row[bi] + side]
                if w == 0.0:
                    continue
                rows.append(scol)
                cols.append(scol)
                vals.append(-2.0 * w)
                if isinstance(br, Line):
                    rr_ = br.r_max_ctg if self.ctg_ratings else br.r_max
                    end = br.origin if side == 0 else br.destination
                    vcol = col_off + self.pos[lay.v0 + self.net.bus_index(end)]
                    a, b = max(scol, vcol), min(scol, vcol)
                    rows.append(a)
                    cols.append(b)
                    vals.append(-2.0 * rr_ * w)
        return rows, cols, vals


LOWER, MIDDLE, UPPER = "lower", "middle", "upper"

# widest response perturbation considered anywhere (shared with compl)
DELTA_MAX = 1e3


@dataclass
class _CouplingRecord:
    """Bookkeeping of one complementarity family member inside a built problem."""
    ctg_id: str
    gen_id: str
    family: str  # "active" | "reactive"
    segment: str
    chi_col: int
    chi_lb: float
    chi_ub: float
    s_col: int = -1  # rho slack column for lower/upper segments


@dataclass
class CaseStructure:
    """Layout metadata of a built problem: block offsets, coupling records."""
    net: Network
    base_block: _Block = None
    base_off: int = 0
    base_fixed: OperatingPoint = None  # set when base values are data
    ctg_blocks: dict = field(default_factory=dict)  # id -> (_Block, off)
    delta_cols: dict = field(default_factory=dict)  # id -> column
    couplings: list = field(default_factory=list)
    nvar: int = 0
    n_eq: int = 0
    n_ineq: int = 0

    def extract_base(self, x):
        return self.base_block.point_of(x[self.base_off:self.base_off + self.base_block.nvar])

    def extract_ctg(self, x, ctg_id):
        block, off = self.ctg_blocks[ctg_id]
        point = block.point_of(x[off:off + block.nvar])
        point.delta = float(x[self.delta_cols[ctg_id]])
        return point

    def segment_signals(self, solution):
        """Per (ctg, gen, family): evidence tuples for segment transitions.

        Returns dict key -> {"segment", "to_middle" | ("to_lower","to_upper")}
        where each evidence is (gap, multiplier) for the activity test.
        """
        out = {}
        for rec in self.couplings:
            key = (rec.ctg_id, rec.gen_id, rec.family)
            if rec.segment == MIDDLE:
                chi = solution.x[rec.chi_col]
                out[key] = {
                    "segment": MIDDLE,
                    "to_lower": (chi - rec.chi_lb, solution.z_lower[rec.chi_col]),
                    "to_upper": (rec.chi_ub - chi, solution.z_upper[rec.chi_col]),
                }
            elif rec.segment == LOWER:
                s = solution.x[rec.s_col]
                out[key] = {"segment": LOWER,
                            "to_middle": (-s, solution.z_upper[rec.s_col])}
            else:
                s = solution.x[rec.s_col]
                out[key] = {"segment": UPPER,
                            "to_middle": (s, solution.z_lower[rec.s_col])}
        return out


class _Assembler:
    def __init__(self, net):
        self.net = net
        self.structure = CaseStructure(net=net)
        self.nvar = 0
        self.n_eq = 0
        self.n_ineq = 0
        self.blocks = []  # (block, col_off, eq_off, ineq_off)
        self.lb_parts = []
        self.ub_parts = []
        self.obj_parts = []
        self.x0_parts = []
        # extra affine equality rows beyond block cores:
        # (row, entries [(col, coef)], constant); rows interleave with block
        # cores in insertion order
        self.extra_eq = []
        self.extra_cols = 0
        self.extra_lb = []
        self.extra_ub = []
        self.extra_x0 = []

    def add_block(self, block, x0_block):
        off = self.nvar
        self.blocks.append((block, off, self.n_eq, self.n_ineq))
        lb, ub = block.bounds()
        self.lb_parts.append(lb)
        self.ub_parts.append(ub)
        self.obj_parts.append(block.objective_coefs())
        self.x0_parts.append(x0_block)
        self.nvar += block.nvar
        self.n_eq += block.n_eq
        self.n_ineq += block.n_ineq
        return off

    def add_var(self, lb, ub, x0, obj=0.0):
        # appended after all block variables in a trailing region
        col = ("extra", self.extra_cols)
        self.extra_cols += 1
        self.extra_lb.append(lb)
        self.extra_ub.append(ub)
        self.extra_x0.append(x0)
        return col

    def add_eq(self, entries, const=0.0):
        row = self.n_eq
        self.extra_eq.append((row, entries, const))
        self.n_eq += 1
        return row

    def finish(self, x0=None):
        st = self.structure
        base = self.nvar
        nvar = base + self.extra_cols

        def col_id(c):
            return base + c[1] if isinstance(c, tuple) else c

        lb = np.concatenate(self.lb_parts + [np.array(self.extra_lb)]) \
            if self.extra_cols else np.concatenate(self.lb_parts)
        ub = np.concatenate(self.ub_parts + [np.array(self.extra_ub)]) \
            if self.extra_cols else np.concatenate(self.ub_parts)
        obj = np.concatenate(self.obj_parts + [np.zeros(self.extra_cols)]) \
            if self.extra_cols else np.concatenate(self.obj_parts)
        x0v = np.concatenate(self.x0_parts + [np.array(self.extra_x0)]) \
            if self.extra_cols else np.concatenate(self.x0_parts)
        if x0 is not None:
            x0v = x0

        extra_eq = [(row, [(col_id(c), v) for c, v in entries], const)
                    for row, entries, const in self.extra_eq]
        blocks = self.blocks
        n_eq, n_ineq = self.n_eq, self.n_ineq

        # resolve deferred column ids in structure records
        for rec in st.couplings:
            rec.chi_col = col_id(rec.chi_col)
            if rec.s_col != -1:
                rec.s_col = col_id(rec.s_col)
        st.delta_cols = {k: col_id(c) for k, c in st.delta_cols.items()}
        st.nvar, st.n_eq, st.n_ineq = nvar, n_eq, n_ineq

        def eq(x):
            out = np.empty(n_eq)
            for block, off, eq_off, _ in blocks:
                out[eq_off:eq_off + block.n_eq] = block.eq_values(x[off:off + block.nvar])
            for row, entries, const in extra_eq:
                out[row] = const + sum(v * x[c] for c, v in entries)
            return out

        def ineq(x):
            out = np.empty(n_ineq)
            for block, off, _, iq_off in blocks:
                out[iq_off:iq_off + block.n_ineq] = block.ineq_values(x[off:off + block.nvar])
            return out

        def jac_eq(x):
            rows, cols, vals = [], [], []
            for block, off, eq_off, iq_off in blocks:
                (er, ec, ev), _ = block.jac_entries(x[off:off + block.nvar],
                                                    eq_off, iq_off, off)
                rows.extend(er)
                cols.extend(ec)
                vals.extend(ev)
            for row, entries, _ in extra_eq:
                for c, v in entries:
                    rows.append(row)
                    cols.append(c)
                    vals.append(v)
            return sparse.coo_matrix((vals, (rows, cols)), shape=(n_eq, nvar))

        def jac_ineq(x):
            rows, cols, vals = [], [], []
            for block, off, eq_off, iq_off in blocks:
                _, (ir, ic, iv) = block.jac_entries(x[off:off + block.nvar],
                                                    eq_off, iq_off, off)
                rows.extend(ir)
                cols.extend(ic)
                vals.extend(iv)
            return sparse.coo_matrix((vals, (rows, cols)), shape=(n_ineq, nvar))

        def hess(x, sigma_f, lam_eq, lam_ineq):
            rows, cols, vals = [], [], []
            for block, off, eq_off, iq_off in blocks:
                br, bc, bv = block.hess_entries(
                    x[off:off + block.nvar],
                    lam_eq[eq_off:eq_off + block.n_eq],
                    lam_ineq[iq_off:iq_off + block.n_ineq], off)
                rows.extend(br)
                cols.extend(bc)
                vals.extend(bv)
            H = sparse.coo_matrix((vals, (rows, cols)), shape=(nvar, nvar))
            H.sum_duplicates()
            return H

        prob = NlpProblem(
            n=nvar, x0=x0v, lb=lb, ub=ub,
            objective=lambda x: float(obj @ x),
            gradient=lambda x: obj.copy(),
            eq=eq, ineq=ineq, jac_eq=jac_eq, jac_ineq=jac_ineq, hess=hess,
            n_eq=n_eq, n_ineq=n_ineq, meta=st,
        )
        return prob


def _add_coupling(asm, net, k, block, off, compl_state, base_ref):
    """Complementarity rows linking one contingency block to the base values.

    base_ref is either ("block", base_block, base_off) (master) or
    ("fixed", OperatingPoint) (standalone contingency problem).
    """
    st = asm.structure
    lay = block.layout
    lbs = asm.lb_parts[[b for b, *_ in asm.blocks].index(block)]
    ubs = asm.ub_parts[[b for b, *_ in asm.blocks].index(block)]

    delta0 = compl_state.delta if compl_state is not None else 0.0
    # bounding the response scalar keeps the KKT system nonsingular when every
    # responder is saturated (shortfall case), where delta would otherwise be
    # a free ray through the one-sided coupling rows
    dcol = asm.add_var(-DELTA_MAX, DELTA_MAX, delta0)
    st.delta_cols[k.id] = dcol

    def base_term(kind, idx):
        """((col, coef) entries, constant) for a base-side value."""
        if base_ref[0] == "fixed":
            point = base_ref[1]
            if kind == "p":
                return [], point.state.p_gen[idx]
            return [], point.state.v[idx]
        base_block, base_off = base_ref[1], base_ref[2]
        if kind == "p":
            col = base_off + base_block.pos[base_block.layout.p0 + idx]
        else:
            col = base_off + base_block.pos[base_block.layout.v0 + idx]
        return [(col, 1.0)], 0.0

    responding = set(k.responding_gens)
    for gi, g in lay.avail_gens:
        p_col = off + block.pos[lay.p0 + gi]
        q_col = off + block.pos[lay.q0 + gi]
        bus_i = net.bus_index(g.bus)
        v_col = off + block.pos[lay.v0 + bus_i]
        b_entries_p, b_const_p = base_term("p", gi)
        b_entries_v, b_const_v = base_term("v", bus_i)

        if g.id not in responding:
            # fixed rule: contingency output equals the base value
            asm.add_eq([(p_col, 1.0)] + [(c, -v) for c, v in b_entries_p],
                       -b_const_p)
        else:
            seg = compl_state.active[g.id]
            rho = ([(p_col, -1.0), (dcol, g.alpha)] +
                   [(c, v) for c, v in b_entries_p])
            if seg == MIDDLE:
                asm.add_eq(rho, b_const_p)
                st.couplings.append(_CouplingRecord(
                    k.id, g.id, "active", MIDDLE, p_col, g.p_min, g.p_max))
            else:
                pin = g.p_min if seg == LOWER else g.p_max
                asm.add_eq([(p_col, 1.0)], -pin)
                lbs[block.pos[lay.p0 + gi]] = -INF
                ubs[block.pos[lay.p0 + gi]] = INF
                s_lb, s_ub = (-INF, 0.0) if seg == LOWER else (0.0, INF)
                scol = asm.add_var(s_lb, s_ub, 0.0)
                asm.add_eq(rho + [(scol, -1.0)], b_const_p)
                st.couplings.append(_CouplingRecord(
                    k.id, g.id, "active", seg, p_col, g.p_min, g.p_max,
                    s_col=scol))

        seg = compl_state.reactive[g.id]
        # rho_q = v_base - v_ctg at the generator bus
        rho_q = [(v_col, -1.0)] + [(c, v) for c, v in b_entries_v]
        if seg == MIDDLE:
            asm.add_eq(rho_q, b_const_v)
            st.couplings.append(_CouplingRecord(
                k.id, g.id, "reactive", MIDDLE, q_col, g.q_min, g.q_max))
        else:
            pin = g.q_min if seg == LOWER else g.q_max
            asm.add_eq([(q_col, 1.0)], -pin)
            lbs[block.pos[lay.q0 + gi]] = -INF
            ubs[block.pos[lay.q0 + gi]] = INF
            s_lb, s_ub = (-INF, 0.0) if seg == LOWER else (0.0, INF)
            scol = asm.add_var(s_lb, s_ub, 0.0)
            asm.add_eq(rho_q + [(scol, -1.0)], b_const_v)
            st.couplings.append(_CouplingRecord(
                k.id, g.id, "reactive", seg, q_col, g.q_min, g.q_max,
                s_col=scol))


def build_base_problem(net: Network, report=None, start: OperatingPoint = None):
    """Base-case NLP: min cost + penalties s.t. flow/balance/rating/bounds."""
    skip = report.skip_rating_ids(None) if report is not None else ()
    block = _Block(net, with_cost=True, skip_rating=skip)
    if start is None:
        start = default_start(net)
    asm = _Assembler(net)
    off = asm.add_block(block, block.inject(start))
    asm.structure.base_block = block
    asm.structure.base_off = off
    return asm.finish()


def build_contingency_problem(net: Network, k, base_point: OperatingPoint,
                              compl_state, report=None,
                              start: OperatingPoint = None):
    """Penalty-minimization NLP for one contingency with base values as data."""
    if isinstance(k, str):
        k = net.contingency(k)
    skip = report.skip_rating_ids(k.outaged) if report is not None else ()
    block = _Block(net, outaged=k.outaged, ctg_ratings=True, skip_rating=skip)
    if start is None:
        start = _seed_ctg_point(net, k, base_point, compl_state)
    asm = _Assembler(net)
    off = asm.add_block(block, block.inject(start))
    asm.structure.ctg_blocks[k.id] = (block, off)
    asm.structure.base_fixed = base_point
    _add_coupling(asm, net, k, block, off, compl_state,
                  ("fixed", base_point))
    return asm.finish()


def _seed_ctg_point(net, k, base_point, compl_state):
    """Starting point for a contingency case: base state with the response
    rule applied and flows/slacks recomputed."""
    state = base_point.state.copy()
    delta = compl_state.delta if compl_state is not None else 0.0
    for gi, g in enumerate(net.generators):
        if g.id == k.outaged:
            state.p_gen[gi] = 0.0
            state.q_gen[gi] = 0.0
        elif g.id in set(k.responding_gens):
            state.p_gen[gi] = min(max(state.p_gen[gi] + g.alpha * delta,
                                      g.p_min), g.p_max)
    state = flows_from_state(net, state, k.outaged)
    point = slacks_from_state(net, state, k.outaged, ctg_ratings=True,
                              delta=delta)
    return point


def build_master_problem(spec: "MasterSpec"):
    """Problem over the base case plus the selected contingency subset.

    Contingency penalties are weighted by 1 / (full contingency count), so
    omitted contingencies implicitly contribute zero.
    """
    net = spec.net
    n_total = len(net.contingencies)
    weight = 1.0 / n_total if n_total else 1.0
    skip_base = spec.report.skip_rating_ids(None) if spec.report is not None else ()

    asm = _Assembler(net)
    base_block = _Block(net, with_cost=True, skip_rating=skip_base)
    base_start = spec.base_point if spec.base_point is not None else default_start(net)
    base_off = asm.add_block(base_block, base_block.inject(base_start))
    asm.structure.base_block = base_block
    asm.structure.base_off = base_off

    for kid in spec.included:
        k = net.contingency(kid)
        compl_state = spec.compl[kid]
        skip = spec.report.skip_rating_ids(k.outaged) if spec.report is not None else ()
        block = _Block(net, outaged=k.outaged, ctg_ratings=True,
                       skip_rating=skip, pen_weight=weight)
        start = spec.ctg_points.get(kid) if spec.ctg_points else None
        if start is None:
            start = _seed_ctg_point(net, k, base_start, compl_state)
        off = asm.add_block(block, block.inject(start))
        asm.structure.ctg_blocks[kid] = (block, off)
        _add_coupling(asm, net, k, block, off, compl_state,
                      ("block", base_block, base_off))
    return asm.finish()


@dataclass
class MasterSpec:
    """Inputs of one master solve; complementarity states stay fixed in it."""
    net: Network
    included: tuple
    compl: dict  # contingency id -> ComplementarityState
    base_point: OperatingPoint = None
    ctg_points: dict = None  # contingency id -> OperatingPoint warm start
    report: object = None

    def __post_init__(self):
        ids = list(self.included)
        if len(set(ids)) != len(ids):
            raise ValueError("included contingency ids must be distinct")
        known = {k.id for k in self.net.contingencies}
        missing = [i for i in ids if i not in known]
        if missing:
            raise ValueError(f"unknown contingency ids: {missing}")


def total_score(net: Network, base: OperatingPoint, ctg_penalties):
    """Objective of the full problem: cost + base penalty + mean contingency
    penalty over the full contingency set."""
    missing = [k.id for k in net.contingencies if k.id not in ctg_penalties]
    if missing:
        raise KeyError(f"missing contingency penalties: {missing}")
    score = generation_cost(net, base.state.p_gen) + point_penalty(net, base)
    if net.contingencies:
        score += sum(ctg_penalties[k.id] for k in net.contingencies) / len(net.contingencies)
    return score
