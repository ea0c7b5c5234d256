"""Contingency evaluation engines.

Two engines estimate the post-contingency penalty of a base operating point:

* ``fast_evaluate`` repeatedly solves a square system of nonlinear equations
  (flow definitions, slack-free bus balance, response rows for the current
  complementarity segments, and the angle reference), projects the result into
  bounds, and prices the residual slacks.  It is cheap and yields an upper
  bound on the optimal penalty.
* ``full_evaluate`` solves the penalty-minimization NLP in a loop with
  all-at-once complementarity segment updates.

``prescreen_then_evaluate`` runs the fast engine first and escalates to the
full engine only when the fast penalty exceeds a cutoff.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import compl as compl_mod
from .acpf import CaseLayout, expression_values, jacobians
from .case_model import Network
from .nlp import solve_nlp, solve_square
from .scopf import (
    LOWER,
    MIDDLE,
    UPPER,
    OperatingPoint,
    build_contingency_problem,
    flows_from_state,
    penalty_cost,
    point_penalty,
    slacks_from_state,
)

__all__ = [
    "EvaluationResult",
    "fast_evaluate",
    "full_evaluate",
    "prescreen_then_evaluate",
    "default_cutoff",
    "VIOLATION_CUTOFF",
]

# per-unit violation whose penalty is the default escalation cutoff
VIOLATION_CUTOFF = 2e-2

# fast loop: max segment-update rounds (guards cycling; the loop is otherwise
# bounded only by time and penalty decrease)
FAST_MAX_ROUNDS = 10
FULL_MAX_ROUNDS = 20
_BOUND_TOL = 1e-9


@dataclass
class EvaluationResult:
    contingency_id: str
    penalty: float
    point: OperatingPoint
    compl: compl_mod.ComplementarityState
    method: str  # "fast" | "full"
    base_tag: str = ""
    elapsed: float = 0.0
    status: str = "ok"


def default_cutoff(net: Network, violation=VIOLATION_CUTOFF):
    """Penalty a single slack of the given per-unit size would cost."""
    return penalty_cost(net.penalty_config, violation)


def _init_state(net, k, init_compl, base):
    if init_compl is not None:
        return init_compl.copy()
    if k.kind == "generator-outage":
        return compl_mod.init_generator_outage(net, k, base)
    return compl_mod.init_default(net, k)


class _Budget:
    """Wall-clock or deterministic operation-count budget for one evaluation.

    In deterministic mode one "second" buys ``ops_per_second`` Newton
    iterations and wall time is ignored.
    """

    OPS_PER_SECOND = 50

    def __init__(self, time_limit, deterministic=False):
        self.deterministic = deterministic
        self.t0 = time.monotonic()
        if deterministic:
            self.ops_left = (None if time_limit is None
                             else int(time_limit * self.OPS_PER_SECOND))
        else:
            self.limit = time_limit

    def exhausted(self):
        if self.deterministic:
            return self.ops_left is not None and self.ops_left <= 0
        return (self.limit is not None
                and time.monotonic() - self.t0 >= self.limit)

    def solver_kwargs(self, max_iter):
        if self.deterministic:
            if self.ops_left is not None:
                max_iter = max(1, min(max_iter, self.ops_left))
            return {"max_iter": max_iter}
        kw = {"max_iter": max_iter}
        if self.limit is not None:
            kw["time_limit"] = max(0.0, self.limit - (time.monotonic() - self.t0))
        return kw

    def charge(self, iterations):
        if self.deterministic and self.ops_left is not None:
            self.ops_left -= max(1, iterations)

    def elapsed(self):
        return time.monotonic() - self.t0


class _SquareSystem:
    """Square response system for one contingency and one segment assignment.

    Unknowns: all bus voltages and angles, responder active powers, available
    generator reactive powers, in-service branch flows, and the response
    scalar.  Shunt susceptances stay at the base values and non-responding
    generators keep their base active power.
    """

    def __init__(self, net, k, base, state):
        self.net = net
        self.k = k
        self.state = state
        lay = CaseLayout(net, k.outaged)
        self.lay = lay
        nb = lay.nb

        self.responders = [(gi, g) for gi, g in enumerate(net.generators)
                           if g.id in state.active]
        self.avail = lay.avail_gens

        cols = list(range(lay.v0, lay.v0 + nb))
        cols += list(range(lay.th0, lay.th0 + nb))
        cols += [lay.p0 + gi for gi, _ in self.responders]
        cols += [lay.q0 + gi for gi, _ in self.avail]
        for bi, _ in lay.in_service:
            cols += [lay.flow_col(bi, c) for c in range(4)]
        self.cols = np.array(cols, dtype=int)
        self.col_pos = {c: i for i, c in enumerate(cols)}
        self.delta_col = len(cols)
        self.n = len(cols) + 1

        # fixed full-layout template: base shunts, base non-responder output,
        # outaged component zeroed
        template = base.state.copy()
        for gi, g in enumerate(net.generators):
            if g.id == k.outaged:
                template.p_gen[gi] = 0.0
                template.q_gen[gi] = 0.0
        for bi, br in enumerate(net.branches):
            if br.id == k.outaged:
                template.flows[bi] = 0.0
        self.template = lay.pack(template)
        self.base_p = base.state.p_gen.copy()
        self.base_v = base.state.v.copy()
        self.ref = net.bus_index(net.reference_bus)
        self.n_flow_rows = 4 * len(lay.in_service)

    def full_x(self, z):
        x = self.template.copy()
        x[self.cols] = z[:-1]
        return x

    def start(self, point, delta):
        z = np.empty(self.n)
        z[:-1] = self.lay.pack(point.state)[self.cols]
        z[-1] = delta
        return z

    def residual(self, z):
        lay = self.lay
        x = self.full_x(z)
        st = lay.unpack(x)
        vals = expression_values(lay, st)
        nfr = self.n_flow_rows
        flow_defs = x[self.cols[-nfr:]] - vals[:nfr] if nfr else np.zeros(0)
        bal = vals[nfr:nfr + 2 * lay.nb]
        rows = [flow_defs, bal, [st.theta[self.ref]]]
        delta = z[-1]
        seg_rows = []
        for gi, g in self.responders:
            seg = self.state.active[g.id]
            if seg == MIDDLE:
                seg_rows.append(self.base_p[gi] + g.alpha * delta
                                - st.p_gen[gi])
            elif seg == LOWER:
                seg_rows.append(st.p_gen[gi] - g.p_min)
            else:
                seg_rows.append(st.p_gen[gi] - g.p_max)
        for gi, g in self.avail:
            seg = self.state.reactive.get(g.id, MIDDLE)
            bus = self.net.bus_index(g.bus)
            if seg == MIDDLE:
                seg_rows.append(self.base_v[bus] - st.v[bus])
            elif seg == LOWER:
                seg_rows.append(st.q_gen[gi] - g.q_min)
            else:
                seg_rows.append(st.q_gen[gi] - g.q_max)
        rows.append(seg_rows)
        return np.concatenate([np.asarray(r, dtype=float) for r in rows])

    def jacobian(self, z):
        lay = self.lay
        x = self.full_x(z)
        st = lay.unpack(x)
        J, _ = jacobians(self.net, st, self.k.outaged, layout=lay)
        J = J.tocoo()
        nfr = self.n_flow_rows
        rows, cols, vals = [], [], []
        for r, c, v in zip(J.row, J.col, J.data):
            if r >= nfr + 2 * lay.nb:
                continue  # rating rows are not part of the system
            if c not in self.col_pos:
                continue
            if r < nfr:
                rows.append(r)
                cols.append(self.col_pos[c])
                vals.append(-v)
            else:
                rows.append(r)
                cols.append(self.col_pos[c])
                vals.append(v)
        # unit entries of the flow-definition rows
        for i in range(nfr):
            rows.append(i)
            cols.append(len(self.cols) - nfr + i)
            vals.append(1.0)
        r = nfr + 2 * lay.nb
        rows.append(r)
        cols.append(self.col_pos[lay.th0 + self.ref])
        vals.append(1.0)
        r += 1
        for gi, g in self.responders:
            seg = self.state.active[g.id]
            pc = self.col_pos[lay.p0 + gi]
            if seg == MIDDLE:
                rows += [r, r]
                cols += [self.delta_col, pc]
                vals += [g.alpha, -1.0]
            else:
                rows.append(r)
                cols.append(pc)
                vals.append(1.0)
            r += 1
        for gi, g in self.avail:
            seg = self.state.reactive.get(g.id, MIDDLE)
            if seg == MIDDLE:
                bus = self.net.bus_index(g.bus)
                rows.append(r)
                cols.append(self.col_pos[lay.v0 + bus])
                vals.append(-1.0)
            else:
                rows.append(r)
                cols.append(self.col_pos[lay.q0 + gi])
                vals.append(1.0)
            r += 1
        M = sparse.coo_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        return M.toarray()

    def raw_point(self, z):
        st = self.lay.unpack(self.full_x(z))
        nb = self.lay.nb
        zero = np.zeros(nb)
        return OperatingPoint(
            state=st, sig_p_plus=zero.copy(), sig_p_minus=zero.copy(),
            sig_q_plus=zero.copy(), sig_q_minus=zero.copy(),
            sig_s=np.zeros(len(self.net.branches)), delta=float(z[-1]),
        )


def _update_from_violations(net, k, state, base, raw, delta):
    """Pre-projection segment update.

    A violated bound on a middle-segment variable pins it (upper bound
    violated -> upper segment, lower -> lower); a pinned segment whose
    one-sided response residual has the wrong sign releases back to middle so
    the loop can revisit it.
    """
    new = state.copy()
    changed = False
    for gi, g in enumerate(net.generators):
        if g.id == k.outaged:
            continue
        if g.id in new.active:
            seg = new.active[g.id]
            p = raw.state.p_gen[gi]
            if seg == MIDDLE:
                if p > g.p_max + _BOUND_TOL:
                    new.active[g.id] = UPPER
                    changed = True
                elif p < g.p_min - _BOUND_TOL:
                    new.active[g.id] = LOWER
                    changed = True
            else:
                pin = g.p_min if seg == LOWER else g.p_max
                rho = base.state.p_gen[gi] + g.alpha * delta - pin
                if (seg == LOWER and rho > _BOUND_TOL) or \
                        (seg == UPPER and rho < -_BOUND_TOL):
                    new.active[g.id] = MIDDLE
                    changed = True
        if g.id in new.reactive:
            seg = new.reactive[g.id]
            q = raw.state.q_gen[gi]
            bus = net.bus_index(g.bus)
            rho_q = base.state.v[bus] - raw.state.v[bus]
            if seg == MIDDLE:
                if q > g.q_max + _BOUND_TOL:
                    new.reactive[g.id] = UPPER
                    changed = True
                elif q < g.q_min - _BOUND_TOL:
                    new.reactive[g.id] = LOWER
                    changed = True
            elif (seg == LOWER and rho_q > _BOUND_TOL) or \
                    (seg == UPPER and rho_q < -_BOUND_TOL):
                new.reactive[g.id] = MIDDLE
                changed = True
    return new, changed


def fast_evaluate(net: Network, k, base: OperatingPoint, time_limit=None,
                  cutoff=0.0, init_compl=None, base_tag="",
                  deterministic=False):
    """Upper-bound penalty estimate via the square-system response loop."""
    budget = _Budget(time_limit, deterministic)
    state = _init_state(net, k, init_compl, base)
    state_fb = state.copy()

    # guaranteed fallback: base state projected into the response rules with
    # slacks absorbing all residuals
    fallback = compl_mod.project_response(state_fb, net, k, base, base)
    best_pen = point_penalty(net, fallback, k.outaged)
    best = (fallback, state_fb)
    status = "ok"

    # an infinite cutoff disables the cutoff exit entirely
    def below_cutoff(pen):
        return np.isfinite(cutoff) and pen <= cutoff

    point = fallback
    prev_pen = None
    for round_no in range(FAST_MAX_ROUNDS):
        if budget.exhausted() or below_cutoff(best_pen):
            break
        sys_ = _SquareSystem(net, k, base, state)
        z0 = sys_.start(point, state.delta)
        res = solve_square(sys_.residual, sys_.jacobian, z0, tol=1e-10,
                           **budget.solver_kwargs(60))
        budget.charge(res.iterations)
        if not np.all(np.isfinite(res.x)):
            status = "fallback"
            break
        raw = sys_.raw_point(res.x)
        new_state, _ = _update_from_violations(net, k, state, base, raw,
                                               raw.delta)
        new_state.delta = raw.delta
        proj = compl_mod.project_response(new_state, net, k, base, raw)
        pen = point_penalty(net, proj, k.outaged)
        if pen < best_pen - 1e-15:
            best_pen = pen
            best = (proj, new_state)
        if prev_pen is not None and pen >= prev_pen - 1e-12:
            state = new_state
            point = proj
            break
        prev_pen = pen
        state = new_state
        point = proj
        if below_cutoff(pen):
            break

    return EvaluationResult(
        contingency_id=k.id, penalty=best_pen, point=best[0], compl=best[1],
        method="fast", base_tag=base_tag, elapsed=budget.elapsed(),
        status=status,
    )


def full_evaluate(net: Network, k, base: OperatingPoint, time_limit=None,
                  init_compl=None, base_tag="", deterministic=False,
                  segment_updates=True, start=None):
    """Penalty minimization with all-at-once complementarity updates.

    ``start`` warm-starts the first NLP (typically the fast engine's point,
    which anchors the search at an already-feasible penalty).  With
    ``segment_updates=False`` the initial segment assignment is kept and only
    a single solve is performed (used by the ablation harness).
    """
    budget = _Budget(time_limit, deterministic)
    state = _init_state(net, k, init_compl, base)

    best = None  # (penalty, point, state)
    prev_pen = None
    start_point = start
    if start is not None:
        # the warm-start point is itself a feasible candidate; registering it
        # makes the returned penalty never worse than the seed's
        seeded = slacks_from_state(
            net, flows_from_state(net, start.state, k.outaged), k.outaged,
            ctg_ratings=True, delta=start.delta)
        best = (point_penalty(net, seeded, k.outaged), seeded, state.copy())
    for round_no in range(FULL_MAX_ROUNDS):
        if budget.exhausted():
            break
        prob = build_contingency_problem(net, k, base, state,
                                         start=start_point)
        sol = solve_nlp(prob, tol=1e-8, **budget.solver_kwargs(300))
        budget.charge(sol.iterations)
        failed = sol.status in ("numerical_failure",) or not np.all(
            np.isfinite(sol.x))
        if failed and best is None:
            # degrade to the fast engine rather than report nothing
            result = fast_evaluate(
                net, k, base,
                time_limit=None if time_limit is None else
                max(0.0, time_limit - budget.elapsed()),
                init_compl=state, base_tag=base_tag,
                deterministic=deterministic)
            result.elapsed = budget.elapsed()
            result.status = "degraded"
            return result
        if failed:
            break

        point = prob.meta.extract_ctg(sol.x, k.id)
        # explicit penalty: price the minimal slacks of the solved state, never
        # the solver-reported objective
        repriced = slacks_from_state(
            net, flows_from_state(net, point.state, k.outaged), k.outaged,
            ctg_ratings=True, delta=point.delta)
        pen = point_penalty(net, repriced, k.outaged)

        state_now = state.copy()
        state_now.delta = repriced.delta
        if best is None or pen < best[0] - 1e-15:
            best = (pen, repriced, state_now)

        if not segment_updates:
            break
        signals = prob.meta.segment_signals(sol)
        new_state, changed = compl_mod.update_segments(state_now, signals)
        if prev_pen is not None:
            improvement = prev_pen - pen
            if improvement < 0:
                break  # restore previous best (already tracked)
            if improvement < max(1e-6, 1e-6 * abs(pen)):
                break
        if not changed:
            break
        prev_pen = pen
        state = new_state
        start_point = repriced

    if best is None:
        result = fast_evaluate(net, k, base, time_limit=0.0,
                               init_compl=state, base_tag=base_tag,
                               deterministic=deterministic)
        result.elapsed = budget.elapsed()
        result.status = "degraded"
        return result

    return EvaluationResult(
        contingency_id=k.id, penalty=best[0], point=best[1], compl=best[2],
        method="full", base_tag=base_tag, elapsed=budget.elapsed(),
        status="ok",
    )


def prescreen_then_evaluate(net: Network, k, base: OperatingPoint,
                            budgets=(None, None), cutoff=None, base_tag="",
                            deterministic=False):
    """Fast evaluation first; escalate to full when the penalty exceeds the
    cutoff, seeding the full engine with the fast result's segments."""
    if cutoff is None:
        cutoff = default_cutoff(net)
    fast_limit, full_limit = budgets
    fast = fast_evaluate(net, k, base, time_limit=fast_limit, cutoff=cutoff,
                         base_tag=base_tag, deterministic=deterministic)
    if fast.penalty <= cutoff:
        return fast
    full = full_evaluate(net, k, base, time_limit=full_limit,
                         init_compl=fast.compl, start=fast.point,
                         base_tag=base_tag, deterministic=deterministic)
    return full
