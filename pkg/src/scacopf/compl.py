"""Complementarity segment states for contingency generator response.

Each responding generator carries an active-power segment and each available
generator a reactive-power segment, each in {lower, middle, upper}.  The
lower/upper segments pin the generator variable at its bound and relax the
matching equation into a signed inequality; the middle segment enforces the
matching equation exactly and keeps the variable bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import scopf as _scopf
from .scopf import LOWER, MIDDLE, UPPER, OperatingPoint, flows_from_state, \
    slacks_from_state

__all__ = [
    "ComplementarityState",
    "init_generator_outage",
    "init_default",
    "update_segments",
    "project_response",
]

# uplift on replaced power approximating a 1% loss increase under redispatch
LOSS_UPLIFT = 1.01
DELTA_MAX = _scopf.DELTA_MAX
BISECT_TOL = 1e-9
# a constraint counts as active when multiplier > 0 and gap/multiplier < this
ACTIVITY_RATIO = 1e-6


@dataclass
class ComplementarityState:
    active: dict = field(default_factory=dict)    # responding gen id -> segment
    reactive: dict = field(default_factory=dict)  # available gen id -> segment
    delta: float = 0.0
    shortfall: bool = False

    def copy(self):
        return ComplementarityState(dict(self.active), dict(self.reactive),
                                    self.delta, self.shortfall)


def _families(net, k):
    responding = [g for g in net.generators
                  if g.id in set(k.responding_gens) and g.id != k.outaged]
    available = [g for g in net.generators if g.id != k.outaged]
    return responding, available


def init_default(net, k):
    """All-middle state with zero perturbation (line/transformer outages and
    every reactive family start here)."""
    responding, available = _families(net, k)
    return ComplementarityState(
        active={g.id: MIDDLE for g in responding},
        reactive={g.id: MIDDLE for g in available},
    )


def _replaced_power(responders, base_p, delta):
    total = 0.0
    for g, p in zip(responders, base_p):
        total += min(max(p + g.alpha * delta, g.p_min), g.p_max) - p
    return total


def init_generator_outage(net, k, base: OperatingPoint):
    """Bisection over the response perturbation to replace the lost power.

    Targets LOSS_UPLIFT times the outaged generator's base output; segments
    are read off from where each responder's clamp binds.  If even DELTA_MAX
    cannot replace the target, the state is flagged as a shortfall.
    """
    state = init_default(net, k)
    gi_out = net.gen_index(k.outaged)
    target = LOSS_UPLIFT * base.state.p_gen[gi_out]
    responding, _ = _families(net, k)
    base_p = [base.state.p_gen[net.gen_index(g.id)] for g in responding]
    if target <= 0.0 or not responding:
        return state

    if _replaced_power(responding, base_p, DELTA_MAX) < target - BISECT_TOL:
        state.delta = DELTA_MAX
        state.shortfall = True
    else:
        lo, hi = 0.0, DELTA_MAX
        for _ in range(200):
            mid = (lo + hi) / 2
            got = _replaced_power(responding, base_p, mid)
            if abs(got - target) <= BISECT_TOL:
                lo = hi = mid
                break
            if got < target:
                lo = mid
            else:
                hi = mid
        state.delta = (lo + hi) / 2

    for g, p in zip(responding, base_p):
        desired = p + g.alpha * state.delta
        if desired > g.p_max:
            state.active[g.id] = UPPER
        elif desired < g.p_min:
            state.active[g.id] = LOWER
    return state


def _is_active(evidence):
    gap, lam = evidence
    return lam > 0.0 and gap / lam < ACTIVITY_RATIO


def update_segments(state: ComplementarityState, signals):
    """All-at-once segment update from activity evidence.

    `signals` maps keys ending in (gen_id, family) to dicts holding the
    segment the evidence was gathered for plus (gap, multiplier) tuples; a
    transition fires only when the evidence segment matches the current one,
    which makes the update idempotent on fixed solution data.  Transitions
    move one step: lower/upper -> middle, middle -> lower/upper.
    """
    new = state.copy()
    changed = False
    for key, info in signals.items():
        gen_id, family = key[-2], key[-1]
        table = new.active if family == "active" else new.reactive
        if gen_id not in table or table[gen_id] != info["segment"]:
            continue
        cur = table[gen_id]
        nxt = cur
        if cur in (LOWER, UPPER):
            if _is_active(info["to_middle"]):
                nxt = MIDDLE
        else:
            lo_fires = _is_active(info["to_lower"])
            up_fires = _is_active(info["to_upper"])
            if lo_fires and up_fires:
                gl, ll = info["to_lower"]
                gu, lu = info["to_upper"]
                nxt = LOWER if gl / ll <= gu / lu else UPPER
            elif lo_fires:
                nxt = LOWER
            elif up_fires:
                nxt = UPPER
        if nxt != cur:
            table[gen_id] = nxt
            changed = True
    return new, changed


def project_response(state: ComplementarityState, net, k,
                     base: OperatingPoint, raw_point: OperatingPoint):
    """Clamp a raw square-system point into segment-consistent bounds.

    Voltages and generator outputs are projected onto their boxes; pinned
    segments land exactly on their bound; middle active-power segments follow
    the response rule at the state's delta.  Flows and slacks are then
    recomputed so the result is feasible with minimal slacks.
    """
    flow_state = raw_point.state.copy()
    for i, bus in enumerate(net.buses):
        flow_state.v[i] = min(max(flow_state.v[i], bus.v_min), bus.v_max)
        flow_state.bcs[i] = min(max(flow_state.bcs[i], bus.bcs_min), bus.bcs_max)
    responding = set(state.active)
    for gi, g in enumerate(net.generators):
        if g.id == k.outaged:
            flow_state.p_gen[gi] = 0.0
            flow_state.q_gen[gi] = 0.0
            continue
        if g.id in responding:
            seg = state.active[g.id]
            if seg == LOWER:
                flow_state.p_gen[gi] = g.p_min
            elif seg == UPPER:
                flow_state.p_gen[gi] = g.p_max
            else:
                desired = base.state.p_gen[gi] + g.alpha * state.delta
                flow_state.p_gen[gi] = min(max(desired, g.p_min), g.p_max)
        else:
            flow_state.p_gen[gi] = base.state.p_gen[gi]
        seg = state.reactive.get(g.id, MIDDLE)
        if seg == LOWER:
            flow_state.q_gen[gi] = g.q_min
        elif seg == UPPER:
            flow_state.q_gen[gi] = g.q_max
        else:
            flow_state.q_gen[gi] = min(max(flow_state.q_gen[gi], g.q_min), g.q_max)
    flow_state = flows_from_state(net, flow_state, k.outaged)
    return slacks_from_state(net, flow_state, k.outaged, ctg_ratings=True,
                             delta=state.delta)
