"""Network data model, JSON case format, validation and degeneracy preprocessing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

__all__ = [
    "Bus",
    "Generator",
    "Line",
    "Transformer",
    "Contingency",
    "PenaltyConfig",
    "Network",
    "PreprocessReport",
    "CaseError",
    "CaseValidationError",
    "load_case",
    "loads_case",
    "write_case",
    "dumps_case",
    "preprocess",
    "disaggregate_reactive",
]

GENERATOR_OUTAGE = "generator-outage"
LINE_OUTAGE = "line-outage"
TRANSFORMER_OUTAGE = "transformer-outage"
CONTINGENCY_KINDS = (GENERATOR_OUTAGE, LINE_OUTAGE, TRANSFORMER_OUTAGE)


class CaseError(Exception):
    """Raised for malformed case files."""


class CaseValidationError(CaseError):
    """Raised when a parsed case violates model invariants.

    Carries every violation found, not just the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("case validation failed:\n" + "\n".join(self.violations))


@dataclass(frozen=True)
class Bus:
    id: str
    v_min: float
    v_max: float
    base_kv: float
    p_load: float = 0.0
    q_load: float = 0.0
    g_fs: float = 0.0
    b_fs: float = 0.0
    bcs_min: float = 0.0
    bcs_max: float = 0.0


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    alpha: float = 1.0
    # Convex piecewise-linear cost: ((quantity_break, marginal_price), ...) with
    # non-decreasing prices; segment j covers output between break j-1 and break j.
    cost_curve: tuple = ()


@dataclass(frozen=True)
class Line:
    id: str
    origin: str
    destination: str
    g: float
    b: float
    b_ch: float
    r_max: float
    r_max_ctg: float


@dataclass(frozen=True)
class Transformer:
    id: str
    origin: str
    destination: str
    g: float
    b: float
    tau: float
    theta_shift: float
    g_mag: float
    b_mag: float
    s_max: float
    s_max_ctg: float


@dataclass(frozen=True)
class Contingency:
    id: str
    kind: str
    outaged: str
    responding_gens: tuple = ()


@dataclass(frozen=True)
class PenaltyConfig:
    breakpoints: tuple = (0.02, 0.1)
    slopes: tuple = (1e3, 5e3, 1e6)


@dataclass(frozen=True)
class Network:
    buses: tuple
    generators: tuple
    lines: tuple
    transformers: tuple
    contingencies: tuple
    penalty_config: PenaltyConfig
    reference_bus: str

    def __post_init__(self):
        object.__setattr__(self, "_bus_index", {b.id: i for i, b in enumerate(self.buses)})
        object.__setattr__(self, "_gen_index", {g.id: i for i, g in enumerate(self.generators)})
        object.__setattr__(self, "_line_index", {e.id: i for i, e in enumerate(self.lines)})
        object.__setattr__(self, "_xf_index", {f.id: i for i, f in enumerate(self.transformers)})
        object.__setattr__(self, "_ctg_index", {k.id: i for i, k in enumerate(self.contingencies)})

    def bus_index(self, bus_id):
        return self._bus_index[bus_id]

    def gen_index(self, gen_id):
        return self._gen_index[gen_id]

    def line_index(self, line_id):
        return self._line_index[line_id]

    def xf_index(self, xf_id):
        return self._xf_index[xf_id]

    def contingency(self, ctg_id):
        return self.contingencies[self._ctg_index[ctg_id]]

    def gens_at_bus(self, bus_id):
        return tuple(g for g in self.generators if g.bus == bus_id)

    @property
    def branches(self):
        """Lines followed by transformers, the canonical branch ordering."""
        return self.lines + self.transformers

    def bus_degree(self, bus_id):
        deg = 0
        for br in self.branches:
            if br.origin == bus_id or br.destination == bus_id:
                deg += 1
        return deg

    def neighbors(self, bus_id):
        out = set()
        for br in self.branches:
            if br.origin == bus_id:
                out.add(br.destination)
            elif br.destination == bus_id:
                out.add(br.origin)
        return out


@dataclass(frozen=True)
class PreprocessReport:
    # Groups of parallel line/transformer ids whose rating constraints are
    # redundant while all members are in service; first id is the
    # representative that keeps its constraint.  When a member of a group is
    # outaged, every surviving member must keep its rating constraint.
    line_rating_groups: tuple = ()
    xf_rating_groups: tuple = ()
    # Buses with multiple generators, marked for reactive aggregation:
    # (bus_id, gen_ids, q_min_sum, q_max_sum).
    reactive_groups: tuple = ()
    # Contingency ids removed as trivially redundant, with the kept id:
    # (removed_id, kept_id).
    removed_contingencies: tuple = ()

    @property
    def empty(self):
        return not (self.line_rating_groups or self.xf_rating_groups
                    or self.reactive_groups or self.removed_contingencies)

    def skip_rating_ids(self, outaged=None):
        """Branch ids whose rating rows may be dropped when `outaged` is out.

        A non-representative member is droppable only if no member of its
        group is the outaged component.
        """
        skip = set()
        for groups in (self.line_rating_groups, self.xf_rating_groups):
            for grp in groups:
                if outaged is not None and outaged in grp:
                    continue
                skip.update(grp[1:])
        return skip


def _num(obj, key, where, errors, default=None):
    if key not in obj:
        if default is not None:
            return default
        errors.append(f"{where}: missing field '{key}'")
        return 0.0
    val = obj[key]
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        errors.append(f"{where}: field '{key}' is not a number")
        return 0.0
    return float(val)


def loads_case(text):
    """Parse a JSON case document into a validated Network."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"malformed case file: {exc}") from exc
    if not isinstance(doc, dict):
        raise CaseError("malformed case file: top level must be an object")

    errors = []

    buses = []
    for raw in doc.get("buses", []):
        bid = str(raw.get("id", "?"))
        where = f"bus {bid}"
        buses.append(Bus(
            id=bid,
            v_min=_num(raw, "v_min", where, errors),
            v_max=_num(raw, "v_max", where, errors),
            base_kv=_num(raw, "base_kv", where, errors),
            p_load=_num(raw, "p_load", where, errors, 0.0),
            q_load=_num(raw, "q_load", where, errors, 0.0),
            g_fs=_num(raw, "g_fs", where, errors, 0.0),
            b_fs=_num(raw, "b_fs", where, errors, 0.0),
            bcs_min=_num(raw, "bcs_min", where, errors, 0.0),
            bcs_max=_num(raw, "bcs_max", where, errors, 0.0),
        ))

    generators = []
    for raw in doc.get("generators", []):
        gid = str(raw.get("id", "?"))
        where = f"generator {gid}"
        cost = raw.get("cost", [])
        curve = []
        for seg in cost:
            if (not isinstance(seg, (list, tuple))) or len(seg) != 2:
                errors.append(f"{where}: cost segments must be [quantity, price] pairs")
                continue
            curve.append((float(seg[0]), float(seg[1])))
        generators.append(Generator(
            id=gid,
            bus=str(raw.get("bus", "")),
            p_min=_num(raw, "p_min", where, errors),
            p_max=_num(raw, "p_max", where, errors),
            q_min=_num(raw, "q_min", where, errors),
            q_max=_num(raw, "q_max", where, errors),
            alpha=_num(raw, "alpha", where, errors, 1.0),
            cost_curve=tuple(curve),
        ))

    lines = []
    for raw in doc.get("lines", []):
        eid = str(raw.get("id", "?"))
        where = f"line {eid}"
        r_max = _num(raw, "r_max", where, errors)
        lines.append(Line(
            id=eid,
            origin=str(raw.get("origin", "")),
            destination=str(raw.get("destination", "")),
            g=_num(raw, "g", where, errors),
            b=_num(raw, "b", where, errors),
            b_ch=_num(raw, "b_ch", where, errors, 0.0),
            r_max=r_max,
            r_max_ctg=_num(raw, "r_max_ctg", where, errors, r_max if r_max else None),
        ))

    transformers = []
    for raw in doc.get("transformers", []):
        fid = str(raw.get("id", "?"))
        where = f"transformer {fid}"
        s_max = _num(raw, "s_max", where, errors)
        transformers.append(Transformer(
            id=fid,
            origin=str(raw.get("origin", "")),
            destination=str(raw.get("destination", "")),
            g=_num(raw, "g", where, errors),
            b=_num(raw, "b", where, errors),
            tau=_num(raw, "tau", where, errors, 1.0),
            theta_shift=_num(raw, "theta_shift", where, errors, 0.0),
            g_mag=_num(raw, "g_mag", where, errors, 0.0),
            b_mag=_num(raw, "b_mag", where, errors, 0.0),
            s_max=s_max,
            s_max_ctg=_num(raw, "s_max_ctg", where, errors, s_max if s_max else None),
        ))

    contingencies = []
    for raw in doc.get("contingencies", []):
        kid = str(raw.get("id", "?"))
        contingencies.append(Contingency(
            id=kid,
            kind=str(raw.get("kind", "")),
            outaged=str(raw.get("outaged", "")),
            responding_gens=tuple(str(g) for g in raw.get("responding_gens", [])),
        ))

    pen = doc.get("penalty", {})
    penalty = PenaltyConfig(
        breakpoints=tuple(float(x) for x in pen.get("breakpoints", PenaltyConfig.breakpoints)),
        slopes=tuple(float(x) for x in pen.get("slopes", PenaltyConfig.slopes)),
    )

    net = Network(
        buses=tuple(buses),
        generators=tuple(generators),
        lines=tuple(lines),
        transformers=tuple(transformers),
        contingencies=tuple(contingencies),
        penalty_config=penalty,
        reference_bus=str(doc.get("reference_bus", "")),
    )
    errors.extend(validate(net))
    if errors:
        raise CaseValidationError(errors)
    return net


def load_case(path):
    """Load and validate a JSON case file."""
    with open(path, encoding="utf-8") as fh:
        return loads_case(fh.read())


def dumps_case(net):
    doc = {
        "buses": [{
            "id": b.id, "v_min": b.v_min, "v_max": b.v_max, "base_kv": b.base_kv,
            "p_load": b.p_load, "q_load": b.q_load, "g_fs": b.g_fs, "b_fs": b.b_fs,
            "bcs_min": b.bcs_min, "bcs_max": b.bcs_max,
        } for b in net.buses],
        "generators": [{
            "id": g.id, "bus": g.bus, "p_min": g.p_min, "p_max": g.p_max,
            "q_min": g.q_min, "q_max": g.q_max, "alpha": g.alpha,
            "cost": [[q, c] for q, c in g.cost_curve],
        } for g in net.generators],
        "lines": [{
            "id": e.id, "origin": e.origin, "destination": e.destination,
            "g": e.g, "b": e.b, "b_ch": e.b_ch,
            "r_max": e.r_max, "r_max_ctg": e.r_max_ctg,
        } for e in net.lines],
        "transformers": [{
            "id": f.id, "origin": f.origin, "destination": f.destination,
            "g": f.g, "b": f.b, "tau": f.tau, "theta_shift": f.theta_shift,
            "g_mag": f.g_mag, "b_mag": f.b_mag,
            "s_max": f.s_max, "s_max_ctg": f.s_max_ctg,
        } for f in net.transformers],
        "contingencies": [{
            "id": k.id, "kind": k.kind, "outaged": k.outaged,
            "responding_gens": list(k.responding_gens),
        } for k in net.contingencies],
        "penalty": {
            "breakpoints": list(net.penalty_config.breakpoints),
            "slopes": list(net.penalty_config.slopes),
        },
        "reference_bus": net.reference_bus,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def write_case(net, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_case(net))


def validate(net):
    """Return the list of invariant violations for a Network (empty if valid)."""
    errors = []
    bus_ids = set()
    for b in net.buses:
        if b.id in bus_ids:
            errors.append(f"bus {b.id}: duplicate id")
        bus_ids.add(b.id)
        if not b.v_min > 0:
            errors.append(f"bus {b.id}: v_min > 0 violated (v_min={b.v_min})")
        if b.v_min > b.v_max:
            errors.append(f"bus {b.id}: v_min <= v_max violated")
        if b.bcs_min > b.bcs_max:
            errors.append(f"bus {b.id}: bcs_min <= bcs_max violated")

    gen_ids = set()
    for g in net.generators:
        if g.id in gen_ids:
            errors.append(f"generator {g.id}: duplicate id")
        gen_ids.add(g.id)
        if g.bus not in bus_ids:
            errors.append(f"generator {g.id}: unknown bus '{g.bus}'")
        if g.p_min > g.p_max:
            errors.append(f"generator {g.id}: p_min <= p_max violated")
        if g.q_min > g.q_max:
            errors.append(f"generator {g.id}: q_min <= q_max violated")
        if g.alpha < 0:
            errors.append(f"generator {g.id}: alpha >= 0 violated")
        prev_q = 0.0
        prev_price = None
        for q, price in g.cost_curve:
            if q < prev_q:
                errors.append(f"generator {g.id}: cost quantity breaks must increase")
                break
            if prev_price is not None and price < prev_price:
                errors.append(f"generator {g.id}: cost marginal prices must be non-decreasing")
                break
            prev_q, prev_price = q, price
        if g.cost_curve and g.cost_curve[-1][0] < g.p_max:
            errors.append(f"generator {g.id}: cost curve must cover p_max")

    branch_ids = set()
    for e in net.lines:
        if e.id in branch_ids:
            errors.append(f"line {e.id}: duplicate id")
        branch_ids.add(e.id)
        for end in (e.origin, e.destination):
            if end not in bus_ids:
                errors.append(f"line {e.id}: unknown bus '{end}'")
        if e.origin == e.destination:
            errors.append(f"line {e.id}: origin != destination violated")
        if not e.r_max > 0:
            errors.append(f"line {e.id}: r_max > 0 violated")
        if e.r_max_ctg < e.r_max:
            errors.append(f"line {e.id}: r_max_ctg >= r_max violated")

    for f in net.transformers:
        if f.id in branch_ids:
            errors.append(f"transformer {f.id}: duplicate id")
        branch_ids.add(f.id)
        for end in (f.origin, f.destination):
            if end not in bus_ids:
                errors.append(f"transformer {f.id}: unknown bus '{end}'")
        if f.origin == f.destination:
            errors.append(f"transformer {f.id}: origin != destination violated")
        if not f.tau > 0:
            errors.append(f"transformer {f.id}: tau > 0 violated")
        if not f.s_max > 0:
            errors.append(f"transformer {f.id}: s_max > 0 violated")
        if f.s_max_ctg < f.s_max:
            errors.append(f"transformer {f.id}: s_max_ctg >= s_max violated")

    ctg_ids = set()
    for k in net.contingencies:
        if k.id in ctg_ids:
            errors.append(f"contingency {k.id}: duplicate id")
        ctg_ids.add(k.id)
        if k.kind not in CONTINGENCY_KINDS:
            errors.append(f"contingency {k.id}: unknown kind '{k.kind}'")
        elif k.kind == GENERATOR_OUTAGE:
            if k.outaged not in gen_ids:
                errors.append(f"contingency {k.id}: unknown generator '{k.outaged}'")
        elif k.kind == LINE_OUTAGE:
            if k.outaged not in {e.id for e in net.lines}:
                errors.append(f"contingency {k.id}: unknown line '{k.outaged}'")
        else:
            if k.outaged not in {f.id for f in net.transformers}:
                errors.append(f"contingency {k.id}: unknown transformer '{k.outaged}'")
        for g in k.responding_gens:
            if g not in gen_ids:
                errors.append(f"contingency {k.id}: unknown responding generator '{g}'")
            elif k.kind == GENERATOR_OUTAGE and g == k.outaged:
                errors.append(f"contingency {k.id}: responding generator '{g}' is the outaged unit")

    pc = net.penalty_config
    if any(b2 <= b1 for b1, b2 in zip(pc.breakpoints, pc.breakpoints[1:])):
        errors.append("penalty: breakpoints must be strictly increasing")
    if any(s2 <= s1 for s1, s2 in zip(pc.slopes, pc.slopes[1:])):
        errors.append("penalty: slopes must be strictly increasing")
    if len(pc.slopes) != len(pc.breakpoints) + 1:
        errors.append("penalty: need exactly one more slope than breakpoints")

    if net.reference_bus not in bus_ids:
        errors.append(f"reference bus '{net.reference_bus}' not found")

    if net.buses and not _connected(net):
        errors.append("network graph is not connected")

    return errors


def _connected(net):
    adj = {b.id: set() for b in net.buses}
    for br in net.branches:
        if br.origin in adj and br.destination in adj:
            adj[br.origin].add(br.destination)
            adj[br.destination].add(br.origin)
    seen = {net.buses[0].id}
    stack = [net.buses[0].id]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(net.buses)


def _line_elec_key(e):
    pair = tuple(sorted((e.origin, e.destination)))
    return (pair, e.g, e.b, e.b_ch, e.r_max, e.r_max_ctg)


def _xf_elec_key(f):
    pair = tuple(sorted((f.origin, f.destination)))
    return (pair, f.g, f.b, f.tau, f.theta_shift, f.g_mag, f.b_mag, f.s_max, f.s_max_ctg)


def _gen_elec_key(g):
    return (g.bus, g.p_min, g.p_max, g.q_min, g.q_max, g.alpha, g.cost_curve)


def preprocess(net):
    """Mark redundant rating rows and co-located generators; drop redundant contingencies.

    Returns ``(new_network, report)``.  Pure and idempotent: the network is
    only changed by removing trivially redundant contingencies.
    """
    line_groups = {}
    for e in net.lines:
        pair = tuple(sorted((e.origin, e.destination)))
        line_groups.setdefault((pair, e.g, e.b, e.r_max), []).append(e.id)
    line_rating_groups = tuple(
        tuple(sorted(ids)) for key, ids in sorted(line_groups.items()) if len(ids) > 1
    )

    xf_groups = {}
    for f in net.transformers:
        pair = tuple(sorted((f.origin, f.destination)))
        xf_groups.setdefault((pair, f.g, f.b, f.tau, f.theta_shift, f.s_max), []).append(f.id)
    xf_rating_groups = tuple(
        tuple(sorted(ids)) for key, ids in sorted(xf_groups.items()) if len(ids) > 1
    )

    by_bus = {}
    for g in net.generators:
        by_bus.setdefault(g.bus, []).append(g)
    reactive_groups = tuple(
        (bus, tuple(g.id for g in gens),
         sum(g.q_min for g in gens), sum(g.q_max for g in gens))
        for bus, gens in sorted(by_bus.items()) if len(gens) > 1
    )

    # Trivially redundant contingencies: outages of components with identical
    # electrical parameters (and identical responding sets).  Keep the
    # lexicographically smallest contingency id of each class.
    elec_key = {}
    for e in net.lines:
        elec_key[(LINE_OUTAGE, e.id)] = _line_elec_key(e)
    for f in net.transformers:
        elec_key[(TRANSFORMER_OUTAGE, f.id)] = _xf_elec_key(f)
    for g in net.generators:
        elec_key[(GENERATOR_OUTAGE, g.id)] = _gen_elec_key(g)

    classes = {}
    for k in net.contingencies:
        key = (k.kind, elec_key.get((k.kind, k.outaged)), tuple(sorted(k.responding_gens)))
        classes.setdefault(key, []).append(k.id)

    removed = []
    removed_ids = set()
    for key, ids in sorted(classes.items(), key=lambda kv: kv[1]):
        ids = sorted(ids)
        for rid in ids[1:]:
            removed.append((rid, ids[0]))
            removed_ids.add(rid)

    new_net = net
    if removed_ids:
        new_net = replace(
            net,
            contingencies=tuple(k for k in net.contingencies if k.id not in removed_ids),
        )

    report = PreprocessReport(
        line_rating_groups=line_rating_groups,
        xf_rating_groups=xf_rating_groups,
        reactive_groups=reactive_groups,
        removed_contingencies=tuple(sorted(removed)),
    )
    return new_net, report


def disaggregate_reactive(aggregate_q, members, tol=1e-9):
    """Split an aggregate reactive output across co-located generators.

    The allocation is proportional to each member's bound range, clamped to
    individual bounds with the residual redistributed; the outputs sum to the
    input exactly.
    """
    lo = sum(g.q_min for g in members)
    hi = sum(g.q_max for g in members)
    if aggregate_q < lo - tol or aggregate_q > hi + tol:
        raise ValueError(
            f"aggregate reactive power {aggregate_q} outside summed bounds [{lo}, {hi}]")
    aggregate_q = min(max(aggregate_q, lo), hi)

    ranges = [g.q_max - g.q_min for g in members]
    total_range = sum(ranges)
    if total_range <= 0.0:
        return [g.q_min for g in members]
    frac = (aggregate_q - lo) / total_range
    out = [g.q_min + frac * r for g, r in zip(members, ranges)]
    # Proportional split is feasible by construction (0 <= frac <= 1), but
    # guard against roundoff at the extremes.
    residual = aggregate_q - sum(out)
    for i, g in enumerate(members):
        room = g.q_max - out[i] if residual > 0 else out[i] - g.q_min
        step = min(abs(residual), max(room, 0.0))
        out[i] += step if residual > 0 else -step
        residual -= step if residual > 0 else -step
        if abs(residual) <= tol:
            break
    return out
