"""Two-phase run orchestration.

Code 1 produces base-case solutions under a hard time limit: solve the base
case from a flat start, rank contingencies, evaluate them (fast sweep, then
full evaluations from the top of the priority list), select an undominated
subset into a master problem, re-solve, and repeat while time remains.  The
product is always the most recently *written* base solution file.

Code 2 evaluates every contingency against a given base solution under a
per-contingency time budget and writes one solution file per contingency, no
matter what fails.

Budgets are wall-clock by default; in deterministic mode one second of budget
buys a fixed number of solver iterations and no clock is consulted, so runs
are reproducible byte-for-byte.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import compl as compl_mod
from . import eval as eval_mod
from .case_model import Network, preprocess
from .nlp import solve_nlp
from .ranking import RidgeModel, rank_baseline, rank_initial
from .scopf import (
    LOWER,
    MIDDLE,
    UPPER,
    MasterSpec,
    OperatingPoint,
    build_base_problem,
    build_master_problem,
    flows_from_state,
    generation_cost,
    point_penalty,
    slacks_from_state,
)
from .acpf import FlowState
from .select import resort, select_top, summarize_point

__all__ = [
    "RunConfig",
    "Code1Result",
    "Code2Result",
    "flat_start",
    "run_code1",
    "run_code2",
    "write_base_solution",
    "load_base_solution",
    "write_contingency_solution",
    "load_contingency_solution",
]


@dataclass
class RunConfig:
    code1_time_limit: float = 600.0
    init_fast_eval_budget: float = 60.0
    full_eval_budget: float = 30.0
    per_contingency_code2_factor: float = 2.0
    n_select: int = 3
    cutoff: float = None  # None -> penalty of a 2e-2 per-unit violation
    worker_threads: int = 1
    deterministic: bool = False
    seed: int = 0
    output_dir: str = "."
    candidate_boost: tuple = ()

    def __post_init__(self):
        for name in ("code1_time_limit", "init_fast_eval_budget",
                     "full_eval_budget", "per_contingency_code2_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_select < 1:
            raise ValueError("n_select must be >= 1")
        if self.worker_threads < 1:
            raise ValueError("worker_threads must be >= 1")


@dataclass
class Code1Result:
    base_point: OperatingPoint
    base_tag: int
    objective: float
    penalty: float
    included: list
    solution_path: str
    log_path: str
    iterations: int = 0


@dataclass
class Code2Result:
    results: dict  # contingency id -> EvaluationResult
    files: list
    elapsed: float = 0.0


# --- starting point -----------------------------------------------------------

def flat_start(net: Network) -> OperatingPoint:
    """Flat start: generation at active upper limits with zero reactive
    output, voltages and shunts at bound midpoints, angles and flows at zero;
    slacks absorb whatever residuals that leaves."""
    nb = len(net.buses)
    state = FlowState(
        v=np.array([(b.v_min + b.v_max) / 2 for b in net.buses]),
        theta=np.zeros(nb),
        bcs=np.array([(b.bcs_min + b.bcs_max) / 2 for b in net.buses]),
        p_gen=np.array([g.p_max for g in net.generators]),
        q_gen=np.zeros(len(net.generators)),
        flows=np.zeros((len(net.branches), 4)),
    )
    return slacks_from_state(net, state)


# --- solution files -----------------------------------------------------------

def _atomic_write(path, text):
    """Write-then-rename so readers never observe a torn file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-scacopf-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _point_payload(net, point):
    return {
        "bus": {b.id: {"v": float(point.state.v[i]),
                       "theta": float(point.state.theta[i]),
                       "bcs": float(point.state.bcs[i])}
                for i, b in enumerate(net.buses)},
        "gen": {g.id: {"p": float(point.state.p_gen[gi]),
                       "q": float(point.state.q_gen[gi])}
                for gi, g in enumerate(net.generators)},
    }


def _point_from_payload(net, data, outaged=None, ctg_ratings=False,
                        delta=0.0):
    nb = len(net.buses)
    state = FlowState(
        v=np.array([data["bus"][b.id]["v"] for b in net.buses]),
        theta=np.array([data["bus"][b.id]["theta"] for b in net.buses]),
        bcs=np.array([data["bus"][b.id]["bcs"] for b in net.buses]),
        p_gen=np.array([data["gen"][g.id]["p"] for g in net.generators]),
        q_gen=np.array([data["gen"][g.id]["q"] for g in net.generators]),
        flows=np.zeros((len(net.branches), 4)),
    )
    state = flows_from_state(net, state, outaged)
    return slacks_from_state(net, state, outaged, ctg_ratings=ctg_ratings,
                             delta=delta)


def write_base_solution(path, net, point, tag, objective, penalty):
    payload = {"tag": int(tag), **_point_payload(net, point),
               "objective": float(objective), "penalty": float(penalty)}
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")


def load_base_solution(path, net):
    with open(path) as fh:
        data = json.load(fh)
    point = _point_from_payload(net, data)
    return point, int(data["tag"]), data


_SEG_LETTER = {LOWER: "L", MIDDLE: "M", UPPER: "U"}
_SEG_FROM_LETTER = {v: k for k, v in _SEG_LETTER.items()}


def write_contingency_solution(path, net, result):
    st = result.compl
    payload = {
        "contingency": result.contingency_id,
        "base_tag": result.base_tag,
        "delta_k": float(st.delta),
        "segments": {
            "active": {g: _SEG_LETTER[s] for g, s in sorted(st.active.items())},
            "reactive": {g: _SEG_LETTER[s]
                         for g, s in sorted(st.reactive.items())},
        },
        **_point_payload(net, result.point),
        "penalty": float(result.penalty),
        "method": result.method,
        "status": result.status,
    }
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")


def load_contingency_solution(path, net):
    with open(path) as fh:
        data = json.load(fh)
    k = net.contingency(data["contingency"])
    point = _point_from_payload(net, data, outaged=k.outaged,
                                ctg_ratings=True,
                                delta=float(data["delta_k"]))
    st = compl_mod.ComplementarityState(
        active={g: _SEG_FROM_LETTER[s]
                for g, s in data["segments"]["active"].items()},
        reactive={g: _SEG_FROM_LETTER[s]
                  for g, s in data["segments"]["reactive"].items()},
        delta=float(data["delta_k"]),
    )
    return point, st, data


class _RunLog:
    """JSON-lines event log; deterministic mode stamps events with a counter
    instead of the wall clock."""

    def __init__(self, path, deterministic=False):
        self.path = path
        self.deterministic = deterministic
        self.t0 = time.monotonic()
        self.counter = 0
        self.events = []
        if path:
            with open(path, "w"):
                pass

    def emit(self, event, **fields):
        self.counter += 1
        stamp = (self.counter if self.deterministic
                 else round(time.monotonic() - self.t0, 6))
        record = {"event": event, "t": stamp, **fields}
        self.events.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


class _Clock:
    """Total-run budget; frozen in deterministic mode."""

    def __init__(self, limit, deterministic):
        self.limit = limit
        self.deterministic = deterministic
        self.t0 = time.monotonic()
        self.det_used = 0.0  # deterministic "seconds" charged by phases

    def charge(self, seconds):
        if self.deterministic:
            self.det_used += seconds

    def elapsed(self):
        if self.deterministic:
            return self.det_used
        return time.monotonic() - self.t0

    def remaining(self):
        return self.limit - self.elapsed()


# --- Code 1 -------------------------------------------------------------------

def _solve_base(net, report, start, clock, log, seed):
    prob = build_base_problem(net, report, start=start)
    kwargs = {} if clock.deterministic else {
        "time_limit": max(1.0, clock.remaining())}
    sol = solve_nlp(prob, tol=1e-8, **kwargs)
    if sol.status in ("optimal", "max_iter", "time_limit") and np.all(
            np.isfinite(sol.x)) and sol.constraint_violation < 1e-6:
        return prob, sol
    log.emit("base-solve-retry", status=sol.status)
    rng = np.random.default_rng(seed)
    perturbed = start.copy()
    perturbed.state.v *= 1.0 + rng.uniform(-0.01, 0.01,
                                           size=perturbed.state.v.shape)
    for i, b in enumerate(net.buses):
        perturbed.state.v[i] = min(max(perturbed.state.v[i], b.v_min),
                                   b.v_max)
    prob = build_base_problem(net, report, start=perturbed)
    sol = solve_nlp(prob, tol=1e-8, **kwargs)
    if sol.status in ("optimal", "max_iter", "time_limit") and np.all(
            np.isfinite(sol.x)) and sol.constraint_violation < 1e-6:
        return prob, sol
    if sol.status == "time_limit":
        raise TimeoutError("time limit reached before a base solution "
                           "could be written")
    raise RuntimeError(
        f"base case solve failed twice (last status: {sol.status})")


def _reprice_base(net, point):
    """Explicit base objective and penalty, with flows and slacks recomputed
    from the stored state so readers recover identical numbers."""
    repriced = slacks_from_state(net, flows_from_state(net, point.state))
    cost = generation_cost(net, point.state.p_gen)
    pen = point_penalty(net, repriced)
    return cost + pen, pen


def _evaluate_batch(net, tasks, threads):
    """Run evaluation closures, optionally on a worker pool; results are
    collected in task order regardless of completion order."""
    if threads <= 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


def run_code1(net: Network, cfg: RunConfig,
              model: RidgeModel = None) -> Code1Result:
    """Base-case production loop (ranking, evaluation, selection, master)."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    log = _RunLog(os.path.join(cfg.output_dir, "run_log.jsonl"),
                  cfg.deterministic)
    clock = _Clock(cfg.code1_time_limit, cfg.deterministic)
    cutoff = cfg.cutoff if cfg.cutoff is not None \
        else eval_mod.default_cutoff(net)

    # Step 1: preprocessing
    net_p, report = preprocess(net)
    log.emit("preprocessed",
             contingencies=len(net_p.contingencies))

    # Step 2: base solve from a flat start
    start = flat_start(net_p)
    prob, sol = _solve_base(net_p, report, start, clock, log, cfg.seed)
    base_point = prob.meta.extract_base(sol.x)
    objective, penalty = _reprice_base(net_p, base_point)
    log.emit("base-solved", objective=objective, penalty=penalty)

    # Step 3: write the first base solution
    tag = 1
    final_path = os.path.join(cfg.output_dir, "base_solution.json")

    def write_tagged(point, obj, pen):
        tagged = os.path.join(cfg.output_dir, f"base_solution_{tag}.json")
        write_base_solution(tagged, net_p, point, tag, obj, pen)
        write_base_solution(final_path, net_p, point, tag, obj, pen)
        log.emit("written", tag=tag)
        return tagged

    write_tagged(base_point, objective, penalty)
    included = []
    compl_states = {}
    master_points = {}
    master_summaries = []

    if not net_p.contingencies:
        log.emit("done", reason="no-contingencies")
        return Code1Result(base_point, tag, objective, penalty, included,
                           final_path, log.path)

    # Step 4: initial ranking (loading-ratio heuristic when no model given)
    if model is not None:
        plist = rank_initial(net_p, base_point, model,
                             candidate_boost=cfg.candidate_boost)
    else:
        plist = rank_baseline(net_p, base_point, "l_c")
    log.emit("ranked", order=[e.contingency_id for e in plist.entries])

    def base_tag_str():
        return f"base-{tag}"

    summaries = {}

    def record(results):
        for res in results:
            summaries[res.contingency_id] = summarize_point(
                res.point, res.contingency_id, res.base_tag)
            compl_states[res.contingency_id] = res.compl
            master_points[res.contingency_id] = res.point
            log.emit("evaluated", contingency=res.contingency_id,
                     penalty=res.penalty, method=res.method)

    # Step 5: fast evaluation sweep under its own budget
    sweep_budget = min(cfg.init_fast_eval_budget, max(0.0, clock.remaining()))
    per_fast = sweep_budget / max(1, len(plist.entries))
    tasks = []
    for e in plist.entries:
        k = net_p.contingency(e.contingency_id)
        tasks.append(lambda k=k: eval_mod.fast_evaluate(
            net_p, k, base_point, time_limit=per_fast, cutoff=cutoff,
            base_tag=base_tag_str(), deterministic=cfg.deterministic))
    results = _evaluate_batch(net_p, tasks, cfg.worker_threads)
    clock.charge(sweep_budget)
    record(results)
    plist = resort(plist, results)
    log.emit("resorted", order=[e.contingency_id for e in plist.entries])

    iteration = 0
    while True:
        iteration += 1
        # Step 6: full evaluations from the top of the list
        budget = min(cfg.full_eval_budget, max(0.0, clock.remaining()))
        top = [e for e in plist.entries if not e.in_master][:cfg.n_select]
        if top and budget > 0:
            per_full = budget / len(top)
            tasks = [
                (lambda e=e: eval_mod.full_evaluate(
                    net_p, net_p.contingency(e.contingency_id), base_point,
                    time_limit=per_full, base_tag=base_tag_str(),
                    deterministic=cfg.deterministic))
                for e in top
            ]
            results = _evaluate_batch(net_p, tasks, cfg.worker_threads)
            clock.charge(budget)
            record(results)
            plist = resort(plist, results)
            log.emit("resorted",
                     order=[e.contingency_id for e in plist.entries])

        # Step 7: dominance-aware selection into the master
        chosen = select_top(plist, summaries, cfg.n_select,
                            in_master_summaries=master_summaries)
        for c in chosen:
            if c not in compl_states:
                # never evaluated: include with the initial response state
                k = net_p.contingency(c)
                st = eval_mod._init_state(net_p, k, None, base_point)
                compl_states[c] = st
                master_points[c] = compl_mod.project_response(
                    st, net_p, k, base_point, base_point)
        if not chosen:
            log.emit("done", reason="nothing-to-select")
            break
        plist.mark_in_master(chosen)
        included.extend(chosen)
        master_summaries.extend(summaries[c] for c in chosen
                                if c in summaries)
        log.emit("selected", contingencies=chosen)

        # Step 8: solve the master with fixed segments; meanwhile workers
        # evaluate further down the list, unevaluated entries first
        master_t0 = time.monotonic()
        spec = MasterSpec(
            net=net_p, included=tuple(included),
            compl={c: compl_states[c] for c in included},
            base_point=base_point,
            ctg_points={c: master_points[c] for c in included
                        if c in master_points},
            report=report,
        )
        mprob = build_master_problem(spec)
        kwargs = {} if cfg.deterministic else {
            "time_limit": max(1.0, clock.remaining())}
        msol = solve_nlp(mprob, tol=1e-6, **kwargs)
        master_duration = time.monotonic() - master_t0
        clock.charge(1.0)  # nominal deterministic charge per master solve
        if not np.all(np.isfinite(msol.x)) or \
                msol.constraint_violation > 1e-4:
            log.emit("master-failed", status=msol.status)
            break
        base_point = mprob.meta.extract_base(msol.x)
        for c in included:
            master_points[c] = mprob.meta.extract_ctg(msol.x, c)
            compl_states[c] = compl_states[c].copy()
            compl_states[c].delta = master_points[c].delta
        objective, penalty = _reprice_base(net_p, base_point)
        log.emit("master-solved", objective=objective, penalty=penalty,
                 status=msol.status)

        # Step 9: write the new base solution
        tag += 1
        write_tagged(base_point, objective, penalty)

        # background evaluations against the new base: unevaluated first
        pending = [e for e in plist.entries if not e.in_master]
        pending.sort(key=lambda e: e.evaluated)  # unevaluated tier first
        refresh = pending[:cfg.n_select]
        if refresh and clock.remaining() > 0:
            budget = min(cfg.full_eval_budget, clock.remaining())
            per = budget / len(refresh)
            tasks = [
                (lambda e=e: eval_mod.prescreen_then_evaluate(
                    net_p, net_p.contingency(e.contingency_id), base_point,
                    budgets=(per / 2, per / 2), cutoff=cutoff,
                    base_tag=base_tag_str(),
                    deterministic=cfg.deterministic))
                for e in refresh
            ]
            results = _evaluate_batch(net_p, tasks, cfg.worker_threads)
            clock.charge(budget)
            record(results)
            plist = resort(plist, results)

        # Step 10: loop while a master solve plausibly fits in what remains
        if not any(not e.in_master for e in plist.entries):
            log.emit("done", reason="list-exhausted")
            break
        needed = 2.0 * master_duration if not cfg.deterministic else 2.0
        if clock.remaining() < needed:
            log.emit("done", reason="time-exhausted")
            break

    return Code1Result(base_point, tag, objective, penalty, included,
                       final_path, log.path, iterations=iteration)


# --- Code 2 -------------------------------------------------------------------

def run_code2(net: Network, cfg: RunConfig, base: OperatingPoint,
              base_tag=1, initial_order=None, model=None) -> Code2Result:
    """Evaluate every contingency and write one solution file each.

    Contingencies are processed in reverse initial-ranking order; before each
    evaluation the per-contingency budget is the remaining total thread-time
    divided by the number of unevaluated contingencies.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    t0 = time.monotonic()
    n = len(net.contingencies)
    if n == 0:
        return Code2Result(results={}, files=[], elapsed=0.0)

    if initial_order is None:
        if model is not None:
            plist = rank_initial(net, base, model,
                                 candidate_boost=cfg.candidate_boost)
        else:
            plist = rank_baseline(net, base, "l_c")
        initial_order = [e.contingency_id for e in plist.entries]
    order = list(reversed(initial_order))

    total_thread_time = cfg.per_contingency_code2_factor * n \
        * cfg.worker_threads
    cutoff = cfg.cutoff if cfg.cutoff is not None \
        else eval_mod.default_cutoff(net)
    tag_str = f"base-{base_tag}"

    results = {}
    files = []
    spent_det = 0.0
    for idx, cid in enumerate(order):
        k = net.contingency(cid)
        if cfg.deterministic:
            remaining = total_thread_time - spent_det
        else:
            remaining = total_thread_time \
                - (time.monotonic() - t0) * cfg.worker_threads
        unevaluated = n - idx
        budget = max(0.05, remaining / unevaluated)
        try:
            res = eval_mod.prescreen_then_evaluate(
                net, k, base, budgets=(budget / 2, budget / 2),
                cutoff=cutoff, base_tag=tag_str,
                deterministic=cfg.deterministic)
        except Exception:
            # guaranteed product: all-slack fallback point
            st = eval_mod._init_state(net, k, None, base)
            point = compl_mod.project_response(st, net, k, base, base)
            res = eval_mod.EvaluationResult(
                contingency_id=cid,
                penalty=point_penalty(net, point, k.outaged),
                point=point, compl=st, method="fast", base_tag=tag_str,
                elapsed=0.0, status="fallback")
        spent_det += budget
        results[cid] = res
        path = os.path.join(cfg.output_dir, f"contingency_{cid}.json")
        write_contingency_solution(path, net, res)
        files.append(path)

    return Code2Result(results=results, files=files,
                       elapsed=time.monotonic() - t0)
