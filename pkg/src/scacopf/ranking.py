"""Contingency ranking: features, ridge-regression predictor, priority lists.

Each contingency maps to ten features (type one-hots, lost active/apparent
power, capacity-relative loss, voltage rating, bus degrees, parallel-branch
weight) extracted from the network topology and the base-case solution.  A
ridge regression over these features predicts the contingency's penalty; the
descending prediction order is the initial priority ranking.  Three
single-feature baselines are provided for comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .case_model import Line, Network
from .select import PriorityEntry, PriorityList

__all__ = [
    "FeatureVector",
    "RidgeModel",
    "FEATURE_NAMES",
    "extract_features",
    "train_ridge",
    "rank_initial",
    "rank_baseline",
    "save_model",
    "load_model",
]

FEATURE_NAMES = ("t_g", "t_l", "t_t", "l_p", "l_s", "l_c",
                 "v_d", "d_o", "d_d", "pi")
PARALLEL_WEIGHT = 10.0


@dataclass(frozen=True)
class FeatureVector:
    t_g: float
    t_l: float
    t_t: float
    l_p: float
    l_s: float
    l_c: float
    v_d: float
    d_o: float
    d_d: float
    pi: float

    def as_array(self):
        return np.array([getattr(self, n) for n in FEATURE_NAMES])


@dataclass
class RidgeModel:
    weights: np.ndarray  # one per feature, FEATURE_NAMES order
    intercept: float
    reg_lambda: float

    def predict(self, features: FeatureVector):
        return float(self.weights @ features.as_array() + self.intercept)


def _branch_feature_parts(net, br, base):
    bi = net.branches.index(br)
    p_o, q_o, p_d, q_d = np.abs(base.state.flows[bi])
    s_o = math.hypot(p_o, q_o)
    s_d = math.hypot(p_d, q_d)
    o = net.bus_index(br.origin)
    d = net.bus_index(br.destination)
    if isinstance(br, Line):
        den_o = br.r_max * base.state.v[o]
        den_d = br.r_max * base.state.v[d]
    else:
        den_o = den_d = br.s_max
    l_c = max(
        math.sqrt(s_o * s_o / den_o) if den_o > 0 else 0.0,
        math.sqrt(s_d * s_d / den_d) if den_d > 0 else 0.0,
    )
    return max(p_o, p_d), max(s_o, s_d), l_c, o, d


def _has_parallel(net, br):
    pair = frozenset((br.origin, br.destination))
    for other in net.branches:
        if other is br:
            continue
        if frozenset((other.origin, other.destination)) == pair:
            return True
    return False


def extract_features(net: Network, k, base) -> FeatureVector:
    if k.kind == "generator-outage":
        g = net.generators[net.gen_index(k.outaged)]
        gi = net.gen_index(k.outaged)
        p = abs(float(base.state.p_gen[gi]))
        q = abs(float(base.state.q_gen[gi]))
        l_s = math.hypot(p, q)
        cap = math.hypot(g.p_max, g.q_max)
        l_c = l_s / cap if cap > 0 else 0.0
        bus = g.bus
        # highest voltage rating among the generator's bus and its neighbors
        kvs = [net.buses[net.bus_index(b)].base_kv
               for b in [bus] + list(net.neighbors(bus))]
        return FeatureVector(
            t_g=1.0, t_l=0.0, t_t=0.0, l_p=p, l_s=l_s, l_c=l_c,
            v_d=max(kvs), d_o=float(net.bus_degree(bus)), d_d=0.0, pi=0.0,
        )
    br = next(b for b in net.branches if b.id == k.outaged)
    l_p, l_s, l_c, o, d = _branch_feature_parts(net, br, base)
    is_line = isinstance(br, Line)
    return FeatureVector(
        t_g=0.0, t_l=1.0 if is_line else 0.0, t_t=0.0 if is_line else 1.0,
        l_p=l_p, l_s=l_s, l_c=l_c,
        v_d=net.buses[d].base_kv,
        d_o=float(net.bus_degree(br.origin)),
        d_d=float(net.bus_degree(br.destination)),
        pi=PARALLEL_WEIGHT if _has_parallel(net, br) else 0.0,
    )


def _ridge_closed_form(X, y, reg_lambda):
    """Standardized closed-form ridge with unpenalized intercept, returned in
    the original feature scale."""
    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    varying = x_std > 0  # constant columns carry no signal; weight 0
    Xs = (X[:, varying] - x_mean[varying]) / x_std[varying]
    y_mean = y.mean()
    ys = y - y_mean
    p = int(varying.sum())
    A = Xs.T @ Xs + reg_lambda * np.eye(p)
    if reg_lambda == 0.0 and (p == 0 or np.linalg.matrix_rank(A) < p):
        raise ValueError("degenerate design matrix with reg_lambda=0; "
                         "use a positive reg_lambda")
    w_std = np.linalg.solve(A, Xs.T @ ys) if p else np.zeros(0)
    weights = np.zeros(X.shape[1])
    weights[varying] = w_std / x_std[varying]
    intercept = y_mean - float(weights @ x_mean)
    return weights, intercept


def train_ridge(samples, reg_lambda=1.0, folds=1, repetitions=10,
                seed=0) -> RidgeModel:
    """Closed-form ridge fit averaged over shuffled-fold repetitions.

    With ``folds=1`` every repetition trains on the full sample and the
    average equals a single closed-form fit.  With more folds, each repetition
    shuffles the samples, trains one model per held-out fold on the remaining
    data, and all per-fold parameters are averaged.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    if reg_lambda < 0:
        raise ValueError("reg_lambda must be nonnegative")
    X = np.array([fv.as_array() for fv, _ in samples])
    y = np.array([float(pen) for _, pen in samples])

    rng = np.random.default_rng(seed)
    w_acc = np.zeros(X.shape[1])
    b_acc = 0.0
    count = 0
    for _ in range(repetitions):
        if folds <= 1:
            w, b = _ridge_closed_form(X, y, reg_lambda)
            w_acc += w
            b_acc += b
            count += 1
            continue
        perm = rng.permutation(len(y))
        parts = np.array_split(perm, folds)
        for held_out in parts:
            train = np.setdiff1d(perm, held_out)
            if len(train) < 2:
                continue
            w, b = _ridge_closed_form(X[train], y[train], reg_lambda)
            w_acc += w
            b_acc += b
            count += 1
    if count == 0:
        raise ValueError("no trainable folds; reduce folds or add samples")
    return RidgeModel(weights=w_acc / count, intercept=b_acc / count,
                      reg_lambda=reg_lambda)


def _build_list(scored, boosted=frozenset()):
    """Priority list: boosted ids first, each group by descending score then
    ascending id."""
    entries = sorted(
        scored,
        key=lambda it: (it[0] not in boosted, -it[1], it[0]),
    )
    return PriorityList(entries=[
        PriorityEntry(contingency_id=cid, priority=score)
        for cid, score in entries
    ])


def rank_initial(net: Network, base, model: RidgeModel,
                 candidate_boost=frozenset()) -> PriorityList:
    scored = [(k.id, model.predict(extract_features(net, k, base)))
              for k in net.contingencies]
    return _build_list(scored, frozenset(candidate_boost))


def rank_baseline(net: Network, base, heuristic) -> PriorityList:
    if heuristic not in ("l_p", "l_s", "l_c"):
        raise ValueError(f"unknown heuristic {heuristic!r}")
    scored = [(k.id, getattr(extract_features(net, k, base), heuristic))
              for k in net.contingencies]
    return _build_list(scored)


def save_model(model: RidgeModel, path):
    with open(path, "w") as fh:
        json.dump({
            "weights": [float(w) for w in model.weights],
            "intercept": float(model.intercept),
            "reg_lambda": float(model.reg_lambda),
        }, fh, indent=2)
        fh.write("\n")


def load_model(path) -> RidgeModel:
    with open(path) as fh:
        data = json.load(fh)
    weights = np.asarray(data["weights"], dtype=float)
    if weights.shape != (len(FEATURE_NAMES),):
        raise ValueError("model weight vector must have "
                         f"{len(FEATURE_NAMES)} entries")
    return RidgeModel(weights=weights, intercept=float(data["intercept"]),
                      reg_lambda=float(data["reg_lambda"]))
