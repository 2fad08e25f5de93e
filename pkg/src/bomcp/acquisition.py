"""Expected Improvement and its maximization over candidate actions.

Action branching treats the unknown action-value function as a GP surrogate
and adds the action maximizing the expected improvement over the incumbent
best child value. Discrete spaces are searched exhaustively; continuous
boxes with a multi-start quasi-Newton ascent (L-BFGS-B on -EI with central
finite-difference gradients).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .gp import GPConfig, ObservationSet, knn_posterior_batch

# Finite-difference step for EI gradients, as a fraction of box width.
FD_STEP_FRAC = 1e-6

# A continuous branching result closer than this to an existing child is
# rejected and the next-best optimizer endpoint is used instead.
DUPLICATE_TOL = 1e-9

GPEvaluator = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
"""Batched posterior evaluator: (m,d) feature rows -> (means, variances)."""


@dataclass
class AcquisitionQuery:
    """Incumbent value plus the feature encoding for candidate actions.

    ``encode`` closes over the belief at the branching node, mapping an
    action to the belief-action feature vector the surrogate is trained on.
    """

    q_best: float
    encode: Callable[[object], np.ndarray]


def expected_improvement(mu, sigma, q_best):
    """E[max(X - q_best, 0)] for X ~ Normal(mu, sigma^2).

    Accepts scalars or arrays (broadcast). ``sigma = 0`` degenerates to
    max(mu - q_best, 0).
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    delta = mu - q_best
    scalar = delta.ndim == 0 and sigma.ndim == 0
    delta, sigma = np.atleast_1d(delta), np.atleast_1d(sigma)
    out = np.maximum(delta, 0.0)
    pos = sigma > 0
    if np.any(pos):
        z = delta[pos] / sigma[pos]
        out = np.where(pos, 0.0, out)
        vals = delta[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
        out[pos] = np.maximum(vals, 0.0)
    return float(out[0]) if scalar else out


def argmax_ei_discrete(
    candidates: Sequence, query: AcquisitionQuery, gp_eval: GPEvaluator
):
    """Candidate with maximal EI; ties go to the lowest candidate index."""
    if len(candidates) == 0:
        raise ValueError("candidate list must be non-empty")
    feats = np.asarray([query.encode(a) for a in candidates], dtype=float)
    means, variances = gp_eval(feats)
    ei = expected_improvement(means, np.sqrt(variances), query.q_best)
    return candidates[int(np.argmax(ei))]


def _neg_ei_with_grad(x, gp_eval, q_best, steps):
    """-EI and its central-difference gradient, one batched posterior call."""
    d = x.shape[0]
    pts = np.empty((1 + 2 * d, d))
    pts[0] = x
    for j in range(d):
        pts[1 + 2 * j] = x
        pts[1 + 2 * j, j] += steps[j]
        pts[2 + 2 * j] = x
        pts[2 + 2 * j, j] -= steps[j]
    means, variances = gp_eval(pts)
    ei = expected_improvement(means, np.sqrt(variances), q_best)
    grad = (ei[1::2] - ei[2::2]) / (2.0 * steps)
    return -ei[0], -grad


def _optimize_ei_starts(bounds, query, gp_eval, starts):
    """L-BFGS ascents of EI from each start; [(endpoint, ei)] in start order."""
    lower, upper = bounds
    steps = np.maximum(FD_STEP_FRAC * (upper - lower), 1e-300)
    box = list(zip(lower, upper))
    results = []
    for x0 in starts:
        res = minimize(
            _neg_ei_with_grad,
            np.clip(x0, lower, upper),
            args=(gp_eval, query.q_best, steps),
            method="L-BFGS-B",
            jac=True,
            bounds=box,
            options={"maxiter": 40, "ftol": 1e-12, "gtol": 1e-10},
        )
        x_end = np.clip(res.x, lower, upper)
        m, v = gp_eval(x_end[None, :])
        results.append((x_end, float(expected_improvement(m, np.sqrt(v), query.q_best)[0])))
    return results


def argmax_ei_continuous(
    bounds: tuple[np.ndarray, np.ndarray],
    query: AcquisitionQuery,
    gp_eval: GPEvaluator,
    restarts: int,
    rng: np.random.Generator,
    incumbent: np.ndarray | None = None,
) -> np.ndarray:
    """Best EI point in a box from ``restarts`` uniform starts (+ incumbent)."""
    lower = np.asarray(bounds[0], dtype=float)
    upper = np.asarray(bounds[1], dtype=float)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if np.all(lower == upper):
        return lower.copy()
    starts = [rng.uniform(lower, upper) for _ in range(restarts)]
    if incumbent is not None:
        inc = np.asarray(incumbent, dtype=float)
        if np.all(inc >= lower) and np.all(inc <= upper):
            starts.append(inc)
    results = _optimize_ei_starts((lower, upper), query, gp_eval, starts)
    best = max(range(len(results)), key=lambda i: (results[i][1], -i))
    return results[best][0]


def make_gp_evaluator(obs: ObservationSet, cfg: GPConfig) -> GPEvaluator:
    """k-NN posterior evaluator bound to a frozen observation set."""

    def gp_eval(feats: np.ndarray):
        return knn_posterior_batch(obs, feats, cfg)

    return gp_eval


def gather_observations(tree, buffer) -> ObservationSet:
    """Belief-action features and value estimates from tree and buffer.

    Takes every visited action node currently in the tree (its cached
    feature vector with its running value estimate) plus all buffer entries.
    """
    feats: list[np.ndarray] = []
    vals: list[float] = []
    for node in tree.action_nodes():
        if node.n >= 1:
            feats.append(node.feature)
            vals.append(node.q)
    for vec, val in buffer.entries:
        feats.append(vec)
        vals.append(val)
    if not feats:
        return ObservationSet(dim=0)
    return ObservationSet.from_arrays(np.asarray(feats), np.asarray(vals))


def incumbent_value(node, prior_mean: float) -> float:
    """Max visited-child value estimate, or the GP prior mean if none."""
    qs = [c.q for c in node.children if c.n >= 1]
    return max(qs) if qs else prior_mean


def bayes_opt(node, tree, buffer, problem, cfg: GPConfig, restarts: int, rng):
    """Choose the next action to branch at ``node`` by maximizing EI.

    Fits the surrogate to all visited (belief-action, value) pairs in the
    tree plus the cross-search buffer, excludes the node's existing children,
    and dispatches on the action-space kind. Returns None when a discrete
    space has no non-child candidates left.
    """
    obs = gather_observations(tree, buffer)
    gp_eval = make_gp_evaluator(obs, cfg)
    belief = node.belief
    query = AcquisitionQuery(
        q_best=incumbent_value(node, cfg.prior_mean),
        encode=lambda a: problem.vectorize(belief, a),
    )
    space = problem.action_space
    if space.is_discrete:
        taken = {space.key(c.action) for c in node.children}
        candidates = [a for a in problem.legal_actions(belief) if space.key(a) not in taken]
        if not candidates:
            return None
        return argmax_ei_discrete(candidates, query, gp_eval)

    lower, upper = space.lower, space.upper
    inc = None
    visited = [c for c in node.children if c.n >= 1]
    if visited:
        inc = np.asarray(max(visited, key=lambda c: c.q).action, dtype=float)
    starts = [rng.uniform(lower, upper) for _ in range(restarts)]
    if inc is not None and np.all(inc >= lower) and np.all(inc <= upper):
        starts.append(inc)
    if np.all(lower == upper):
        return lower.copy()
    results = _optimize_ei_starts((lower, upper), query, gp_eval, starts)
    order = sorted(range(len(results)), key=lambda i: (-results[i][1], i))
    existing = [np.asarray(c.action, dtype=float) for c in node.children]
    for i in order:
        x = results[i][0]
        if all(np.linalg.norm(x - e) > DUPLICATE_TOL for e in existing):
            return x
    for _ in range(100):  # everything coincided with a child; perturb
        x = rng.uniform(lower, upper)
        if all(np.linalg.norm(x - e) > DUPLICATE_TOL for e in existing):
            return x
    return results[order[0]][0]
