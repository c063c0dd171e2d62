"""Reachability dynamic programming on product MDPs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .product_mdp import ProductMdp

log = logging.getLogger(__name__)


@dataclass
class ValueFunction:
    values: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residuals: list[float] = field(default_factory=list)


@dataclass
class Policy:
    actions: np.ndarray       # input id per product state
    inputs: np.ndarray        # input values, one row per id

    def input_of(self, state) -> np.ndarray:
        return self.inputs[self.actions[state]]


def discretize_inputs(input_lo, input_hi, epsilon: float) -> np.ndarray:
    """Uniform grid with spacing ``epsilon`` over each input interval (endpoints included).

    Multi-dimensional input boxes give the Cartesian product, first coordinate
    varying slowest.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    lo = np.atleast_1d(np.asarray(input_lo, dtype=float))
    hi = np.atleast_1d(np.asarray(input_hi, dtype=float))
    if lo.size == 0:
        return np.zeros((1, 0))
    axes = []
    for a, b in zip(lo, hi):
        n = int(np.floor((b - a) / epsilon + 1e-9))
        pts = np.linspace(a, a + n * epsilon, n + 1)
        if b - pts[-1] > 1e-9 * max(1.0, b - a):
            pts = np.append(pts, b)
        else:
            pts[-1] = b
        axes.append(np.round(pts, 12) + 0.0)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _q_values(mdp: ProductMdp, values: np.ndarray) -> np.ndarray:
    return np.einsum("saw,saw->sa", mdp.prob, values[mdp.succ])


def bellman_backup(mdp: ProductMdp, values: np.ndarray, rewards: np.ndarray | None = None):
    """One synchronous sweep; returns new values and the argmax input of every state.

    Ties go to the smallest input id; the sink stays pinned at zero.
    """
    r = mdp.rewards if rewards is None else rewards
    q = _q_values(mdp, values)
    best = np.argmax(q, axis=1)
    new = r + q[np.arange(mdp.n_states), best]
    new[mdp.sink] = 0.0
    return new, best


def _gauss_seidel_sweep(mdp: ProductMdp, values: np.ndarray, rewards: np.ndarray) -> None:
    succ, prob = mdp.succ, mdp.prob
    for s in range(mdp.n_states - 1):
        values[s] = rewards[s] + np.max(np.sum(prob[s] * values[succ[s]], axis=1))


def value_iteration(mdp: ProductMdp, tol: float = 0.01, max_iters: int = 10_000,
                    method: str = "jacobi", rewards: np.ndarray | None = None) -> ValueFunction:
    """Iterate Bellman backups from ``V = 0`` until the sup-norm change drops below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = mdp.rewards if rewards is None else np.asarray(rewards, dtype=float)
    values = np.zeros(mdp.n_states)
    residuals = []
    for it in range(1, max_iters + 1):
        if method == "jacobi":
            new, _ = bellman_backup(mdp, values, r)
        elif method == "gauss-seidel":
            new = values.copy()
            _gauss_seidel_sweep(mdp, new, r)
        else:
            raise ValueError(f"unknown method {method!r}")
        res = float(np.max(np.abs(new - values)))
        residuals.append(res)
        values = new
        log.debug("sweep %d residual %.3e", it, res)
        if res < tol:
            return ValueFunction(values, it, res, True, residuals)
    log.warning("value iteration stopped at max_iters=%d with residual %.3e", max_iters, residuals[-1])
    return ValueFunction(values, max_iters, residuals[-1], False, residuals)


def extract_policy(mdp: ProductMdp, vf: ValueFunction | np.ndarray, tie_tol: float = 1e-12) -> Policy:
    """Greedy policy for ``vf``.

    Plain argmax can pick an input that merely preserves the value (a
    self-loop ties with progress), which never reaches the goal. Among inputs
    within ``tie_tol`` of the best Q-value we therefore pick, layer by layer
    outward from the goal states, the smallest id with positive probability
    of entering an earlier layer. States outside every layer keep the argmax.
    """
    values = vf.values if isinstance(vf, ValueFunction) else np.asarray(vf)
    q = _q_values(mdp, values)
    best = np.argmax(q, axis=1)
    tied = q >= q.max(axis=1, keepdims=True) - tie_tol
    ranked = mdp.goal.copy()
    todo = np.flatnonzero(~ranked & (q.max(axis=1) > 0))
    todo = todo[todo != mdp.sink]
    while todo.size:
        hits = tied[todo] & np.any((mdp.prob[todo] > 0) & ranked[mdp.succ[todo]], axis=2)
        ok = hits.any(axis=1)
        if not ok.any():
            break
        best[todo[ok]] = np.argmax(hits[ok], axis=1)
        ranked[todo[ok]] = True
        todo = todo[~ok]
    return Policy(best.astype(np.int64), mdp.inputs)


def evaluate_policy(mdp: ProductMdp, actions, rewards: np.ndarray | None = None) -> np.ndarray:
    """Exact value of a memoryless policy by a sparse linear solve.

    States that cannot reach a rewarded state under the policy get value 0,
    which removes the singular part of ``I - P``.
    """
    r = mdp.rewards if rewards is None else np.asarray(rewards, dtype=float)
    n = mdp.n_states
    actions = np.asarray(actions)
    rows = np.repeat(np.arange(n), mdp.succ.shape[2])
    p_row = mdp.prob[np.arange(n), actions]
    cols = mdp.succ[np.arange(n), actions]
    mat = sp.csr_matrix((p_row.ravel(), (rows, cols.ravel())), shape=(n, n))
    mat.eliminate_zeros()

    # backwards closure from rewarded states
    alive = r != 0
    alive[mdp.sink] = False
    rev = mat.T.tocsr()
    stack = list(np.flatnonzero(alive))
    while stack:
        s = stack.pop()
        for p in rev.indices[rev.indptr[s]:rev.indptr[s + 1]]:
            if not alive[p] and p != mdp.sink:
                alive[p] = True
                stack.append(p)
    idx = np.flatnonzero(alive)
    out = np.zeros(n)
    if idx.size == 0:
        return out
    sub = mat[idx][:, idx]
    system = sp.identity(len(idx), format="csr") - sub
    out[idx] = spla.spsolve(system.tocsc(), r[idx])
    return out
