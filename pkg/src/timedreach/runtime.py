"""Deploying product-MDP policies on the continuous SDE and estimating success rates."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Labeling, SdeModel, em_step
from .mca_grid import Grid
from .product_mdp import ProductMdp
from .solver import Policy
from .timed_logic import TimedAutomaton, Verdict, accept_timed_word, sample_behavior

DEFAULT_SUBSTEPS = 10
_CHUNK = 1000
_CODES = (Verdict.PENDING, Verdict.ACCEPTED, Verdict.REJECTED, Verdict.TIMEOUT)


@dataclass
class TrajectoryRecord:
    seed: int
    delta: float
    states: np.ndarray          # (T+1, n) samples at multiples of delta
    inputs: np.ndarray          # (T, m) input held on each interval
    automaton_states: list[str]
    ticks: np.ndarray           # (T+1, M)
    labels: list[frozenset]
    verdict: Verdict
    lookup_miss: bool = False
    boundary_hits: int = 0

    @property
    def times(self) -> np.ndarray:
        return self.delta * np.arange(len(self.states))


@dataclass
class EstimateReport:
    trials: int
    accepted: int
    value: float | None = None
    lookup_misses: int = 0
    timeouts: int = 0
    extra: dict = field(default_factory=dict)
    records: list = field(default_factory=list, repr=False)

    @property
    def p_hat(self) -> float:
        return self.accepted / self.trials

    @property
    def half_width(self) -> float:
        p = self.p_hat
        return 1.96 * math.sqrt(p * (1 - p) / self.trials)

    def contains(self, value: float) -> bool:
        return abs(self.p_hat - value) <= self.half_width

    def to_dict(self) -> dict:
        out = {
            "trials": self.trials, "accepted": self.accepted,
            "p_hat": self.p_hat, "half_width_95": self.half_width,
            "lookup_misses": self.lookup_misses, "timeouts": self.timeouts,
        }
        if self.value is not None:
            out["value_s0"] = self.value
            out["value_in_interval"] = self.contains(self.value)
        out.update(self.extra)
        return out


def default_horizon(mdp: ProductMdp) -> int:
    """Ticks after which every run of the automaton is decided, plus one."""
    h = mdp.table.decision_horizon()
    if h is None:
        h = mdp.table.size
    return h + 1


def _noise(seeds, horizon: int, substeps: int, k: int) -> np.ndarray:
    return np.stack([np.random.default_rng(int(s)).standard_normal((horizon, substeps, k)) for s in seeds])


def _simulate(model: SdeModel, labeling: Labeling, mdp: ProductMdp, policy: Policy, grid: Grid,
              seeds, horizon: int, substeps: int, record: bool):
    table = mdp.table
    delta = float(table.delta)
    dt = delta / substeps
    n_tr = len(seeds)
    noise = _noise(seeds, horizon, substeps, model.dim_w)
    x = np.tile(np.asarray(model.initial_state, dtype=float), (n_tr, 1))
    cfg = table.start[labeling.masks(x)]
    verdict = np.zeros(n_tr, dtype=np.int8)  # index into _CODES
    miss = np.zeros(n_tr, dtype=bool)
    hits = np.zeros(n_tr, dtype=np.int64)
    stopped = np.zeros(n_tr, dtype=bool)
    if record:
        xs, us, cs, ms = [x.copy()], [], [cfg.copy()], [labeling.masks(x)]
    active = np.ones(n_tr, dtype=bool)
    for n in range(horizon + 1):
        done_acc = active & table.accepting[cfg]
        done_rej = active & table.dead[cfg]
        verdict[done_acc] = 1
        verdict[done_rej] = 2
        active &= ~(done_acc | done_rej)
        if n == horizon or not active.any():
            break
        idx = np.flatnonzero(active)
        pid = mdp.lookup(grid.cell_of(x[idx]), cfg[idx])
        lost = pid < 0
        if lost.any():
            miss[idx[lost]] = True
            verdict[idx[lost]] = 2
            active[idx[lost]] = False
            idx, pid = idx[~lost], pid[~lost]
        u = policy.inputs[policy.actions[pid]]
        xi = x[idx]
        for j in range(substeps):
            moving = ~stopped[idx]
            if not moving.any():
                break
            step, hit = em_step(model, xi[moving], u[moving], dt, noise[idx[moving], n, j])
            xi[moving] = step
            hits[idx[moving]] += hit
            if model.boundary == "stop":
                stopped[idx[moving][hit]] = True
        x[idx] = xi
        mask = labeling.masks(xi)
        cfg[idx] = table.step[cfg[idx], mask]
        if record:
            u_full = np.full((n_tr, policy.inputs.shape[1]), np.nan)
            u_full[idx] = u
            frozen = np.full((n_tr, x.shape[1]), np.nan)
            frozen[idx] = xi
            m_full = np.full(n_tr, -1, dtype=np.int64)
            m_full[idx] = mask
            c_full = np.full(n_tr, -1, dtype=np.int64)
            c_full[idx] = cfg[idx]
            xs.append(frozen)
            us.append(u_full)
            cs.append(c_full)
            ms.append(m_full)
    verdict[active] = 3
    records = None
    if record:
        records = []
        automaton = table.automaton
        for t in range(n_tr):
            steps = [k for k in range(len(cs)) if cs[k][t] >= 0]
            last = steps[-1]
            configs = [table.configs[cs[k][t]] for k in range(last + 1)]
            records.append(TrajectoryRecord(
                seed=int(seeds[t]), delta=delta,
                states=np.array([xs[k][t] for k in range(last + 1)]),
                inputs=np.array([us[k][t] for k in range(last)]).reshape(last, -1),
                automaton_states=[q for q, _ in configs],
                ticks=np.array([v for _, v in configs]).reshape(last + 1, len(automaton.clocks)),
                labels=[labeling.names_of(int(ms[k][t])) for k in range(last + 1)],
                verdict=_CODES[verdict[t]],
                lookup_miss=bool(miss[t]),
                boundary_hits=int(hits[t]),
            ))
    return verdict, miss, records


def run_policy_trajectory(model: SdeModel, labeling: Labeling, mdp: ProductMdp, policy: Policy, grid: Grid,
                          horizon_ticks: int | None = None, seed: int = 0,
                          substeps: int = DEFAULT_SUBSTEPS) -> TrajectoryRecord:
    """Simulate one closed-loop run.

    At every sample time the state is snapped to its grid cell, the policy
    input for ``(cell, q, ticks)`` is held for ``delta`` while the SDE is
    integrated with ``substeps`` Euler-Maruyama steps, and the automaton then
    reads the label of the new state. Under ``boundary="stop"`` a run that
    touches a non-periodic face stays at the contact point.
    """
    horizon = default_horizon(mdp) if horizon_ticks is None else int(horizon_ticks)
    _, _, records = _simulate(model, labeling, mdp, policy, grid, [seed], horizon, substeps, record=True)
    return records[0]


def monte_carlo_estimate(model: SdeModel, labeling: Labeling, mdp: ProductMdp, policy: Policy, grid: Grid,
                         trials: int, base_seed: int = 0, horizon_ticks: int | None = None,
                         substeps: int = DEFAULT_SUBSTEPS, value: float | None = None,
                         record_limit: int = 0) -> EstimateReport:
    """Estimate the satisfaction probability from ``trials`` runs with seeds ``base_seed + i``.

    The first ``record_limit`` trajectories are kept in ``report.records``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    horizon = default_horizon(mdp) if horizon_ticks is None else int(horizon_ticks)
    seeds = base_seed + np.arange(trials)
    accepted = misses = timeouts = 0
    records = []
    for start in range(0, trials, _CHUNK):
        chunk = seeds[start:start + _CHUNK]
        keep = start < record_limit
        verdict, miss, recs = _simulate(model, labeling, mdp, policy, grid, chunk, horizon, substeps, keep)
        accepted += int(np.sum(verdict == 1))
        timeouts += int(np.sum(verdict == 3))
        misses += int(miss.sum())
        if keep:
            records.extend(recs[:record_limit - start])
    return EstimateReport(trials, accepted, value, misses, timeouts,
                          extra={"base_seed": int(base_seed), "substeps": substeps, "horizon_ticks": horizon},
                          records=records)


def point_based_check(labels, automaton: TimedAutomaton, delta) -> Verdict:
    """Verdict of the sampled label sequence ``labels[k] = L(x(k*delta))``."""
    return accept_timed_word(automaton, sample_behavior(labels, delta), tick=delta)


def simulate_chain(mdp: ProductMdp, policy: Policy, trials: int, seed: int = 0,
                   max_steps: int | None = None, value: float | None = None) -> EstimateReport:
    """Sample the product MDP itself under ``policy`` and count goal hits."""
    rng = np.random.default_rng(seed)
    if max_steps is None:
        max_steps = default_horizon(mdp) + 1 if mdp.table is not None else 10 * mdp.n_states
    s = np.full(trials, mdp.initial, dtype=np.int64)
    hit = np.zeros(trials, dtype=bool)
    for _ in range(max_steps + 1):
        hit |= mdp.goal[s]
        live = ~hit & (s != mdp.sink)
        if not live.any():
            break
        idx = np.flatnonzero(live)
        a = policy.actions[s[idx]]
        cum = np.cumsum(mdp.prob[s[idx], a], axis=1)
        r = rng.random(len(idx))[:, None] * cum[:, -1:]
        col = np.minimum(np.sum(cum <= r, axis=1), cum.shape[1] - 1)
        s[idx] = mdp.succ[s[idx], a, col]
    return EstimateReport(trials, int(hit.sum()), value)


def write_trajectories(path, records: list[TrajectoryRecord], automaton: TimedAutomaton) -> None:
    if not records:
        return
    n = records[0].states.shape[1]
    m = records[0].inputs.shape[1] if records[0].inputs.size else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "tick", "t"] + [f"x{i + 1}" for i in range(n)] + ["q"]
                   + [f"ticks_{c}" for c in automaton.clocks] + [f"u{j + 1}" for j in range(m)] + ["verdict"])
        for trial, rec in enumerate(records):
            for k in range(len(rec.states)):
                u = [repr(float(v)) for v in rec.inputs[k]] if k < len(rec.inputs) else [""] * m
                w.writerow([trial, k, repr(float(rec.times[k]))] + [repr(float(v)) for v in rec.states[k]]
                           + [rec.automaton_states[k]] + [int(t) for t in rec.ticks[k]] + u + [rec.verdict.value])
