"""Product of the grid chain with a timed automaton over discretized clocks."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dynamics import Labeling
from .mca_grid import Grid, MarkovKernel
from .timed_logic import (
    TRAP,
    ClockVector,
    TimedAutomaton,
    as_fraction,
    saturation_caps,
    step_config,
)


class ProductError(ValueError):
    pass


def discretize_clocks(automaton: TimedAutomaton, delta) -> tuple[range, ...]:
    """Tick values ``0..ceil(max(V_i)/delta)`` available to each clock."""
    return tuple(range(cap + 1) for cap in saturation_caps(automaton, as_fraction(delta)))


@dataclass(frozen=True, eq=False)
class AutomatonTable:
    """The automaton unrolled over ticks of length ``delta``.

    Configurations ``(q, ticks)`` reachable from ``(Init, 0)`` under any label
    sequence are numbered; ``step[c, mask]`` is the successor after one tick
    and label ``mask`` (a bitmask over ``propositions``), ``start[mask]`` the
    zero-delay initial move.
    """

    automaton: TimedAutomaton
    delta: Fraction
    propositions: tuple[str, ...]
    configs: tuple[tuple[str, tuple[int, ...]], ...]
    step: np.ndarray
    start: np.ndarray
    accepting: np.ndarray
    dead: np.ndarray

    @property
    def size(self) -> int:
        return len(self.configs)

    def index(self, q: str, ticks) -> int:
        return self.configs.index((q, tuple(ticks)))

    def decision_horizon(self) -> int | None:
        """Longest run (in ticks) through undecided configurations, or None if cyclic."""
        undecided = ~(self.accepting | self.dead)
        depth = {}
        visiting = set()

        def longest(c: int) -> int:
            if not undecided[c]:
                return 0
            if c in depth:
                return depth[c]
            if c in visiting:
                raise _Cycle
            visiting.add(c)
            best = 1 + max(longest(int(n)) for n in set(self.step[c].tolist()))
            visiting.discard(c)
            depth[c] = best
            return best

        try:
            return max(longest(int(c)) for c in set(self.start.tolist()))
        except _Cycle:
            return None
        except RecursionError:
            return None


class _Cycle(Exception):
    pass


def build_table(automaton: TimedAutomaton, delta, propositions) -> AutomatonTable:
    delta = as_fraction(delta)
    props = tuple(propositions)
    unknown = set(automaton.propositions) - set(props)
    if unknown:
        raise ProductError(f"automaton uses propositions missing from the labeling: {sorted(unknown)}")
    n_masks = 1 << len(props)
    symbols = [frozenset(p for i, p in enumerate(props) if m >> i & 1) for m in range(n_masks)]

    zero = ClockVector.zero(automaton, delta)
    index: dict = {}
    vectors: list[ClockVector] = []
    order: list = []

    def intern(q: str, v: ClockVector) -> int:
        key = (q, v.ticks)
        if key not in index:
            index[key] = len(order)
            order.append(key)
            vectors.append(v)
        return index[key]

    start = np.array([intern(*step_config(automaton, automaton.init, zero, s, elapsed=0)) for s in symbols])
    rows = []
    i = 0
    while i < len(order):
        q, _ = order[i]
        v = vectors[i]
        rows.append([intern(*step_config(automaton, q, v, s)) for s in symbols])
        i += 1
    dead_states = automaton.dead_states()
    return AutomatonTable(
        automaton=automaton,
        delta=delta,
        propositions=props,
        configs=tuple(order),
        step=np.array(rows, dtype=np.int64).reshape(len(order), n_masks),
        start=start.astype(np.int64),
        accepting=np.array([q in automaton.accepting for q, _ in order]),
        dead=np.array([q in dead_states or q == TRAP for q, _ in order]),
    )


@dataclass(frozen=True, eq=False)
class ProductMdp:
    """Product states ``(x, config)`` plus a sink at the last id.

    ``succ``/``prob`` have shape ``(S, A, W)``; zero-probability padding points
    back at the row's own state.
    """

    succ: np.ndarray
    prob: np.ndarray
    goal: np.ndarray
    x_index: np.ndarray        # -1 for the sink
    config: np.ndarray         # -1 for the sink
    initial: int
    inputs: np.ndarray
    table: AutomatonTable | None = None
    n_grid: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.succ.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.succ.shape[1]

    @property
    def sink(self) -> int:
        return self.n_states - 1

    @property
    def rewards(self) -> np.ndarray:
        return self.goal.astype(float)

    def row(self, s: int, a: int) -> list[tuple[int, float]]:
        return [(int(j), float(p)) for j, p in zip(self.succ[s, a], self.prob[s, a]) if p > 0]

    def lookup_table(self) -> np.ndarray:
        """Dense ``config * n_grid + x -> product id`` map (-1 when absent)."""
        cached = self.meta.get("_lookup")
        if cached is not None:
            return cached
        n_cfg = self.table.size if self.table is not None else int(self.config.max()) + 1
        out = np.full(n_cfg * self.n_grid, -1, dtype=np.int64)
        keep = self.x_index >= 0
        out[self.config[keep] * self.n_grid + self.x_index[keep]] = np.flatnonzero(keep)
        self.meta["_lookup"] = out
        return out

    def lookup(self, x_index, config) -> np.ndarray:
        return self.lookup_table()[np.asarray(config) * self.n_grid + np.asarray(x_index)]

    def state_rows(self):
        """``(id, x_index, q, ticks...)`` for every non-sink state, sorted by (x, q, ticks)."""
        out = []
        for s in range(self.n_states - 1):
            q, ticks = self.table.configs[self.config[s]]
            out.append((int(self.x_index[s]), q, tuple(ticks), s))
        out.sort()
        return out

    def export(self, stem, header: dict | None = None) -> None:
        """Write ``<stem>.json`` header, ``<stem>_states.csv`` and ``<stem>_transitions.csv``."""
        head = {
            "n_states": int(self.n_states),
            "n_inputs": int(self.n_inputs),
            "sink": int(self.sink),
            "initial": int(self.initial),
            "n_goal": int(self.goal.sum()),
            "delta": str(self.table.delta) if self.table is not None else None,
            "clocks": list(self.table.automaton.clocks) if self.table is not None else [],
        }
        head.update(header or {})
        with open(f"{stem}.json", "w") as fh:
            json.dump(head, fh, indent=2, sort_keys=True)
        with open(f"{stem}_states.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            clocks = self.table.automaton.clocks if self.table is not None else ()
            w.writerow(["id", "xindex", "q"] + [f"ticks_{c}" for c in clocks])
            for x, q, ticks, s in self.state_rows():
                w.writerow([s, x, q, *ticks])
            w.writerow([self.sink, -1, "sink"] + [""] * len(clocks))
        src, act, pos = np.nonzero(self.prob > 0)
        dst = self.succ[src, act, pos]
        p = self.prob[src, act, pos]
        with open(f"{stem}_transitions.csv", "w") as fh:
            fh.write("src,input,dst,prob\n")
            fh.writelines(f"{a},{b},{c},{d!r}\n" for a, b, c, d in zip(src.tolist(), act.tolist(), dst.tolist(), p.tolist()))

    def arrays(self) -> dict:
        return {
            "succ": self.succ, "prob": self.prob, "goal": self.goal,
            "x_index": self.x_index, "config": self.config,
            "initial": np.array(self.initial), "inputs": self.inputs, "n_grid": np.array(self.n_grid),
        }


def _grid_masks(labeling: Labeling, grid: Grid, props) -> np.ndarray:
    """Label bitmask of each grid point, re-keyed to ``props`` order."""
    raw = labeling.masks(grid.points())
    out = np.zeros_like(raw)
    for i, p in enumerate(props):
        if p in labeling.propositions:
            out |= ((raw >> labeling.propositions.index(p)) & 1) << i
    return out


def build_product(kernel: MarkovKernel, automaton: TimedAutomaton, labeling: Labeling, grid: Grid,
                  x0, trim: bool = True) -> ProductMdp:
    """Compose ``kernel`` with ``automaton``.

    With ``trim=True`` only states reachable from the initial state are
    generated (breadth-first, ids in discovery order). With ``trim=False``
    every grid point is paired with every reachable automaton configuration,
    which keeps a policy defined wherever the continuous state may wander.
    """
    table = build_table(automaton, kernel.delta, labeling.propositions)
    masks = _grid_masks(labeling, grid, table.propositions)
    n_x = grid.size
    n_cfg = table.size
    n_in = kernel.n_inputs
    x0_id = int(grid.cell_of(np.asarray(x0, dtype=float)))
    c0 = int(table.start[masks[x0_id]])
    key0 = c0 * n_x + x0_id

    def expand(keys: np.ndarray):
        cfg, x = np.divmod(keys, n_x)
        nxt_x = kernel.succ[x]                                  # (K, A, W)
        nxt_c = table.step[cfg[:, None, None], masks[nxt_x]]
        return nxt_c * n_x + nxt_x, kernel.prob[x]

    if trim:
        layers = [np.array([key0], dtype=np.int64)]
        seen = np.zeros(n_cfg * n_x, dtype=bool)
        seen[key0] = True
        frontier = layers[0]
        while frontier.size:
            cfg = frontier // n_x
            live = frontier[~table.accepting[cfg]]
            if live.size == 0:
                break
            nxt, p = expand(live)
            cand = np.unique(nxt[p > 0])
            cand = cand[~seen[cand]]
            seen[cand] = True
            if cand.size:
                layers.append(cand)
            frontier = cand
        keys = np.concatenate(layers)
    else:
        reachable_cfg = np.arange(n_cfg)
        keys = (reachable_cfg[:, None] * n_x + np.arange(n_x)[None, :]).ravel()

    n_states = len(keys) + 1
    sink = n_states - 1
    ids = np.full(n_cfg * n_x, -1, dtype=np.int64)
    ids[keys] = np.arange(len(keys))
    cfg, x = np.divmod(keys, n_x)
    goal = np.append(table.accepting[cfg], False)

    nxt, p = expand(keys)
    succ = ids[nxt]
    width = succ.shape[2]
    own = np.arange(len(keys))[:, None, None]
    succ = np.where(p > 0, succ, own)
    prob = p.copy()
    g = goal[:-1]
    succ[g] = own[g]
    prob[g] = 0.0
    succ[g, :, 0] = sink
    prob[g, :, 0] = 1.0
    if np.any(succ < 0):
        raise ProductError("transition leaves the generated state set")
    succ = np.concatenate([succ, np.full((1, n_in, width), sink)], axis=0)
    sink_row = np.zeros((1, n_in, width))
    sink_row[..., 0] = 1.0
    prob = np.concatenate([prob, sink_row], axis=0)
    return ProductMdp(
        succ=succ, prob=prob, goal=goal,
        x_index=np.append(x, -1), config=np.append(cfg, -1),
        initial=int(ids[key0]), inputs=kernel.inputs, table=table, n_grid=n_x,
    )


def trim_reachable(mdp: ProductMdp) -> ProductMdp:
    """Keep the states reachable from the initial state (and the sink).

    Ids are reassigned breadth-first; within a layer the old ids keep their order.
    """
    n = mdp.n_states
    seen = np.zeros(n, dtype=bool)
    seen[mdp.initial] = True
    seen[mdp.sink] = True
    layers = [np.array([mdp.initial])]
    frontier = layers[0]
    while frontier.size:
        nxt = mdp.succ[frontier][mdp.prob[frontier] > 0]
        cand = np.unique(nxt)
        cand = cand[~seen[cand]]
        seen[cand] = True
        if cand.size:
            layers.append(cand)
        frontier = cand
    keep = np.concatenate(layers + [np.array([mdp.sink])])
    new_id = np.full(n, -1, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    succ = new_id[mdp.succ[keep]]
    own = np.arange(len(keep))[:, None, None]
    succ = np.where(mdp.prob[keep] > 0, succ, own)
    succ[new_id[mdp.sink]] = new_id[mdp.sink]
    return ProductMdp(
        succ=succ, prob=mdp.prob[keep].copy(), goal=mdp.goal[keep],
        x_index=mdp.x_index[keep], config=mdp.config[keep],
        initial=int(new_id[mdp.initial]), inputs=mdp.inputs, table=mdp.table, n_grid=mdp.n_grid,
        meta={k: v for k, v in mdp.meta.items() if not k.startswith("_")},
    )


def from_rows(rows: dict, goal, initial: int, n_inputs: int) -> ProductMdp:
    """Hand-built product for tests: ``rows[(s, a)] = [(s', p), ...]``; the sink is added last.

    States listed in ``goal`` are redirected to the sink.
    """
    states = {s for s, _ in rows} | {t for r in rows.values() for t, _ in r} | set(goal) | {initial}
    n = max(states) + 2
    sink = n - 1
    width = max([len(r) for r in rows.values()] + [1])
    succ = np.tile(np.arange(n)[:, None, None], (1, n_inputs, width))
    prob = np.zeros((n, n_inputs, width))
    for (s, a), r in rows.items():
        for j, (t, p) in enumerate(r):
            succ[s, a, j] = sink if t == "sink" else t
            prob[s, a, j] = p
    goal_mask = np.zeros(n, dtype=bool)
    goal_mask[list(goal)] = True
    for s in list(goal) + [sink]:
        succ[s] = s
        prob[s] = 0.0
        succ[s, :, 0] = sink
        prob[s, :, 0] = 1.0
    for s in range(n - 1):
        for a in range(n_inputs):
            if prob[s, a].sum() == 0:
                prob[s, a, 0] = 1.0  # unspecified rows self-loop
    return ProductMdp(
        succ=succ, prob=prob, goal=goal_mask,
        x_index=np.append(np.arange(n - 1), -1), config=np.append(np.zeros(n - 1, dtype=np.int64), -1),
        initial=initial, inputs=np.arange(n_inputs, dtype=float)[:, None], n_grid=n - 1,
    )
