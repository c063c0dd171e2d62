import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from timedreach.mca_grid import build_grid, build_kernel
from timedreach.product_mdp import (
    ProductError,
    build_product,
    build_table,
    discretize_clocks,
    from_rows,
    trim_reachable,
)
from timedreach.solver import discretize_inputs, evaluate_policy, value_iteration
from timedreach.timed_logic import build_reach_fragment, parse_automaton

from conftest import one_d_model

NO_INPUT = np.zeros((1, 0))


def bounded_automaton(bound):
    return parse_automaton(json.dumps({
        "states": ["s", "g"], "init": "s", "accepting": ["g"], "clocks": {"c": bound},
        "propositions": ["G"],
        "edges": [
            {"source": "s", "label": ["G"], "guard": "c <= 1", "target": "g"},
            {"source": "s", "label": ["G"], "guard": "c > 1", "target": "s"},
            {"source": "s", "label": ["!G"], "guard": "true", "target": "s"},
            {"source": "g", "label": "*", "guard": "true", "target": "g"},
        ],
    }))


def test_clock_ticks():
    a = bounded_automaton(5)
    assert [len(r) for r in discretize_clocks(a, Fraction(1, 5))] == [26]
    assert [len(r) for r in discretize_clocks(a, Fraction(1, 2))] == [11]


def test_fragment_table_size(dubins_automaton):
    table = build_table(dubins_automaton, Fraction(1, 5), ["HitWall", "R1", "R2"])
    # Init and s1 with ticks 0..25, plus the absorbing acc and trap
    assert table.size == 54
    assert int(table.accepting.sum()) == 1 and int(table.dead.sum()) == 1


def test_table_rejects_unknown_propositions(dubins_automaton):
    with pytest.raises(ProductError, match="missing from the labeling"):
        build_table(dubins_automaton, Fraction(1, 5), ["R1"])


def test_single_point_product():
    model, labeling = one_d_model("0", "0", box=(0, 1), labels={"G": [[[0, 1]]]}, x0=0, periodic=[0])
    grid = build_grid(model, (1.0,))
    assert grid.size == 1
    kernel = build_kernel(model, grid, NO_INPUT, 0.5)
    mdp = build_product(kernel, build_reach_fragment([(["G"], (0, 1))]), labeling, grid, [0.0])
    assert mdp.n_states == 2
    assert mdp.goal[mdp.initial]
    assert mdp.row(mdp.initial, 0) == [(mdp.sink, 1.0)]


@pytest.fixture(scope="module")
def line():
    model, labeling = one_d_model("u1", "0.5", box=(0, 4), inputs=(-1, 1),
                                  labels={"goal": [[[3, 4]]]}, x0=1)
    grid = build_grid(model, (0.25,))
    inputs = discretize_inputs(model.input_lo, model.input_hi, 0.5)
    kernel = build_kernel(model, grid, inputs, Fraction(1, 20))
    automaton = build_reach_fragment([(["goal"], (0, 2))])
    return model, labeling, grid, kernel, automaton


def test_rows_are_stochastic_and_goals_absorb(line):
    model, labeling, grid, kernel, automaton = line
    mdp = build_product(kernel, automaton, labeling, grid, model.initial_state)
    np.testing.assert_allclose(mdp.prob.sum(-1), 1.0, atol=1e-12)
    for s in np.flatnonzero(mdp.goal):
        for a in range(mdp.n_inputs):
            assert mdp.row(s, a) == [(mdp.sink, 1.0)]
    assert mdp.row(mdp.sink, 0) == [(mdp.sink, 1.0)]
    assert not mdp.goal[mdp.sink]


def test_product_respects_kernel_and_automaton(line):
    model, labeling, grid, kernel, automaton = line
    mdp = build_product(kernel, automaton, labeling, grid, model.initial_state, trim=False)
    table = mdp.table
    masks = labeling.masks(grid.points())
    rng = np.random.default_rng(3)
    for s in rng.choice(np.flatnonzero(~mdp.goal[:-1]), 40, replace=False):
        x, c = mdp.x_index[s], mdp.config[s]
        for a in range(mdp.n_inputs):
            got = {}
            for t, p in mdp.row(s, a):
                got[(mdp.x_index[t], mdp.config[t])] = got.get((mdp.x_index[t], mdp.config[t]), 0) + p
            want = {(y, table.step[c, masks[y]]): p for y, p in kernel.row(x, a)}
            assert got.keys() == want.keys()
            for k in want:
                assert got[k] == pytest.approx(want[k])


def test_trim_matches_full_values(line):
    model, labeling, grid, kernel, automaton = line
    full = build_product(kernel, automaton, labeling, grid, model.initial_state, trim=False)
    trimmed = build_product(kernel, automaton, labeling, grid, model.initial_state, trim=True)
    again = trim_reachable(full)
    assert trimmed.n_states == again.n_states < full.n_states
    v_full = value_iteration(full, tol=1e-10).values[full.initial]
    v_trim = value_iteration(trimmed, tol=1e-10).values[trimmed.initial]
    assert v_trim == pytest.approx(v_full, abs=1e-12)
    assert trim_reachable(trimmed).n_states == trimmed.n_states


def test_lookup_roundtrip(line):
    model, labeling, grid, kernel, automaton = line
    mdp = build_product(kernel, automaton, labeling, grid, model.initial_state)
    ids = np.arange(mdp.n_states - 1)
    np.testing.assert_array_equal(mdp.lookup(mdp.x_index[:-1], mdp.config[:-1]), ids)
    assert mdp.x_index[mdp.initial] == grid.cell_of(np.array([1.0]))


def test_export(line, tmp_path):
    model, labeling, grid, kernel, automaton = line
    mdp = build_product(kernel, automaton, labeling, grid, model.initial_state)
    mdp.export(tmp_path / "p", header={"note": "x"})
    head = json.loads((tmp_path / "p.json").read_text())
    assert head["n_states"] == mdp.n_states and head["delta"] == "1/20" and head["note"] == "x"
    states = (tmp_path / "p_states.csv").read_text().splitlines()
    assert states[0] == "id,xindex,q,ticks_c"
    assert len(states) == mdp.n_states + 1
    trans = (tmp_path / "p_transitions.csv").read_text().splitlines()
    assert trans[0] == "src,input,dst,prob"
    assert len(trans) - 1 == int((mdp.prob > 0).sum())


def test_dubins_counts(dubins_pipeline):
    mdp = dubins_pipeline["product"]
    assert mdp.n_grid == 968
    assert mdp.n_states == 968 * 54 + 1
    assert trim_reachable(mdp).n_states == 22617
    assert mdp.n_inputs == 11


def toy():
    rows = {
        (0, 0): [(1, 0.5), (2, 0.5)],
        (1, 0): [(3, 1.0)],
        (2, 0): [(2, 1.0)],
        (4, 0): [(3, 1.0)],  # unreachable from 0
    }
    return from_rows(rows, goal=[3], initial=0, n_inputs=1)


def test_trim_toy():
    mdp = toy()
    out = trim_reachable(mdp)
    # 0, 1, 2, 3 and the sink survive; 4 does not
    assert out.n_states == 5
    assert out.initial == 0
    assert out.goal.sum() == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_trim_is_closed_and_value_preserving(n, n_in, seed):
    rng = np.random.default_rng(seed)
    rows = {}
    for s in range(n):
        for a in range(n_in):
            succ = rng.choice(n + 1, size=2, replace=False)
            p = rng.dirichlet([1, 1])
            rows[(s, a)] = list(zip(succ.tolist(), p.tolist()))
    mdp = from_rows(rows, goal=[n], initial=0, n_inputs=n_in)
    out = trim_reachable(mdp)
    live = out.prob > 0
    assert np.all(out.succ[live] < out.n_states)
    assert trim_reachable(out).n_states == out.n_states
    a = np.zeros(mdp.n_states, dtype=int)
    v_full = evaluate_policy(mdp, a)[mdp.initial]
    v_trim = evaluate_policy(out, np.zeros(out.n_states, dtype=int))[out.initial]
    assert v_trim == pytest.approx(v_full, abs=1e-9)
