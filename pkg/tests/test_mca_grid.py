import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from timedreach.mca_grid import (
    GridError,
    KernelError,
    audit_local_consistency,
    build_grid,
    build_kernel,
    max_delta,
)
from timedreach.solver import discretize_inputs

from conftest import one_d_model

NO_INPUT = np.zeros((1, 0))

# Closed form for the Dubins bound: diffusion 0.25/h^2 on every axis plus the
# largest drift term |cos|+|sin| = sqrt(2) over 0.5 at theta = pi/4, |u| = 1.
DUBINS_BOUND = 1.0 / (1 + 1 + 0.25 / (math.pi / 4) ** 2 + 2 * math.sqrt(2) + 1 / (math.pi / 4))


def test_dubins_grid_counts(dubins):
    model, _ = dubins
    assert build_grid(model, (0.5, 0.5, math.pi / 4)).size == 968
    assert build_grid(model, (0.5, 0.5, math.pi / 4), periodic=False).size == 1089


def test_small_grid():
    model, _ = one_d_model(box=(0, 1))
    grid = build_grid(model, (0.5,))
    np.testing.assert_allclose(grid.points()[:, 0], [0, 0.5, 1])
    with pytest.raises(GridError):
        build_grid(model, (0.3,))


def test_cell_map():
    model, _ = one_d_model(box=(0, 1))
    grid = build_grid(model, (0.5,))
    assert grid.cell_of(np.array([[0.0], [0.49], [0.5], [0.99], [1.0]])).tolist() == [0, 0, 1, 1, 2]


def test_periodic_cell_wraps(dubins):
    model, _ = dubins
    grid = build_grid(model, (0.5, 0.5, math.pi / 4))
    a = grid.cell_of(np.array([1.0, 1.0, 2 * math.pi - 1e-3]))
    b = grid.cell_of(np.array([1.0, 1.0, 7 * math.pi / 4]))
    assert a == b


def test_max_delta_examples(dubins):
    m0, _ = one_d_model("0", "1")
    g0 = build_grid(m0, (0.5,))
    assert max_delta(m0, g0, NO_INPUT) == pytest.approx(0.25)
    m1, _ = one_d_model("1", "1")
    assert max_delta(m1, build_grid(m1, (0.5,)), NO_INPUT) == pytest.approx(1 / 6)
    model, _ = dubins
    grid = build_grid(model, (0.5, 0.5, math.pi / 4))
    u = discretize_inputs(model.input_lo, model.input_hi, 0.2)
    assert max_delta(model, grid, u) == pytest.approx(DUBINS_BOUND, rel=1e-12)
    assert 0.2 > DUBINS_BOUND


def test_max_delta_degenerate():
    model, _ = one_d_model("0", "0")
    with pytest.raises(KernelError):
        max_delta(model, build_grid(model, (0.5,)), NO_INPUT)


def _row(k, s):
    ids, probs = zip(*k.row(s, 0))
    return list(ids), np.array(probs)


def test_kernel_brownian():
    model, _ = one_d_model("0", "1")
    k = build_kernel(model, build_grid(model, (0.5,)), NO_INPUT, 0.2)
    ids, probs = _row(k, 2)
    assert ids == [1, 2, 3]
    np.testing.assert_allclose(probs, [0.4, 0.2, 0.4], atol=1e-12)


def test_kernel_drift():
    model, _ = one_d_model("1", "1")
    k = build_kernel(model, build_grid(model, (0.5,)), NO_INPUT, 0.1)
    ids, probs = _row(k, 2)
    assert ids == [1, 2, 3]
    np.testing.assert_allclose(probs, [0.2, 0.4, 0.4], atol=1e-12)


def test_kernel_degenerate():
    model, _ = one_d_model("0", "0")
    k = build_kernel(model, build_grid(model, (0.5,)), NO_INPUT, 7.0)
    for s in range(k.n_states):
        assert k.row(s, 0) == [(s, 1.0)]


def test_boundary_mass_stays():
    model, _ = one_d_model("0", "1")
    k = build_kernel(model, build_grid(model, (0.5,)), NO_INPUT, 0.2)
    ids, probs = _row(k, 0)
    assert ids == [0, 1]
    np.testing.assert_allclose(probs, [0.6, 0.4], atol=1e-12)


def test_delta_too_large(dubins):
    model, _ = dubins
    grid = build_grid(model, (0.5, 0.5, math.pi / 4))
    u = discretize_inputs(model.input_lo, model.input_hi, 0.2)
    with pytest.raises(KernelError, match="exceeds the local consistency bound 0.1536"):
        build_kernel(model, grid, u, 0.2)


@pytest.mark.parametrize("mode", ["normalize", "substep"])
def test_override_modes_stay_stochastic(dubins, mode):
    model, _ = dubins
    grid = build_grid(model, (0.5, 0.5, math.pi / 4))
    u = discretize_inputs(model.input_lo, model.input_hi, 0.2)
    k = build_kernel(model, grid, u, 0.2, on_violation=mode)
    assert np.abs(k.prob.sum(-1) - 1).max() <= 1e-12
    assert k.prob.min() >= 0
    if mode == "substep":
        assert k.substeps == 2
    else:
        assert k.clipped_rows > 0


def test_substep_composes_the_small_kernel():
    model, _ = one_d_model("0", "1")
    grid = build_grid(model, (0.5,))
    k = build_kernel(model, grid, NO_INPUT, 0.4, on_violation="substep")
    half = build_kernel(model, grid, NO_INPUT, 0.2).matrix(0).toarray()
    np.testing.assert_allclose(k.matrix(0).toarray(), half @ half, atol=1e-15)


def test_audit_brownian():
    model, _ = one_d_model("0", "1")
    grid = build_grid(model, (0.5,))
    rep = audit_local_consistency(build_kernel(model, grid, NO_INPUT, 0.2), model, grid)
    assert rep.ok and rep.rows_checked == 3
    assert rep.max_var_error <= 1e-12


def test_audit_degenerate():
    model, _ = one_d_model("0", "0")
    grid = build_grid(model, (0.5,))
    rep = audit_local_consistency(build_kernel(model, grid, NO_INPUT, 0.3), model, grid)
    assert rep.ok and rep.max_step == 0


def test_audit_dubins_admissible(dubins):
    model, _ = dubins
    grid = build_grid(model, (0.5, 0.5, math.pi / 4))
    u = discretize_inputs(model.input_lo, model.input_hi, 0.2)
    k = build_kernel(model, grid, u, 1 / 7)
    rep = audit_local_consistency(k, model, grid)
    assert rep.ok
    assert rep.max_bias <= rep.bias_scale
    assert rep.max_step == pytest.approx(math.pi / 4)


def test_halving_h_quarters_diffusion_bound():
    model, _ = one_d_model("0", "1")
    a = max_delta(model, build_grid(model, (0.5,)), NO_INPUT)
    b = max_delta(model, build_grid(model, (0.25,)), NO_INPUT)
    assert b == pytest.approx(a / 4)


def test_export(tmp_path):
    model, _ = one_d_model("0", "1")
    k = build_kernel(model, build_grid(model, (0.5,)), NO_INPUT, 0.2)
    k.export_csv(tmp_path / "k.csv")
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "state_id,input_id,succ_id,prob"
    assert len(lines) - 1 == sum(len(k.row(s, 0)) for s in range(k.n_states))


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(0.1, 2), st.sampled_from([0.5, 0.25, 0.2]), st.floats(0.1, 1.0))
def test_moment_identities(drift, sigma, h, frac):
    model, _ = one_d_model(f"{drift!r} + 0*x1", f"{sigma!r}", box=(-1, 1))
    grid = build_grid(model, (h,))
    delta = frac * max_delta(model, grid, NO_INPUT)
    rep = audit_local_consistency(build_kernel(model, grid, NO_INPUT, delta), model, grid)
    assert rep.ok
    assert rep.max_step == pytest.approx(h)
