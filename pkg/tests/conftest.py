import json
from pathlib import Path

import numpy as np
import pytest

import timedreach
from timedreach.dynamics import load_model, parse_model
from timedreach.mca_grid import build_grid, build_kernel
from timedreach.product_mdp import build_product
from timedreach.solver import discretize_inputs, extract_policy, value_iteration
from timedreach.timed_logic import load_automaton

DATA = Path(timedreach.__file__).parent / "data"


def one_d_model(drift="0", diffusion="1", box=(-1, 1), inputs=None, labels=None, x0=None, **extra):
    doc = {"dim": 1, "state_box": [list(box)], "drift": [drift], "diffusion": [[diffusion]]}
    if inputs is not None:
        doc["inputs"] = [list(inputs)]
    if labels is not None:
        doc["labels"] = labels
    if x0 is not None:
        doc["initial_state"] = [x0]
    doc.update(extra)
    return parse_model(json.dumps(doc))


@pytest.fixture(scope="session")
def dubins():
    return load_model(DATA / "dubins_model.json", require_diagonal=True)


@pytest.fixture(scope="session")
def dubins_automaton():
    return load_automaton(DATA / "dubins_automaton.json")


@pytest.fixture(scope="session")
def window_automaton():
    return load_automaton(DATA / "window_automaton.json")


@pytest.fixture(scope="session")
def dubins_pipeline(dubins, dubins_automaton):
    """Reference setting: h=(0.5,0.5,pi/4), delta=0.2 with normalized rows, eps=0.2, tol=0.01."""
    model, labeling = dubins
    grid = build_grid(model, (0.5, 0.5, np.pi / 4))
    inputs = discretize_inputs(model.input_lo, model.input_hi, 0.2)
    kernel = build_kernel(model, grid, inputs, 0.2, on_violation="normalize")
    product = build_product(kernel, dubins_automaton, labeling, grid, model.initial_state, trim=False)
    vf = value_iteration(product, tol=0.01)
    policy = extract_policy(product, vf)
    return {"model": model, "labeling": labeling, "grid": grid, "inputs": inputs, "kernel": kernel,
            "product": product, "vf": vf, "policy": policy, "automaton": dubins_automaton}


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
