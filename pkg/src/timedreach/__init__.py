"""Policy synthesis for stochastic systems under bounded-time reachability specifications.

Pipeline: an SDE model is approximated by a locally consistent Markov chain on
a grid, composed with a deterministic timed automaton over discretized clocks,
and solved by value iteration; the resulting policy is deployed on the SDE.
"""
from .dynamics import Labeling, SdeModel, load_model, parse_model
from .mca_grid import Grid, MarkovKernel, build_grid, build_kernel, max_delta
from .product_mdp import ProductMdp, build_product, build_table
from .solver import Policy, ValueFunction, discretize_inputs, extract_policy, value_iteration
from .timed_logic import TimedAutomaton, Verdict, accept_timed_word, build_reach_fragment, load_automaton, parse_automaton

__version__ = "0.1.0"

__all__ = [
    "Labeling", "SdeModel", "load_model", "parse_model",
    "Grid", "MarkovKernel", "build_grid", "build_kernel", "max_delta",
    "ProductMdp", "build_product", "build_table",
    "Policy", "ValueFunction", "discretize_inputs", "extract_policy", "value_iteration",
    "TimedAutomaton", "Verdict", "accept_timed_word", "build_reach_fragment", "load_automaton", "parse_automaton",
]
