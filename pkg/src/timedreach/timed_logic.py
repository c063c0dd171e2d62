"""Clock constraints, deterministic timed automata and sampled timed words.

Clock values are kept as integer tick counts of a rational tick length, so every
guard comparison is exact integer arithmetic.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
import json
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

TRAP = "__trap__"  # implicit state added by completion

_OPS = {
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
}
_OP_ALIASES = {"=": "==", "≠": "!=", "≤": "<=", "≥": ">="}


class AutomatonError(ValueError):
    """Malformed automaton or guard."""


class DeterminismError(AutomatonError):
    """Two edges are enabled in the same configuration."""


class TimedWordError(ValueError):
    pass


def as_fraction(value) -> Fraction:
    """Exact rational for ``value``; floats go through their shortest repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


# --------------------------------------------------------------------------
# clock constraints

class Guard:
    def holds(self, values: Mapping[str, Fraction]) -> bool:
        raise NotImplementedError

    def clocks(self) -> set[str]:
        return set()

    def constants(self) -> dict[str, int]:
        """Largest constant compared against each clock."""
        return {}

    @property
    def has_difference(self) -> bool:
        return False


@dataclass(frozen=True)
class Const(Guard):
    value: bool

    def holds(self, values):
        return self.value

    def __str__(self):
        return "true" if self.value else "false"


@dataclass(frozen=True)
class Atom(Guard):
    clock: str
    op: str
    bound: int
    minus: str | None = None

    def holds(self, values):
        lhs = values[self.clock]
        if self.minus is not None:
            lhs = lhs - values[self.minus]
        return _OPS[self.op](lhs, self.bound)

    def clocks(self):
        return {self.clock} | ({self.minus} if self.minus else set())

    def constants(self):
        out = {self.clock: self.bound}
        if self.minus:
            out[self.minus] = self.bound
        return out

    @property
    def has_difference(self):
        return self.minus is not None

    def __str__(self):
        lhs = self.clock if self.minus is None else f"{self.clock}-{self.minus}"
        return f"{lhs}{self.op}{self.bound}"


@dataclass(frozen=True)
class Junction(Guard):
    kind: str  # "and" | "or"
    items: tuple[Guard, ...]

    def holds(self, values):
        if self.kind == "and":
            return all(g.holds(values) for g in self.items)
        return any(g.holds(values) for g in self.items)

    def clocks(self):
        return set().union(*(g.clocks() for g in self.items))

    def constants(self):
        out: dict[str, int] = {}
        for g in self.items:
            for c, k in g.constants().items():
                out[c] = max(out.get(c, 0), k)
        return out

    @property
    def has_difference(self):
        return any(g.has_difference for g in self.items)

    def __str__(self):
        sep = " && " if self.kind == "and" else " || "
        parts = [f"({g})" if isinstance(g, Junction) else str(g) for g in self.items]
        return sep.join(parts)


TRUE = Const(True)
FALSE = Const(False)

_GUARD_TOKEN = re.compile(
    r"\s*(?:(?P<num>-?\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>&&|\|\||[∧∨]|==|!=|<=|>=|[<>=≠≤≥()\-]))"
)


def parse_guard(text: str) -> Guard:
    """Parse ``"c>=3 && c<=5"``-style clock constraints."""
    text = str(text)
    tokens, pos = [], 0
    while pos < len(text):
        if not text[pos:].strip():
            break
        m = _GUARD_TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise AutomatonError(f"bad guard {text!r} at column {pos + 1}")
        tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup) + 1))
        pos = m.end()
    tokens.append(("end", "", len(text) + 1))
    i = 0

    def peek():
        return tokens[i]

    def take():
        nonlocal i
        tok = tokens[i]
        i += 1
        return tok

    def fail(col, what):
        raise AutomatonError(f"bad guard {text!r} at column {col}: {what}")

    def disj():
        items = [conj()]
        while peek()[1] in ("||", "∨"):
            take()
            items.append(conj())
        return items[0] if len(items) == 1 else Junction("or", tuple(items))

    def conj():
        items = [prim()]
        while peek()[1] in ("&&", "∧"):
            take()
            items.append(prim())
        return items[0] if len(items) == 1 else Junction("and", tuple(items))

    def prim():
        kind, tok, col = take()
        if tok == "(":
            inner = disj()
            if take()[1] != ")":
                fail(col, "unbalanced parenthesis")
            return inner
        if kind == "name" and tok in ("true", "false"):
            return Const(tok == "true")
        if kind != "name":
            fail(col, f"expected a clock, found {tok!r}")
        minus = None
        if peek()[1] == "-":
            take()
            k2, c2, col2 = take()
            if k2 != "name":
                fail(col2, "expected a clock after '-'")
            minus = c2
        k3, op, col3 = take()
        op = _OP_ALIASES.get(op, op)
        if op not in _OPS:
            fail(col3, f"expected a comparison, found {op!r}")
        k4, num, col4 = take()
        if k4 != "num" or not re.fullmatch(r"\d+", num):
            fail(col4, "clock constants must be non-negative integers")
        return Atom(tok, op, int(num), minus)

    g = disj()
    if peek()[0] != "end":
        fail(peek()[2], f"unexpected {peek()[1]!r}")
    return g


# --------------------------------------------------------------------------
# edge labels

@dataclass(frozen=True)
class Label:
    """Edge label: a conjunction of literals, or an exact proposition set."""

    pos: frozenset[str] = frozenset()
    neg: frozenset[str] = frozenset()
    exact: bool = False

    def matches(self, symbol: Iterable[str]) -> bool:
        symbol = frozenset(symbol)
        if self.exact:
            return symbol == self.pos
        return self.pos <= symbol and not (self.neg & symbol)

    def propositions(self) -> frozenset[str]:
        return self.pos | self.neg

    def to_json(self):
        if self.exact:
            return {"exact": sorted(self.pos)}
        return sorted(self.pos) + [f"!{p}" for p in sorted(self.neg)]

    @classmethod
    def from_json(cls, value) -> "Label":
        if value in ("*", None):
            return cls()
        if isinstance(value, dict):
            return cls(pos=frozenset(value.get("exact", [])), exact=True)
        if isinstance(value, str):
            value = [value]
        pos, neg = set(), set()
        for lit in value:
            lit = str(lit).strip()
            if lit[:1] in ("!", "¬", "~"):
                neg.add(lit[1:].strip())
            else:
                pos.add(lit)
        if pos & neg:
            raise AutomatonError(f"label {value!r} is contradictory")
        return cls(frozenset(pos), frozenset(neg))

    def __str__(self):
        if self.exact:
            return "{" + ",".join(sorted(self.pos)) + "}"
        lits = sorted(self.pos) + [f"¬{p}" for p in sorted(self.neg)]
        return "∧".join(lits) if lits else "*"


@dataclass(frozen=True)
class Edge:
    source: str
    label: Label
    guard: Guard
    target: str
    resets: frozenset[str] = frozenset()


# --------------------------------------------------------------------------
# automata

@dataclass(frozen=True, eq=False)
class TimedAutomaton:
    """Deterministic timed automaton with reachability acceptance.

    ``bounds`` holds the largest value each clock needs to distinguish; it must
    exceed every constant the clock is compared against.
    """

    states: tuple[str, ...]
    init: str
    accepting: frozenset[str]
    clocks: tuple[str, ...]
    bounds: Mapping[str, int]
    edges: tuple[Edge, ...]
    propositions: tuple[str, ...] = ()

    def __post_init__(self):
        names = set(self.states)
        if self.init not in names:
            raise AutomatonError(f"initial state {self.init!r} is not declared")
        if not self.accepting <= names:
            raise AutomatonError(f"unknown accepting states {sorted(self.accepting - names)}")
        known = set(self.clocks)
        for e in self.edges:
            if e.source not in names or e.target not in names:
                raise AutomatonError(f"edge {e.source!r}->{e.target!r} uses an undeclared state")
            stray = (e.guard.clocks() | set(e.resets)) - known
            if stray:
                raise AutomatonError(f"unknown clock(s) {sorted(stray)}")
        for c, k in self.max_constants().items():
            if self.bounds.get(c, 0) <= k:
                raise AutomatonError(
                    f"clock {c!r} bound {self.bounds.get(c, 0)} must exceed its largest constant {k}")
        if not self.propositions:
            props = set()
            for e in self.edges:
                props |= e.label.propositions()
            object.__setattr__(self, "propositions", tuple(sorted(props)))

    def max_constants(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.edges:
            for c, k in e.guard.constants().items():
                out[c] = max(out.get(c, 0), k)
        return out

    def out_edges(self, q: str) -> list[Edge]:
        return [e for e in self.edges if e.source == q]

    def dead_states(self) -> frozenset[str]:
        """States (including the completion trap) from which no accepting state is reachable."""
        preds: dict[str, set[str]] = {q: set() for q in self.states}
        for e in self.edges:
            preds[e.target].add(e.source)
        alive = set(self.accepting)
        stack = list(alive)
        while stack:
            q = stack.pop()
            for p in preds[q]:
                if p not in alive:
                    alive.add(p)
                    stack.append(p)
        return frozenset(set(self.states) - alive) | {TRAP}

    def to_json(self) -> dict:
        return {
            "propositions": list(self.propositions),
            "clocks": {c: int(self.bounds[c]) for c in self.clocks},
            "states": list(self.states),
            "init": self.init,
            "accepting": sorted(self.accepting),
            "edges": [
                {"source": e.source, "label": e.label.to_json(), "guard": str(e.guard),
                 "target": e.target, "resets": sorted(e.resets)}
                for e in self.edges
            ],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_automaton(document) -> TimedAutomaton:
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise AutomatonError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    else:
        doc = document
    try:
        clocks = doc.get("clocks", {})
        if isinstance(clocks, list):
            clocks = {c: None for c in clocks}
        edges = tuple(
            Edge(
                source=str(e["source"]),
                label=Label.from_json(e.get("label", "*")),
                guard=parse_guard(e.get("guard", "true")),
                target=str(e["target"]),
                resets=frozenset(e.get("resets", [])),
            )
            for e in doc.get("edges", [])
        )
        consts: dict[str, int] = {}
        for e in edges:
            for c, k in e.guard.constants().items():
                consts[c] = max(consts.get(c, 0), k)
        bounds = {
            c: int(b) if b is not None else (consts[c] + 1 if c in consts else 0)
            for c, b in clocks.items()
        }
        return TimedAutomaton(
            states=tuple(doc["states"]),
            init=str(doc["init"]),
            accepting=frozenset(doc.get("accepting", [])),
            clocks=tuple(clocks),
            bounds=bounds,
            edges=edges,
            propositions=tuple(doc.get("propositions", ())),
        )
    except KeyError as exc:
        raise AutomatonError(f"missing key {exc.args[0]!r}") from None


def load_automaton(path) -> TimedAutomaton:
    with open(path, encoding="utf-8") as fh:
        return parse_automaton(fh.read())


# --------------------------------------------------------------------------
# clock vectors and configurations

@dataclass(frozen=True)
class ClockVector:
    ticks: tuple[int, ...]
    tick: Fraction
    caps: tuple[int, ...]

    @classmethod
    def zero(cls, automaton: TimedAutomaton, tick) -> "ClockVector":
        tick = as_fraction(tick)
        if tick <= 0:
            raise ValueError("tick length must be positive")
        return cls((0,) * len(automaton.clocks), tick, saturation_caps(automaton, tick))

    def values(self, names: Sequence[str]) -> dict[str, Fraction]:
        return {c: t * self.tick for c, t in zip(names, self.ticks)}

    def advance(self, n: int = 1) -> "ClockVector":
        return ClockVector(tuple(min(t + n, cap) for t, cap in zip(self.ticks, self.caps)),
                           self.tick, self.caps)

    def reset(self, indices: Iterable[int]) -> "ClockVector":
        idx = set(indices)
        return ClockVector(tuple(0 if i in idx else t for i, t in enumerate(self.ticks)),
                           self.tick, self.caps)


def saturation_caps(automaton: TimedAutomaton, tick) -> tuple[int, ...]:
    tick = as_fraction(tick)
    return tuple(math.ceil(Fraction(automaton.bounds[c]) / tick) for c in automaton.clocks)


def eval_guard(phi: Guard, v: ClockVector, clocks: Sequence[str]) -> bool:
    """Evaluate ``phi`` at the clock vector ``v`` whose entries are named by ``clocks``."""
    missing = phi.clocks() - set(clocks)
    if missing:
        raise AutomatonError(f"unknown clock(s) {sorted(missing)}")
    return phi.holds(v.values(clocks))


def step_config(automaton: TimedAutomaton, q: str, v: ClockVector, symbol: Iterable[str],
                elapsed: int = 1) -> tuple[str, ClockVector]:
    """Let ``elapsed`` ticks pass and take the unique edge enabled by ``symbol``.

    Accepting states and the trap absorb (with their clocks zeroed); a
    configuration with no enabled edge moves to the trap.
    """
    if q in automaton.accepting or q == TRAP:
        return q, v.reset(range(len(v.ticks)))
    symbol = frozenset(symbol)
    w = v.advance(elapsed)
    values = w.values(automaton.clocks)
    enabled = [e for e in automaton.out_edges(q) if e.label.matches(symbol) and e.guard.holds(values)]
    if len(enabled) > 1:
        raise DeterminismError(
            f"state {q!r} has {len(enabled)} enabled edges on {sorted(symbol)} at {values}")
    if not enabled:
        return TRAP, w.reset(range(len(w.ticks)))
    e = enabled[0]
    return e.target, w.reset(i for i, c in enumerate(automaton.clocks) if c in e.resets)


# --------------------------------------------------------------------------
# timed words

class Verdict(str, enum.Enum):
    ACCEPTED = "accepted"
    PENDING = "pending"
    REJECTED = "rejected"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class TimedWord:
    events: tuple[tuple[Fraction, frozenset[str]], ...]

    def __post_init__(self):
        if not self.events:
            return
        if self.events[0][0] != 0:
            raise TimedWordError("a timed word starts at time 0")
        for (t0, _), (t1, _) in zip(self.events, self.events[1:]):
            if not t1 > t0:
                raise TimedWordError(f"timestamps must increase strictly ({t0} then {t1})")

    @classmethod
    def of(cls, pairs) -> "TimedWord":
        return cls(tuple((as_fraction(t), frozenset(s)) for t, s in pairs))

    def __len__(self):
        return len(self.events)


def _gcd_fraction(values: Iterable[Fraction]) -> Fraction | None:
    num, den = 0, 1
    for v in values:
        if v == 0:
            continue
        num = math.gcd(num, v.numerator)
        den = den * v.denominator // math.gcd(den, v.denominator)
    return Fraction(num, den) if num else None


def accept_timed_word(automaton: TimedAutomaton, word, tick=None) -> Verdict:
    """Verdict of the run on a finite prefix of a timed word.

    Timestamps must be multiples of ``tick``; when no tick is given the largest
    common divisor of the timestamps is used.
    """
    if not isinstance(word, TimedWord):
        word = TimedWord.of(word)
    if not word.events:
        return Verdict.PENDING
    tick = as_fraction(tick) if tick is not None else (_gcd_fraction(t for t, _ in word.events) or Fraction(1))
    dead = automaton.dead_states()
    q, v = automaton.init, ClockVector.zero(automaton, tick)
    prev = Fraction(0)
    for t, symbol in word.events:
        gap = (t - prev) / tick
        if gap.denominator != 1:
            raise TimedWordError(f"timestamp {t} is not a multiple of the tick {tick}")
        q, v = step_config(automaton, q, v, symbol, elapsed=int(gap))
        prev = t
        if q in automaton.accepting:
            return Verdict.ACCEPTED
        if q in dead:
            return Verdict.REJECTED
    return Verdict.PENDING


def sample_behavior(labels: Sequence[Iterable[str]], delta) -> TimedWord:
    """Timed word ``(0, b(0)) (delta, b(delta)) ...`` of a sampled behavior."""
    delta = as_fraction(delta)
    if delta <= 0:
        raise ValueError("sampling interval must be positive")
    return TimedWord(tuple((i * delta, frozenset(s)) for i, s in enumerate(labels)))


# --------------------------------------------------------------------------
# bounded-reach fragment

def build_reach_fragment(stages: Sequence[tuple[Iterable[str], tuple[int, int]]],
                         avoid: str | None = None) -> TimedAutomaton:
    """Automaton for ``◇[a1,b1](T1 ∧ ¬avoid ∧ ◇[a2,b2](T2 ∧ ¬avoid ∧ ...))``.

    One clock ``c`` is shared by all stages and reset whenever a stage
    completes, so each interval is measured from the previous stage's success.
    Every edge into ``acc`` or ``trap`` resets ``c`` too, so those absorbing
    states carry a single configuration.
    Seeing a stage target before ``a_i``, overrunning ``b_i`` or seeing
    ``avoid`` leads to ``trap``.
    """
    if not stages:
        raise AutomatonError("at least one stage is required")
    parsed = []
    for targets, interval in stages:
        targets = tuple(sorted(set(targets)))
        if not targets:
            raise AutomatonError("empty stage")
        a, b = interval
        if int(a) != a or int(b) != b or a < 0:
            raise AutomatonError(f"interval {interval} needs non-negative integer end-points")
        if not a < b:
            raise AutomatonError(f"interval {interval} is singular or empty")
        parsed.append((targets, int(a), int(b)))

    k = len(parsed)
    names = ["Init"] + [f"s{i}" for i in range(1, k)]
    acc, trap = "acc", "trap"
    block = frozenset([avoid]) if avoid else frozenset()
    edges = []
    for i, (targets, a, b) in enumerate(parsed):
        here = names[i]
        nxt = names[i + 1] if i + 1 < k else acc
        if avoid:
            edges.append(Edge(here, Label(pos=frozenset([avoid])), TRUE, trap, frozenset(["c"])))
        met = Label(pos=frozenset(targets), neg=block)
        if a > 0:
            edges.append(Edge(here, met, Atom("c", "<", a), trap, frozenset(["c"])))
            window = Junction("and", (Atom("c", ">=", a), Atom("c", "<=", b)))
        else:
            window = Atom("c", "<=", b)
        edges.append(Edge(here, met, window, nxt, frozenset(["c"])))
        edges.append(Edge(here, met, Atom("c", ">", b), trap, frozenset(["c"])))
        # "targets not all met", split into disjoint literal conjunctions
        for j, p in enumerate(targets):
            unmet = Label(pos=frozenset(targets[:j]), neg=frozenset([p]) | block)
            edges.append(Edge(here, unmet, Atom("c", "<=", b), here))
            edges.append(Edge(here, unmet, Atom("c", ">", b), trap, frozenset(["c"])))
    edges.append(Edge(acc, Label(), TRUE, acc, frozenset(["c"])))
    edges.append(Edge(trap, Label(), TRUE, trap, frozenset(["c"])))

    props = sorted({p for t, _, _ in parsed for p in t} | set(block))
    return TimedAutomaton(
        states=tuple(names) + (acc, trap),
        init="Init",
        accepting=frozenset([acc]),
        clocks=("c",),
        bounds={"c": max(b for _, _, b in parsed) + 1},
        edges=tuple(edges),
        propositions=tuple(props),
    )


def check_determinism(automaton: TimedAutomaton):
    """``None`` if deterministic, else a witness ``(q, symbol, clock values)``.

    Clock space is probed on a lattice fine enough to hit every region up to
    the clock bounds: half-integers without difference constraints, otherwise
    steps of ``1/(M+1)`` so all orderings of fractional parts occur.
    """
    props = automaton.propositions
    symbols = [frozenset(s) for r in range(len(props) + 1) for s in itertools.combinations(props, r)]
    diff = any(e.guard.has_difference for e in automaton.edges)
    m = len(automaton.clocks)
    step = Fraction(1, m + 1) if diff else Fraction(1, 2)
    axes = [[step * j for j in range(int(automaton.bounds[c] / step) + 1)] for c in automaton.clocks]
    for q in automaton.states:
        out = automaton.out_edges(q)
        for symbol in symbols:
            live = [e for e in out if e.label.matches(symbol)]
            if len(live) < 2:
                continue
            for point in itertools.product(*axes):
                values = dict(zip(automaton.clocks, point))
                if sum(e.guard.holds(values) for e in live) > 1:
                    return q, symbol, values
    return None
