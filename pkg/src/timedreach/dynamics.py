"""Controlled SDE models ``dx = f(x, u) dt + g(x) dw`` and their state labels."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .expr import Expression, ExpressionError, split_vector

if TYPE_CHECKING:
    from .mca_grid import Grid

# Relative slack used for every "is x inside [lo, hi)" decision.
BOUNDARY_TOL = 1e-9


class ModelError(ValueError):
    """A model document is malformed or inconsistent."""


class DomainError(ValueError):
    """A point lies outside the model's state box."""


@dataclass(frozen=True, eq=False)
class SdeModel:
    dim_x: int
    dim_w: int
    state_lo: tuple[float, ...]
    state_hi: tuple[float, ...]
    periodic: frozenset[int]
    input_lo: tuple[float, ...]
    input_hi: tuple[float, ...]
    drift: tuple[Expression, ...]
    diffusion: tuple[tuple[Expression, ...], ...]
    initial_state: tuple[float, ...]
    constants: Mapping[str, float] = field(default_factory=dict)
    boundary: str = "clamp"     # "stop": a trajectory touching a non-periodic face stays there

    @property
    def dim_u(self) -> int:
        return len(self.input_lo)

    @property
    def is_diagonal(self) -> bool:
        if self.dim_x != self.dim_w:
            return False
        for i, row in enumerate(self.diffusion):
            for j, expr in enumerate(row):
                if i != j and not (expr.is_constant and expr.constant_value() == 0.0):
                    return False
        return True

    def _env(self, x, u=None):
        x = np.asarray(x, dtype=float)
        env = {f"x{i + 1}": x[..., i] for i in range(self.dim_x)}
        if u is not None:
            u = np.asarray(u, dtype=float)
            env.update({f"u{j + 1}": u[..., j] for j in range(self.dim_u)})
        return env

    def drift_at(self, x, u) -> np.ndarray:
        """Vectorized drift; ``x`` is ``(..., n)``, ``u`` is ``(..., m)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        env = self._env(np.broadcast_to(x, shape + x.shape[-1:]),
                        np.broadcast_to(u, shape + u.shape[-1:]))
        cols = [np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), shape) for e in self.drift]
        return np.stack(cols, axis=-1)

    def diffusion_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        env = self._env(x)
        rows = []
        for row in self.diffusion:
            rows.append(np.stack(
                [np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), shape) for e in row],
                axis=-1))
        return np.stack(rows, axis=-2)

    def diffusion_diag_sq(self, x) -> np.ndarray:
        """Diagonal of ``g g'`` at each point, shape ``(..., n)``."""
        g = self.diffusion_at(x)
        return np.sum(g * g, axis=-1)

    def in_box(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape[:-1], dtype=bool)
        for i in range(self.dim_x):
            if i in self.periodic:
                continue
            slack = BOUNDARY_TOL * max(1.0, self.state_hi[i] - self.state_lo[i])
            ok &= (x[..., i] >= self.state_lo[i] - slack) & (x[..., i] <= self.state_hi[i] + slack)
        return ok

    def wrap(self, x) -> np.ndarray:
        """Map periodic coordinates into ``[lo, hi)``."""
        x = np.array(x, dtype=float, copy=True)
        for i in self.periodic:
            lo, period = self.state_lo[i], self.state_hi[i] - self.state_lo[i]
            r = np.mod(x[..., i] - lo, period)
            r = np.where(r >= period, 0.0, r)
            x[..., i] = lo + r
        return x


@dataclass(frozen=True, eq=False)
class Labeling:
    """Atomic propositions as unions of axis-aligned boxes.

    Boxes are half-open ``[lo, hi)`` per dimension; a box edge that sits on the
    upper face of the state box is closed so the face itself gets labeled.
    """

    propositions: tuple[str, ...]
    regions: Mapping[str, tuple[np.ndarray, ...]]
    state_lo: tuple[float, ...]
    state_hi: tuple[float, ...]
    periodic: frozenset[int] = frozenset()

    def bit(self, name: str) -> int:
        return 1 << self.propositions.index(name)

    def names_of(self, mask: int) -> frozenset[str]:
        return frozenset(p for i, p in enumerate(self.propositions) if mask >> i & 1)

    def mask_of(self, names) -> int:
        out = 0
        for name in names:
            out |= self.bit(name)
        return out

    def _inside(self, box: np.ndarray, x: np.ndarray) -> np.ndarray:
        ok = np.ones(x.shape[:-1], dtype=bool)
        for i, (lo, hi) in enumerate(box):
            span = self.state_hi[i] - self.state_lo[i]
            slack = BOUNDARY_TOL * max(1.0, span)
            xi = x[..., i]
            if hi - lo <= slack:
                ok &= np.abs(xi - lo) <= slack  # degenerate box: a closed face
                continue
            if i in self.periodic:
                if hi - lo >= span - slack:
                    continue
                xi = self.state_lo[i] + np.mod(xi - self.state_lo[i], span)
                xi = np.where(xi >= self.state_hi[i] - slack, self.state_lo[i], xi)
            upper = xi < hi - slack
            if i not in self.periodic and hi >= self.state_hi[i] - slack:
                upper = xi <= hi + slack
            ok &= (xi >= lo - slack) & upper
        return ok

    def masks(self, x) -> np.ndarray:
        """Label bitmask of every point in ``x`` (shape ``(..., n)``)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1], dtype=np.int64)
        for k, name in enumerate(self.propositions):
            hit = np.zeros(x.shape[:-1], dtype=bool)
            for box in self.regions[name]:
                hit |= self._inside(box, x)
            out |= hit.astype(np.int64) << k
        return out


def _number(value, constants, where: str) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        out = float(value)
    elif isinstance(value, str):
        try:
            out = Expression(value, constants=constants).constant_value()
        except ExpressionError as exc:
            raise ModelError(f"{where}: {exc}") from None
    else:
        raise ModelError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(out):
        raise ModelError(f"{where}: unbounded value {value!r}")
    return out


def _interval(pair, constants, where: str) -> tuple[float, float]:
    if not isinstance(pair, (list, tuple)) or len(pair) != 2:
        raise ModelError(f"{where}: expected [lo, hi]")
    lo = _number(pair[0], constants, where)
    hi = _number(pair[1], constants, where)
    if hi < lo:
        raise ModelError(f"{where}: empty interval [{lo}, {hi}]")
    return lo, hi


def _expr_list(value, where: str) -> list:
    if isinstance(value, str):
        return split_vector(value)
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def parse_model(document, require_diagonal: bool = False) -> tuple[SdeModel, Labeling]:
    """Build a model and its labeling from a JSON document (text, bytes or dict)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ModelError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    else:
        doc = document
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")

    constants = {str(k): _number(v, {}, f"constants.{k}") for k, v in doc.get("constants", {}).items()}
    box = doc.get("state_box")
    if not box:
        raise ModelError("state_box is required")
    n = int(doc.get("dim", len(box)))
    if len(box) != n:
        raise ModelError(f"dimension mismatch: dim={n} but state_box has {len(box)} intervals")
    state = [_interval(p, constants, f"state_box[{i}]") for i, p in enumerate(box)]
    for i, (lo, hi) in enumerate(state):
        if hi <= lo:
            raise ModelError(f"state_box[{i}] must have positive width")

    periodic = frozenset(int(i) for i in doc.get("periodic", []))
    if any(i < 0 or i >= n for i in periodic):
        raise ModelError(f"periodic index out of range for dim={n}")

    inputs = [_interval(p, constants, f"inputs[{j}]") for j, p in enumerate(doc.get("inputs", []))]
    m = len(inputs)
    state_names = {f"x{i + 1}" for i in range(n)}
    input_names = {f"u{j + 1}" for j in range(m)}

    def compile_expr(src, allowed, where):
        try:
            return Expression(str(src), allowed, constants)
        except ExpressionError as exc:
            raise ModelError(f"{where}: {exc}") from None

    drift_src = _expr_list(doc.get("drift", []), "drift")
    if len(drift_src) != n:
        raise ModelError(f"dimension mismatch: drift has {len(drift_src)} entries, expected {n}")
    drift = tuple(compile_expr(s, state_names | input_names, f"drift[{i}]") for i, s in enumerate(drift_src))

    diff_src = _expr_list(doc.get("diffusion", []), "diffusion")
    rows = [_expr_list(r, "diffusion") for r in diff_src]
    if len(rows) != n:
        raise ModelError(f"dimension mismatch: diffusion has {len(rows)} rows, expected {n}")
    k = len(rows[0])
    if any(len(r) != k for r in rows) or k == 0:
        raise ModelError("dimension mismatch: diffusion rows have unequal length")
    diffusion = tuple(
        tuple(compile_expr(s, state_names, f"diffusion[{i}][{j}]") for j, s in enumerate(r))
        for i, r in enumerate(rows)
    )

    boundary = doc.get("boundary", "clamp")
    if boundary not in ("clamp", "stop"):
        raise ModelError(f"boundary must be 'clamp' or 'stop', got {boundary!r}")

    x0 = doc.get("initial_state", [lo for lo, _ in state])
    if len(x0) != n:
        raise ModelError(f"dimension mismatch: initial_state has {len(x0)} entries, expected {n}")
    x0 = tuple(_number(v, constants, f"initial_state[{i}]") for i, v in enumerate(x0))

    model = SdeModel(
        dim_x=n, dim_w=k,
        state_lo=tuple(lo for lo, _ in state), state_hi=tuple(hi for _, hi in state),
        periodic=periodic,
        input_lo=tuple(lo for lo, _ in inputs), input_hi=tuple(hi for _, hi in inputs),
        drift=drift, diffusion=diffusion, initial_state=x0, constants=constants,
        boundary=boundary,
    )
    if not model.in_box(np.array(x0)):
        raise ModelError(f"initial_state {x0} is outside state_box")
    if require_diagonal and not model.is_diagonal:
        raise ModelError("kernel construction needs a square diagonal diffusion matrix")

    regions = {}
    for name, boxes in doc.get("labels", {}).items():
        parsed = []
        for b, bx in enumerate(boxes):
            if len(bx) != n:
                raise ModelError(f"dimension mismatch: labels.{name}[{b}] has {len(bx)} intervals, expected {n}")
            parsed.append(np.array([
                state[i] if iv is None else _interval(iv, constants, f"labels.{name}[{b}][{i}]")
                for i, iv in enumerate(bx)
            ]))
        regions[str(name)] = tuple(parsed)
    labeling = Labeling(
        propositions=tuple(regions), regions=regions,
        state_lo=model.state_lo, state_hi=model.state_hi, periodic=periodic,
    )
    return model, labeling


def load_model(path, require_diagonal: bool = False) -> tuple[SdeModel, Labeling]:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read(), require_diagonal=require_diagonal)


def _check_domain(model: SdeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim_x:
        raise DomainError(f"expected a {model.dim_x}-dimensional state, got shape {x.shape}")
    if not np.all(model.in_box(x)):
        raise DomainError(f"state {x.tolist()} lies outside the state box")
    return x


def drift_eval(model: SdeModel, x, u) -> np.ndarray:
    x = _check_domain(model, x)
    u = np.asarray(u, dtype=float).reshape(-1) if np.ndim(u) <= 1 else np.asarray(u, dtype=float)
    slack = 1e-12
    if u.shape[-1] != model.dim_u or np.any(u < np.array(model.input_lo) - slack) \
            or np.any(u > np.array(model.input_hi) + slack):
        raise DomainError(f"input {u.tolist()} lies outside the input space")
    return model.drift_at(x, u)


def diffusion_eval(model: SdeModel, x) -> np.ndarray:
    x = _check_domain(model, x)
    return model.diffusion_at(x)


def label_of(labeling: Labeling, x) -> frozenset[str]:
    return labeling.names_of(int(labeling.masks(np.asarray(x, dtype=float))))


def em_step(model: SdeModel, x, u, dt: float, noise) -> tuple[np.ndarray, np.ndarray]:
    """One Euler-Maruyama increment followed by wrap/clamp to the state box.

    Works on a single state or a batch ``(N, n)``. Returns the new state and a
    boolean flag telling whether a non-periodic coordinate was clamped.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    g = model.diffusion_at(x)
    x_new = x + model.drift_at(x, u) * dt + np.einsum("...ij,...j->...i", g, noise) * math.sqrt(dt)
    hit = np.zeros(x.shape[:-1], dtype=bool)
    for i in range(model.dim_x):
        if i in model.periodic:
            continue
        lo, hi = model.state_lo[i], model.state_hi[i]
        hit |= (x_new[..., i] < lo) | (x_new[..., i] > hi)
        x_new[..., i] = np.clip(x_new[..., i], lo, hi)
    if model.periodic:
        x_new = model.wrap(x_new)
    return x_new, hit


def _cell_samples(lo: float, hi: float, cuts: np.ndarray) -> list[float]:
    """Cut points inside ``[lo, hi)`` plus one interior point of every open piece between them."""
    slack = BOUNDARY_TOL * max(1.0, abs(hi - lo))
    inner = [float(c) for c in cuts if lo + slack < c < hi - slack]
    ends = [lo] + inner + [hi]
    return [lo] + inner + [(a + b) / 2 for a, b in zip(ends[:-1], ends[1:])]


def face_propositions(labeling: Labeling) -> set[str]:
    """Propositions made only of boxes flattened onto a non-periodic face of the state box.

    On the grid they hold exactly at the boundary points, which stand for contact
    with the face.
    """
    out = set()
    for name, boxes in labeling.regions.items():
        def on_face(box):
            for i, (lo, hi) in enumerate(box):
                slack = BOUNDARY_TOL * max(1.0, labeling.state_hi[i] - labeling.state_lo[i])
                if i not in labeling.periodic and hi - lo <= slack and (
                        abs(lo - labeling.state_lo[i]) <= slack or abs(lo - labeling.state_hi[i]) <= slack):
                    return True
            return False
        if boxes and all(on_face(b) for b in boxes):
            out.add(name)
    return out


def check_label_alignment(labeling: Labeling, grid: "Grid") -> list[tuple[int, ...]]:
    """Return every grid cell whose points do not all share one label set.

    Each cell is cut along the region edges that cross it; labels are constant on
    the cut points and on the open pieces between them, so sampling both is exact.
    Face propositions (see :func:`face_propositions`) are attributed to the
    boundary points and left out of the comparison.
    """
    if not labeling.propositions:
        return []
    n = grid.ndim
    ignore = 0
    for name in face_propositions(labeling):
        ignore |= labeling.bit(name)
    cuts = []
    for d in range(n):
        edges = set()
        for name, boxes in labeling.regions.items():
            if labeling.bit(name) & ignore:
                continue
            for box in boxes:
                edges.update((float(box[d][0]), float(box[d][1])))
        cuts.append(np.array(sorted(edges)))

    per_dim = []
    for d in range(n):
        samples = []
        for i, p in enumerate(grid.axes[d]):
            if grid.periodic[d] or i < grid.counts[d] - 1:
                samples.append(_cell_samples(p, p + grid.steps[d], cuts[d]))
            else:
                samples.append([p])  # top face: the cell is the single point hi
        per_dim.append(samples)

    bad = []
    for idx in itertools.product(*(range(c) for c in grid.counts)):
        pts = np.array(list(itertools.product(*(per_dim[d][idx[d]] for d in range(n)))))
        if len(pts) == 1:
            continue
        masks = labeling.masks(pts) & ~ignore
        if np.any(masks != masks[0]):
            bad.append(tuple(idx))
    return bad
