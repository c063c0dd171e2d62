"""Uniform state grids and locally consistent Markov chain kernels."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .dynamics import BOUNDARY_TOL, SdeModel


class GridError(ValueError):
    pass


class KernelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Grid points ``lo + i*h`` with half-open cells ``[x, x + h)``.

    On non-periodic dimensions the last point sits on the upper face of the
    box; on periodic ones the endpoint ``hi`` is identified with ``lo``.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    steps: tuple[float, ...]
    counts: tuple[int, ...]
    periodic: tuple[bool, ...]

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def axes(self) -> list[np.ndarray]:
        return [self.lo[d] + np.arange(self.counts[d]) * self.steps[d] for d in range(self.ndim)]

    def points(self, ids=None) -> np.ndarray:
        """Coordinates of grid points (all of them by default), shape ``(N, n)``."""
        if ids is None:
            ids = np.arange(self.size)
        multi = np.unravel_index(np.asarray(ids), self.counts)
        return np.stack([self.lo[d] + multi[d] * self.steps[d] for d in range(self.ndim)], axis=-1)

    def flat(self, multi) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(m) for m in multi), self.counts)

    def multi(self, ids) -> tuple[np.ndarray, ...]:
        return np.unravel_index(np.asarray(ids), self.counts)

    def cell_multi(self, x) -> tuple[np.ndarray, ...]:
        x = np.asarray(x, dtype=float)
        out = []
        for d in range(self.ndim):
            r = (x[..., d] - self.lo[d]) / self.steps[d]
            i = np.floor(r + BOUNDARY_TOL).astype(np.int64)
            if self.periodic[d]:
                i = np.mod(i, self.counts[d])
            else:
                i = np.clip(i, 0, self.counts[d] - 1)
            out.append(i)
        return tuple(out)

    def cell_of(self, x) -> np.ndarray:
        """Id of the grid point whose cell contains ``x`` (snap to representative)."""
        return self.flat(self.cell_multi(x))

    def describe(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "h": list(self.steps),
                "counts": list(self.counts), "periodic": list(self.periodic)}


def build_grid(model: SdeModel, h: Sequence[float], periodic: bool = True) -> Grid:
    """Grid with step ``h``; ``periodic=False`` keeps a duplicated endpoint on wrap-around dims."""
    h = tuple(float(v) for v in h)
    if len(h) != model.dim_x:
        raise GridError(f"need {model.dim_x} step sizes, got {len(h)}")
    counts = []
    per = []
    for d, step in enumerate(h):
        if step <= 0:
            raise GridError(f"h[{d}] must be positive")
        width = model.state_hi[d] - model.state_lo[d]
        ratio = width / step
        cells = round(ratio)
        if cells < 1 or abs(ratio - cells) > 1e-9 * max(1.0, ratio):
            raise GridError(f"h[{d}]={step} does not divide the width {width}")
        wrap = periodic and d in model.periodic
        counts.append(cells if wrap else cells + 1)
        per.append(wrap)
    steps = tuple((model.state_hi[d] - model.state_lo[d]) / (counts[d] if per[d] else counts[d] - 1)
                  for d in range(model.dim_x))
    return Grid(model.state_lo, model.state_hi, steps, tuple(counts), tuple(per))


def _rates(model: SdeModel, grid: Grid, inputs: np.ndarray):
    """Per (point, input, dim): diffusion term ``(gg')_ii / h_i^2`` and drift."""
    pts = grid.points()
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    h = np.array(grid.steps)
    drift = model.drift_at(pts[:, None, :], inputs[None, :, :])          # (N, A, n)
    diff = model.diffusion_diag_sq(pts)[:, None, :] / h**2              # (N, 1, n)
    return drift, np.broadcast_to(diff, drift.shape), h


def max_delta(model: SdeModel, grid: Grid, inputs) -> float:
    """Largest constant interpolation interval keeping every kernel row non-negative."""
    drift, diff, h = _rates(model, grid, inputs)
    total = np.sum(diff + np.abs(drift) / h, axis=-1)
    worst = float(total.max())
    if worst <= 0:
        raise KernelError("max_delta is unbounded: drift and diffusion vanish everywhere")
    return 1.0 / worst


@dataclass(frozen=True, eq=False)
class MarkovKernel:
    """Transition rows stored as padded ``(N, A, W)`` arrays.

    Within a row successors are sorted, unique and padded with zero-probability
    self references.
    """

    succ: np.ndarray
    prob: np.ndarray
    delta: float
    inputs: np.ndarray
    substeps: int = 1
    clipped_rows: int = 0

    @property
    def n_states(self) -> int:
        return self.succ.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.succ.shape[1]

    def row(self, state: int, action: int) -> list[tuple[int, float]]:
        s, p = self.succ[state, action], self.prob[state, action]
        return [(int(a), float(b)) for a, b in zip(s, p) if b > 0]

    def matrix(self, action: int) -> sp.csr_matrix:
        n = self.n_states
        rows = np.repeat(np.arange(n), self.succ.shape[2])
        return sp.csr_matrix((self.prob[:, action].ravel(), (rows, self.succ[:, action].ravel())), shape=(n, n))

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state_id", "input_id", "succ_id", "prob"])
            for s in range(self.n_states):
                for a in range(self.n_inputs):
                    for j, p in self.row(s, a):
                        w.writerow([s, a, j, repr(p)])


def _compact(succ: np.ndarray, prob: np.ndarray, self_ids: np.ndarray):
    """Sort each row by successor, merge duplicates and push zeros to the end."""
    order = np.argsort(succ, axis=-1, kind="stable")
    succ = np.take_along_axis(succ, order, -1)
    prob = np.take_along_axis(prob, order, -1)
    width = succ.shape[-1]
    starts = np.ones(succ.shape, dtype=bool)
    starts[..., 1:] = succ[..., 1:] != succ[..., :-1]
    run = np.cumsum(starts, axis=-1) - 1
    merged = np.zeros_like(prob)
    ids = np.zeros_like(succ)
    for j in range(width):
        onehot = run[..., j, None] == np.arange(width)
        merged += onehot * prob[..., j, None]
        ids = np.where(onehot & starts[..., j, None], succ[..., j, None], ids)
    nz = merged > 0
    order = np.argsort(~nz, axis=-1, kind="stable")
    ids = np.take_along_axis(ids, order, -1)
    merged = np.take_along_axis(merged, order, -1)
    ids = np.where(merged > 0, ids, self_ids[..., None])
    keep = max(int(np.max(np.sum(merged > 0, axis=-1))) if merged.size else 1, 1)
    return np.ascontiguousarray(ids[..., :keep]), np.ascontiguousarray(merged[..., :keep])


def _single_step(model: SdeModel, grid: Grid, inputs: np.ndarray, delta: float, clip: bool):
    drift, diff, h = _rates(model, grid, inputs)
    n_pts, n_in, n = drift.shape
    up = delta * (diff / 2 + np.maximum(drift, 0) / h)
    down = delta * (diff / 2 + np.maximum(-drift, 0) / h)
    total = np.sum(up + down, axis=-1)
    clipped = 0
    if np.any(total > 1 + 1e-12):
        if not clip:
            s, a = np.unravel_index(int(np.argmax(total)), total.shape)
            bound = max_delta(model, grid, inputs)
            raise KernelError(
                f"delta={delta} exceeds the local consistency bound {bound:.6g}: "
                f"self-loop probability {1 - total[s, a]:.4g} at state {s} "
                f"{grid.points([s])[0].tolist()}, input {inputs[a].tolist()}")
        over = total > 1
        clipped = int(over.sum())
        scale = np.where(over, 1.0 / np.where(over, total, 1.0), 1.0)
        up = up * scale[..., None]
        down = down * scale[..., None]
        total = np.sum(up + down, axis=-1)
    stay = np.clip(1.0 - total, 0.0, None)

    ids = np.arange(n_pts)
    multi = grid.multi(ids)
    width = 2 * n + 1
    succ = np.empty((n_pts, n_in, width), dtype=np.int64)
    prob = np.empty((n_pts, n_in, width))
    succ[..., 0] = ids[:, None]
    prob[..., 0] = stay
    for d in range(n):
        for col, (shift, mass) in enumerate(((1, up[..., d]), (-1, down[..., d]))):
            m = list(multi)
            m[d] = multi[d] + shift
            if grid.periodic[d]:
                m[d] = np.mod(m[d], grid.counts[d])
                target = grid.flat(m)
            else:
                outside = (m[d] < 0) | (m[d] >= grid.counts[d])
                m[d] = np.clip(m[d], 0, grid.counts[d] - 1)
                target = np.where(outside, ids, grid.flat(m))  # mass leaving the box stays put
            succ[..., 1 + 2 * d + col] = target[:, None]
            prob[..., 1 + 2 * d + col] = mass
    succ, prob = _compact(succ, prob, np.broadcast_to(ids[:, None], (n_pts, n_in)))
    return succ, prob, clipped


def build_kernel(model: SdeModel, grid: Grid, inputs, delta: float,
                 on_violation: str = "error") -> MarkovKernel:
    """Markov chain kernel on ``grid`` for each input with interpolation interval ``delta``.

    ``on_violation`` decides what happens when ``delta`` exceeds :func:`max_delta`:

    * ``"error"`` raises :class:`KernelError`;
    * ``"normalize"`` rescales offending rows so their self-loop is zero (those
      rows then advance the chain by less than ``delta`` of model time);
    * ``"substep"`` composes the kernel of ``delta/m`` with itself ``m`` times,
      ``m`` being the smallest count that makes each sub-step admissible.
    """
    if not model.is_diagonal:
        raise KernelError("kernel construction needs a diagonal diffusion matrix")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    delta = float(delta)
    if delta <= 0:
        raise KernelError("delta must be positive")
    if on_violation not in ("error", "normalize", "substep"):
        raise ValueError(f"unknown on_violation mode {on_violation!r}")
    try:
        bound = max_delta(model, grid, inputs)
    except KernelError:
        bound = math.inf  # no motion anywhere: every delta is admissible
    if on_violation == "substep" and delta > bound * (1 + 1e-12):
        m = math.ceil(delta / bound - 1e-12)
        succ1, prob1, _ = _single_step(model, grid, inputs, delta / m, clip=False)
        n_pts, n_in, _ = succ1.shape
        ids = np.arange(n_pts)
        rows = np.repeat(ids, succ1.shape[2])
        out_s = []
        for a in range(n_in):
            step = sp.csr_matrix((prob1[:, a].ravel(), (rows, succ1[:, a].ravel())), shape=(n_pts, n_pts))
            acc = step
            for _ in range(m - 1):
                acc = acc @ step
            acc = acc.tocsr()
            acc.sum_duplicates()
            acc.sort_indices()
            out_s.append(acc)
        width = max(int(np.diff(mat.indptr).max()) for mat in out_s)
        succ = np.tile(ids[:, None, None], (1, n_in, width))
        prob = np.zeros((n_pts, n_in, width))
        for a, mat in enumerate(out_s):
            counts = np.diff(mat.indptr)
            pos = np.arange(mat.nnz) - np.repeat(mat.indptr[:-1], counts)
            r = np.repeat(ids, counts)
            succ[r, a, pos] = mat.indices
            prob[r, a, pos] = mat.data
        succ, prob = _compact(succ, prob, np.broadcast_to(ids[:, None], (n_pts, n_in)))
        return MarkovKernel(succ, prob, delta, inputs, substeps=m)
    succ, prob, clipped = _single_step(model, grid, inputs, delta, clip=on_violation == "normalize")
    return MarkovKernel(succ, prob, delta, inputs, clipped_rows=clipped)


@dataclass
class ConsistencyReport:
    rows_checked: int
    max_row_sum_error: float
    min_probability: float
    max_mean_error: float
    max_var_error: float
    worst_mean: tuple[int, int]
    worst_var: tuple[int, int]
    max_bias: float          # largest |second moment - delta*(gg')_ii|
    bias_scale: float        # delta*max(h) + delta^2, the order the bias must stay within
    max_step: float          # sup-norm of a single displacement

    @property
    def ok(self) -> bool:
        return (self.max_row_sum_error <= 1e-12 and self.min_probability >= 0
                and self.max_mean_error <= 1e-10 and self.max_var_error <= 1e-10)


def audit_local_consistency(kernel: MarkovKernel, model: SdeModel, grid: Grid) -> ConsistencyReport:
    """Check the one-step moments of ``kernel`` against the SDE coefficients.

    Only interior points are checked: no neighbour of the stencil may be
    clamped at the box, and periodic axes need at least three points.
    """
    pts = grid.points()
    n_pts, n_in, width = kernel.succ.shape
    h = np.array(grid.steps)
    reach = kernel.substeps
    interior = np.ones(n_pts, dtype=bool)
    multi = grid.multi(np.arange(n_pts))
    for d in range(grid.ndim):
        if grid.periodic[d]:
            interior &= grid.counts[d] >= 2 * reach + 1
        else:
            interior &= (multi[d] >= reach) & (multi[d] <= grid.counts[d] - 1 - reach)
    idx = np.flatnonzero(interior)

    row_sum = kernel.prob.sum(axis=-1)
    delta = kernel.delta
    disp = pts[kernel.succ[idx]] - pts[idx][:, None, None, :]       # (K, A, W, n)
    for d in range(grid.ndim):
        if grid.periodic[d]:
            period = grid.hi[d] - grid.lo[d]
            disp[..., d] = disp[..., d] - period * np.round(disp[..., d] / period)
    p = kernel.prob[idx][..., None]
    mean = np.sum(p * disp, axis=2)                                   # (K, A, n)
    var = np.sum(p * disp**2, axis=2) - mean**2
    f = model.drift_at(pts[idx][:, None, :], kernel.inputs[None, :, :])
    gg = np.broadcast_to(model.diffusion_diag_sq(pts[idx])[:, None, :], f.shape)
    want_var = delta * gg + delta * h * np.abs(f) - delta**2 * f**2
    mean_err = np.abs(mean - delta * f).max(axis=-1) if len(idx) else np.zeros((0, n_in))
    var_err = np.abs(var - want_var).max(axis=-1) if len(idx) else np.zeros((0, n_in))

    def worst(err):
        if err.size == 0:
            return (-1, -1)
        k, a = np.unravel_index(int(np.argmax(err)), err.shape)
        return (int(idx[k]), int(a))

    step = np.abs(pts[kernel.succ] - pts[:, None, None, :])
    for d in range(grid.ndim):
        if grid.periodic[d]:
            period = grid.hi[d] - grid.lo[d]
            step[..., d] = np.minimum(step[..., d], period - step[..., d])
    step = np.where(kernel.prob[..., None] > 0, step, 0.0)
    return ConsistencyReport(
        rows_checked=int(len(idx) * n_in),
        max_row_sum_error=float(np.abs(row_sum - 1).max()),
        min_probability=float(kernel.prob.min()),
        max_mean_error=float(mean_err.max()) if mean_err.size else 0.0,
        max_var_error=float(var_err.max()) if var_err.size else 0.0,
        worst_mean=worst(mean_err),
        worst_var=worst(var_err),
        max_bias=float(np.abs(var - delta * gg).max()) if len(idx) else 0.0,
        bias_scale=float(delta * h.max() + delta**2),
        max_step=float(step.max()),
    )
