"""Command line front end: build, solve, simulate, fragment, check."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import shutil
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import ModelError, check_label_alignment, face_propositions, load_model
from .expr import Expression, ExpressionError
from .mca_grid import GridError, KernelError, build_grid, build_kernel, max_delta
from .product_mdp import ProductError, ProductMdp, build_product, build_table, trim_reachable
from .runtime import DEFAULT_SUBSTEPS, monte_carlo_estimate, write_trajectories
from .solver import Policy, discretize_inputs, extract_policy, value_iteration
from .timed_logic import AutomatonError, build_reach_fragment, check_determinism, load_automaton


EXIT_OK, EXIT_INVALID, EXIT_NO_CONVERGENCE = 0, 2, 3
MANIFEST = "manifest.json"
PRODUCT = "product.npz"
SAVED_TRAJECTORIES = 1000


class StageError(Exception):
    """Validation failure tagged with the pipeline stage it came from."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# helpers

def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sha256_arrays(arrays: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def parse_h(text: str) -> tuple[float, ...]:
    """Comma-separated step sizes; each entry may be a constant expression such as ``pi/4``."""
    try:
        return tuple(Expression(part.strip()).constant_value() for part in text.split(","))
    except ExpressionError as exc:
        raise StageError("config", f"--h: {exc}") from None


def parse_delta(text: str) -> Fraction | None:
    """Rational interpolation interval, or None for ``auto``."""
    if text.strip().lower() == "auto":
        return None
    try:
        out = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise StageError("config", f"--delta must be a rational number or 'auto', got {text!r}") from None
    if out <= 0:
        raise StageError("config", "--delta must be positive")
    return out


def auto_delta(bound: float) -> Fraction:
    """Largest ``1/m`` not exceeding ``bound``."""
    m = max(1, math.ceil(1.0 / bound - 1e-12))
    if 1.0 / m > bound:
        m += 1
    return Fraction(1, m)


def _load_inputs(model_path, automaton_path):
    try:
        model, labeling = load_model(model_path, require_diagonal=True)
    except FileNotFoundError:
        raise StageError("model", "not found") from None
    except ModelError as exc:
        raise StageError("model", str(exc)) from None
    try:
        automaton = load_automaton(automaton_path)
    except FileNotFoundError:
        raise StageError("automaton", "not found") from None
    except AutomatonError as exc:
        raise StageError("automaton", str(exc)) from None
    return model, labeling, automaton


def _prepare(params: dict, model, labeling, automaton):
    """Grid, inputs, delta and all static checks shared by build and check."""
    warnings = []
    try:
        grid = build_grid(model, params["h"], periodic=params["periodic_grid"])
    except GridError as exc:
        raise StageError("grid", str(exc)) from None
    inputs = discretize_inputs(model.input_lo, model.input_hi, params["epsilon"])
    try:
        bound = max_delta(model, grid, inputs)
    except KernelError as exc:
        raise StageError("kernel", str(exc)) from None
    delta = parse_delta(params["delta"])
    if delta is None:
        delta = auto_delta(bound)
    ok = float(delta) <= bound * (1 + 1e-12)
    if not ok:
        if not params["override_delta_bound"]:
            raise StageError("kernel", f"delta={delta} exceeds the local consistency bound {bound:.6g}; "
                                       "pass --override-delta-bound to proceed anyway")
        warnings.append(f"delta={delta} exceeds the local consistency bound {bound:.6g}; "
                        f"kernel rows repaired with mode '{params['override_mode']}'")

    bad = check_label_alignment(labeling, grid)
    if bad:
        shown = ", ".join(str(list(map(int, c))) for c in bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise StageError("labels", f"{len(bad)} grid cells straddle a region edge: {shown}{more}")
    faces = sorted(face_propositions(labeling))
    witness = check_determinism(automaton)
    if witness is not None:
        q, symbol, values = witness
        raise StageError("automaton", f"not deterministic in state {q!r} on {sorted(symbol)} "
                                      f"at clocks { {c: str(v) for c, v in values.items()} }")
    checks = {"label_alignment": "ok", "face_propositions": faces, "determinism": "ok"}
    return grid, inputs, delta, bound, warnings, checks


def _params_from_args(args) -> dict:
    return {
        "h": list(parse_h(args.h)),
        "delta": args.delta,
        "epsilon": float(args.epsilon),
        "periodic_grid": not args.no_periodic_grid,
        "override_delta_bound": bool(args.override_delta_bound),
        "override_mode": args.override_mode,
    }


# --------------------------------------------------------------------------
# subcommands

def cmd_build(args) -> int:
    out = Path(args.out)
    if args.replay:
        manifest = _read_json(args.replay)
        base = Path(args.replay).parent
        params = manifest["params"]
        model_src, automaton_src = base / manifest["files"]["model"], base / manifest["files"]["automaton"]
    else:
        params = _params_from_args(args)
        model_src, automaton_src = Path(args.model), Path(args.automaton)
    model, labeling, automaton = _load_inputs(model_src, automaton_src)
    grid, inputs, delta, bound, warnings, checks = _prepare(params, model, labeling, automaton)

    t0 = time.perf_counter()
    mode = params["override_mode"] if params["override_delta_bound"] else "error"
    try:
        kernel = build_kernel(model, grid, inputs, float(delta), on_violation=mode)
        product = build_product(kernel, automaton, labeling, grid, model.initial_state, trim=False)
    except (KernelError, ProductError) as exc:
        raise StageError("product", str(exc)) from None
    trimmed = trim_reachable(product)
    t1 = time.perf_counter()

    out.mkdir(parents=True, exist_ok=True)
    if model_src.resolve() != (out / "model.json").resolve():
        shutil.copyfile(model_src, out / "model.json")
    if automaton_src.resolve() != (out / "automaton.json").resolve():
        shutil.copyfile(automaton_src, out / "automaton.json")
    _write_json(out / "grid.json", grid.describe())
    kernel.export_csv(out / "kernel.csv")
    arrays = product.arrays()
    np.savez_compressed(out / PRODUCT, **arrays)
    if args.export_product:
        product.export(out / "product", {"delta": str(delta)})

    manifest = {
        "version": __version__,
        "params": params,
        "delta": str(delta),
        "files": {"model": "model.json", "automaton": "automaton.json"},
        "inputs": {"model_sha256": _sha256_file(out / "model.json"),
                   "automaton_sha256": _sha256_file(out / "automaton.json")},
        "grid": grid.describe(),
        "input_values": inputs.tolist(),
        "delta_bound": bound,
        "delta_within_bound": float(delta) <= bound * (1 + 1e-12),
        "warnings": warnings,
        "checks": checks,
        "kernel": {"substeps": kernel.substeps, "normalized_rows": kernel.clipped_rows, "mode": mode},
        "counts": {
            "grid_points": grid.size,
            "inputs": int(len(inputs)),
            "automaton_configurations": product.table.size,
            "product_states": product.n_states,
            "product_states_reachable": trimmed.n_states,
            "goal_states": int(product.goal.sum()),
        },
        "initial_state": list(model.initial_state),
        "initial_product_state": product.initial,
        "build": {"product_sha256": _sha256_arrays(arrays)},
    }
    _write_json(out / MANIFEST, manifest)
    print(f"grid points        {grid.size}")
    print(f"product states     {product.n_states} ({trimmed.n_states} reachable from s0)")
    print(f"delta              {delta} (bound {bound:.6g})")
    for w in warnings:
        print(f"warning: {w}")
    print(f"build time         {t1 - t0:.2f} s")
    return EXIT_OK


def _load_built(out: Path):
    manifest_path = out / MANIFEST
    if not manifest_path.exists():
        raise StageError("solve", f"{manifest_path} not found; run build first")
    manifest = _read_json(manifest_path)
    model, labeling, automaton = _load_inputs(out / manifest["files"]["model"], out / manifest["files"]["automaton"])
    for key, name in (("model_sha256", "model"), ("automaton_sha256", "automaton")):
        if _sha256_file(out / manifest["files"][name]) != manifest["inputs"][key]:
            raise StageError(name, "copy in the output directory changed since build")
    with np.load(out / PRODUCT) as data:
        arrays = {k: data[k] for k in data.files}
    if _sha256_arrays(arrays) != manifest["build"]["product_sha256"]:
        raise StageError("product", "product.npz does not match the manifest (stale or edited)")
    table = build_table(automaton, Fraction(manifest["delta"]), labeling.propositions)
    product = ProductMdp(
        succ=arrays["succ"], prob=arrays["prob"], goal=arrays["goal"],
        x_index=arrays["x_index"], config=arrays["config"], initial=int(arrays["initial"]),
        inputs=arrays["inputs"], table=table, n_grid=int(arrays["n_grid"]),
    )
    return manifest, model, labeling, automaton, product


def cmd_solve(args) -> int:
    out = Path(args.out)
    manifest, _, _, _, product = _load_built(out)
    t0 = time.perf_counter()
    vf = value_iteration(product, tol=args.tol, max_iters=args.max_iters, method=args.method)
    policy = extract_policy(product, vf)
    t1 = time.perf_counter()

    with open(out / "values.csv", "w") as fh:
        fh.write("id,value\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(vf.values.tolist()))
    m = product.inputs.shape[1]
    with open(out / "policy.csv", "w") as fh:
        fh.write("id,input_id," + ",".join(f"u{j + 1}" for j in range(m)) + "\n")
        for i, a in enumerate(policy.actions.tolist()):
            fh.write(f"{i},{a}," + ",".join(repr(float(u)) for u in product.inputs[a]) + "\n")
    with open(out / "convergence.csv", "w") as fh:
        fh.write("sweep,residual\n")
        fh.writelines(f"{k + 1},{r!r}\n" for k, r in enumerate(vf.residuals))

    v0 = float(vf.values[product.initial])
    manifest["solve"] = {
        "tol": args.tol, "max_iters": args.max_iters, "method": args.method,
        "iterations": vf.iterations, "residual": vf.residual, "converged": vf.converged,
        "value_s0": v0,
        "product_sha256": manifest["build"]["product_sha256"],
        "policy_sha256": _sha256_file(out / "policy.csv"),
        "values_sha256": _sha256_file(out / "values.csv"),
    }
    manifest.pop("simulate", None)
    _write_json(out / MANIFEST, manifest)
    print(f"V(s0)              {v0:.6f}")
    print(f"iterations         {vf.iterations} (residual {vf.residual:.3g})")
    print(f"solve time         {t1 - t0:.2f} s")
    if not vf.converged:
        print("error: value iteration did not converge", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _read_policy(path, product: ProductMdp) -> Policy:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != product.n_states:
        raise StageError("simulate", "policy.csv does not match the product size")
    actions = np.array([int(r["input_id"]) for r in rows], dtype=np.int64)
    return Policy(actions, product.inputs)


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if args.trials < 1:
        raise StageError("simulate", "--trials must be at least 1")
    manifest, model, labeling, automaton, product = _load_built(out)
    solve = manifest.get("solve")
    if solve is None or not (out / "policy.csv").exists():
        raise StageError("simulate", "no policy found; run solve first")
    if solve["product_sha256"] != manifest["build"]["product_sha256"]:
        raise StageError("simulate", "policy was computed for a different product (hash mismatch)")
    if _sha256_file(out / "policy.csv") != solve["policy_sha256"]:
        raise StageError("simulate", "policy.csv does not match the manifest (hash mismatch)")
    policy = _read_policy(out / "policy.csv", product)
    grid = build_grid(model, manifest["params"]["h"], periodic=manifest["params"]["periodic_grid"])

    t0 = time.perf_counter()
    report = monte_carlo_estimate(
        model, labeling, product, policy, grid, args.trials, base_seed=args.seed,
        substeps=args.substeps, value=solve["value_s0"], record_limit=args.save,
    )
    t1 = time.perf_counter()
    records = report.records
    write_trajectories(out / "trajectories.csv", records, automaton)
    result = report.to_dict()
    result["saved_trajectories"] = len(records)
    _write_json(out / "estimate.json", result)
    manifest["simulate"] = {"trials": args.trials, "seed": args.seed, "substeps": args.substeps,
                            "saved_trajectories": len(records),
                            "estimate_sha256": _sha256_file(out / "estimate.json"),
                            "trajectories_sha256": _sha256_file(out / "trajectories.csv")}
    _write_json(out / MANIFEST, manifest)
    print(f"accepted           {report.accepted}/{report.trials}")
    print(f"p_hat              {report.p_hat:.4f} +- {report.half_width:.4f} (95%)")
    print(f"V(s0)              {solve['value_s0']:.4f}")
    if report.lookup_misses:
        print(f"warning: {report.lookup_misses} policy lookups missed and were counted as rejected")
    print(f"simulate time      {t1 - t0:.2f} s")
    return EXIT_OK


def _parse_stage(text: str):
    """``"R1:0,5"`` or ``"R1&R2:3,5"``."""
    try:
        targets, window = text.split(":")
        a, b = window.split(",")
        return [t.strip() for t in targets.split("&") if t.strip()], (int(a), int(b))
    except ValueError:
        raise StageError("fragment", f"stage must look like NAME[&NAME]:a,b, got {text!r}") from None


def cmd_fragment(args) -> int:
    stages = [_parse_stage(s) for s in args.stage]
    try:
        automaton = build_reach_fragment(stages, avoid=args.avoid)
    except AutomatonError as exc:
        raise StageError("fragment", str(exc)) from None
    text = json.dumps(automaton.to_json(), indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_check(args) -> int:
    params = _params_from_args(args)
    model, labeling, automaton = _load_inputs(args.model, args.automaton)
    grid, inputs, delta, bound, warnings, checks = _prepare(params, model, labeling, automaton)
    print(f"grid points        {grid.size}")
    print(f"inputs             {len(inputs)}")
    print(f"delta              {delta} (bound {bound:.6g})")
    print(f"label alignment    {checks['label_alignment']}")
    print(f"determinism        {checks['determinism']}")
    for w in warnings:
        print(f"warning: {w}")
    return EXIT_OK


# --------------------------------------------------------------------------

def _add_discretization(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=False, help="model JSON document")
    p.add_argument("--automaton", required=False, help="timed automaton JSON document")
    p.add_argument("--h", default="0.5,0.5,pi/4", help="grid steps, comma separated (default: %(default)s)")
    p.add_argument("--delta", default="auto", help="interpolation interval, rational or 'auto' (default: %(default)s)")
    p.add_argument("--epsilon", type=float, default=0.2, help="input grid spacing (default: %(default)s)")
    p.add_argument("--override-delta-bound", action="store_true",
                   help="accept delta above the local consistency bound (rows are repaired, a warning is recorded)")
    p.add_argument("--override-mode", choices=("normalize", "substep"), default="normalize",
                   help="row repair used with --override-delta-bound (default: %(default)s)")
    p.add_argument("--no-periodic-grid", action="store_true",
                   help="keep duplicated endpoints on periodic dimensions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timedreach", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="grid, kernel and product MDP")
    _add_discretization(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--replay", help="rebuild from an existing manifest instead of flags")
    p.add_argument("--export-product", action="store_true", help="also write the product as CSV")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("solve", help="value iteration on a built product")
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--method", choices=("jacobi", "gauss-seidel"), default="jacobi")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run the policy on the SDE")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--substeps", type=int, default=DEFAULT_SUBSTEPS)
    p.add_argument("--save", type=int, default=SAVED_TRAJECTORIES,
                   help="number of trajectories written to CSV (default: %(default)s)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fragment", help="automaton for a nested bounded-reach formula")
    p.add_argument("--stage", action="append", required=True, help="NAME[&NAME]:a,b (repeat, outermost first)")
    p.add_argument("--avoid", help="proposition that must never hold")
    p.add_argument("--output", "-o", help="write here instead of stdout")
    p.set_defaults(func=cmd_fragment)

    p = sub.add_parser("check", help="label alignment, determinism and delta bound only")
    _add_discretization(p)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("build", "check") and not getattr(args, "replay", None):
        missing = [f"--{k}" for k in ("model", "automaton") if getattr(args, k) is None]
        if missing:
            parser.error(f"{args.command} needs {' and '.join(missing)}")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
