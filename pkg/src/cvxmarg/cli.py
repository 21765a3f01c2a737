"""Command-line entry point.

Exit codes: 0 success, 1 computational failure, 2 usage error. Metrics
are printed both as a human-readable table and as ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .data import (
    ImageSet,
    METRIC_COLUMNS,
    PAPER_COLUMN_NAMES,
    ExperimentReport,
    beliefs_to_csv,
    corrupt,
    emit_report,
    images_to_csv,
    load_images,
    make_samples,
    synthetic_shapes,
)
from .errors import InvalidArgument, ParseError
from .loss import Sample, dloss_dbeliefs, log_loss, quad_loss
from .model import ParameterSet, atomic_write_text, build_grid_model, load_model, save_model
from .oracle import EnergyTableModel, brute_force_conditional_marginals, claim1_toy_check, finite_diff_belief_jacobian
from .polytope import ConstraintSystem, build_constraints, uniform_beliefs
from .sensitivity import SensitivitySolver, belief_jacobian
from .solver import DEFAULT_TOL, infer
from .trainer import TrainConfig, infer_all, metrics_from_beliefs, train

class UsageError(Exception):
    pass


def _positive_float(text: str) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return v


def _rate(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _count(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be >= 1")
    return h, w


def _add_data_flags(p: argparse.ArgumentParser, flag: str = "--data", required: bool = True) -> None:
    p.add_argument(flag, required=required, help="image file (IDX, plain PBM or CSV)")
    p.add_argument("--format", choices=("idx", "pbm", "csv"), help="input format (default: from extension)")
    p.add_argument("--threshold", type=float, help="binarization threshold in [0, 1] for grayscale IDX input")
    p.add_argument("--limit", type=_count, help="use only the first N images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvxmarg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn weight tables on noisy copies of clean images")
    _add_data_flags(p)
    p.add_argument("--noise-rate", type=_rate, required=True)
    p.add_argument("--loss", choices=("log", "quad"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1-iters", type=_count, default=100)
    p.add_argument("--stage2-iters", type=_count, default=100)
    p.add_argument("--inner-tol", type=_positive_float, default=DEFAULT_TOL)
    p.add_argument("--memory", type=int, default=10, help="quasi-Newton history length")
    p.add_argument("--out", default="model.json", help="model file to write")
    p.add_argument("--trace", help="training trace CSV (default: <out>.trace.csv)")
    p.add_argument("--report", help="also write a training-set metrics report here")
    p.add_argument("--always-flip", action="store_true", help="noise inverts selected pixels")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("infer", help="infer per-pixel beliefs for each image in a file")
    p.add_argument("--model", required=True)
    _add_data_flags(p, "--input")
    p.add_argument("--tol", type=_positive_float, default=DEFAULT_TOL)
    p.add_argument("--out", help="belief dump CSV (default: standard output)")

    p = sub.add_parser("eval", help="per-pixel metrics of a model on noisy copies of clean images")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    p.add_argument("--noise-rate", type=_rate, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tol", type=_positive_float, default=DEFAULT_TOL)
    p.add_argument("--always-flip", action="store_true")
    p.add_argument("--out", help="report CSV to write")

    p = sub.add_parser("gradcheck", help="compare implicit and finite-difference belief derivatives")
    p.add_argument("--grid", type=_grid, required=True, help="HxW")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--h", type=_positive_float, default=1e-5)
    p.add_argument("--inner-tol", type=_positive_float, default=1e-12)
    p.add_argument("--max-rel", type=_positive_float, default=1e-4, help="pass threshold")

    p = sub.add_parser("selftest", help="run the built-in consistency checks")
    p.add_argument("--corrupt-row", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="write a seeded synthetic binary shape dataset as CSV")
    p.add_argument("--n", type=_count, required=True)
    p.add_argument("--grid", type=_grid, default=(8, 8), help="HxW (default 8x8)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _load(args, flag: str) -> ImageSet:
    images = load_images(getattr(args, flag), args.format, args.threshold)
    if args.limit is not None:
        images = ImageSet(images.images[: args.limit], images.label, images.seed)
    if len(images) == 0:
        raise UsageError("no images to process")
    return images


def _print_metrics(metrics: dict[str, float], out=None) -> None:
    out = out or sys.stdout
    for name, col in zip(PAPER_COLUMN_NAMES, METRIC_COLUMNS):
        print(f"{name:>9}  {metrics[col]:.6f}", file=out)
    for col in METRIC_COLUMNS:
        print(f"{col}={metrics[col]!r}", file=out)


def cmd_train(args) -> int:
    clean = _load(args, "data")
    noisy = corrupt(clean, args.noise_rate, args.seed, args.always_flip)
    samples = make_samples(clean, noisy)
    graph = build_grid_model(*clean.shape)
    system = build_constraints(graph)
    config = TrainConfig(
        loss=args.loss,
        stage1_iters=args.stage1_iters,
        stage2_iters=args.stage2_iters,
        inner_tol=args.inner_tol,
        memory=args.memory,
        seed=args.seed,
        workers=max(1, args.workers),
    )
    params, trace = train(samples, graph, system, config)
    save_model(args.out, graph, params)
    trace_path = args.trace or f"{args.out}.trace.csv"
    atomic_write_text(trace_path, trace.to_csv())
    if args.report:
        report = ExperimentReport(
            metadata={"seed": args.seed, "noise_rate": args.noise_rate, "data": clean.label,
                      **{f"config.{k}": v for k, v in asdict(config).items() if k != "workers"}},
        )
        beliefs = infer_all(samples, graph, system, params, args.inner_tol)
        report.rows.append((f"L_{args.loss}/train", metrics_from_beliefs(graph, beliefs, samples)))
        emit_report(report, args.report)
    final = trace.records[-1].risk if trace.records else float("nan")
    print(f"model={args.out}")
    print(f"trace={trace_path}")
    print(f"iterations={max(0, len(trace.records) - 1)}")
    print(f"risk={final!r}")
    for note in trace.notes:
        print(f"note: {note}")
    return 0


def cmd_infer(args) -> int:
    images = _load(args, "input")
    graph, params = load_model(args.model, shape=images.shape)
    system = build_constraints(graph)
    starts = np.array([graph.offsets[graph.singleton_of[i]] for i in range(graph.num_hidden)])
    failures = 0
    dumps = {}
    for k, img in enumerate(images.images):
        res = infer(graph, params, system, img.ravel(), tol=args.tol)
        if not res.converged:
            failures += 1
        dumps[f"image{k}" + ("" if res.converged else "-NOT-CONVERGED")] = res.beliefs[starts + 1].reshape(
            images.shape
        )[None]
        print(f"image={k} converged={str(res.converged).lower()} kkt_residual={res.kkt_residual!r} "
              f"iterations={res.iterations}")
    text = beliefs_to_csv(dumps)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if failures:
        print(f"error: {failures} image(s) did not converge", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    clean = _load(args, "data")
    graph, params = load_model(args.model, shape=clean.shape)
    system = build_constraints(graph)
    noisy = corrupt(clean, args.noise_rate, args.seed, args.always_flip)
    samples = make_samples(clean, noisy)
    beliefs = infer_all(samples, graph, system, params, args.tol)
    metrics = metrics_from_beliefs(graph, beliefs, samples)
    _print_metrics(metrics)
    if args.out:
        report = ExperimentReport(
            rows=[(os.path.basename(args.model), metrics)],
            metadata={"seed": args.seed, "noise_rate": args.noise_rate, "data": clean.label, "tol": args.tol},
        )
        report.beliefs[os.path.basename(args.model)] = np.stack(
            [b[[graph.offsets[graph.singleton_of[i]] + 1 for i in range(graph.num_hidden)]].reshape(clean.shape)
             for b in beliefs]
        )
        emit_report(report, args.out)
    return 0


def gradcheck(grid, seed: int, h: float = 1e-5, inner_tol: float = 1e-12) -> float:
    """Largest per-parameter relative gap between implicit and finite-difference Jacobians.

    The gap for parameter ``j`` is ``max|J_j - FD_j| / max(max|FD_j|, 1e-8)``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    graph = build_grid_model(*grid)
    system = build_constraints(graph)
    layout = graph.param_layout()
    params = ParameterSet(layout, 0.5 * rng.standard_normal(layout.size))
    y = (rng.random(graph.num_observed) < 0.5).astype(np.int64)
    res = infer(graph, params, system, y, tol=inner_tol)
    if not res.converged:
        raise RuntimeError("base inference did not converge")
    J = belief_jacobian(res, graph, params, system, y)
    FD = finite_diff_belief_jacobian(graph, params, system, y, h, inner_tol)
    gap = np.abs(J - FD).max(axis=1)
    scale = np.maximum(np.abs(FD).max(axis=1), 1e-8)
    return float(np.max(gap / scale))


def cmd_gradcheck(args) -> int:
    rel = gradcheck(args.grid, args.seed, args.h, args.inner_tol)
    ok = rel <= args.max_rel
    print(f"grid={args.grid[0]}x{args.grid[1]} seed={args.seed} h={args.h!r}")
    print(f"max_rel_disagreement={rel!r}")
    print(f"threshold={args.max_rel!r}")
    print(f"status={'pass' if ok else 'fail'}")
    return 0 if ok else 1


# -- selftest -----------------------------------------------------------------


def _check_claim1() -> bool:
    return claim1_toy_check()


def _check_oracle_exactness() -> bool:
    rng = np.random.Generator(np.random.PCG64(7))
    energy = rng.uniform(-2, 2, size=(4, 4))
    graph = build_grid_model(1, 2)
    system = build_constraints(graph)
    layout = graph.param_layout()
    theta = np.zeros(layout.size)
    n = layout.block_size
    # Linear edge weights are negated energies; node entropy weight is 1e-6.
    theta[layout.offsets[1] : layout.offsets[1] + 16] = -energy.ravel()
    theta[n + layout.offsets[0] : n + layout.offsets[0] + 4] = math.log(1e-6)
    params = ParameterSet(layout, theta)
    oracle = EnergyTableModel(2, 2, (((0, 1), (0, 1), energy.reshape(2, 2, 2, 2)),))
    for y in ((0, 0), (0, 1), (1, 0), (1, 1)):
        res = infer(graph, params, system, y)
        truth = brute_force_conditional_marginals(oracle, y)
        if not res.converged or np.max(np.abs(res.beliefs[:4].reshape(2, 2) - truth)) > 1e-4:
            return False
    return True


def _check_x_identity(corrupt_row: bool = False) -> bool:
    rng = np.random.Generator(np.random.PCG64(11))
    graph = build_grid_model(2, 2)
    system = build_constraints(graph)
    params = ParameterSet(graph.param_layout(), 0.5 * rng.standard_normal(graph.param_layout().size))
    y = (rng.random(4) < 0.5).astype(np.int64)
    res = infer(graph, params, system, y)
    used = system
    if corrupt_row:
        A = system.A.tolil(copy=True)
        A[0, :] = A[1, :]
        used = ConstraintSystem(A.tocsr(), system.d, system.row_tags)
    try:
        solver = SensitivitySolver(res, used)
    except Exception:
        return False
    A = system.A
    D = solver.D
    for _ in range(5):
        v = rng.standard_normal(graph.size)
        u = rng.standard_normal(graph.size)
        xv = solver.apply_X(v)
        if np.max(np.abs(A @ xv)) > 1e-8:
            return False
        if np.max(np.abs(D * xv + A.T @ solver.apply_Z(v) - v)) > 1e-8:
            return False
        if abs(u @ xv - v @ solver.apply_X(u)) > 1e-10 * max(1.0, abs(u @ xv)):
            return False
    return True


def _check_loss_identities() -> bool:
    graph = build_grid_model(2, 2)
    b = uniform_beliefs(graph)
    s = Sample(np.array([0, 1, 1, 0]), np.zeros(4, dtype=np.int64))
    ok = abs(log_loss(graph, b, s) - 4 * math.log(2)) <= 1e-12
    ok &= abs(quad_loss(graph, b, s) + 2.0) <= 1e-12
    ok &= abs(dloss_dbeliefs("log", graph, b, s)[0] + 2.0) <= 1e-12
    return bool(ok)


def run_selftest(corrupt_row: bool = False) -> list[tuple[str, bool]]:
    checks = [
        ("claim1_toy", _check_claim1),
        ("oracle_exactness", _check_oracle_exactness),
        ("x_identity", lambda: _check_x_identity(corrupt_row)),
        ("loss_identities", _check_loss_identities),
    ]
    return [(name, bool(fn())) for name, fn in checks]


def cmd_selftest(args) -> int:
    results = run_selftest(args.corrupt_row)
    for name, ok in results:
        print(f"{name}={'pass' if ok else 'fail'}")
    failed = [name for name, ok in results if not ok]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    images = synthetic_shapes(args.n, *args.grid, seed=args.seed)
    atomic_write_text(args.out, images_to_csv(images.images))
    print(f"images={args.n} out={args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidArgument) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
