"""Command-line interface: ``otkd {loss, oracle, demo, sweep, grad-check}``.

Exit codes: 0 success, 1 other failure (including a failed gradient check),
2 malformed input file or usage error, 3 kind mismatch, 4 non-convergence
with ``--strict``, 5 instance over the oracle size cap, 6 unwritable output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import OTKDError, UnsupportedSizeError
from .gradcheck import check_gradient, random_dense_pair, random_keypoint_pair
from .harness import (
    DEFAULT_SWEEP_GRID,
    SyntheticScenario,
    scatter_csv,
    sweep,
    sweep_csv,
    train_student,
    trajectory_csv,
)
from .losses import PRESETS, loss_and_gradient
from .oracle import exact_balanced_ot, primal_uot_oracle
from .predictions import (
    DenseCodePredictionSet,
    KeypointPredictionSet,
    WeightedPointSet,
    extract_corner_cloud,
    normalize_keypoints,
    normalize_weights,
    pool_dense,
)
from .serialization import SchemaError, read_predictions
from .sinkhorn import DENSE_CONFIG, KEYPOINT_CONFIG

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SCHEMA = 2
EXIT_KIND = 3
EXIT_NOT_CONVERGED = 4
EXIT_SIZE = 5
EXIT_OUTPUT = 6

LOSS_KINDS = ("naive", "ot-keypoint", "ot-dense")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- shared helpers -------------------------------------------------------------


def _file_kind(pred) -> str:
    return "keypoints" if isinstance(pred, KeypointPredictionSet) else "dense_codes"


def _read(path):
    try:
        return read_predictions(path)
    except SchemaError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_SCHEMA) from None
    except OSError as exc:
        raise CommandError(f"{path}: {exc.strerror or exc}", EXIT_SCHEMA) from None


def _read_pair(a_path, b_path):
    a, b = _read(a_path), _read(b_path)
    if _file_kind(a) != _file_kind(b):
        raise CommandError(f"kind mismatch: {a_path} holds {_file_kind(a)}, {b_path} holds {_file_kind(b)}", EXIT_KIND)
    if isinstance(a, KeypointPredictionSet):
        a, b = normalize_keypoints(a), normalize_keypoints(b)
    return a, b


def _loss_kind(args, pred) -> str:
    kind = args.loss
    if kind is None and args.preset:
        kind = PRESETS[args.preset].kind
    if kind is None:
        kind = "ot-keypoint" if isinstance(pred, KeypointPredictionSet) else "ot-dense"
    wants_dense = kind == "ot-dense"
    if wants_dense != isinstance(pred, DenseCodePredictionSet):
        raise CommandError(f"loss {kind!r} does not apply to {_file_kind(pred)} files", EXIT_KIND)
    return kind


def _config(args, kind):
    base = DENSE_CONFIG if kind == "ot-dense" else KEYPOINT_CONFIG
    if getattr(args, "preset", None):
        preset = PRESETS[args.preset]
        if kind != "naive" and preset.kind != kind:
            raise CommandError(f"preset {args.preset!r} is for {preset.kind}, not {kind}", EXIT_KIND)
        base = preset.config(base)
    changes = {}
    if getattr(args, "epsilon", None) is not None:
        changes["epsilon"] = args.epsilon
    if getattr(args, "rho", None) is not None:
        changes["rho"] = args.rho
    if getattr(args, "p", None) is not None:
        changes["p_exponent"] = args.p
    if getattr(args, "raw", False):
        changes["debiased"] = False
    return base.replace(**changes)


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _add_solver_flags(p, with_preset=True):
    p.add_argument("--epsilon", type=float, help="entropic scale (enters squared)")
    p.add_argument("--rho", type=float, help="marginal relaxation scale (enters squared); 'inf' for hard marginals")
    p.add_argument("--p", type=int, choices=(1, 2), help="norm exponent of the ground cost")
    if with_preset:
        p.add_argument("--preset", choices=sorted(PRESETS), help="epsilon/rho/weight preset")


def _add_loss_flags(p):
    p.add_argument("--loss", choices=LOSS_KINDS, help="default: from --preset, else from the file kind")
    _add_solver_flags(p)
    p.add_argument("--raw", action="store_true", help="report the raw transport value instead of the debiased divergence")
    p.add_argument("--weights", choices=("unit-mass", "raw"), default="unit-mass", help="score normalization")
    p.add_argument("--block", type=int, default=8, help="pooling block for dense codes")


# -- loss ---------------------------------------------------------------------------


def cmd_loss(args) -> int:
    student, teacher = _read_pair(args.student, args.teacher)
    kind = _loss_kind(args, student)
    cfg = _config(args, kind)
    p = args.p or 2
    report, _ = loss_and_gradient(kind, student, teacher, cfg, p=p, block=args.block, mode=args.weights)
    weight = PRESETS[args.preset].weight if args.preset else 1.0
    doc = {"loss": kind}
    if kind == "naive":
        doc["p"] = p
    else:
        doc.update(epsilon=cfg.epsilon, rho=cfg.rho, p=cfg.p_exponent, debiased=cfg.debiased, weights=args.weights)
        if kind == "ot-dense":
            doc["block"] = args.block
    doc.update(preset=args.preset, weight=weight, weighted_total=weight * report.total)
    doc.update(report.to_dict())
    _emit(doc)
    if args.strict and not report.converged:
        print("solver did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# -- oracle -------------------------------------------------------------------------


def _oracle_cloud(pred, corner, block) -> WeightedPointSet:
    if isinstance(pred, KeypointPredictionSet):
        cloud = extract_corner_cloud(pred, corner)
    else:
        cloud = pool_dense(pred, block)
    weights, keep = normalize_weights(cloud.weights)
    return WeightedPointSet(cloud.points[keep], weights)


def cmd_oracle(args) -> int:
    a, b = _read_pair(args.file_a, args.file_b)
    x, y = _oracle_cloud(a, args.corner, args.block), _oracle_cloud(b, args.corner, args.block)
    if args.mode == "exact":
        result = exact_balanced_ot(x, y, p=args.p or 2)
        doc = {"mode": "exact", "p": args.p or 2}
    else:
        kind = "ot-dense" if isinstance(a, DenseCodePredictionSet) else "ot-keypoint"
        cfg = _config(args, kind)
        if cfg.balanced:
            raise CommandError("the primal oracle needs a finite --rho", EXIT_FAILURE)
        result = primal_uot_oracle(x, y, cfg, precision=args.precision)
        doc = {"mode": "primal", "epsilon": cfg.epsilon, "rho": cfg.rho, "p": cfg.p_exponent}
    doc.update(value=result.value, iterations=result.iterations, plan=result.plan.tolist())
    _emit(doc)
    return EXIT_OK


# -- demo and sweep -----------------------------------------------------------------


def _add_scenario_flags(p):
    d = SyntheticScenario()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--n-teacher", type=int, default=d.n_teacher)
    p.add_argument("--n-student", type=int, default=d.n_student)
    p.add_argument("--sigma-teacher", type=float, default=d.sigma_teacher)
    p.add_argument("--sigma-student", type=float, default=d.sigma_student_init)
    p.add_argument("--outlier-fraction", type=float, default=d.outlier_fraction)
    p.add_argument("--cell-overlap", type=float, default=d.cell_overlap)
    p.add_argument("--steps", type=int, default=500)


def _scenario(args) -> SyntheticScenario:
    return SyntheticScenario(
        seed=args.seed, n_teacher=args.n_teacher, n_student=args.n_student,
        sigma_teacher=args.sigma_teacher, sigma_student_init=args.sigma_student,
        outlier_fraction=args.outlier_fraction, cell_overlap=args.cell_overlap,
    )


def _prepare_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".otkd-write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"cannot write to {out}: {exc.strerror or exc}", EXIT_OUTPUT) from None
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror or exc}", EXIT_OUTPUT) from None


def _record_dict(r, wallclock):
    d = {"step": r.step, "loss": r.loss, "divergence": r.divergence, "corner_error": r.corner_error}
    if wallclock:
        d["wallclock_ms"] = r.wallclock_ms
    return d


def cmd_demo(args) -> int:
    out = _prepare_dir(args.out)
    scenario = _scenario(args)
    cfg = _config(args, "ot-keypoint")
    summary = {
        "scenario": {
            "seed": scenario.seed, "n_teacher": scenario.n_teacher, "n_student": scenario.n_student,
            "sigma_teacher": scenario.sigma_teacher, "sigma_student_init": scenario.sigma_student_init,
            "outlier_fraction": scenario.outlier_fraction, "cell_overlap": scenario.cell_overlap,
        },
        "config": {"epsilon": cfg.epsilon, "rho": cfg.rho, "p": cfg.p_exponent, "debiased": cfg.debiased},
        "steps": args.steps,
        "step_size": args.step_size,
        "runs": {},
    }
    for kind in ("naive", "ot-keypoint"):
        traj = train_student(scenario, kind, cfg, args.steps, args.step_size)
        _write(out / f"trajectory_{kind}.csv", trajectory_csv(traj, wallclock=args.wallclock))
        _write(out / f"scatter_{kind}.csv", scatter_csv(scenario, traj))
        summary["runs"][kind] = {
            "initial": _record_dict(traj.initial, args.wallclock),
            "final": _record_dict(traj.final, args.wallclock),
            "failed": traj.failed,
            "message": traj.message,
        }
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    runs = summary["runs"]
    print(f"wrote {out}")
    for kind, run in runs.items():
        print(f"{kind}: corner_error {run['initial']['corner_error']:.6g} -> {run['final']['corner_error']:.6g}, "
              f"divergence {run['initial']['divergence']:.6g} -> {run['final']['divergence']:.6g}")
    return EXIT_FAILURE if any(r["failed"] for r in runs.values()) else EXIT_OK


def cmd_sweep(args) -> int:
    axes = {"loss_kind": args.loss_kind, "epsilon": args.epsilon, "rho": args.rho, "step_size": args.step_size}
    grid = {k: v for k, v in axes.items() if v is not None}
    if not grid:
        grid = DEFAULT_SWEEP_GRID
    rows = sweep(_scenario(args), grid, steps=args.steps)
    text = sweep_csv(rows)
    if args.out:
        target = Path(args.out)
        _prepare_dir(target.parent if str(target.parent) else ".")
        _write(target, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- grad-check ---------------------------------------------------------------------


def _direction_error(student, teacher, grad, p):
    """For one cell per side, how far each corner's gradient is from the unit vector toward the student."""
    diff = student.votes[0] - teacher.votes[0]
    worst = 0.0
    for k in range(diff.shape[0]):
        norm = np.linalg.norm(diff[k], ord=p)
        g = grad.d_points[0, k]
        if norm == 0:
            worst = max(worst, float(np.abs(g).max()))
            continue
        unit = np.sign(diff[k]) if p == 1 else diff[k] / norm
        mag = np.linalg.norm(g)
        if mag == 0:
            worst = max(worst, 1.0)
            continue
        worst = max(worst, float(np.abs(g / mag - unit / np.linalg.norm(unit)).max()))
    return worst


def cmd_grad_check(args) -> int:
    pairs = []
    if args.random is not None:
        if args.student or args.teacher:
            raise CommandError("give either two files or --random N", EXIT_SCHEMA)
        if args.random < 1:
            raise CommandError("--random needs N >= 1", EXIT_SCHEMA)
        rng = np.random.default_rng(args.seed)
        kind = args.loss or (PRESETS[args.preset].kind if args.preset else "ot-keypoint")
        make = random_dense_pair if kind == "ot-dense" else random_keypoint_pair
        pairs = [make(rng) for _ in range(args.random)]
    else:
        if not (args.student and args.teacher):
            raise CommandError("give two prediction files or --random N", EXIT_SCHEMA)
        student, teacher = _read_pair(args.student, args.teacher)
        kind = _loss_kind(args, student)
        pairs = [(student, teacher)]
    cfg = None if kind == "naive" else _config(args, kind)
    p = args.p or 2
    worst = 0.0
    ok = True
    for i, (student, teacher) in enumerate(pairs):
        res = check_gradient(kind, student, teacher, cfg, p=p, block=args.block, mode=args.weights, h=args.h)
        line = (f"[{i}] {kind} loss={res.loss:.10g} components={res.components} "
                f"max_rel_error={res.max_rel_error:.3e} worst={res.worst} converged={res.converged}")
        if res.refined_rel_error is not None:
            line += f" refined_rel_error(h/100)={res.refined_rel_error:.3e}"
        worst = max(worst, res.max_rel_error)
        ok = ok and res.passed
        if kind != "ot-dense" and len(student) == 1 and len(teacher) == 1:
            _, grad = loss_and_gradient(kind, student, teacher, cfg, p=p, mode=args.weights)
            direction = _direction_error(student, teacher, grad, cfg.p_exponent if cfg else p)
            line += f" direction_error={direction:.3e}"
            ok = ok and direction <= 1e-4
        print(line)
    print(f"max relative error {worst:.3e}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAILURE


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otkd", description="Transport-based distillation losses for local predictions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loss", help="distillation loss between two prediction files")
    p.add_argument("student")
    p.add_argument("teacher")
    _add_loss_flags(p)
    p.add_argument("--strict", action="store_true", help="exit 4 if any solve did not converge")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("oracle", help="exact or primal reference value between two small files")
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--mode", choices=("exact", "primal"), default="exact",
                   help="exact: balanced transport by the simplex method; primal: unbalanced entropic objective")
    _add_solver_flags(p, with_preset=False)
    p.add_argument("--corner", type=int, default=0, help="keypoint corner whose votes form the cloud")
    p.add_argument("--block", type=int, default=8, help="pooling block for dense codes")
    p.add_argument("--precision", type=float, default=1e-12, help="relative stopping precision of the primal oracle")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("demo", help="train a student with both losses on one synthetic scenario")
    _add_scenario_flags(p)
    p.add_argument("--step-size", type=float, default=0.05)
    _add_solver_flags(p, with_preset=False)
    p.add_argument("--wallclock", action="store_true", help="record timings (outputs are then not reproducible)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("sweep", help="train over a hyperparameter grid and tabulate final metrics")
    _add_scenario_flags(p)
    p.set_defaults(steps=200)
    p.add_argument("--loss-kind", nargs="+", choices=("naive", "ot-keypoint"))
    p.add_argument("--epsilon", nargs="+", type=float)
    p.add_argument("--rho", nargs="+", type=float)
    p.add_argument("--step-size", nargs="+", type=float)
    p.add_argument("--out", help="CSV path (default: standard output)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="compare analytic gradients with central differences")
    p.add_argument("student", nargs="?")
    p.add_argument("teacher", nargs="?")
    p.add_argument("--random", type=int, metavar="N", help="check N random instances instead of files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    _add_loss_flags(p)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"otkd {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except UnsupportedSizeError as exc:
        print(f"otkd {args.command}: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except (OTKDError, ValueError) as exc:
        print(f"otkd {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
