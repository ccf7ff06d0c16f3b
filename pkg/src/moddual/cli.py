"""``moddual`` command line: dualize, bench-ns, train, check.

Every failure prints exactly one line to stderr,

    error: <reason>: <message>

and exits with the code for that reason (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import checks, linalg, polar
from .atoms import embed_dualize
from .experiments import ExperimentConfig, make_dataset
from .optim import TrainingDiverged, train

EXIT_CODES = {
    "check-failed": 1,
    "usage": 2,
    "parse": 2,
    "config": 2,
    "invalid-schedule": 2,
    "io": 2,
    "nonconvergence": 3,
    "diverged": 4,
    "ill-conditioned": 5,
}

FAMILIES = ("orthogonal", "well_conditioned", "gaussian", "low_rank")

DEFAULT_BENCH = {
    "seed": 0,
    "trials": 5,
    "shape": [64, 64],
    "families": list(FAMILIES),
    "schedules": [
        {"name": "cubic", "coefficients": [1.5, -0.5]},
        {"name": "quintic", "coefficients": [1.875, -1.25, 0.375], "x_max": 1.5},
        {"name": "cubic-spectral", "coefficients": [1.5, -0.5], "normalization": "spectral_estimate"},
    ],
}


class CliError(Exception):
    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
        return
    try:
        fh = open(path, "w", encoding="utf-8", newline="")
    except OSError as exc:
        raise CliError("io", f"{path}: {exc.strerror}") from None
    with fh:
        yield fh


def _schedule_overrides(args) -> dict:
    out = {}
    if args.tolerance is not None:
        out["tolerance"] = args.tolerance
    if args.max_steps is not None:
        out["max_steps"] = args.max_steps
    return out


def _make_schedule(d: dict) -> polar.IterationSchedule:
    try:
        return polar.IterationSchedule.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"schedule {d!r}: {exc}") from None


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError("io", f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError("parse", f"{path}: line {exc.lineno}: {exc.msg}") from None


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# -- dualize -----------------------------------------------------------------


def cmd_dualize(args) -> int:
    try:
        g = linalg.read_matrix(args.input)
    except linalg.MatrixFormatError as exc:
        raise CliError("parse", f"{args.input}: {exc}") from None
    except OSError as exc:
        raise CliError("io", f"{args.input}: {exc.strerror}") from None

    d_out, d_in = g.shape
    residual = None
    if args.atom == "embed":
        # Column normalization is closed form; there is no iteration to compare.
        out = embed_dualize(g)
    else:
        scale = np.sqrt(d_out / d_in)
        reference = scale * linalg.svd_oracle(g).range_polar()
        if args.method == "svd_oracle":
            out = reference
        elif args.method == "newton_schulz":
            schedule = _make_schedule({**polar.DEFAULT_SCHEDULE.to_dict(), **_schedule_overrides(args)})
            out = scale * polar.orthogonalize(g, schedule)[0]
        else:
            kwargs = {}
            if args.tolerance is not None:
                kwargs["tol"] = args.tolerance
            if args.max_steps is not None:
                kwargs["max_steps"] = args.max_steps
            out = scale * polar.inverse_root_dualize(g, **kwargs)
        if args.method != "svd_oracle":
            residual = float(np.linalg.norm(out - reference))

    with _output(args.out) as fh:
        linalg.write_matrix(fh, out)
    if residual is not None:
        stream = sys.stdout if args.out not in (None, "-") else sys.stderr
        print(f"residual_vs_svd_oracle {residual:.6e}", file=stream)
    return 0


# -- bench-ns ----------------------------------------------------------------


def bench_matrix(family: str, shape, rng: np.random.Generator) -> np.ndarray:
    """One test matrix from a named family."""
    m, n = shape
    r = min(m, n)
    if family == "orthogonal":
        q, _ = np.linalg.qr(rng.standard_normal((max(m, n), r)))
        return q if m >= n else q.T
    if family == "well_conditioned":
        u, _ = np.linalg.qr(rng.standard_normal((m, r)))
        v, _ = np.linalg.qr(rng.standard_normal((n, r)))
        return (u * rng.uniform(0.5, 1.0, r)) @ v.T
    if family == "gaussian":
        return rng.standard_normal((m, n))
    if family == "low_rank":
        k = max(1, r // 6)
        return rng.standard_normal((m, k)) @ rng.standard_normal((k, n))
    raise CliError("config", f"unknown matrix family {family!r}; choose from {list(FAMILIES)}")


def _bench_plan(cfg: dict, args):
    unknown = set(cfg) - {"seed", "trials", "shape", "families", "schedules"}
    if unknown:
        raise CliError("config", f"unknown bench fields: {sorted(unknown)}")
    cfg = {**DEFAULT_BENCH, **cfg}
    if args.seed is not None:
        cfg["seed"] = args.seed
    shape = tuple(cfg["shape"])
    if len(shape) != 2 or not all(isinstance(s, int) and s > 0 for s in shape):
        raise CliError("config", f"shape must be two positive integers, got {cfg['shape']!r}")
    if not isinstance(cfg["trials"], int) or cfg["trials"] < 1:
        raise CliError("config", "trials must be a positive integer")
    for fam in cfg["families"]:
        if fam not in FAMILIES:
            raise CliError("config", f"unknown matrix family {fam!r}; choose from {list(FAMILIES)}")
    schedules = []
    for i, entry in enumerate(cfg["schedules"]):
        entry = dict(entry)
        name = str(entry.pop("name", f"schedule{i}"))
        schedule = _make_schedule({**entry, **_schedule_overrides(args)})
        try:
            schedule.validate()
        except polar.InvalidSchedule as exc:
            raise CliError("invalid-schedule", f"{name}: {exc}") from None
        schedules.append((name, schedule))
    return cfg, shape, schedules


def cmd_bench_ns(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    cfg, shape, schedules = _bench_plan(cfg, args)

    columns = ["family", "schedule", "trial", "rows", "cols", "converged", "steps", "residual", "last_change"]
    if args.timing:
        columns.append("seconds")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    rng = np.random.default_rng(cfg["seed"])
    for family in cfg["families"]:
        for trial in range(cfg["trials"]):
            g = bench_matrix(family, shape, rng)
            for name, schedule in schedules:
                t0 = time.perf_counter()
                _, report = polar.orthogonalize(g, schedule, strict=False)
                row = [family, name, trial, shape[0], shape[1], int(report.converged), report.steps,
                       _fmt(report.residual), _fmt(report.last_change)]
                if args.timing:
                    row.append(f"{time.perf_counter() - t0:.6f}")
                writer.writerow(row)
    with _output(args.out) as fh:
        fh.write(buf.getvalue())
    return 0


# -- train -------------------------------------------------------------------


def load_experiment(path: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(path)
    except OSError as exc:
        raise CliError("io", f"{path}: {exc.strerror}") from None
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError("config", f"{path}: {exc}") from None


def cmd_train(args) -> int:
    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    overrides = _schedule_overrides(args)
    if overrides:
        cfg.schedule = {**cfg.schedule, **overrides}
    try:
        m = cfg.module()
        rule = cfg.update_rule()
        data = make_dataset(cfg.dataset)
    except OSError as exc:
        raise CliError("io", f"{cfg.architecture_file}: {exc.strerror}") from None
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError("config", str(exc)) from None

    out = args.out if args.out is not None else cfg.out
    with _output(out) as fh:
        try:
            train(m, data, rule, cfg.steps, seed=cfg.seed, loss=cfg.loss, sink=fh)
        except TrainingDiverged as exc:
            raise CliError("diverged", str(exc)) from None
        except ValueError as exc:  # shape mismatch between data and architecture
            raise CliError("config", str(exc)) from None
    return 0


# -- check -------------------------------------------------------------------


def cmd_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = checks.run_all(seed=seed, echo=lambda line: print(line, flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise CliError("check-failed", ", ".join(failed))
    return 0


# -- entry point -------------------------------------------------------------


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moddual", description="Modular dualization tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def iteration_flags(p):
        p.add_argument("--tolerance", type=float, help="stopping tolerance of the iteration")
        p.add_argument("--max-steps", type=int, dest="max_steps", help="iteration step limit")

    p = sub.add_parser("dualize", help="dualize a gradient matrix read from a fixture file")
    p.add_argument("input", help="matrix in the 'rows cols' text format")
    p.add_argument("--atom", choices=["linear", "embed"], default="linear")
    p.add_argument("--method", choices=["newton_schulz", "inverse_root", "svd_oracle"], default="newton_schulz",
                   help="polar-factor route for linear atoms (embed is closed form)")
    p.add_argument("--out", help="output path (default stdout)")
    iteration_flags(p)
    p.set_defaults(func=cmd_dualize)

    p = sub.add_parser("bench-ns", help="steps and residuals of Newton-Schulz schedules, as CSV")
    p.add_argument("--config", help="JSON bench config (default: built-in)")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--seed", type=_seed)
    p.add_argument("--timing", action="store_true", help="add a wall-clock column (output no longer reproducible)")
    iteration_flags(p)
    p.set_defaults(func=cmd_bench_ns)

    p = sub.add_parser("train", help="train a configured architecture, writing JSONL metrics")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", help="metrics path (default: config 'out', else stdout)")
    p.add_argument("--seed", type=_seed, help="override the config's initialization seed")
    iteration_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("check", help="run the invariant suite")
    p.add_argument("--seed", type=_seed)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        reason, message = exc.reason, str(exc)
    except polar.NonConvergence as exc:
        reason, message = "nonconvergence", str(exc)
    except polar.IllConditioned as exc:
        reason, message = "ill-conditioned", str(exc)
    print(f"error: {reason}: {_one_line(message)}", file=sys.stderr)
    return EXIT_CODES[reason]


if __name__ == "__main__":
    sys.exit(main())
