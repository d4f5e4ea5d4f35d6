"""Command-line entry point: ``magdrop-lab {train,bound,compare,validate,prepare-mnist}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error,
1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

from . import bound as bound_mod
from .data import prepare_mnist_desk
from .errors import ConfigError, DataError, LabError
from .train import RunConfig, execute_run, load_profile, load_run, load_datasets, read_csv

REGULARIZER_DEFAULTS = {
    "none": {"kind": "none"},
    "dropout": {"kind": "dropout", "p": 0.3},
    "agr": {"kind": "agr", "lambda": 0.01},
    "magdrop": {"kind": "magdrop", "p_base": 0.3, "beta": 0.9, "tau": 0.1, "clamp_max": 0.6},
}


# -- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    if bool(args.config) == bool(args.profile):
        raise ConfigError("give exactly one of --config or --profile")
    cfg = RunConfig.from_json(args.config) if args.config else load_profile(args.profile)
    d = cfg.to_dict()
    if args.regularizer:
        d["regularizer"] = REGULARIZER_DEFAULTS[args.regularizer]
    if args.seed is not None:
        d["seed"] = args.seed
    if args.output_dir:
        d["output_dir"] = args.output_dir
    cfg = RunConfig.from_dict(d)
    metrics = execute_run(cfg, root=args.data_root, log=None if args.quiet else print)
    f = metrics.final
    print(f"{cfg.output_dir}: train {f['train_acc']:.2f}% test {f['test_acc']:.2f}% "
          f"gap {f['gen_gap']:.2f} ({metrics.wall_clock:.1f}s)")
    return 0


# -- bound ---------------------------------------------------------------------

def _load_inputs(path) -> bound_mod.BoundInputs:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"bound inputs file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return bound_mod.BoundInputs.from_dict(raw)


def _resolve_sigma(inputs, sigma, target):
    if target is not None:
        return inputs.with_sigma(bound_mod.back_solve_sigma(target, inputs))
    if sigma is not None:
        return inputs.with_sigma(sigma)
    if inputs.sigma is None:
        raise ConfigError(
            "no prior width sigma: it cannot be derived from the other inputs, so pass --sigma "
            "or --backsolve-sigma TARGET (the bound value sigma should reproduce)")
    return inputs


def _per_row(values, n, flag):
    if not values:
        return [None] * n
    if len(values) == 1:
        return values * n
    if len(values) != n:
        raise ConfigError(f"{flag} given {len(values)} times for {n} inputs")
    return values


def compute_reports(args) -> list:
    if bool(args.run) == bool(args.inputs):
        raise ConfigError("give exactly one of --run or --inputs")
    if args.run:
        cfg, model, states, trace = load_run(args.run)
        train_ds, _ = load_datasets(cfg, args.data_root)
        inputs = bound_mod.measure_from_run(model, states, trace, train_ds, delta=cfg.delta,
                                            B=cfg.loss_clip_B)
        targets = _per_row(args.backsolve_sigma, 1, "--backsolve-sigma")
        labels = [args.label[0] if args.label else cfg.regularizer["kind"]]
        pairs = [(inputs, labels[0], targets[0])]
    else:
        n = len(args.inputs)
        targets = _per_row(args.backsolve_sigma, n, "--backsolve-sigma")
        labels = _per_row(args.label, n, "--label")
        pairs = [(_load_inputs(p), labels[k] or Path(p).stem, targets[k])
                 for k, p in enumerate(args.inputs)]
    return [bound_mod.magdrop_bound(_resolve_sigma(inp, args.sigma, tgt), label=lab)
            for inp, lab, tgt in pairs]


def cmd_bound(args) -> int:
    reports = compute_reports(args)
    table = bound_mod.format_table(reports)
    improvements = [
        {"reference": reports[0].label, "method": r.label,
         "improvement_pct": bound_mod.compare_report(reports[0], r)}
        for r in reports[1:]]
    lines = [table] + [f"{d['method']} vs {d['reference']}: {d['improvement_pct']:.1f}% tighter"
                       for d in improvements]
    for r in reports:
        lines += [f"[{r.label}] sigma = {r.inputs.sigma:.6g}"] + \
                 [f"[{r.label}] warning: {msg}" for msg in r.diagnostics]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out = Path(args.out) if args.out else (Path(args.run) if args.run else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        payload = {"reports": [r.to_dict() for r in reports], "improvements": improvements}
        (out / "bound.json").write_text(json.dumps(payload, indent=2))
        (out / "bound_table.txt").write_text(text)
    return 0


# -- compare -------------------------------------------------------------------

COMPARE_COLUMNS = ["run", "method", "dataset", "train_acc", "test_acc", "gen_gap", "bound_gap"]


def compare_rows(run_dirs) -> list:
    rows = []
    for d in run_dirs:
        d = Path(d)
        cfg = RunConfig.from_json(d / "config.json")
        metrics = read_csv(d / "metrics.csv")
        if not metrics:
            raise DataError(f"{d}: metrics.csv has no rows")
        last = metrics[-1]
        gap = None
        if (d / "bound.json").exists():
            gap = json.loads((d / "bound.json").read_text())["reports"][0]["bound_gap"]
        rows.append({"run": str(d), "method": cfg.regularizer["kind"], "dataset": cfg.dataset,
                     "train_acc": float(last["train_acc"]), "test_acc": float(last["test_acc"]),
                     "gen_gap": float(last["gen_gap"]), "bound_gap": gap})
    return rows


def format_compare(rows) -> str:
    header = f"{'Method':<10} {'Dataset':<8} {'Train Acc (%)':>13} {'Test Acc (%)':>12} " \
             f"{'Gen Gap (%)':>11} {'Bound':>7}"
    out = [header, "-" * len(header)]
    for r in rows:
        b = "" if r["bound_gap"] is None else f"{r['bound_gap']:.3f}"
        out.append(f"{r['method']:<10} {r['dataset']:<8} {r['train_acc']:>13.2f} "
                   f"{r['test_acc']:>12.2f} {r['gen_gap']:>11.2f} {b:>7}")
    if len({r["dataset"] for r in rows}) > 1:
        out.append("note: runs use different datasets; rows are not directly comparable")
    return "\n".join(out)


def cmd_compare(args) -> int:
    rows = compare_rows(args.runs)
    print(format_compare(rows))
    if args.out:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})
        Path(args.out).write_text(buf.getvalue(), newline="")
    return 0


# -- validate ------------------------------------------------------------------

def validate_run_dir(run_dir) -> list:
    """Return a list of problems; empty means every artifact parses."""
    problems = []
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return [f"{run_dir}: not a directory"]
    for path in sorted(run_dir.iterdir()):
        if path.suffix == ".json":
            try:
                json.loads(path.read_text())
            except ValueError as exc:
                problems.append(f"{path.name}: invalid JSON ({exc})")
        elif path.suffix == ".csv":
            raw = path.read_bytes()
            if raw and not raw.endswith(b"\r\n"):
                problems.append(f"{path.name}: records must end with CRLF")
            try:
                rows = list(csv.reader(io.StringIO(raw.decode(), newline="")))
            except (csv.Error, UnicodeDecodeError) as exc:
                problems.append(f"{path.name}: unreadable CSV ({exc})")
                continue
            if not rows:
                problems.append(f"{path.name}: empty CSV")
            elif any(len(r) != len(rows[0]) for r in rows):
                problems.append(f"{path.name}: ragged rows")
        elif path.suffix != ".txt":
            problems.append(f"{path.name}: unexpected artifact type")
    metrics = run_dir / "metrics.csv"
    if metrics.exists() and not problems:
        for row in read_csv(metrics):
            gap = float(row["train_acc"]) - float(row["test_acc"])
            if not math.isclose(gap, float(row["gen_gap"]), rel_tol=0, abs_tol=1e-9):
                problems.append(f"metrics.csv epoch {row['epoch']}: gen_gap != train - test")
    return problems


def cmd_validate(args) -> int:
    problems = validate_run_dir(args.run)
    for p in problems:
        print(p)
    if problems:
        return DataError.exit_code
    print(f"{args.run}: all artifacts valid")
    return 0


def cmd_prepare_mnist(args) -> int:
    for path in prepare_mnist_desk(args.data_root, test_per_class=args.test_per_class):
        print(path)
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magdrop-lab")
    p.add_argument("--data-root", help="dataset directory (default: $MAGDROP_DATA or ./data)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configured run")
    t.add_argument("--config")
    t.add_argument("--profile", help="built-in profile: mnist-desk, cifar-desk, blobs-ci")
    t.add_argument("--regularizer", choices=sorted(REGULARIZER_DEFAULTS))
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bound", help="evaluate the PAC-Bayes bound")
    b.add_argument("--run", help="finished run directory (measure mode)")
    b.add_argument("--inputs", nargs="+", help="BoundInputs JSON file(s) (direct mode)")
    b.add_argument("--backsolve-sigma", type=float, action="append",
                   help="target bound value to back-solve sigma from (once, or once per input)")
    b.add_argument("--sigma", type=float)
    b.add_argument("--label", action="append")
    b.add_argument("--out", help="directory for bound.json and bound_table.txt")
    b.set_defaults(func=cmd_bound)

    c = sub.add_parser("compare", help="tabulate finished runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", help="CSV output path")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check every artifact in a run directory")
    v.add_argument("run")
    v.set_defaults(func=cmd_validate)

    m = sub.add_parser("prepare-mnist", help="write a desk-scale MNIST split as IDX files")
    m.add_argument("--test-per-class", type=int, default=100)
    m.set_defaults(func=cmd_prepare_mnist)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
