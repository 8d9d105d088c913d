"""Command-line entry point: ``train``, ``eval``, ``verify-theorem``, ``report``.

Exit codes: 0 success, 1 bound violations found, 2 invalid input
(config, checkpoint, missing files), 3 runtime failure during compute.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plotting
from .belief import bound_slacks, sample_belief_vectors
from .config import load_config, load_datasets
from .errors import BeliefMetaError, CheckpointError, ConfigError
from .meta import METRIC_COLUMNS, derive_seed, evaluate, format_metric_row, train
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger("beliefmeta")

REPORT_METRICS = ("labeled_query_sets", "train_loss", "mean_vb", "mean_cb", "mean_ib")
TIGHT_FIXTURE = (0.4, 0.4)


class _UsageError(Exception):
    pass


def _writer(handle):
    return csv.writer(handle, lineterminator="\n")


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.6g}"


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.out)
    train_ds, _ = load_datasets(cfg)
    arch = cfg.architecture(train_ds.dim)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg.raw, indent=2) + "\n", encoding="utf-8")
    t0 = time.perf_counter()
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(METRIC_COLUMNS)
        result = train(train_ds, arch, cfg.meta, sinks=[lambda row: w.writerow(format_metric_row(row))])
    save_checkpoint(result.params, out, arch)
    c = result.counters
    print(f"trained {result.iterations} meta-iterations in {time.perf_counter() - t0:.1f}s "
          f"(labeled query sets {c.labeled_query_sets}, forward {c.forward}, backward {c.backward})")
    print(f"outputs written to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint or args.out or ".")
    config = args.config or ckpt / "config.resolved.json"
    cfg = load_config(config, args.set)
    _, held = load_datasets(cfg)
    arch = cfg.architecture(held.dim)
    params = load_checkpoint(ckpt, arch)
    ev = cfg.eval
    report = evaluate(params, held, cfg.meta, ev["num_tasks"], ev["thresholds"], ev["ood"], seed=cfg.seed)
    out = Path(args.out or ckpt)
    out.mkdir(parents=True, exist_ok=True)

    rows = [{"threshold": f"{t.threshold:.6g}", "coverage": _fmt(t.coverage), "accuracy": _fmt(t.accuracy)}
            for t in report.thresholds]
    rows.append({"threshold": "overall", "coverage": "1", "accuracy": _fmt(report.accuracy)})
    with open(out / "eval.csv", "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(["threshold", "coverage", "accuracy"])
        w.writerows([[r["threshold"], r["coverage"], r["accuracy"]] for r in rows])
    plotting.vacuity_thresholds({out.name or "run": rows}, out / "eval.png")

    if report.ood:
        kind = report.ood[0].kind
        ood_rows = [{"kind": "clean", "magnitude": "0", "mean_vacuity": _fmt(report.mean_vacuity),
                     "accuracy": _fmt(report.accuracy)}]
        ood_rows += [{"kind": o.kind, "magnitude": f"{o.magnitude:.6g}", "mean_vacuity": _fmt(o.mean_vacuity),
                      "accuracy": _fmt(o.accuracy)} for o in report.ood]
        with open(out / "ood.csv", "w", encoding="utf-8", newline="") as fh:
            w = _writer(fh)
            w.writerow(["kind", "magnitude", "mean_vacuity", "accuracy"])
            w.writerows([[r["kind"], r["magnitude"], r["mean_vacuity"], r["accuracy"]] for r in ood_rows])
        for r in ood_rows:
            r["kind"] = kind
        plotting.ood_vacuity(ood_rows, out / "ood.png")

    print(f"accuracy {report.accuracy:.4f} +/- {report.accuracy_stderr:.4f} over {report.num_tasks} tasks; "
          f"mean vacuity {report.mean_vacuity:.4f}; vb {report.mean_vb:.4f} cb {report.mean_cb:.4f} "
          f"ib {report.mean_ib:.4f}")
    for t in report.thresholds:
        print(f"  u < {t.threshold:g}: coverage {t.coverage:.3f} accuracy {_fmt(t.accuracy)}")
    for o in report.ood:
        print(f"  {o.kind} {o.magnitude:g}: mean vacuity {o.mean_vacuity:.4f} accuracy {o.accuracy:.4f}")
    return 0


def run_theorem_check(samples: int, seed: int, cb_scale: float = 1.0) -> tuple[int, float]:
    """Violations of ``ib >= cb/2 - 1e-9`` over random belief vectors with 2-10 classes."""
    rng = np.random.default_rng(derive_seed(seed, "verify-theorem"))
    sizes = rng.integers(2, 11, size=samples)
    min_slack, violations = np.inf, 0
    for n in np.unique(sizes):
        b = sample_belief_vectors(rng, int(np.sum(sizes == n)), int(n))
        slack = bound_slacks(b, cb_scale)
        violations += int(np.sum(slack < -1e-9))
        min_slack = min(min_slack, float(slack.min()))
    return violations, min_slack


def cmd_verify_theorem(args) -> int:
    if args.samples < 1:
        raise _UsageError("--samples must be at least 1")
    t0 = time.perf_counter()
    violations, min_slack = run_theorem_check(args.samples, args.seed, args.cb_scale)
    fixture_slack = float(bound_slacks(np.array([TIGHT_FIXTURE]), args.cb_scale)[0])
    print(f"samples: {args.samples}")
    print(f"violations: {violations}")
    print(f"min_slack: {min_slack!r}")
    print(f"fixture {TIGHT_FIXTURE} slack: {fixture_slack!r}")
    print(f"tight: {'yes' if abs(fixture_slack) <= 1e-9 or abs(min_slack) <= 1e-9 else 'no'}")
    print(f"elapsed: {time.perf_counter() - t0:.2f}s")
    return 0 if violations == 0 else 1


def _run_names(dirs: Sequence[Path]) -> list[str]:
    names = [d.resolve().name or str(d) for d in dirs]
    if len(set(names)) != len(names):
        names = [str(d) for d in dirs]
    return names


def _read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.run_dirs]
    for d in dirs:
        if not (d / "metrics.csv").is_file():
            raise ConfigError("run_dirs", f"missing metrics file: {d / 'metrics.csv'} ({d})")
    names = _run_names(dirs)
    runs = {name: _read_csv(d / "metrics.csv") for name, d in zip(names, dirs)}
    by_iter = {name: {int(r["iter"]): r for r in rows} for name, rows in runs.items()}
    iters = sorted(set().union(*[set(v) for v in by_iter.values()]))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(["iter"] + [f"{n}:{m}" for n in names for m in REPORT_METRICS])
        for i in iters:
            row = [str(i)]
            for n in names:
                r = by_iter[n].get(i)
                row += [r[m] if r else "" for m in REPORT_METRICS]
            w.writerow(row)
    plotting.belief_trends(runs, out / "belief_trends.png")
    plotting.budget_curves(runs, out / "budget.png")
    evals = {n: _read_csv(d / "eval.csv") for n, d in zip(names, dirs) if (d / "eval.csv").is_file()}
    if evals:
        plotting.vacuity_thresholds(evals, out / "vacuity_thresholds.png")
    print(f"report over {len(names)} run(s), {len(iters)} iterations written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beliefmeta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train and write metrics, checkpoint and resolved config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out tasks")
    e.add_argument("--checkpoint", help="run directory holding the checkpoint (default: --out)")
    e.add_argument("--config", help="default: <checkpoint>/config.resolved.json")
    e.add_argument("--out")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify-theorem", help="check ib >= cb/2 on random belief vectors")
    v.add_argument("--samples", type=int, default=100000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--cb-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify_theorem)

    r = sub.add_parser("report", help="join metrics of several runs into report.csv and figures")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BeliefMetaError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
