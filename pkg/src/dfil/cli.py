"""Command line entry point: generate, train, verify, report.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import shutil
import sys
import tempfile
import time
import uuid
from pathlib import Path

from . import datasets
from .metrics import AccuracyMatrix, summary
from .trainer import LOSS_COLUMNS, ConfigError, TrainConfig, TrainingAborted, run
from .verify import SUITES, run_suite

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
METHOD_FLAGS = {"dfil": "dfil", "ft": "finetune", "offline": "offline", "er": "er", "lwf": "lwf"}
RUN_FILES = ("config.json", "accuracy_matrix.csv", "losses.csv", "summary.json")


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("DFIL_SEED")
    if raw is None:
        return 7
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DFIL_SEED must be an integer, got {raw!r}") from None


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# -- generate ---------------------------------------------------------------------

def cmd_generate(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
            specs = [datasets.DomainSpec.from_dict(d) for d in doc["domains"]]
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"cannot read spec {args.spec}: {exc}") from exc
        cap, source = doc.get("few_shot_cap"), {"spec": str(args.spec)}
    else:
        try:
            specs, cap = datasets.preset(args.preset)
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
        source = {"preset": args.preset}
    try:
        seq = datasets.generate_stream(specs, seed, cap)
    except datasets.GenerationError as exc:
        raise UsageError(str(exc)) from exc
    try:
        files = datasets.write_stream(seq, args.out, source)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc}") from exc
    print(f"wrote {len(files)} CSV files and {datasets.MANIFEST} to {args.out}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------

def build_config(args) -> TrainConfig:
    """Defaults < config file < command-line flags."""
    d: dict = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    if "seed" not in d:
        d["seed"] = default_seed()
    d["method"] = METHOD_FLAGS[args.method]
    overrides = {"seed": args.seed, "epochs_per_task": args.epochs, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "K": args.K}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_replay:
        d["use_replay"] = False
    return TrainConfig.from_dict(d)


def format_table(matrix: AccuracyMatrix) -> str:
    """Rows = task trained, columns = task evaluated, then AA and AF."""
    names = matrix.task_names
    width = max(8, *(len(n) for n in names))
    head = f"{'trained':<{width}} | " + " ".join(f"{n:>{width}}" for n in names) + f" | {'AA':>7} {'AF':>7}"
    lines = [head, "-" * len(head)]
    by_task = {s["after_task"]: s for s in summary(matrix)}
    for i in sorted(matrix.rows):
        cells = [f"{v:>{width}.2f}" for v in matrix.rows[i]] + [f"{'-':>{width}}"] * (len(names) - i)
        s = by_task[i]
        af = f"{s['AF']:>7.2f}" if s["AF"] is not None else f"{'-':>7}"
        lines.append(f"{names[i - 1]:<{width}} | " + " ".join(cells) + f" | {s['AA']:>7.2f} {af}")
    return "\n".join(lines)


def cmd_train(args) -> int:
    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"data directory {data} does not exist")
    cfg = build_config(args)
    try:
        seq = datasets.load_stream(data)
    except (FileNotFoundError, datasets.DataFormatError, KeyError, ValueError) as exc:
        raise UsageError(f"invalid data directory {data}: {exc}") from exc

    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists (use --force to replace it)")
    started = _now()
    t0 = time.perf_counter()
    record = run(seq, cfg)

    # build in a sibling temp dir, then swap into place
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        record.write(tmp)
        manifest = {"run_id": args.run_id or uuid.uuid4().hex[:12], "config_path": args.config,
                    "output_dir": str(out), "method": cfg.method, "data_dir": str(data),
                    "started": started, "finished": _now(),
                    "elapsed_seconds": round(time.perf_counter() - t0, 3)}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(format_table(record.matrix))
    return EXIT_OK


# -- verify -------------------------------------------------------------------------

def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    checks = run_suite(args.suite)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(c.line())
    for c in failed:
        print(f"failing case {c.suite}/{c.name}: {json.dumps(c.case, sort_keys=True)}")
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_VERIFY if failed else EXIT_OK


# -- report -------------------------------------------------------------------------

def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    missing = [f for f in RUN_FILES if not (run_dir / f).is_file()]
    if missing:
        raise UsageError(f"{run_dir} is not a complete run (missing {', '.join(missing)})")
    matrix = AccuracyMatrix.from_csv(run_dir / "accuracy_matrix.csv")
    with open(run_dir / "losses.csv", newline="") as fh:
        losses = list(csv.DictReader(fh))
    curves: dict[str, dict[str, dict[str, float | None]]] = {}
    for task in sorted({r["task"] for r in losses}, key=int):
        per_epoch: dict[str, dict[str, list[float]]] = {}
        for r in losses:
            if r["task"] != task:
                continue
            bucket = per_epoch.setdefault(r["epoch"], {c: [] for c in LOSS_COLUMNS[3:]})
            for c in LOSS_COLUMNS[3:]:
                if r[c] != "":
                    bucket[c].append(float(r[c]))
        curves[task] = {e: {c: (sum(v) / len(v) if v else None) for c, v in cols.items()}
                        for e, cols in sorted(per_epoch.items(), key=lambda kv: int(kv[0]))}
    return {"config": json.loads((run_dir / "config.json").read_text()),
            "accuracy_matrix": matrix.to_dict(),
            "boundaries": summary(matrix),
            "loss_curves": curves}


def render_md(report: dict) -> str:
    matrix = AccuracyMatrix.from_dict(report["accuracy_matrix"])
    names = matrix.task_names
    lines = [f"# Run report ({report['config']['method']})", "", "## Accuracy matrix", "",
             "| trained | " + " | ".join(names) + " | AA | AF |",
             "|" + "---|" * (len(names) + 3)]
    for s in report["boundaries"]:
        i = s["after_task"]
        cells = [f"{v:.2f}" for v in matrix.rows[i]] + ["-"] * (len(names) - i)
        af = f"{s['AF']:.2f}" if s["AF"] is not None else "-"
        lines.append(f"| {names[i - 1]} | " + " | ".join(cells) + f" | {s['AA']:.2f} | {af} |")
    lines += ["", "## Loss components (mean per epoch)", ""]
    for task, epochs in report["loss_curves"].items():
        lines += [f"### task {task}", "", "| epoch | ce | scl | kd | fd | total |", "|---|---|---|---|---|---|"]
        for e, vals in epochs.items():
            cells = ["-" if vals[c] is None else f"{vals[c]:.4f}" for c in ("ce", "scl", "kd", "fd", "total")]
            lines.append(f"| {e} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def render_csv(report: dict) -> str:
    return AccuracyMatrix.from_dict(report["accuracy_matrix"]).to_csv_text()


def cmd_report(args) -> int:
    report = load_run(args.run)
    if args.format == "json":
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    elif args.format == "csv":
        sys.stdout.write(render_csv(report))
    else:
        sys.stdout.write(render_md(report) + "\n")
    return EXIT_OK


# -- entry --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic domain stream as CSV files")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset")
    src.add_argument("--spec", help="JSON file with a 'domains' list (and optional 'few_shot_cap')")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run an incremental-learning protocol")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=sorted(METHOD_FLAGS), default="dfil")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--K", type=int)
    t.add_argument("--no-replay", action="store_true", help="disable the replay set (ablation)")
    t.add_argument("--run-id")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run oracle self-checks")
    v.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="render a finished run")
    r.add_argument("--run", required=True)
    r.add_argument("--format", choices=["csv", "json", "md"], default="md")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"numeric abort: {exc}\n{json.dumps(exc.diagnostics, sort_keys=True)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
