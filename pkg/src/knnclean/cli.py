"""Command-line front end: dataset synthesis, corruption, runs, and reports.

Heavy imports stay inside the command handlers so KNNCLEAN_THREADS can cap the
BLAS pool before numpy loads. Exit codes: 0 success, 2 config error, 3
data-format error, 4 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("knnclean")


def _echo(name: str, params: dict) -> None:
    """Print the resolved parameters as canonical JSON so runs self-document."""
    print(f"{name} config:")
    print(json.dumps(params, sort_keys=True, indent=2))


def _load_config(path):
    from .pipeline import ConfigError, PipelineConfig, config_from_dict

    if path is None:
        return PipelineConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error in {path} at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}") from exc
    return config_from_dict(raw)


def cmd_synth(args) -> int:
    from .data import save_dataset, synth_gaussian

    _echo("synth", {"classes": args.classes, "per_class": args.per_class,
                    "dim": args.dim, "separation": args.separation,
                    "seed": args.seed, "out": str(args.out)})
    dataset = synth_gaussian(args.classes, args.per_class, args.dim,
                             args.separation, args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.n} samples ({dataset.d}-d, {dataset.num_classes} classes) "
          f"to {args.out}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .data import load_dataset, save_dataset
    from .noise import NoiseSpec, inject, label_error_rate, parse_transitions

    transitions = parse_transitions(args.transitions) if args.transitions else {}
    spec = NoiseSpec(args.kind, args.level, transitions, args.seed)
    _echo("corrupt", {"in": str(args.input), "out": str(args.out), "kind": spec.kind,
                      "level": spec.level,
                      "transitions": [f"{s}:{t}" for s, t in sorted(transitions.items())],
                      "seed": spec.seed})
    dataset = load_dataset(args.input)
    corrupted = inject(dataset.noisy_labels, dataset.num_classes, spec)
    out = dataset.with_labels(noisy_labels=corrupted, current_labels=corrupted)
    save_dataset(out, args.out)
    print(f"flipped {label_error_rate(corrupted, dataset.noisy_labels):.4f} "
          f"of {dataset.n} labels; wrote {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .data import load_dataset, save_dataset
    from .pipeline import run

    config = _load_config(args.config)
    _echo("run", config.to_dict())
    train = load_dataset(args.train)
    test = load_dataset(args.test) if args.test else None
    report_dir = Path(args.report_dir)
    reports, corrected, _model = run(config, train, test, report_dir)
    save_dataset(corrected, report_dir / "corrected.emb1")
    last = reports[-1]
    print(f"finished {len(reports)} episodes; reports in {report_dir}")
    if last.recovery_rate is not None:
        print(f"final label recovery rate: {last.recovery_rate:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import load_dataset
    from .pipeline import evaluate, train_reference_model

    config = _load_config(args.config)
    _echo("evaluate", config.to_dict())
    reference = load_dataset(args.train)
    test = load_dataset(args.test)
    model = train_reference_model(config, reference)
    head, deep = evaluate(model, reference, test, config)
    result = {"test_accuracy_head": head, "test_accuracy_knn": deep}
    print(json.dumps(result, sort_keys=True, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_ksweep(args) -> int:
    from .data import load_dataset
    from .pipeline import k_sweep

    config = _load_config(args.config)
    k_values = [int(k) for k in args.k.split(",")]
    _echo("ksweep", {**config.to_dict(), "k_values": k_values,
                     "eval_every": args.eval_every})
    dataset = load_dataset(args.train)
    rows = k_sweep(config, dataset, k_values, args.eval_every)
    print(f"{'epoch':>6} {'k':>6} {'mode':>8} {'recovery':>9}")
    for row in rows:
        print(f"{row['epoch']:>6} {row['k']:>6} {row['mode']:>8} "
              f"{row['recovery_rate']:>9.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "k", "mode", "recovery_rate"])
            for row in rows:
                writer.writerow([row["epoch"], row["k"], row["mode"],
                                 repr(row["recovery_rate"])])
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .data import load_dataset
    from .noise import label_error_rate

    dataset = load_dataset(args.input)
    info = {
        "path": str(args.input),
        "n": dataset.n,
        "d": dataset.d,
        "num_classes": dataset.num_classes,
        "true_labels_present": dataset.true_labels is not None,
        "current_vs_noisy_error": label_error_rate(dataset.current_labels,
                                                   dataset.noisy_labels),
    }
    if dataset.true_labels is not None:
        info["noisy_vs_true_error"] = label_error_rate(dataset.noisy_labels,
                                                       dataset.true_labels)
        info["current_vs_true_error"] = label_error_rate(dataset.current_labels,
                                                         dataset.true_labels)
    text = json.dumps(info, sort_keys=True, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knnclean",
        description="Iterative KNN label cleanup for dense embedding datasets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate separable synthetic clusters")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="inject synthetic label noise")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["symmetric", "asymmetric"], default="symmetric")
    p.add_argument("--level", type=float, required=True)
    p.add_argument("--transitions",
                   help="asymmetric map: builtin name (mnist, cifar10) or 'src:dst,...'")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("run", help="run the full correction pipeline")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate",
                       help="train on a corrected set and score a test set")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", help="optional JSON output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ksweep", help="single-episode recovery across k values")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--k", default="5,20,50,100,200,500,1000",
                   help="comma-separated k values")
    p.add_argument("--eval-every", type=int,
                   help="also evaluate every N epochs, not just the last")
    p.add_argument("--out", help="optional CSV output path")
    p.set_defaults(func=cmd_ksweep)

    p = sub.add_parser("inspect", help="print EMB1 file header and label stats")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", help="optional JSON output path")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("KNNCLEAN_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    logging.basicConfig(stream=sys.stdout, level=logging.INFO,
                        format="%(message)s")
    args = build_parser().parse_args(argv)

    from .data import DataFormatError
    from .pipeline import ConfigError
    from .trainer import NumericError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
