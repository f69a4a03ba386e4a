"""Command-line entry points: gen-data, train, fisher, adapt, sweep-fisher, report.

Exit status: 0 success, 2 configuration error, 3 invariant violation,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from . import bench, store
from .engine import METHODS, SCENARIOS, AdaptationError
from .fisher import estimate_fisher

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which already matches the config-error code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> bench.ExperimentConfig:
    cfg = bench.ExperimentConfig.load(args.config) if args.config else bench.ExperimentConfig()
    if getattr(args, "out", None):
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def _target_dir(cfg: bench.ExperimentConfig) -> Path:
    return bench.resolve_output(cfg.output_dir)


def _guard(paths, overwrite: bool) -> None:
    taken = [str(p) for p in paths if Path(p).exists()]
    if taken and not overwrite:
        raise bench.ConfigError(f"output path exists: {taken[0]} (pass --overwrite to replace)")


def cmd_gen_data(args) -> str:
    cfg = _load_config(args)
    path = _target_dir(cfg) / "dataset.json"
    _guard([path], args.overwrite)
    from .data import generate_dataset
    ds = generate_dataset(cfg.dataset)
    store.save_dataset(path, ds)
    sizes = {k: len(s.y) for k, s in ds.splits().items()}
    return f"dataset seed={cfg.dataset.seed} splits={sizes} -> {path}"


def cmd_train(args) -> str:
    cfg = _load_config(args)
    path = _target_dir(cfg) / "checkpoint.json"
    _guard([path], args.overwrite)
    dataset, model, lineage = bench.prepare_source(cfg)
    store.save_checkpoint(path, model, lineage)
    from .metrics import forgetting_probe
    acc = forgetting_probe(model, dataset.test.x, dataset.test.y)
    return f"source model clean accuracy={acc:.4f} regenerations={lineage['regenerations']} -> {path}"


def cmd_fisher(args) -> str:
    cfg = _load_config(args)
    directory = _target_dir(cfg)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else directory / "checkpoint.json"
    path = Path(cfg.fisher) if cfg.fisher else directory / "fisher.json"
    _guard([path], args.overwrite)
    if ckpt.exists():
        model, lineage = store.load_checkpoint(ckpt)
        from .data import generate_dataset
        dataset = generate_dataset(dataclasses.replace(cfg.dataset, seed=lineage["dataset_seed"]))
    else:
        dataset, model, lineage = bench.prepare_source(cfg)
        store.save_checkpoint(ckpt, model, lineage)
    fisher = estimate_fisher(model, bench.fisher_pool(dataset, cfg.fisher_samples))
    store.save_fisher(path, fisher, model.adaptable_names())
    total = sum(float(w.sum()) for w in fisher.omega)
    return f"fisher samples={fisher.num_samples} total_importance={total:.6g} -> {path}"


def cmd_adapt(args) -> str:
    cfg = _load_config(args)
    changes = {k: v for k, v in (("method", args.method), ("scenario", args.scenario), ("lr", args.lr),
                                 ("beta", args.beta), ("steps_per_batch", args.steps),
                                 ("seed", args.seed)) if v is not None}
    if args.audit:
        changes["audit"] = True
    if changes:
        try:
            cfg = cfg.with_adapt(**changes)
        except ValueError as exc:
            raise bench.ConfigError(f"adapt.{exc}") from exc
    directory = _target_dir(cfg)
    _guard([directory / name for name in bench.OUTPUT_FILES], args.overwrite)
    report = bench.run_experiment(cfg, directory=directory)
    return (f"{cfg.adapt.method}/{cfg.adapt.scenario} accuracy={report.accuracy:.4f} ece={report.ece:.4f} "
            f"backwards={report.backwards} -> {directory / 'report.json'}")


def cmd_sweep_fisher(args) -> str:
    cfg = _load_config(args)
    directory = _target_dir(cfg)
    counts = args.samples or list(bench.FISHER_SWEEP)
    table = directory / "fisher_sweep.csv"
    _guard([table, *[directory / f"q{q}" / "report.json" for q in counts]], args.overwrite)
    results = bench.fisher_sample_sweep(cfg, counts, directory=directory)
    docs = [(f"q{q}", bench.report_document(r)) for q, r in results]
    table.write_text(bench.comparison_csv(docs))
    lines = [f"{name} accuracy={doc['accuracy']:.4f} clean_drop={doc['clean_accuracy_drop']:.4f}"
             for name, doc in docs]
    return "\n".join(lines + [f"-> {table}"])


def cmd_report(args) -> str:
    reports = [(Path(p).name if Path(p).is_dir() else Path(p).parent.name, bench.load_report(p))
               for p in args.inputs]
    text = bench.comparison_csv(reports)
    out = Path(args.output) if args.output else bench.output_root() / "comparison.csv"
    _guard([out], args.overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    sys.stdout.write(text)
    return f"compared {len(reports)} runs -> {out}"


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eatac", description="Desk-scale EATA / EATA-C test-time adaptation benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON); defaults when omitted")
        p.add_argument("--out", help="output directory (relative paths resolve against $%s)" % bench.OUTPUT_ROOT_ENV)
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    common(sub.add_parser("gen-data", help="generate and store the dataset bundle"))
    common(sub.add_parser("train", help="train the source model and store its checkpoint"))
    common(sub.add_parser("fisher", help="estimate and store the Fisher importance map"))
    p = sub.add_parser("adapt", help="run test-time adaptation over the corrupted stream")
    common(p)
    p.add_argument("--method", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", type=int, help="optimizer steps per batch")
    p.add_argument("--seed", type=int, help="adaptation seed")
    p.add_argument("--audit", action="store_true", help="record full/sub-network disagreement")
    p = sub.add_parser("sweep-fisher", help="rerun adaptation with Fisher maps from several pool sizes")
    common(p)
    p.add_argument("--samples", type=int, nargs="+",
                   help="pool sizes to compare (default: %s)" % " ".join(map(str, bench.FISHER_SWEEP)))
    p = sub.add_parser("report", help="compare finished runs in one CSV table")
    p.add_argument("--inputs", nargs="+", required=True, help="run directories or report.json files")
    p.add_argument("--output", help="comparison CSV path (default: $%s/comparison.csv)" % bench.OUTPUT_ROOT_ENV)
    p.add_argument("--overwrite", action="store_true")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "fisher": cmd_fisher,
            "adapt": cmd_adapt, "sweep-fisher": cmd_sweep_fisher, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(COMMANDS[args.command](args))
    except (bench.ConfigError, store.ContainerError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except bench.InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (AdaptationError, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
