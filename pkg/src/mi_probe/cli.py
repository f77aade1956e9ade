"""``mi-probe`` command line: gen-data, train, probe, report, compare, run."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import MIProbeError, NumericError, PartialProbeError, UsageError
from .experiment import (
    VARIANTS,
    ExperimentSpec,
    apply_overrides,
    load_spec,
    preset,
    run_experiment,
)
from .models import (
    ModelContainer,
    SyntheticDataset,
    TrainConfig,
    gen_synthetic_dataset,
    init_model,
    load_model,
    save_model,
    train_task,
)
from .probe import ProbeConfig, default_jobs, probe_layers
from .report import compare_runs, load_report, write_report_artifacts

log = logging.getLogger("mi_probe")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("MI_PROBE_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"MI_PROBE_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _spec_from_args(args) -> ExperimentSpec:
    """Experiment spec from ``--config`` or ``--preset``, with ``--set``/``--seed`` applied."""
    if getattr(args, "config", None):
        return load_spec(args.config, args.set, args.seed)
    variant = getattr(args, "preset", None) or "reconstruction"
    raw = preset(variant, 0 if args.seed is None else args.seed).to_json()
    return ExperimentSpec.from_json(apply_overrides(raw, args.set))


def _cmd_gen_data(args) -> int:
    spec = _spec_from_args(args)
    data = gen_synthetic_dataset(spec.data, spec.seed("data"))
    data.save(args.out)
    print(f"wrote {args.out}: {data.n_samples} {data.task} samples, L={data.length}, D={data.dim}")
    return 0


def _cmd_train(args) -> int:
    spec = _spec_from_args(args)
    data = SyntheticDataset.load(args.data) if args.data else gen_synthetic_dataset(spec.data, spec.seed("data"))
    stack, head = init_model(spec.model, spec.seed("model"))
    cfg = TrainConfig(**{**spec.train.__dict__, "seed": spec.seed("train")})
    result = train_task(stack, head, data, cfg)
    meta = {"config_hash": spec.hash(), "experiment": spec.name, "loss_history": result.history}
    save_model(args.out, ModelContainer(spec.model, result.stack, result.head, meta))
    print(f"wrote {args.out}: final epoch loss {result.history[-1]:.6f}" if result.history else f"wrote {args.out}")
    return 0


def _cmd_probe(args) -> int:
    container = load_model(args.model)
    data = SyntheticDataset.load(args.data)
    if args.config:
        spec = load_spec(args.config, args.set, args.seed)
        cfg = spec.probe
        seed = spec.seed("probe")
    else:
        raw = apply_overrides({"probe": preset("reconstruction").probe.to_json()}, args.set)
        cfg = ProbeConfig.from_json(raw["probe"])
        seed = cfg.seed if args.seed is None else args.seed
    cfg = ProbeConfig(**{**cfg.__dict__, "seed": seed})
    name = container.meta.get("experiment") or Path(args.model).stem
    try:
        report = probe_layers(container, data, cfg, jobs=args.jobs, meta={"experiment": name})
    except PartialProbeError as exc:
        if exc.report is not None:
            write_report_artifacts(exc.report, args.out, name)
        raise
    write_report_artifacts(report, args.out, name)
    _print_labels(report)
    return 0


def _cmd_report(args) -> int:
    report = load_report(args.report)
    out = args.out or str(Path(args.report).parent)
    write_report_artifacts(report, out, report.meta.get("experiment", "report"))
    _print_labels(report)
    return 0


def _cmd_compare(args) -> int:
    rows, differs = compare_runs(args.reports, args.out, side=args.side)
    for r in rows:
        print(f"{r['index']}\t{r['name']}\t{r['trend_label']}")
    print("labels differ" if differs else "labels agree")
    return 0


def _cmd_run(args) -> int:
    spec = _spec_from_args(args)
    if args.out:
        spec = ExperimentSpec.from_json({**spec.to_json(), "output_dir": args.out})
    result = run_experiment(spec, jobs=args.jobs)
    print(f"wrote {spec.out_path}: {', '.join(sorted(p.name for p in result.paths.values()))}")
    _print_labels(result.report)
    return 0


def _print_labels(report) -> None:
    for side, label in sorted(report.trend_labels.items()):
        values = " ".join(f"{v:.4f}" for v in report.curves[side].log_values)
        print(f"{side}: {label}  log MI by layer: {values}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mi-probe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def spec_args(p, preset_ok=True):
        p.add_argument("--config", help="experiment JSON file")
        if preset_ok:
            p.add_argument("--preset", choices=VARIANTS, help="built-in desk-scale experiment (when no --config)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field by dotted path (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset (.npz)")
    spec_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write its container")
    spec_args(p)
    p.add_argument("--data", help="dataset from gen-data (default: regenerate from the spec)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("probe", help="estimate MI at every tapped layer of a trained model")
    spec_args(p, preset_ok=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes for probing")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("report", help="re-emit CSV and SVG from a report JSON")
    p.add_argument("report")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("compare", help="compare trend labels and overlay curves of several reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--side", default="input_side")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("run", help="end-to-end experiment: data, training, probing, artifacts")
    spec_args(p)
    p.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes for probing")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except PartialProbeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except MIProbeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
