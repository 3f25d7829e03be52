"""Command-line entry points.

Thin wrappers over the library: every subcommand parses arguments, loads
manifests or configs, calls one library function, and prints or writes the
result. Run directories default to ``$MEDI_RUN_ROOT`` (or ``./runs``) so
batch jobs can redirect all output with one environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .diffusion.checkpoint import CheckpointError
from .diffusion.conditioning import ConditioningError
from .diffusion.ddim import SamplingError
from .diffusion.schedule import ScheduleError
from .diffusion.training import TrainingDiverged
from .evaluation.fid import FIDError
from .evaluation.probe import ProbeError
from .ledger import LedgerError, RunLedger
from .registry import (
    ManifestError,
    coverage_matrix,
    load_manifest,
    summarize,
    write_manifest,
)
from .sampling import PlanError
from .splits import SplitError, TaskSpec, holdout_split
from .studies import run_fid_study, run_shift_study
from .toydata import ToyDataError

# Failures a user can cause with bad arguments, files, or configs. These
# become one-line messages and exit code 1; anything else is a bug and
# keeps its traceback.
USER_ERRORS = (
    CheckpointError,
    ConditioningError,
    ConfigError,
    FIDError,
    FileNotFoundError,
    LedgerError,
    ManifestError,
    PlanError,
    ProbeError,
    SamplingError,
    ScheduleError,
    SplitError,
    ToyDataError,
    TrainingDiverged,
)


def run_root() -> Path:
    return Path(os.environ.get("MEDI_RUN_ROOT", "runs"))


def _comma_list(raw: str) -> tuple[str, ...]:
    return tuple(part for part in raw.split(",") if part)


def _progress(step: int, loss: float) -> None:
    print(f"step {step}: loss {loss:.4f}")


def cmd_audit(args) -> int:
    manifest = load_manifest(args.manifest)
    stats = summarize(manifest)
    print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    if args.coverage:
        matrix = coverage_matrix(manifest, args.coverage)
        if args.out:
            matrix.write_csv(args.out)
            print(f"coverage matrix written to {args.out}")
        else:
            header = "".join(v.rjust(10) for v in matrix.values)
            print("".ljust(10) + header)
            for i, cls in enumerate(matrix.classes):
                row = "".join(str(int(n)).rjust(10) for n in matrix.counts[i])
                print(cls.ljust(10) + row)
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    split = holdout_split(manifest, args.fraction, _comma_list(args.axes),
                          args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(split.train, out / "train.csv")
    write_manifest(split.holdout, out / "holdout.csv")
    (out / "excluded.json").write_text(
        json.dumps(split.excluded_sidecar(), indent=2, sort_keys=True) + "\n"
    )
    print(f"train: {len(split.train)} records, holdout: {len(split.holdout)}; "
          f"sidecar at {out / 'excluded.json'}")
    return 0


def cmd_toygen(args) -> int:
    from .toydata import ToyDatasetSpec, generate_toy_dataset

    spec = ToyDatasetSpec(
        n_classes=args.classes, n_sites=args.sites, per_class=args.per_class,
        image_size=args.image_size, correlation=args.correlation,
        tint_delta=args.tint_delta, noise=args.noise, seed=args.seed,
    )
    manifest = generate_toy_dataset(spec, args.out)
    print(f"wrote {len(manifest)} patches under {args.out} "
          f"(images in {Path(args.out) / 'images'})")
    return 0


def cmd_train(args) -> int:
    from .diffusion.checkpoint import save_checkpoint
    from .studies import train_generator

    manifest = load_manifest(args.manifest)
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.training.seed
    generator = train_generator(
        manifest, args.image_root, config, class_only=args.class_only,
        seed=seed, callback=_progress if not args.quiet else None,
    )
    save_checkpoint(
        args.out, generator.model, generator.schedule, manifest.schema,
        step=config.training.steps,
        extra={"class_only": args.class_only, "seed": seed},
    )
    final = generator.history[-1]["loss"] if generator.history else float("nan")
    print(f"checkpoint written to {args.out} (final loss {final:.4f})")
    return 0


def cmd_sample(args) -> int:
    from .diffusion.checkpoint import load_checkpoint
    from .sampling import (
        cartesian_fill_plan,
        execute_plan,
        frequency_matched_plan,
        uniform_class_plan,
    )

    manifest = load_manifest(args.manifest)
    model, schedule, _ = load_checkpoint(args.checkpoint,
                                         schema=manifest.schema)
    if args.attributes is None:
        attributes = model.spec.attributes
    else:
        attributes = _comma_list(args.attributes)
    if args.plan == "uniform":
        attributes = ()
    if attributes != model.spec.attributes:
        print(
            f"checkpoint conditions on {list(model.spec.attributes)} but the "
            f"requested plan carries {list(attributes)}; pick a matching plan "
            "or checkpoint",
            file=sys.stderr,
        )
        return 1
    if args.plan == "frequency":
        plan = frequency_matched_plan(manifest, args.total, attributes,
                                      args.seed)
    elif args.plan == "uniform":
        plan = uniform_class_plan(manifest.schema.class_vocab.values,
                                  args.total, args.seed)
    else:
        plan = cartesian_fill_plan(manifest.schema, args.total, attributes,
                                   args.seed)
    synthetic = execute_plan(
        model, schedule, plan, manifest.schema, args.out,
        num_sample_steps=args.num_steps, batch_size=args.batch_size,
        resume=args.resume,
    )
    print(f"{len(synthetic)} synthetic patches under {args.out} "
          f"(manifest at {Path(args.out) / 'manifest.csv'})")
    return 0


def _extractor(widths: str, seed: int):
    from .evaluation.features import ConvFeatureExtractor

    return ConvFeatureExtractor(
        widths=tuple(int(w) for w in _comma_list(widths)), seed=seed,
    )


def cmd_fid(args) -> int:
    from .evaluation.fid import per_class_fid
    from .studies import manifest_features

    extractor = _extractor(args.widths, args.feature_seed)
    real = load_manifest(args.real)
    synth = load_manifest(args.synth)
    real_feats, real_labels, _ = manifest_features(real, args.real_root,
                                                   extractor)
    synth_feats, synth_labels, _ = manifest_features(synth, args.synth_root,
                                                     extractor)
    report = per_class_fid(real_feats, real_labels, synth_feats, synth_labels)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_probe(args) -> int:
    from .evaluation.probe import evaluate_probe, train_linear_probe
    from .studies import manifest_features

    extractor = _extractor(args.widths, args.feature_seed)
    train = load_manifest(args.train)
    test = load_manifest(args.test)
    train_feats, train_labels, _ = manifest_features(train, args.train_root,
                                                     extractor)
    test_feats, test_labels, test_sites = manifest_features(
        test, args.test_root, extractor,
    )
    probe = train_linear_probe(train_feats, train_labels,
                               n_per_class=args.shots, seed=args.seed)
    result = evaluate_probe(probe, test_feats, test_labels, sites=test_sites)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return 0


def _study_out(args, name: str) -> Path:
    return Path(args.out) if args.out else run_root() / name


def cmd_study_fid(args) -> int:
    manifest = load_manifest(args.manifest)
    config = load_config(args.config)
    reference = load_manifest(args.reference) if args.reference else None
    out = _study_out(args, "fid")
    report = run_fid_study(
        manifest, args.image_root, config,
        reference_manifest=reference,
        reference_root=args.reference_root,
        out_dir=out,
        callback=_progress if not args.quiet else None,
    )
    print((out / "reports" / "table.txt").read_text(), end="")
    print(f"wins: {report['wins']}; report under {out / 'reports'}")
    return 0


def cmd_study_shift(args) -> int:
    train = load_manifest(args.manifest)
    test = load_manifest(args.test_manifest)
    config = load_config(args.config)
    task = TaskSpec(name=args.task, classes=_comma_list(args.classes))
    out = _study_out(args, "shift")
    report = run_shift_study(
        train, test, args.image_root, config, task, out_dir=out,
        callback=_progress if not args.quiet else None,
    )
    print((out / "reports" / "table.txt").read_text(), end="")
    if report["failures"]:
        print(report["excluded_note"])
    print(f"report under {out / 'reports'}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    table = run_dir / "reports" / "table.txt"
    report = run_dir / "reports" / "report.json"
    if not report.exists():
        print(f"no report.json under {run_dir / 'reports'}", file=sys.stderr)
        return 1
    if table.exists():
        print(table.read_text(), end="")
    payload = json.loads(report.read_text())
    if payload.get("failures"):
        print(f"failures recorded: {len(payload['failures'])}")
    ledger = RunLedger(run_dir / "ledger.jsonl")
    if ledger.path.exists():
        if not ledger.verify():
            print("ledger FAILED verification: the chain was edited",
                  file=sys.stderr)
            return 1
        mismatches = ledger.artifact_mismatches()
        if mismatches:
            print("artifacts out of sync with the ledger:", file=sys.stderr)
            for line in mismatches:
                print(f"  {line}", file=sys.stderr)
            return 1
        print(f"ledger verified ({len(ledger.entries())} entries)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medi",
        description="Metadata-conditioned diffusion: train, sample, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="summarize a manifest")
    p.add_argument("manifest")
    p.add_argument("--coverage", help="attribute to cross-tabulate with classes")
    p.add_argument("--out", help="write the coverage matrix to this CSV")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("split", help="hold out metadata combinations per class")
    p.add_argument("manifest")
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--axes", default="site")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("toygen", help="generate the synthetic toy dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--sites", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--correlation", type=float, default=0.0)
    p.add_argument("--tint-delta", type=float, default=0.35)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("train", help="train one generator")
    p.add_argument("manifest")
    p.add_argument("--image-root", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--class-only", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw synthetic images from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True,
                   help="manifest defining the vocabulary and frequencies")
    p.add_argument("--plan", choices=["frequency", "uniform", "cartesian"],
                   required=True)
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--attributes",
                   help="comma list; defaults to the checkpoint's conditioning")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fid", help="per-class FID between two manifests")
    p.add_argument("--real", required=True)
    p.add_argument("--real-root", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--synth-root", required=True)
    p.add_argument("--widths", default="16,32,64")
    p.add_argument("--feature-seed", type=int, default=0)
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("probe", help="few-shot probe, scored per site")
    p.add_argument("--train", required=True)
    p.add_argument("--train-root", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--test-root", required=True)
    p.add_argument("--shots", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--widths", default="16,32,64")
    p.add_argument("--feature-seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("study-fid", help="class-only vs joint generation, by FID")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--reference", help="real set to score against (default: manifest)")
    p.add_argument("--reference-root")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_study_fid)

    p = sub.add_parser("study-shift",
                       help="probe robustness on unseen sites, three arms")
    p.add_argument("--manifest", required=True, help="training-side manifest")
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--image-root", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--task", default="shift")
    p.add_argument("--classes", required=True,
                   help="comma-separated task classes")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_study_shift)

    p = sub.add_parser("report", help="print a run's tables and verify its ledger")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as err:
        print(f"medi: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
