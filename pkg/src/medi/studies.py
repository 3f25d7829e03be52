"""The two headline experiments, run end to end.

``run_fid_study`` asks how much metadata conditioning helps a generator
match its training distribution: a class-only arm and a joint arm are
trained under identical budgets, frequency-matched samples are drawn from
each, and per-class feature distances against the real data are compared.

``run_shift_study`` asks whether targeted synthetic data makes a
downstream classifier robust to subpopulation shift: probes are trained on
deliberately confounded splits, with and without synthetic augmentation,
and scored on sites the training side never saw. Three arms are compared
per split: no synthetic data, class-only generation, and joint generation
filling every class x site cell.

Both studies write deterministic reports (sorted keys, no timestamps), so
rerunning a study with the same inputs reproduces the report byte for
byte. Every failure is recorded and excluded rather than aborting the
sweep.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ConfigError, ExperimentConfig
from .diffusion.checkpoint import save_checkpoint
from .diffusion.conditioning import build_conditioning
from .diffusion.schedule import NoiseSchedule
from .diffusion.training import ImageBatchLoader, TrainingDiverged, train_model
from .diffusion.unet import DenoiserModel
from .evaluation.features import ConvFeatureExtractor
from .evaluation.fid import FIDError, per_class_fid
from .evaluation.probe import (
    ProbeError,
    ProbeResult,
    RunAggregate,
    aggregate_probe_results,
    aggregate_runs,
    evaluate_probe,
    select_support,
    train_linear_probe,
)
from .ledger import RunLedger
from .registry import DatasetManifest
from .sampling import (
    PlanError,
    cartesian_fill_plan,
    frequency_matched_plan,
    sample_plan,
    uniform_class_plan,
)
from .splits import CorrelatedTaskSplit, TaskSpec, enumerate_runs, leakage

NO_SYNTH_ARM = "No syn. data"
CLASS_ONLY_ARM = "CLS only"
JOINT_ARM = "MeDi"
SHIFT_ARMS = (NO_SYNTH_ARM, CLASS_ONLY_ARM, JOINT_ARM)
FID_ARMS = (CLASS_ONLY_ARM, JOINT_ARM)

REPORTS_SUBDIR = "reports"
CHECKPOINTS_SUBDIR = "checkpoints"
CONFIG_SNAPSHOT = "config.yaml"
LEDGER_FILE = "ledger.jsonl"


def derive_seed(*parts) -> int:
    """Deterministic child seed from any labeled position in a study."""
    key = "|".join(str(p) for p in parts)
    return int(hashlib.sha256(key.encode()).hexdigest()[:16], 16) % (2**63)


@dataclass
class TrainedGenerator:
    model: DenoiserModel
    schedule: NoiseSchedule
    history: list[dict]
    class_only: bool


def train_generator(manifest: DatasetManifest, image_root: str | Path,
                    config: ExperimentConfig, *, class_only: bool,
                    seed: int, callback=None) -> TrainedGenerator:
    """Train one generator arm on a manifest.

    ``seed`` fixes both the weight initialization and the batch/noise
    stream, so the same call reproduces the same weights.
    """
    mc = config.model.class_only() if class_only else config.model
    spec = build_conditioning(
        manifest.schema, d_t=mc.d_t, d_class=mc.d_class, d_e=mc.d_e,
        attributes=mc.attributes,
    )
    torch.manual_seed(seed)
    model = DenoiserModel(
        spec,
        image_size=mc.image_size,
        in_channels=mc.in_channels,
        base_channels=mc.base_channels,
        channel_mults=mc.channel_mults,
        blocks_per_level=mc.blocks_per_level,
        norm_groups=mc.norm_groups,
    )
    schedule = NoiseSchedule.linear(
        config.schedule.steps, config.schedule.beta_start, config.schedule.beta_end,
    )
    loader = ImageBatchLoader.from_manifest(manifest, image_root, mc.attributes)
    if loader.images.shape[-1] != mc.image_size:
        raise ConfigError(
            f"config expects {mc.image_size}x{mc.image_size} images but the "
            f"manifest decodes to {loader.images.shape[-1]}"
        )
    training = dataclasses.replace(config.training, seed=seed)
    history = train_model(model, loader, schedule, training, callback=callback)
    model.eval()
    return TrainedGenerator(
        model=model, schedule=schedule, history=history, class_only=class_only,
    )


def manifest_features(manifest: DatasetManifest, image_root: str | Path,
                      extractor: ConvFeatureExtractor,
                      ) -> tuple[np.ndarray, list[str], list[str]]:
    """Features plus aligned class labels and sites for every record."""
    loader = ImageBatchLoader.from_manifest(manifest, image_root)
    features = extractor.extract(loader.images)
    labels = [r.class_label for r in manifest.records]
    sites = [r.site for r in manifest.records]
    return features, labels, sites


def _aggregate_payload(agg: RunAggregate) -> dict:
    return {
        "mean": agg.mean,
        "se": agg.se,
        "n_runs": agg.n_runs,
        "formatted": agg.format(),
    }


def _write_report(out_dir: Path, report: dict, table: str,
                  ledger: RunLedger) -> None:
    reports = out_dir / REPORTS_SUBDIR
    reports.mkdir(parents=True, exist_ok=True)
    report_path = reports / "report.json"
    report_path.write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    table_path = reports / "table.txt"
    table_path.write_text(table)
    ledger.record_artifact("report", report_path)
    ledger.record_artifact("table", table_path)


def _snapshot_config(out_dir: Path, config: ExperimentConfig,
                     ledger: RunLedger) -> None:
    path = out_dir / CONFIG_SNAPSHOT
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    ledger.record_artifact("config", path)


# ---------------------------------------------------------------------------
# Generative fidelity study


def format_fid_table(per_class: dict[str, dict[str, RunAggregate]],
                     macro: dict[str, RunAggregate]) -> str:
    """Per-class and macro distances, one column per arm."""
    arms = [a for a in FID_ARMS if a in macro]
    width = max(len("Macro AVG"), *(len(c) for c in per_class or [""])) + 2
    lines = ["".ljust(width) + "".join(a.rjust(18) for a in arms)]
    for cls in sorted(per_class):
        row = cls.ljust(width)
        for arm in arms:
            agg = per_class[cls].get(arm)
            row += (agg.format() if agg else "--").rjust(18)
        lines.append(row)
    row = "Macro AVG".ljust(width)
    for arm in arms:
        row += macro[arm].format().rjust(18)
    lines.append(row)
    return "\n".join(lines) + "\n"


def _save_fid_plot(path: Path, per_class: dict[str, dict[str, RunAggregate]],
                   macro: dict[str, RunAggregate]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    classes = sorted(per_class)
    arms = [a for a in FID_ARMS if a in macro]
    x = np.arange(len(classes))
    bar_width = 0.8 / max(len(arms), 1)
    fig, ax = plt.subplots(figsize=(1.2 * len(classes) + 3, 4))
    colors = {CLASS_ONLY_ARM: "#888888", JOINT_ARM: "#2f6fb2"}
    for i, arm in enumerate(arms):
        heights = [per_class[c][arm].mean if arm in per_class[c] else 0.0
                   for c in classes]
        ax.bar(x + (i - (len(arms) - 1) / 2) * bar_width, heights,
               width=bar_width, label=arm, color=colors.get(arm))
        ax.axhline(macro[arm].mean, linestyle=":", linewidth=1.2,
                   color=colors.get(arm))
    ax.set_xticks(x)
    ax.set_xticklabels(classes)
    ax.set_ylabel("FID")
    ax.set_title("Per-class FID against real data (dotted: macro average)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_fid_study(manifest: DatasetManifest, image_root: str | Path,
                  config: ExperimentConfig, *,
                  reference_manifest: DatasetManifest | None = None,
                  reference_root: str | Path | None = None,
                  out_dir: str | Path | None = None,
                  callback=None) -> dict:
    """Compare class-only and joint generation by per-class FID.

    Per study seed, both arms are trained from scratch with identical
    budgets, then sample frequency-matched sets of ``config.synth_total``
    images (the joint arm matches the class x site joint, the class-only
    arm the class marginal), scored against the reference set. Returns the
    report; with ``out_dir`` also writes report, table, plot, checkpoints,
    and the run ledger.
    """
    reference = reference_manifest if reference_manifest is not None else manifest
    ref_root = reference_root if reference_root is not None else image_root
    extractor = ConvFeatureExtractor(
        widths=config.probe.feature_widths, seed=config.probe.feature_seed,
    )
    ref_features, ref_labels, _ = manifest_features(reference, ref_root, extractor)

    out_path = Path(out_dir) if out_dir is not None else None
    ledger = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        ledger = RunLedger(out_path / LEDGER_FILE)
        _snapshot_config(out_path, config, ledger)

    attributes = config.model.attributes
    seed_rows: list[dict] = []
    failures: list[dict] = []
    per_class_values: dict[str, dict[str, list[float]]] = {}
    macro_values: dict[str, list[float]] = {arm: [] for arm in FID_ARMS}

    for seed in config.study_seeds:
        row: dict = {"seed": seed, "arms": {}}
        for arm in FID_ARMS:
            class_only = arm == CLASS_ONLY_ARM
            try:
                generator = train_generator(
                    manifest, image_root, config, class_only=class_only,
                    seed=derive_seed("train", arm, seed), callback=callback,
                )
                plan = frequency_matched_plan(
                    manifest, config.synth_total,
                    () if class_only else attributes,
                    derive_seed("plan", arm, seed),
                )
                images, labels, _ = sample_plan(
                    generator.model, generator.schedule, plan, manifest.schema,
                    num_sample_steps=config.schedule.sample_steps,
                )
                synth_features = extractor.extract(images)
                fid_report = per_class_fid(
                    ref_features, ref_labels, synth_features, labels,
                )
                arm_payload = {
                    "fid": fid_report.to_dict(),
                    "plan_total": plan.total(),
                    "final_loss": (generator.history[-1]["loss"]
                                   if generator.history else None),
                }
            except (TrainingDiverged, PlanError, FIDError) as exc:
                failures.append({"seed": seed, "arm": arm, "error": str(exc)})
                continue
            row["arms"][arm] = arm_payload
            macro_values[arm].append(fid_report.macro_average)
            for cls, value in fid_report.per_class:
                per_class_values.setdefault(cls, {}).setdefault(arm, []).append(value)
            if out_path is not None:
                ckpt = (out_path / CHECKPOINTS_SUBDIR /
                        f"{'cls' if class_only else 'joint'}_seed{seed}.pt")
                save_checkpoint(
                    ckpt, generator.model, generator.schedule, manifest.schema,
                    step=config.training.steps, extra={"arm": arm, "seed": seed},
                )
                ledger.record_artifact("checkpoint", ckpt, arm=arm, seed=seed)
        if set(row["arms"]) == set(FID_ARMS):
            cls_macro = row["arms"][CLASS_ONLY_ARM]["fid"]["macro_average"]
            joint_macro = row["arms"][JOINT_ARM]["fid"]["macro_average"]
            if joint_macro < cls_macro:
                row["winner"] = JOINT_ARM
            elif cls_macro < joint_macro:
                row["winner"] = CLASS_ONLY_ARM
            else:
                row["winner"] = "tie"
        seed_rows.append(row)

    per_class_agg = {
        cls: {arm: aggregate_runs(vals) for arm, vals in arms.items()}
        for cls, arms in per_class_values.items()
    }
    macro_agg = {arm: aggregate_runs(vals)
                 for arm, vals in macro_values.items() if vals}
    wins = {
        arm: sum(1 for r in seed_rows if r.get("winner") == arm)
        for arm in FID_ARMS
    }

    report = {
        "study": "fid",
        "config": config.to_dict(),
        "reference": {
            "n": len(reference),
            "class_counts": dict(sorted(reference.class_counts().items())),
        },
        "seeds": seed_rows,
        "failures": failures,
        "wins": wins,
        "macro": {arm: _aggregate_payload(agg) for arm, agg in macro_agg.items()},
        "per_class": {
            cls: {arm: _aggregate_payload(agg) for arm, agg in arms.items()}
            for cls, arms in sorted(per_class_agg.items())
        },
    }
    table = format_fid_table(per_class_agg, macro_agg)

    if out_path is not None:
        _write_report(out_path, report, table, ledger)
        if macro_agg:
            plot_path = out_path / REPORTS_SUBDIR / "fid_per_class.png"
            _save_fid_plot(plot_path, per_class_agg, macro_agg)
            ledger.record_artifact("figure", plot_path)
        ledger.append("summary", {"wins": wins,
                                  "n_failures": len(failures)})
    return report


# ---------------------------------------------------------------------------
# Subpopulation-shift study


def format_accuracy_table(
    aggregates: dict[str, dict[str, RunAggregate]],
) -> str:
    """Arm rows against Overall and TSS AVG columns."""
    lines = ["".ljust(14) + "Overall".rjust(16) + "TSS AVG".rjust(16)]
    for arm in SHIFT_ARMS:
        row = arm.ljust(14)
        metrics = aggregates.get(arm, {})
        for key in ("overall", "tss_avg"):
            agg = metrics.get(key)
            row += (agg.format() if agg else "--").rjust(16)
        lines.append(row)
    return "\n".join(lines) + "\n"


def _save_shift_plot(path: Path,
                     aggregates: dict[str, dict[str, RunAggregate]]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = [("overall", "Overall"), ("tss_avg", "TSS AVG")]
    arms = [a for a in SHIFT_ARMS if a in aggregates]
    x = np.arange(len(metrics))
    bar_width = 0.8 / max(len(arms), 1)
    colors = {NO_SYNTH_ARM: "#bbbbbb", CLASS_ONLY_ARM: "#888888",
              JOINT_ARM: "#2f6fb2"}
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, arm in enumerate(arms):
        means, errs = [], []
        for key, _ in metrics:
            agg = aggregates[arm].get(key)
            means.append(agg.mean if agg else 0.0)
            errs.append(agg.se if agg and agg.se is not None else 0.0)
        ax.bar(x + (i - (len(arms) - 1) / 2) * bar_width, means,
               width=bar_width, yerr=errs, capsize=3, label=arm,
               color=colors.get(arm))
    ax.set_xticks(x)
    ax.set_xticklabels([label for _, label in metrics])
    ax.set_ylabel("Balanced accuracy (%)")
    ax.set_title("Probe accuracy on unseen sites")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _synthetic_for_arm(arm: str, generators: dict[str, TrainedGenerator],
                       split: CorrelatedTaskSplit, config: ExperimentConfig,
                       study_seed: int, extractor: ConvFeatureExtractor,
                       ) -> tuple[np.ndarray | None, list[str], int]:
    """Features and labels of the synthetic complement for one arm.

    The no-synthetic arm returns immediately: it must not touch the
    sampler at all. Both generating arms draw one synthetic image per real
    training image. The joint arm fills the Cartesian product of the
    split's classes with the attribute values its real side actually
    carries, so every class gets every value observed in the split.
    """
    if arm == NO_SYNTH_ARM:
        return None, [], 0
    total = len(split.train)
    schema = split.train.schema
    generator = generators[arm]
    if arm == CLASS_ONLY_ARM:
        plan = uniform_class_plan(
            split.classes, total, derive_seed("plan", arm, split.run_id, study_seed),
        )
    else:
        subsets = {}
        for attr in config.model.attributes:
            seen = sorted({
                r.attribute(attr) for r in split.train.records
            } & set(schema.vocab(attr).values))
            if seen:
                subsets[attr] = tuple(seen)
        plan = cartesian_fill_plan(
            schema, total, config.model.attributes,
            derive_seed("plan", arm, split.run_id, study_seed),
            classes=split.classes,
            value_subsets=subsets,
        )
    images, labels, _ = sample_plan(
        generator.model, generator.schedule, plan, schema,
        num_sample_steps=config.schedule.sample_steps,
    )
    return extractor.extract(images), labels, plan.total()


def run_shift_study(train_manifest: DatasetManifest,
                    test_manifest: DatasetManifest,
                    image_root: str | Path, config: ExperimentConfig,
                    task: TaskSpec, *, out_dir: str | Path | None = None,
                    max_runs: int = 100, callback=None) -> dict:
    """Score probe robustness to unseen sites with and without augmentation.

    Every injective class-to-site assignment over the training pool
    becomes one run; each run is repeated across the study seeds and three
    arms. Probes are trained on config.probe.shots real examples per
    class, the generating arms add an equally sized synthetic support on
    top, and all probes are scored on test-manifest sites absent from
    training. Results are aggregated per arm over all (run, seed) pairs;
    failed combinations are recorded and left out.
    """
    test_sites = sorted(test_manifest.sites() - train_manifest.sites())
    if not test_sites:
        raise ConfigError(
            "test manifest has no sites beyond the training pool; "
            "a shift study needs unseen sites to score on"
        )
    runs = enumerate_runs(
        train_manifest, task,
        test_manifest=test_manifest, test_sites=test_sites,
        max_runs=max_runs,
    )
    observed_sites = tuple(sorted(train_manifest.sites()))
    extractor = ConvFeatureExtractor(
        widths=config.probe.feature_widths, seed=config.probe.feature_seed,
    )

    out_path = Path(out_dir) if out_dir is not None else None
    ledger = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        ledger = RunLedger(out_path / LEDGER_FILE)
        _snapshot_config(out_path, config, ledger)

    run_rows: list[dict] = []
    failures: list[dict] = []
    collected: dict[str, list[ProbeResult]] = {arm: [] for arm in SHIFT_ARMS}

    train_feature_cache: dict[str, tuple] = {}
    test_feature_cache: dict[tuple, tuple] = {}

    for study_seed in config.study_seeds:
        generators: dict[str, TrainedGenerator] = {}
        for arm in (CLASS_ONLY_ARM, JOINT_ARM):
            try:
                generators[arm] = train_generator(
                    train_manifest, image_root, config,
                    class_only=arm == CLASS_ONLY_ARM,
                    seed=derive_seed("train", arm, study_seed),
                    callback=callback,
                )
            except TrainingDiverged as exc:
                failures.append({"seed": study_seed, "arm": arm,
                                 "run_id": None, "error": str(exc)})
        if out_path is not None:
            for arm, generator in sorted(generators.items()):
                tag = "cls" if generator.class_only else "joint"
                ckpt = out_path / CHECKPOINTS_SUBDIR / f"{tag}_seed{study_seed}.pt"
                save_checkpoint(
                    ckpt, generator.model, generator.schedule,
                    train_manifest.schema,
                    step=config.training.steps,
                    extra={"arm": arm, "seed": study_seed},
                )
                ledger.record_artifact("checkpoint", ckpt, arm=arm,
                                       seed=study_seed)

        for split in runs:
            leaked = leakage(split, train_manifest.sites())
            if leaked:
                failures.append({
                    "seed": study_seed, "arm": None, "run_id": split.run_id,
                    "error": f"test records leak training sites {sorted(leaked)}",
                })
                continue

            if split.run_id not in train_feature_cache:
                feats, labels, _ = manifest_features(
                    split.train, image_root, extractor,
                )
                train_feature_cache[split.run_id] = (feats, labels)
            real_features, real_labels = train_feature_cache[split.run_id]

            test_key = tuple(r.patch_id for r in split.test.records)
            if test_key not in test_feature_cache:
                test_feature_cache[test_key] = manifest_features(
                    split.test, image_root, extractor,
                )
            test_features, test_labels, test_site_list = \
                test_feature_cache[test_key]

            for arm in SHIFT_ARMS:
                if arm != NO_SYNTH_ARM and arm not in generators:
                    failures.append({
                        "seed": study_seed, "arm": arm, "run_id": split.run_id,
                        "error": "generator unavailable for this seed",
                    })
                    continue
                try:
                    synth_features, synth_labels, n_synth = _synthetic_for_arm(
                        arm, generators, split, config, study_seed, extractor,
                    )
                    # Every arm trains on the same seeded real support;
                    # generating arms stack a synthetic support of equal
                    # size per class on top of it.
                    real_idx = select_support(
                        real_labels, config.probe.shots,
                        derive_seed("support", split.run_id, study_seed),
                    )
                    pool_features = real_features[real_idx]
                    pool_labels = [real_labels[i] for i in real_idx]
                    if synth_features is not None:
                        synth_idx = select_support(
                            synth_labels, config.probe.shots,
                            derive_seed("support", arm, split.run_id,
                                        study_seed),
                        )
                        pool_features = np.concatenate(
                            [pool_features, synth_features[synth_idx]]
                        )
                        pool_labels += [synth_labels[i] for i in synth_idx]
                    probe = train_linear_probe(
                        pool_features, pool_labels,
                        C=config.probe.C, tol=config.probe.tol,
                        max_iter=config.probe.max_iter,
                    )
                    result = evaluate_probe(
                        probe, test_features, test_labels,
                        sites=test_site_list, run_id=split.run_id,
                    )
                except (ProbeError, PlanError, TrainingDiverged) as exc:
                    failures.append({"seed": study_seed, "arm": arm,
                                     "run_id": split.run_id,
                                     "error": str(exc)})
                    continue
                collected[arm].append(result)
                run_rows.append({
                    "run_id": split.run_id,
                    "assignment": dict(sorted(split.assignment.items())),
                    "seed": study_seed,
                    "arm": arm,
                    "n_real_train": len(split.train),
                    "n_synthetic": n_synth,
                    "result": result.to_dict(),
                })

    aggregates = {
        arm: aggregate_probe_results(results)
        for arm, results in collected.items() if results
    }
    report = {
        "study": "shift",
        "task": task.name,
        "classes": sorted(task.classes),
        "train_sites": list(observed_sites),
        "test_sites": test_sites,
        "n_train_pool": len(train_manifest),
        "config": config.to_dict(),
        "runs": run_rows,
        "failures": failures,
        "excluded_note": (
            f"{len(failures)} arm-run combination(s) failed and were "
            "excluded from the aggregates" if failures else ""
        ),
        "aggregates": {
            arm: {key: _aggregate_payload(agg) for key, agg in metrics.items()}
            for arm, metrics in aggregates.items()
        },
    }
    table = format_accuracy_table(aggregates)

    if out_path is not None:
        _write_report(out_path, report, table, ledger)
        if aggregates:
            plot_path = out_path / REPORTS_SUBDIR / "accuracy.png"
            _save_shift_plot(plot_path, aggregates)
            ledger.record_artifact("figure", plot_path)
        ledger.append("summary", {
            "arms": {arm: metrics["overall"].n_runs
                     for arm, metrics in aggregates.items()},
            "n_failures": len(failures),
        })
    return report


__all__ = [
    "CLASS_ONLY_ARM",
    "FID_ARMS",
    "JOINT_ARM",
    "NO_SYNTH_ARM",
    "SHIFT_ARMS",
    "TrainedGenerator",
    "derive_seed",
    "format_accuracy_table",
    "format_fid_table",
    "manifest_features",
    "run_fid_study",
    "run_shift_study",
    "train_generator",
]
