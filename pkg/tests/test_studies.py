import json

import pytest

import medi.studies as studies
from medi.config import ConfigError
from medi.evaluation.probe import RunAggregate
from medi.ledger import RunLedger
from medi.splits import TaskSpec, enumerate_runs
from medi.studies import (
    CLASS_ONLY_ARM,
    JOINT_ARM,
    NO_SYNTH_ARM,
    SHIFT_ARMS,
    derive_seed,
    format_accuracy_table,
    format_fid_table,
    run_fid_study,
    run_shift_study,
    train_generator,
)


@pytest.fixture(scope="module")
def shift_inputs(micro_toy):
    manifest, image_root = micro_toy
    train = manifest.restrict(lambda r: r.site in {"s0", "s1"})
    test = manifest.restrict(lambda r: r.site == "s2")
    task = TaskSpec(name="toy-shift", classes=("c0", "c1"))
    return train, test, image_root, task


@pytest.fixture(scope="module")
def shift_run(shift_inputs, micro_config, tmp_path_factory):
    train, test, image_root, task = shift_inputs
    out = tmp_path_factory.mktemp("shift_run")
    report = run_shift_study(train, test, image_root, micro_config, task,
                             out_dir=out)
    return report, out


@pytest.fixture(scope="module")
def fid_run(micro_toy, micro_config, tmp_path_factory):
    manifest, image_root = micro_toy
    out = tmp_path_factory.mktemp("fid_run")
    report = run_fid_study(manifest, image_root, micro_config, out_dir=out)
    return report, out


class TestDeriveSeed:
    def test_stable(self):
        assert derive_seed("train", "a", 0) == derive_seed("train", "a", 0)

    def test_position_sensitive(self):
        seeds = {
            derive_seed("train", "a", 0),
            derive_seed("train", "a", 1),
            derive_seed("train", "b", 0),
            derive_seed("plan", "a", 0),
        }
        assert len(seeds) == 4

    def test_range(self):
        assert 0 <= derive_seed("x") < 2**63


class TestShiftStudy:
    def test_every_arm_and_run_scored(self, shift_run, shift_inputs):
        report, _ = shift_run
        train, test, _, task = shift_inputs
        n_runs = len(enumerate_runs(train, task, test_manifest=test,
                                    test_sites={"s2"}))
        assert n_runs == 2  # two injective class-to-site assignments
        assert len(report["runs"]) == n_runs * 1 * len(SHIFT_ARMS)
        assert report["failures"] == []
        assert set(report["aggregates"]) == set(SHIFT_ARMS)
        for arm in SHIFT_ARMS:
            assert set(report["aggregates"][arm]) == {"overall", "tss_avg"}

    def test_one_to_one_augmentation(self, shift_run):
        report, _ = shift_run
        for row in report["runs"]:
            if row["arm"] == NO_SYNTH_ARM:
                assert row["n_synthetic"] == 0
            else:
                assert row["n_synthetic"] == row["n_real_train"]

    def test_sites_and_classes_reported(self, shift_run):
        report, _ = shift_run
        assert report["train_sites"] == ["s0", "s1"]
        assert report["test_sites"] == ["s2"]
        assert report["classes"] == ["c0", "c1"]

    def test_artifacts_written_and_ledgered(self, shift_run):
        _, out = shift_run
        assert (out / "reports" / "report.json").exists()
        assert (out / "reports" / "table.txt").exists()
        assert (out / "reports" / "accuracy.png").exists()
        assert (out / "config.yaml").exists()
        assert (out / "checkpoints" / "cls_seed0.pt").exists()
        assert (out / "checkpoints" / "joint_seed0.pt").exists()
        ledger = RunLedger(out / "ledger.jsonl")
        assert ledger.verify()
        assert ledger.artifact_mismatches() == []

    def test_table_lists_all_arms(self, shift_run):
        _, out = shift_run
        table = (out / "reports" / "table.txt").read_text()
        for arm in SHIFT_ARMS:
            assert arm in table
        assert "Overall" in table and "TSS AVG" in table

    def test_rerun_is_byte_identical(self, shift_inputs, micro_config,
                                     shift_run, tmp_path):
        train, test, image_root, task = shift_inputs
        _, first_out = shift_run
        run_shift_study(train, test, image_root, micro_config, task,
                        out_dir=tmp_path)
        for name in ("reports/report.json", "reports/table.txt"):
            assert (tmp_path / name).read_bytes() == \
                (first_out / name).read_bytes()

    def test_no_synth_arm_never_samples(self, shift_inputs, micro_config,
                                        monkeypatch, tmp_path):
        train, test, image_root, task = shift_inputs
        calls = []
        real_sample_plan = studies.sample_plan

        def counting(*args, **kwargs):
            calls.append(args[2].attributes)
            return real_sample_plan(*args, **kwargs)

        monkeypatch.setattr(studies, "sample_plan", counting)
        run_shift_study(train, test, image_root, micro_config, task,
                        out_dir=tmp_path)
        # 2 runs x 1 seed x 2 generating arms; the no-synthetic arm adds none.
        assert len(calls) == 4
        assert sorted(set(calls)) == [(), ("site",)]

    def test_overlapping_test_sites_rejected(self, shift_inputs, micro_config):
        train, _, image_root, task = shift_inputs
        with pytest.raises(ConfigError, match="unseen sites"):
            run_shift_study(train, train, image_root, micro_config, task)


class TestFidStudy:
    def test_arms_share_image_counts(self, fid_run, micro_config):
        report, _ = fid_run
        for row in report["seeds"]:
            totals = {arm: row["arms"][arm]["plan_total"]
                      for arm in row["arms"]}
            assert set(totals.values()) == {micro_config.synth_total}

    def test_report_covers_classes(self, fid_run):
        report, _ = fid_run
        assert set(report["per_class"]) == {"c0", "c1"}
        assert set(report["macro"]) == {CLASS_ONLY_ARM, JOINT_ARM}
        assert report["failures"] == []

    def test_winner_consistent_with_macros(self, fid_run):
        report, _ = fid_run
        for row in report["seeds"]:
            cls_macro = row["arms"][CLASS_ONLY_ARM]["fid"]["macro_average"]
            joint_macro = row["arms"][JOINT_ARM]["fid"]["macro_average"]
            want = (JOINT_ARM if joint_macro < cls_macro
                    else CLASS_ONLY_ARM if cls_macro < joint_macro else "tie")
            assert row["winner"] == want

    def test_artifacts_and_ledger(self, fid_run):
        _, out = fid_run
        assert (out / "reports" / "fid_per_class.png").exists()
        table = (out / "reports" / "table.txt").read_text()
        assert "Macro AVG" in table
        ledger = RunLedger(out / "ledger.jsonl")
        assert ledger.verify()
        assert ledger.artifact_mismatches() == []

    def test_report_json_parses(self, fid_run):
        _, out = fid_run
        payload = json.loads((out / "reports" / "report.json").read_text())
        assert payload["study"] == "fid"


class TestHelpers:
    def test_accuracy_table_missing_arm(self):
        aggregates = {
            NO_SYNTH_ARM: {
                "overall": RunAggregate(50.0, 1.0, 3),
                "tss_avg": RunAggregate(48.0, 2.0, 3),
            },
        }
        table = format_accuracy_table(aggregates)
        lines = table.splitlines()
        assert lines[1].startswith(NO_SYNTH_ARM)
        assert "50.00 ± 1.00" in lines[1]
        assert lines[2].endswith("--")

    def test_fid_table_alignment(self):
        agg = RunAggregate(1.25, None, 1)
        table = format_fid_table(
            {"c0": {CLASS_ONLY_ARM: agg, JOINT_ARM: agg}},
            {CLASS_ONLY_ARM: agg, JOINT_ARM: agg},
        )
        lines = table.splitlines()
        assert len({len(line) for line in lines}) == 1

    def test_generator_rejects_size_mismatch(self, micro_toy, micro_config):
        import dataclasses

        manifest, image_root = micro_toy
        config = dataclasses.replace(
            micro_config,
            model=dataclasses.replace(micro_config.model, image_size=32),
        )
        with pytest.raises(ConfigError, match="16"):
            train_generator(manifest, image_root, config, class_only=True,
                            seed=0)

    def test_no_synth_arm_is_samplerless(self, shift_inputs, micro_config):
        train, test, image_root, task = shift_inputs
        split = enumerate_runs(train, task, test_manifest=test,
                               test_sites={"s2"})[0]
        features, labels, n = studies._synthetic_for_arm(
            NO_SYNTH_ARM, {}, split, micro_config, 0, None,
        )
        assert features is None and labels == [] and n == 0
