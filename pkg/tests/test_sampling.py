import json
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from medi.diffusion.conditioning import ConditioningSpec
from medi.diffusion.schedule import NoiseSchedule
from medi.diffusion.unet import DenoiserModel
from medi.registry import PatchRecord, UNKNOWN, load_manifest, manifest_from_records
from medi.sampling import (
    PlanEntry,
    sample_plan,
    PlanError,
    SamplingPlan,
    largest_remainder,
    cartesian_fill_plan,
    execute_plan,
    frequency_matched_plan,
    image_seed,
    uniform_class_plan,
)


def rec(pid, cls, site, race=UNKNOWN):
    return PatchRecord(patch_id=pid, image_ref=f"{pid}.png", patient_id="pt",
                       class_label=cls, site=site, race=race)


class TestLargestRemainder:
    def test_hand_example(self):
        # Shares 3:1 of 8 -> 6 and 2 exactly.
        assert largest_remainder(["a", "b"], [3.0, 1.0], 8) == [6, 2]

    def test_remainder_goes_to_largest_fraction(self):
        # Exact shares 3.6 / 2.4: the extra unit lands on the .6.
        assert largest_remainder(["a", "b"], [3.0, 2.0], 6) == [4, 2]

    def test_tie_breaks_by_key(self):
        # Equal fractions: earliest key wins the remainder.
        assert largest_remainder(["a", "b"], [1.0, 1.0], 3) == [2, 1]
        assert largest_remainder(["b", "a"], [1.0, 1.0], 3) == [1, 2]

    def test_zero_weights_rejected(self):
        with pytest.raises(PlanError):
            largest_remainder(["a"], [0.0], 5)

    @given(
        weights=st.lists(st.integers(0, 50), min_size=1, max_size=12).filter(
            lambda w: sum(w) > 0
        ),
        total=st.integers(1, 500),
    )
    @settings(max_examples=100, deadline=None)
    def test_allocation_exactness(self, weights, total):
        keys = [f"k{i:02d}" for i in range(len(weights))]
        counts = largest_remainder(keys, [float(w) for w in weights], total)
        assert sum(counts) == total
        assert all(c >= 0 for c in counts)
        for w, c in zip(weights, counts):
            exact = total * w / sum(weights)
            assert math.floor(exact) <= c <= math.ceil(exact)


class TestPlanConstructors:
    def make_manifest(self):
        records = []
        n = 0
        # Joint counts: (c0,s0)=6, (c0,s1)=2, (c1,s1)=4.
        for cls, site, count in [("c0", "s0", 6), ("c0", "s1", 2), ("c1", "s1", 4)]:
            for _ in range(count):
                records.append(rec(f"p{n}", cls, site))
                n += 1
        return manifest_from_records(records)

    def test_frequency_matched_joint(self):
        plan = frequency_matched_plan(self.make_manifest(), total=6,
                                      attributes=("site",), seed=0)
        cells = {(e.class_label, e.values): e.count for e in plan.entries}
        assert cells == {("c0", ("s0",)): 3, ("c0", ("s1",)): 1, ("c1", ("s1",)): 2}
        assert plan.total() == 6

    def test_frequency_matched_class_marginal(self):
        plan = frequency_matched_plan(self.make_manifest(), total=3,
                                      attributes=(), seed=0)
        cells = {e.class_label: e.count for e in plan.entries}
        assert cells == {"c0": 2, "c1": 1}
        assert plan.attributes == ()

    def test_unobserved_cells_absent(self):
        plan = frequency_matched_plan(self.make_manifest(), total=12,
                                      attributes=("site",), seed=0)
        assert ("c1", ("s0",)) not in {(e.class_label, e.values)
                                       for e in plan.entries}

    def test_uniform_class_plan(self):
        plan = uniform_class_plan(["c2", "c0", "c1"], total=10, seed=1)
        counts = {e.class_label: e.count for e in plan.entries}
        assert counts == {"c0": 4, "c1": 3, "c2": 3}

    def test_cartesian_fill_covers_empty_cells(self):
        manifest = self.make_manifest()
        plan = cartesian_fill_plan(manifest.schema, total=8,
                                   attributes=("site",), seed=0)
        cells = {(e.class_label, e.values): e.count for e in plan.entries}
        # (c1, s0) never occurs in the data but is planned anyway.
        assert cells[("c1", ("s0",))] == 2
        assert len(cells) == 4
        assert plan.total() == 8

    def test_cartesian_fill_near_uniform_with_remainder(self):
        manifest = self.make_manifest()
        plan = cartesian_fill_plan(manifest.schema, total=10,
                                   attributes=("site",), seed=0)
        counts = sorted(e.count for e in plan.entries)
        assert counts == [2, 2, 3, 3]
        assert plan.total() == 10

    def test_cartesian_fill_keeps_zero_cells_explicit(self):
        manifest = self.make_manifest()
        plan = cartesian_fill_plan(manifest.schema, total=2,
                                   attributes=("site",), seed=0)
        assert len(plan.entries) == 4
        assert sorted(e.count for e in plan.entries) == [0, 0, 1, 1]

    def test_cartesian_fill_skips_unknown_by_default(self):
        manifest = manifest_from_records([
            rec("a", "c0", "s0", race="r0"), rec("b", "c0", "s1"),
        ])
        plan = cartesian_fill_plan(manifest.schema, total=4,
                                   attributes=("race",), seed=0)
        assert all(e.values != (UNKNOWN,) for e in plan.entries)
        wide = cartesian_fill_plan(manifest.schema, total=4,
                                   attributes=("race",), seed=0,
                                   include_unknown=True)
        assert len(wide.entries) == 2 * len(plan.entries)

    def test_cartesian_fill_cap(self):
        manifest = self.make_manifest()
        with pytest.raises(PlanError, match="cap"):
            cartesian_fill_plan(manifest.schema, total=400,
                                attributes=("site",), seed=0, cap=10)

    def test_invalid_totals(self):
        manifest = self.make_manifest()
        with pytest.raises(PlanError):
            frequency_matched_plan(manifest, total=0, attributes=(), seed=0)
        with pytest.raises(PlanError):
            uniform_class_plan(["a"], total=-1, seed=0)
        with pytest.raises(PlanError):
            cartesian_fill_plan(manifest.schema, total=0,
                                attributes=("site",), seed=0)


class TestPlanStructure:
    def test_round_trip(self):
        plan = SamplingPlan(
            attributes=("site",),
            entries=(PlanEntry("c0", ("s0",), 3), PlanEntry("c1", ("s1",), 1)),
            seed=42,
        )
        again = SamplingPlan.from_dict(json.loads(json.dumps(plan.to_dict())))
        assert again == plan

    def test_duplicate_cells_rejected(self):
        with pytest.raises(PlanError, match="repeats"):
            SamplingPlan(
                attributes=(),
                entries=(PlanEntry("c0", (), 1), PlanEntry("c0", (), 2)),
                seed=0,
            )

    def test_value_arity_checked(self):
        with pytest.raises(PlanError):
            SamplingPlan(attributes=("site",),
                         entries=(PlanEntry("c0", (), 1),), seed=0)

    def test_negative_counts_rejected(self):
        with pytest.raises(PlanError):
            PlanEntry("c0", (), -1)
        assert PlanEntry("c0", (), 0).count == 0


class TestImageSeed:
    def test_deterministic_and_distinct(self):
        a = image_seed(1, "c0", ("s0",), 0)
        assert a == image_seed(1, "c0", ("s0",), 0)
        others = {
            image_seed(1, "c0", ("s0",), 1),
            image_seed(1, "c0", ("s1",), 0),
            image_seed(1, "c1", ("s0",), 0),
            image_seed(2, "c0", ("s0",), 0),
        }
        assert a not in others
        assert len(others) == 4

    def test_fits_torch_seed_range(self):
        for i in range(50):
            assert 0 <= image_seed(0, "c", ("v",), i) < 2**63


class TestExecutePlan:
    def setup_model(self):
        manifest = manifest_from_records([
            rec("a", "c0", "s0"), rec("b", "c1", "s1"),
        ])
        schema = manifest.schema
        spec = ConditioningSpec(d_t=8, d_class=4, d_e=4, n_classes=2,
                                attributes=("site",), cardinalities=(2,))
        model = DenoiserModel(spec, image_size=8, base_channels=4,
                              channel_mults=(1,), norm_groups=4)
        with torch.no_grad():
            model.out_conv.weight.normal_(0, 0.05)
        schedule = NoiseSchedule.linear(10)
        return model, schedule, schema

    def make_plan(self, seed=5):
        return SamplingPlan(
            attributes=("site",),
            entries=(PlanEntry("c0", ("s0",), 3), PlanEntry("c1", ("s1",), 2)),
            seed=seed,
        )

    def test_outputs_and_manifest(self, tmp_path):
        model, schedule, schema = self.setup_model()
        manifest = execute_plan(model, schedule, self.make_plan(), schema,
                                tmp_path, num_sample_steps=4, batch_size=2)
        assert len(manifest) == 5
        assert all(r.synthetic for r in manifest.records)
        assert all((tmp_path / "images" / r.image_ref).exists()
                   for r in manifest.records)
        reloaded = load_manifest(tmp_path / "manifest.csv")
        assert len(reloaded) == 5
        assert {r.class_label for r in reloaded.records} == {"c0", "c1"}
        plan_payload = json.loads((tmp_path / "plan.json").read_text())
        assert SamplingPlan.from_dict(plan_payload) == self.make_plan()

    def test_batch_size_does_not_change_pixels(self, tmp_path):
        model, schedule, schema = self.setup_model()
        execute_plan(model, schedule, self.make_plan(), schema,
                     tmp_path / "one", num_sample_steps=4, batch_size=1)
        execute_plan(model, schedule, self.make_plan(), schema,
                     tmp_path / "many", num_sample_steps=4, batch_size=64)
        for sub in sorted((tmp_path / "one" / "images").iterdir()):
            other = tmp_path / "many" / "images" / sub.name
            assert sub.read_bytes() == other.read_bytes()

    def test_seed_changes_pixels(self, tmp_path):
        model, schedule, schema = self.setup_model()
        execute_plan(model, schedule, self.make_plan(seed=5), schema,
                     tmp_path / "a", num_sample_steps=4)
        execute_plan(model, schedule, self.make_plan(seed=6), schema,
                     tmp_path / "b", num_sample_steps=4)
        a = sorted((tmp_path / "a" / "images").iterdir())
        b = sorted((tmp_path / "b" / "images").iterdir())
        assert any(x.read_bytes() != y.read_bytes() for x, y in zip(a, b))

    def test_resume_skips_existing(self, tmp_path):
        model, schedule, schema = self.setup_model()
        plan = self.make_plan()
        execute_plan(model, schedule, plan, schema, tmp_path,
                     num_sample_steps=4)
        target = next((tmp_path / "images").iterdir())
        marker = b"sentinel-not-a-real-png"
        target.write_bytes(marker)
        manifest = execute_plan(model, schedule, plan, schema, tmp_path,
                                num_sample_steps=4, resume=True)
        assert target.read_bytes() == marker  # untouched
        assert len(manifest) == 5

    def test_unknown_attribute_rejected_early(self, tmp_path):
        model, schedule, schema = self.setup_model()
        plan = SamplingPlan(attributes=("flavor",),
                            entries=(PlanEntry("c0", ("x",), 1),), seed=0)
        with pytest.raises(Exception, match="flavor"):
            execute_plan(model, schedule, plan, schema, tmp_path)

    def test_in_memory_sampling_matches_disk(self, tmp_path):
        import numpy as np
        from PIL import Image
        from medi.diffusion.ddim import to_uint8

        model, schedule, schema = self.setup_model()
        plan = self.make_plan()
        manifest = execute_plan(model, schedule, plan, schema, tmp_path,
                                num_sample_steps=4, batch_size=2)
        images, labels, values = sample_plan(model, schedule, plan, schema,
                                             num_sample_steps=4, batch_size=3)
        assert labels == ["c0"] * 3 + ["c1"] * 2
        assert values == [("s0",)] * 3 + [("s1",)] * 2
        as_uint8 = to_uint8(images).numpy()
        for record, pixel in zip(manifest.records, as_uint8):
            with Image.open(tmp_path / "images" / record.image_ref) as img:
                assert np.array_equal(np.asarray(img), pixel)
