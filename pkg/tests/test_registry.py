import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medi.registry import (
    UNKNOWN,
    CoverageMatrix,
    DatasetManifest,
    ManifestError,
    MetadataSchema,
    PatchRecord,
    Vocabulary,
    coverage_matrix,
    load_manifest,
    manifest_from_records,
    summarize,
    write_manifest,
)


def rec(pid, cls, site, patient="p0", race=UNKNOWN, gender=UNKNOWN, age=None,
        synthetic=False):
    return PatchRecord(
        patch_id=pid, image_ref=f"{pid}.png", patient_id=patient,
        class_label=cls, site=site, race=race, gender=gender, age=age,
        synthetic=synthetic,
    )


class TestVocabulary:
    def test_sorted_with_unknown_last(self):
        vocab = Vocabulary.from_values(["b", UNKNOWN, "a", "c"])
        assert vocab.values == ("a", "b", "c", UNKNOWN)

    def test_no_unknown(self):
        vocab = Vocabulary.from_values(["z", "a"])
        assert vocab.values == ("a", "z")

    def test_id_round_trip(self):
        vocab = Vocabulary.from_values(["x", "y", UNKNOWN])
        for value in vocab:
            assert vocab.value_of(vocab.id_of(value)) == value

    def test_unknown_value_raises(self):
        vocab = Vocabulary.from_values(["x"])
        with pytest.raises(ManifestError, match="nope"):
            vocab.id_of("nope")

    def test_duplicates_collapse(self):
        vocab = Vocabulary.from_values(["a", "a", "b"])
        assert len(vocab) == 2

    @given(st.sets(st.text(min_size=1, max_size=8), min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_ids_are_dense_and_stable(self, values):
        vocab = Vocabulary.from_values(values)
        ids = [vocab.id_of(v) for v in vocab]
        assert ids == list(range(len(vocab)))
        again = Vocabulary.from_values(list(values)[::-1])
        assert again.values == vocab.values


class TestPatchRecord:
    def test_requires_core_fields(self):
        with pytest.raises(ManifestError):
            rec("", "c0", "s0")
        with pytest.raises(ManifestError):
            rec("p", "", "s0")
        with pytest.raises(ManifestError):
            rec("p", "c0", "")

    def test_attribute_accessor(self):
        r = rec("p", "c0", "s0", race="white", gender="f")
        assert r.attribute("class") == "c0"
        assert r.attribute("site") == "s0"
        assert r.attribute("race") == "white"
        assert r.attribute("gender") == "f"
        with pytest.raises(ManifestError):
            r.attribute("age")


class TestSchema:
    def test_from_records(self):
        records = [
            rec("p1", "c1", "s2"),
            rec("p2", "c0", "s1", race="asian"),
        ]
        schema = MetadataSchema.from_records(records)
        assert schema.class_vocab.values == ("c0", "c1")
        assert schema.vocab("site").values == ("s1", "s2")
        assert schema.vocab("race").values == ("asian", UNKNOWN)
        assert schema.cardinalities() == {
            "class": 2, "site": 2, "race": 2, "gender": 1,
        }

    def test_fingerprint_is_content_addressed(self):
        a = MetadataSchema.from_records([rec("p1", "c0", "s0")])
        b = MetadataSchema.from_records([rec("qq", "c0", "s0", patient="p9")])
        c = MetadataSchema.from_records([rec("p1", "c0", "s1")])
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()
        assert len(a.fingerprint()) == 16


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        records = [
            rec("a", "c0", "s0", patient="p1", race="white", gender="m", age=61),
            rec("b", "c1", "s1", patient="p2"),
            rec("c", "c1", "s0", patient="p2", synthetic=True),
        ]
        manifest = manifest_from_records(records)
        path = tmp_path / "m.csv"
        write_manifest(manifest, path)
        again = load_manifest(path)
        assert again.records == manifest.records
        assert again.schema == manifest.schema

    def test_round_trip_without_synthetic_column(self, tmp_path):
        manifest = manifest_from_records([rec("a", "c0", "s0")])
        path = tmp_path / "m.csv"
        write_manifest(manifest, path)
        header = path.read_text().splitlines()[0]
        assert "synthetic" not in header
        assert load_manifest(path).records == manifest.records

    def test_empty_metadata_maps_to_unknown(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patch_id,image_ref,patient_id,class,site,race,gender,age\n"
            "a,a.png,p1,c0,s0,,,\n"
        )
        manifest = load_manifest(path)
        record = manifest.records[0]
        assert record.race == UNKNOWN
        assert record.gender == UNKNOWN
        assert record.age is None

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("patch_id,image_ref,patient_id,class,site,race,gender\na,a.png,p,c,s,r,g\n")
        with pytest.raises(ManifestError, match="age"):
            load_manifest(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "absent.csv")

    def test_bad_age_names_line(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patch_id,image_ref,patient_id,class,site,race,gender,age\n"
            "a,a.png,p1,c0,s0,,,61\n"
            "b,b.png,p1,c0,s0,,,sixty\n"
        )
        with pytest.raises(ManifestError, match="line 3"):
            load_manifest(path)

    def test_duplicate_patch_id_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patch_id,image_ref,patient_id,class,site,race,gender,age\n"
            "a,a.png,p1,c0,s0,,,\n"
            "a,a2.png,p1,c0,s0,,,\n"
        )
        with pytest.raises(ManifestError, match="duplicate patch_id 'a'"):
            load_manifest(path)

    def test_extra_fields_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patch_id,image_ref,patient_id,class,site,race,gender,age\n"
            "a,a.png,p1,c0,s0,,,,surplus\n"
        )
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(path)

    def test_synthetic_flag_parsing(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patch_id,image_ref,patient_id,class,site,race,gender,age,synthetic\n"
            "a,a.png,p1,c0,s0,,,,true\n"
            "b,b.png,p1,c0,s0,,,,0\n"
            "c,c.png,p1,c0,s0,,,,\n"
        )
        flags = [r.synthetic for r in load_manifest(path).records]
        assert flags == [True, False, False]


class TestManifest:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ManifestError, match="duplicate"):
            manifest_from_records([rec("a", "c0", "s0"), rec("a", "c1", "s1")])

    def test_restrict_keeps_schema(self):
        manifest = manifest_from_records([rec("a", "c0", "s0"), rec("b", "c1", "s1")])
        sub = manifest.restrict(lambda r: r.class_label == "c0")
        assert len(sub) == 1
        assert sub.schema is manifest.schema

    def test_class_counts_and_sites(self):
        manifest = manifest_from_records([
            rec("a", "c0", "s0"), rec("b", "c0", "s1"), rec("c", "c1", "s1"),
        ])
        assert manifest.class_counts() == {"c0": 2, "c1": 1}
        assert manifest.sites() == {"s0", "s1"}


class TestCoverage:
    def test_hand_counted_matrix(self):
        manifest = manifest_from_records([
            rec("a", "c0", "s0"),
            rec("b", "c0", "s0"),
            rec("c", "c0", "s1"),
            rec("d", "c1", "s1"),
        ])
        cov = coverage_matrix(manifest, "site")
        assert cov.classes == ("c0", "c1")
        assert cov.values == ("s0", "s1")
        assert cov.counts.tolist() == [[2, 1], [0, 1]]
        assert cov.total() == 4
        assert cov.cell("c1", "s0") == 0

    def test_single_cell(self):
        manifest = manifest_from_records([rec("a", "c0", "s0")])
        cov = coverage_matrix(manifest, "site")
        assert cov.counts.tolist() == [[1]]

    def test_unknown_attribute_rejected(self):
        manifest = manifest_from_records([rec("a", "c0", "s0")])
        with pytest.raises(ManifestError, match="age"):
            coverage_matrix(manifest, "age")

    def test_csv_dump(self, tmp_path):
        manifest = manifest_from_records([rec("a", "c0", "s0"), rec("b", "c1", "s0")])
        cov = coverage_matrix(manifest, "site")
        out = tmp_path / "cov.csv"
        cov.write_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "class,s0"
        assert lines[1] == "c0,1"
        assert lines[2] == "c1,1"

    def test_zero_sum_preserved(self):
        # Column sums must reproduce per-value totals exactly.
        records = [rec(f"p{i}", f"c{i % 3}", f"s{i % 2}") for i in range(20)]
        manifest = manifest_from_records(records)
        cov = coverage_matrix(manifest, "site")
        per_site = {"s0": 10, "s1": 10}
        for j, site in enumerate(cov.values):
            assert cov.counts[:, j].sum() == per_site[site]


class TestSummarize:
    def test_toy_counts(self):
        manifest = manifest_from_records([
            rec("a", "c0", "s0", patient="p1"),
            rec("b", "c0", "s1", patient="p1"),
            rec("c", "c1", "s1", patient="p2"),
        ])
        stats = summarize(manifest)
        assert stats.n_patches == 3
        assert stats.n_patients == 2
        assert stats.per_class == {"c0": 2, "c1": 1}
        assert stats.cardinalities["site"] == 2
        payload = stats.to_dict()
        assert payload["n_patches"] == 3

    def test_empty_manifest(self):
        manifest = manifest_from_records([])
        stats = summarize(manifest)
        assert stats.n_patches == 0
        assert stats.n_patients == 0
