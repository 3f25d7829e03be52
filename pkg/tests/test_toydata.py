import numpy as np
import pytest

from medi.registry import load_manifest
from medi.toydata import (
    ToyDataError,
    ToyDatasetSpec,
    cell_counts,
    generate_toy_dataset,
    render_patch,
    shape_mask,
    site_tint,
)


class TestSpecValidation:
    def test_bounds(self):
        with pytest.raises(ToyDataError):
            ToyDatasetSpec(n_classes=9, n_sites=2, per_class=10)
        with pytest.raises(ToyDataError):
            ToyDatasetSpec(n_classes=2, n_sites=0, per_class=10)
        with pytest.raises(ToyDataError):
            ToyDatasetSpec(n_classes=2, n_sites=2, per_class=10, correlation=1.5)
        with pytest.raises(ToyDataError):
            ToyDatasetSpec(n_classes=2, n_sites=2, per_class=10, image_size=4)


class TestCellCounts:
    def test_uniform_correlation_zero(self):
        spec = ToyDatasetSpec(n_classes=2, n_sites=4, per_class=40,
                              correlation=0.0)
        counts = cell_counts(spec)
        assert counts.tolist() == [[10, 10, 10, 10], [10, 10, 10, 10]]

    def test_full_correlation_concentrates(self):
        spec = ToyDatasetSpec(n_classes=2, n_sites=4, per_class=40,
                              correlation=1.0)
        counts = cell_counts(spec)
        assert counts[0].tolist() == [40, 0, 0, 0]
        assert counts[1].tolist() == [0, 40, 0, 0]

    def test_partial_correlation_recomputed(self):
        # corr 0.6, 4 sites, 100 per class: preferred gets 0.6 + 0.1 = 70,
        # the rest 10 each.
        spec = ToyDatasetSpec(n_classes=3, n_sites=4, per_class=100,
                              correlation=0.6)
        counts = cell_counts(spec)
        assert counts[0].tolist() == [70, 10, 10, 10]
        assert counts[1].tolist() == [10, 70, 10, 10]
        assert counts[2].tolist() == [10, 10, 70, 10]

    def test_rows_always_sum_to_per_class(self):
        for corr in [0.0, 0.17, 0.5, 0.83, 1.0]:
            spec = ToyDatasetSpec(n_classes=4, n_sites=3, per_class=37,
                                  correlation=corr)
            assert cell_counts(spec).sum(axis=1).tolist() == [37] * 4

    def test_preferred_site_wraps(self):
        spec = ToyDatasetSpec(n_classes=4, n_sites=2, per_class=10,
                              correlation=1.0)
        counts = cell_counts(spec)
        # Classes 2 and 3 wrap back onto sites 0 and 1.
        assert counts[2].tolist() == [10, 0]
        assert counts[3].tolist() == [0, 10]


class TestTints:
    def test_distinct_per_site(self):
        tints = [tuple(site_tint(s, 4, 0.35)) for s in range(4)]
        assert len(set(tints)) == 4

    def test_channel_budget(self):
        for s in range(6):
            tint = site_tint(s, 6, 0.35)
            assert np.all(tint > 0.6) and np.all(tint < 1.4)

    def test_recoverable_from_rendered_patch(self):
        # Channel means of a render, normalized, should identify the site's
        # tint direction despite shape jitter and pixel noise.
        spec = ToyDatasetSpec(n_classes=2, n_sites=4, per_class=10,
                              image_size=16, noise=0.03)
        rng = np.random.default_rng(0)
        for s in range(4):
            img = render_patch(0, s, spec, rng).astype(np.float64)
            channel_means = img.mean(axis=(0, 1))
            observed = channel_means / channel_means.mean()
            scores = []
            for cand in range(4):
                tint = site_tint(cand, 4, spec.tint_delta)
                scores.append(-np.sum((observed - tint / tint.mean()) ** 2))
            assert int(np.argmax(scores)) == s


class TestShapes:
    def test_all_classes_have_figures(self):
        rng = np.random.default_rng(1)
        for c in range(8):
            mask = shape_mask(c, 16, rng)
            assert mask.shape == (16, 16)
            assert 0.05 < mask.mean() < 0.95

    def test_figures_differ_between_classes(self):
        # Averaged over jitter, class figures occupy different pixels.
        means = []
        for c in range(4):
            rng = np.random.default_rng(0)
            acc = np.mean([shape_mask(c, 16, rng) for _ in range(30)], axis=0)
            means.append(acc)
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.abs(means[i] - means[j]).mean() > 0.05

    def test_out_of_range_class(self):
        with pytest.raises(ToyDataError):
            shape_mask(8, 16, np.random.default_rng(0))


class TestGeneration:
    def test_writes_images_and_manifest(self, tmp_path):
        spec = ToyDatasetSpec(n_classes=2, n_sites=2, per_class=6, seed=3)
        manifest = generate_toy_dataset(spec, tmp_path)
        assert len(manifest) == 12
        reloaded = load_manifest(tmp_path / "manifest.csv")
        assert len(reloaded) == 12
        for record in reloaded.records:
            assert (tmp_path / "images" / record.image_ref).exists()
            assert not record.synthetic
        assert {r.class_label for r in reloaded.records} == {"c0", "c1"}
        assert {r.site for r in reloaded.records} == {"s0", "s1"}
        assert {r.race for r in reloaded.records} == {"r0", "r1"}

    def test_manifest_matches_cell_counts(self, tmp_path):
        spec = ToyDatasetSpec(n_classes=3, n_sites=4, per_class=20,
                              correlation=0.6, seed=1)
        manifest = generate_toy_dataset(spec, tmp_path)
        counts = cell_counts(spec)
        for c in range(3):
            for s in range(4):
                n = sum(1 for r in manifest.records
                        if r.class_label == f"c{c}" and r.site == f"s{s}")
                assert n == counts[c, s]

    def test_reproducible(self, tmp_path):
        spec = ToyDatasetSpec(n_classes=2, n_sites=2, per_class=4, seed=9)
        generate_toy_dataset(spec, tmp_path / "a")
        generate_toy_dataset(spec, tmp_path / "b")
        a_files = sorted((tmp_path / "a" / "images").iterdir())
        b_files = sorted((tmp_path / "b" / "images").iterdir())
        assert [f.name for f in a_files] == [f.name for f in b_files]
        for fa, fb in zip(a_files, b_files):
            assert fa.read_bytes() == fb.read_bytes()
        assert ((tmp_path / "a" / "manifest.csv").read_text()
                == (tmp_path / "b" / "manifest.csv").read_text())

    def test_seed_changes_pixels(self, tmp_path):
        base = dict(n_classes=1, n_sites=1, per_class=3)
        generate_toy_dataset(ToyDatasetSpec(seed=1, **base), tmp_path / "a")
        generate_toy_dataset(ToyDatasetSpec(seed=2, **base), tmp_path / "b")
        a = sorted((tmp_path / "a" / "images").iterdir())
        b = sorted((tmp_path / "b" / "images").iterdir())
        assert any(x.read_bytes() != y.read_bytes() for x, y in zip(a, b))

    def test_patients_cycle_within_cells(self, tmp_path):
        spec = ToyDatasetSpec(n_classes=1, n_sites=1, per_class=7,
                              patients_per_cell=3)
        manifest = generate_toy_dataset(spec, tmp_path)
        patients = {r.patient_id for r in manifest.records}
        assert len(patients) == 3
