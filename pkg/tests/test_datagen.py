"""Synthetic shifted-domain data: construction and distribution oracles."""

import numpy as np
import pytest

from compmask import datagen


class TestDomainSpec:
    def test_rejects_bad_size(self):
        with pytest.raises(ValueError, match="multiple of 16"):
            datagen.DomainSpec(size=50)

    def test_rejects_shape_class_mismatch(self):
        with pytest.raises(ValueError, match="per foreground class"):
            datagen.DomainSpec(classes=4, shapes=("disc",))

    def test_rejects_unknown_shape(self):
        with pytest.raises(ValueError, match="unknown shape"):
            datagen.DomainSpec(classes=2, shapes=("triangle",))


class TestGenDomain:
    def test_noiseless_single_disc_two_plateaus(self):
        spec = datagen.DomainSpec(classes=2, shapes=("disc",),
                                  count_range=(1, 1), noise=0.0, offset=0.0,
                                  texture_amp=0.0)
        sample = datagen.gen_domain(spec, 1)[0]
        levels = np.unique(sample.image)
        assert len(levels) == 2
        assert levels[0] == 0.0
        assert levels[1] == datagen.class_intensity(1, 2)

    def test_empty_inventory_all_background(self):
        spec = datagen.DomainSpec(classes=2, shapes=(), count_range=(0, 0))
        sample = datagen.gen_domain(spec, 1)[0]
        assert np.all(sample.label == 0)

    def test_labels_in_range(self):
        spec = datagen.DomainSpec()
        for s in datagen.gen_domain(spec, 10):
            assert s.label.min() >= 0 and s.label.max() < spec.classes
            assert np.all(np.isfinite(s.image))

    def test_determinism(self):
        spec = datagen.DomainSpec(seed=5)
        a = datagen.gen_domain(spec, 3)
        b = datagen.gen_domain(spec, 3)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.label, sb.label)

    def test_seed_changes_placement_not_frequency(self):
        # different seeds: different layouts, same class frequencies (5%)
        freqs = []
        for seed in (1, 2):
            spec = datagen.DomainSpec(seed=seed)
            samples = datagen.gen_domain(spec, 500)
            labels = np.stack([s.label for s in samples])
            freqs.append(np.bincount(labels.ravel(), minlength=3) / labels.size)
        first = [datagen.gen_domain(datagen.DomainSpec(seed=s), 1)[0].label
                 for s in (1, 2)]
        assert not np.array_equal(first[0], first[1])
        assert np.all(np.abs(freqs[0] - freqs[1]) <= 0.05)


class TestShiftPair:
    def test_zero_shift_identical(self):
        base = datagen.DomainSpec()
        src, tgt = datagen.make_shift_pair(base, {})
        assert src == tgt == base

    def test_default_shift_values(self):
        base = datagen.DomainSpec()
        src, tgt = datagen.make_shift_pair(base)
        assert src == base
        assert tgt.offset == base.offset + datagen.DEFAULT_SHIFT["offset"]
        assert tgt.noise == base.noise + datagen.DEFAULT_SHIFT["noise"]
        assert tgt.frequency == base.frequency * datagen.DEFAULT_SHIFT[
            "frequency_factor"]

    def test_shift_not_idempotent(self):
        base = datagen.DomainSpec()
        _, once = datagen.make_shift_pair(base)
        _, twice = datagen.make_shift_pair(once)
        assert once != twice

    def test_covariate_shift_only(self):
        # label process unchanged: per-class pixel frequencies match to 2%
        base = datagen.DomainSpec()
        src, tgt = datagen.make_shift_pair(base)
        freqs = []
        for spec in (src, tgt):
            samples = datagen.gen_domain(spec, 1000)
            labels = np.stack([s.label for s in samples])
            freqs.append(np.bincount(labels.ravel(), minlength=3) / labels.size)
        assert np.all(np.abs(freqs[0] - freqs[1]) <= 0.02)

    def test_shared_geometry_same_index(self):
        base = datagen.DomainSpec()
        src, tgt = datagen.make_shift_pair(base)
        a = datagen.gen_domain(src, 5)
        b = datagen.gen_domain(tgt, 5)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.label, sb.label)


class TestDump:
    def test_round_trip(self, tmp_path):
        spec = datagen.DomainSpec()
        samples = datagen.gen_domain(spec, 4)
        path = tmp_path / "split.bin"
        datagen.save_dataset(path, samples, spec)
        loaded = datagen.load_dataset(path)
        assert len(loaded) == 4
        for a, b in zip(samples, loaded):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.label, b.label)
        manifest = path.with_suffix(".bin.json")
        assert manifest.exists()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            datagen.load_dataset(path)
