"""Synthetic data regimes, the volume file format, manifests, and the
checkpoint container."""

import numpy as np
import pytest
from scipy import ndimage

from pnpnet.checkpoint import (CheckpointError, fnv1a64, load_tensors,
                               save_tensors)
from pnpnet.synth import (ConfigError, GenSpec, generate, generate_one,
                          interface_mask, regime_b_band, sample_rng)
from pnpnet.volumes import (FormatError, VolumeSample, read_manifest,
                            read_volume, split_indices, write_manifest,
                            write_volume)


class TestGenSpec:
    def test_bad_regime_rejected(self):
        with pytest.raises(ConfigError):
            GenSpec(regime="Z")

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ConfigError):
            GenSpec(dims=(30, 32, 32))

    def test_negative_blur_rejected(self):
        with pytest.raises(ConfigError):
            GenSpec(sigma_b=-1.0)


class TestDeterminism:
    @pytest.mark.parametrize("regime", ["A", "B", "C"])
    def test_same_spec_bit_identical(self, regime):
        spec = GenSpec(regime=regime, count=2, seed=11)
        first = generate(spec)
        second = generate(GenSpec(regime=regime, count=2, seed=11))
        for a, b in zip(first, second):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.label.tobytes() == b.label.tobytes()

    def test_order_independent_per_sample(self):
        spec = GenSpec(regime="A", count=3, seed=4)
        direct = generate_one(spec, 2)
        via_list = generate(spec)[2]
        assert direct.image.tobytes() == via_list.image.tobytes()

    def test_counter_rng_streams_differ(self):
        a = sample_rng(0, 0).uniform(size=4)
        b = sample_rng(0, 1).uniform(size=4)
        assert not np.allclose(a, b)


class TestRegimeA:
    def test_labels_and_range(self):
        s = generate_one(GenSpec(regime="A", seed=1), 0)
        assert s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert set(np.unique(s.label)) == {0, 1, 2}

    def test_step_interface_when_unblurred(self):
        # sigma_b = 0, no noise or patches: the image is piecewise constant,
        # and the interface voxel count matches direct enumeration of
        # 6-neighbor class changes inside the foreground
        spec = GenSpec(regime="A", sigma_b=0.0, noise=0.0, patch_count=0, seed=2)
        s = generate_one(spec, 0)
        assert len(np.unique(s.image)) == 3
        mask = interface_mask(s.label)
        count = 0
        lab = s.label
        for z, y, x in np.argwhere(lab > 0):
            hit = False
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                               (0, 0, 1), (0, 0, -1)):
                zz, yy, xx = z + dz, y + dy, x + dx
                if 0 <= zz < 32 and 0 <= yy < 32 and 0 <= xx < 32:
                    other = lab[zz, yy, xx]
                    if other > 0 and other != lab[z, y, x]:
                        hit = True
            count += hit
        assert mask.sum() == count > 0

    def test_far_voxels_within_noise_bounds(self):
        spec = GenSpec(regime="A", sigma_b=1.0, seed=3)
        s = generate_one(spec, 0)
        # distance to any label change, including the background interface
        change = np.zeros(spec.dims, dtype=bool)
        for ax in range(3):
            d = np.diff(s.label, axis=ax) != 0
            idx = [slice(None)] * 3
            idx[ax] = slice(0, 31)
            change[tuple(idx)] |= d
            idx[ax] = slice(1, 32)
            change[tuple(idx)] |= d
        dist = ndimage.distance_transform_edt(~change)
        far = dist > 3 * spec.sigma_b + 2.0  # patch radius slack
        checked = 0
        for cls in range(3):
            sel = (s.label == cls) & far
            if not sel.any():
                continue
            resid = np.abs(s.image[sel] - s.image[sel].mean())
            assert resid.max() <= spec.noise + 0.02
            checked += 1
        # at 32^3 the split foreground lobes are thin, so only the
        # background is guaranteed to reach this far from every interface
        assert checked >= 1


class TestRegimeB:
    def test_differences_confined_to_jitter_band(self):
        spec = GenSpec(regime="B", count=4, seed=5)
        samples = generate(spec)
        band = regime_b_band(spec)
        base = samples[0].label
        diffs = np.zeros_like(band)
        for s in samples[1:]:
            diffs |= s.label != base
        assert diffs.any()
        assert not (diffs & ~band).any()

    def test_fixed_geometry_outside_band(self):
        spec = GenSpec(regime="B", count=3, seed=6)
        samples = generate(spec)
        band = regime_b_band(spec)
        for s in samples[1:]:
            np.testing.assert_array_equal(s.label[~band], samples[0].label[~band])


class TestRegimeC:
    def test_distinct_slab_labels(self):
        spec = GenSpec(regime="C", n_classes=4, seed=7)
        s = generate_one(spec, 0)
        assert set(np.unique(s.label)) == {0, 1, 2, 3}

    def test_slab_histograms_indistinguishable(self):
        spec = GenSpec(regime="C", n_classes=4, seed=8)
        s = generate_one(spec, 0)
        # interiors share texture statistics: compare per-slab histograms
        # away from the seams by total variation distance
        bins = np.linspace(0.0, 1.0, 21)
        hists = []
        for cls in (1, 2, 3):
            sel = s.label == cls
            sel &= ndimage.binary_erosion(sel, iterations=2)
            h, _ = np.histogram(s.image[sel], bins=bins, density=True)
            hists.append(h / h.sum())
        for i in range(len(hists)):
            for j in range(i + 1, len(hists)):
                tv = 0.5 * np.abs(hists[i] - hists[j]).sum()
                assert tv <= 0.08


class TestVolumeFormat:
    def _sample(self):
        rng = np.random.default_rng(9)
        return VolumeSample(image=rng.uniform(size=(4, 4, 4)).astype(np.float32),
                            label=rng.integers(0, 3, size=(4, 4, 4)).astype(np.uint8),
                            spacing=(1.0, 0.5, 2.0))

    def test_round_trip_bit_exact(self, tmp_path):
        s = self._sample()
        path = tmp_path / "v.pnpv"
        write_volume(s, path)
        r = read_volume(path)
        assert r.image.tobytes() == s.image.tobytes()
        assert r.label.tobytes() == s.label.tobytes()
        assert r.spacing == s.spacing

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "v.pnpv"
        write_volume(self._sample(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            read_volume(path)

    def test_foreign_magic(self, tmp_path):
        path = tmp_path / "v.pnpv"
        write_volume(self._sample(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="PNPV"):
            read_volume(path)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(FormatError):
            VolumeSample(image=np.zeros((2, 2, 2), dtype=np.float32),
                         label=np.zeros((2, 2, 3), dtype=np.uint8))


class TestManifest:
    def test_50_samples_at_standard_ratios(self):
        splits = split_indices(50, (0.7, 0.1, 0.2), seed=0)
        assert (len(splits["train"]), len(splits["val"]), len(splits["test"])) \
            == (35, 5, 10)

    def test_every_sample_in_exactly_one_split(self):
        splits = split_indices(50, (0.7, 0.1, 0.2), seed=1)
        joined = splits["train"] + splits["val"] + splits["test"]
        assert sorted(joined) == list(range(50))

    def test_same_seed_same_split(self):
        a = split_indices(20, (0.5, 0.25, 0.25), seed=2)
        b = split_indices(20, (0.5, 0.25, 0.25), seed=2)
        assert a == b

    def test_bad_ratios_rejected(self):
        with pytest.raises(FormatError):
            split_indices(10, (0.5, 0.2, 0.2), seed=0)

    def test_round_trip(self, tmp_path):
        names = ["s%02d.pnpv" % i for i in range(10)]
        path = tmp_path / "manifest.txt"
        write_manifest(path, names, (0.5, 0.2, 0.3), seed=3)
        splits = read_manifest(path)
        assert sorted(sum(splits.values(), [])) == sorted(names)
        assert len(splits["train"]) == 5


class TestCheckpointContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(10)
        arrays = {"a.w": rng.normal(size=(3, 4)).astype(np.float32),
                  "b": rng.normal(size=(2, 2, 2)).astype(np.float32)}
        path = tmp_path / "c.pnpc"
        save_tensors(arrays, path)
        loaded = load_tensors(path)
        assert list(loaded) == list(arrays)
        for k in arrays:
            assert loaded[k].tobytes() == arrays[k].tobytes()

    def test_checksum_detects_corruption(self, tmp_path):
        path = tmp_path / "c.pnpc"
        save_tensors({"w": np.ones((2, 2), dtype=np.float32)}, path)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_tensors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.pnpc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_tensors(path)

    def test_fnv_reference_value(self):
        # published FNV-1a 64 test vector
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
