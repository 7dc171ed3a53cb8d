import json

import numpy as np
import pytest

from fewshot_facies.volume import (InvalidInputError, InvalidSplitError, SeismicVolume, SplitSpec,
                                   VolumeFormatError, apply_split, extract_patches, load_volume, normalize,
                                   percentile_clip, rescale_to_byte_range, save_volume,
                                   synthesize_layered_volume)


def vol(values, labels=None, c=1):
    return SeismicVolume(np.asarray(values, dtype=np.float32), labels, c)


def sort_percentile(values, pct):
    # linear interpolation between closest ranks
    s = np.sort(np.ravel(values).astype(np.float64))
    pos = pct / 100 * (len(s) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


class TestPercentileClip:
    def test_constant_volume_unchanged(self):
        out = percentile_clip(vol(np.full((4, 4, 4), 7.0)), 5, 95)
        assert np.all(out.intensities == 7.0)

    def test_thresholds_match_sort_oracle(self):
        x = np.arange(100, dtype=np.float32).reshape(4, 5, 5)
        out = percentile_clip(vol(x), 5, 95).intensities
        lo, hi = sort_percentile(x, 5), sort_percentile(x, 95)
        assert (lo, hi) == pytest.approx((4.95, 94.05))
        np.testing.assert_allclose(out, np.clip(x, lo, hi), rtol=0, atol=1e-5)

    def test_reversed_percentiles_rejected(self):
        with pytest.raises(InvalidInputError):
            percentile_clip(vol(np.zeros((2, 2, 2))), 95, 5)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            percentile_clip(vol(np.zeros((0, 2, 2))))


class TestRescale:
    def test_endpoints_and_midpoint(self):
        x = np.array([-1.0, 0.0, 1.0] * 3).reshape(3, 3, 1)
        out = rescale_to_byte_range(vol(x)).intensities.ravel()
        np.testing.assert_allclose(out[:3], [0.0, 127.5, 255.0])

    def test_constant_maps_to_zero(self):
        assert np.all(rescale_to_byte_range(vol(np.full((2, 2, 2), 3.0))).intensities == 0)

    def test_order_preserved(self, rng):
        x = rng.normal(size=(5, 6, 7))
        out = rescale_to_byte_range(vol(x)).intensities
        assert out.min() == 0 and out.max() == pytest.approx(255)
        order = np.argsort(x, axis=None, kind="stable")
        assert np.all(np.diff(out.ravel()[order]) >= 0)

    def test_normalize_chain_in_byte_range(self, rng):
        out = normalize(vol(rng.normal(size=(6, 6, 10))), depth_crop=(2, 8))
        assert out.shape == (6, 6, 6)
        assert out.intensities.min() == 0 and out.intensities.max() == pytest.approx(255)


class TestPatches:
    def _single(self, h, w):
        return vol(np.zeros((1, w, h)))  # slice_image transposes to depth-major (h, w)

    def test_exact_fit_single_patch(self):
        assert len(extract_patches(self._single(256, 256), "inline", 256, 256)) == 1

    def test_flush_edge_anchors(self):
        patches = extract_patches(self._single(300, 300), "inline", 256, 256)
        assert sorted(p.source[2:] for p in patches) == [(0, 0), (0, 44), (44, 0), (44, 44)]

    def test_short_slice_rejected(self):
        with pytest.raises(InvalidInputError):
            extract_patches(self._single(64, 512), "inline", 256, 256)

    def test_patch_content_and_labels(self, rng):
        v = synthesize_layered_volume(0, (20, 4, 20), 3)
        p = extract_patches(v, "crossline", 8, 6, indices=[2])
        assert all(q.pixels.shape == (8, 8) and q.mask.shape == (8, 8) for q in p)
        r, c = p[1].source[2:]
        np.testing.assert_array_equal(p[1].pixels, v.slice_image("crossline", 2)[r:r + 8, c:c + 8])


class TestSplit:
    def test_counts(self):
        v = vol(np.zeros((16, 3, 3)))
        spec = SplitSpec.from_dict({"train": {"inline": [[0, 10]]}, "val": {"inline": [[10, 12]]},
                                    "test": {"inline": [[12, 16]]}})
        parts = apply_split(v, spec)
        assert [len(parts[k]) for k in ("train", "val", "test")] == [10, 2, 4]

    def test_overlap_rejected(self):
        spec = SplitSpec.from_dict({"train": {"inline": [[0, 10]]}, "test": {"inline": [[8, 16]]}})
        with pytest.raises(InvalidSplitError):
            apply_split(vol(np.zeros((16, 3, 3))), spec)

    def test_out_of_extent_rejected(self):
        spec = SplitSpec.from_dict({"train": {"crossline": [[0, 5]]}})
        with pytest.raises(InvalidSplitError):
            spec.validate((16, 4, 3))

    def test_uncovered_slices_dropped(self):
        spec = SplitSpec.from_dict({"train": {"inline": [[0, 3], [9, 11]]}, "test": {"crossline": [[1, 4]]}})
        parts = apply_split(vol(np.zeros((16, 5, 3))), spec)
        covered = {("inline", i) for i in range(16) if 0 <= i < 3 or 9 <= i < 11}
        covered |= {("crossline", i) for i in range(5) if 1 <= i < 4}
        seen = {(s.axis, s.index) for p in parts.values() for s in p}
        assert seen == covered
        assert sum(len(p) for p in parts.values()) == len(covered)

    def test_dict_round_trip(self):
        d = {"train": {"inline": [[0, 3]]}, "val": {}, "test": {"crossline": [[1, 4]]}}
        assert SplitSpec.from_dict(d).to_dict() == d


class TestSynthetic:
    def test_flat_bands(self):
        v = synthesize_layered_volume(3, (5, 6, 64), 4, undulation=0, noise_sd=0)
        for c in range(4):
            assert np.all(v.labels[:, :, 16 * c:16 * (c + 1)] == c + 1)
        assert len(np.unique(v.intensities)) == 4

    def test_deterministic(self):
        a = synthesize_layered_volume(9, (8, 8, 16), 3)
        b = synthesize_layered_volume(9, (8, 8, 16), 3)
        np.testing.assert_array_equal(a.intensities, b.intensities)
        np.testing.assert_array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("c", [2, 5, 8])
    def test_every_class_present(self, c):
        v = synthesize_layered_volume(c, (16, 16, 32), c, undulation=6)
        assert set(np.unique(v.labels)) == set(range(1, c + 1))


class TestVolumeIO:
    def test_round_trip(self, tmp_path):
        v = synthesize_layered_volume(1, (5, 6, 7), 3)
        save_volume(v, tmp_path / "v")
        w = load_volume(tmp_path / "v.json")
        np.testing.assert_array_equal(v.intensities, w.intensities)
        np.testing.assert_array_equal(v.labels, w.labels)
        assert w.class_count == 3

    def test_truncated_payload(self, tmp_path):
        save_volume(vol(np.zeros((4, 4, 4))), tmp_path / "v")
        np.zeros(63, "<f4").tofile(tmp_path / "v.f32")
        with pytest.raises(VolumeFormatError) as e:
            load_volume(tmp_path / "v")
        assert e.value.field == "shape"

    def test_label_out_of_range(self, tmp_path):
        v = synthesize_layered_volume(1, (4, 4, 8), 6)
        save_volume(v, tmp_path / "v")
        lab = v.labels.copy()
        lab[0, 0, 0] = 9
        lab.astype("u1").tofile(tmp_path / "v.labels.u8")
        with pytest.raises(VolumeFormatError) as e:
            load_volume(tmp_path / "v")
        assert e.value.field == "labels"

    def test_bad_sidecar_field(self, tmp_path):
        save_volume(vol(np.zeros((2, 2, 2))), tmp_path / "v")
        meta = json.loads((tmp_path / "v.json").read_text())
        meta["dtype"] = "f64"
        (tmp_path / "v.json").write_text(json.dumps(meta))
        with pytest.raises(VolumeFormatError) as e:
            load_volume(tmp_path / "v")
        assert e.value.field == "dtype"
