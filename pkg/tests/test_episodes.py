import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_facies.episodes import (Episode, EpisodeSampler, InvalidLabelError, SamplingError, SourceDataset,
                                     binarize_mask, build_support_set, dump_episode, episode_to_binary,
                                     nearest_index, sample_training_episode, source_from_volume,
                                     spanning_indices)
from fewshot_facies.volume import SplitSpec, load_volume, synthesize_layered_volume


def make_source(ds_id, c, n, size=8, seed=0):
    r = np.random.default_rng(seed)
    return SourceDataset(ds_id, r.uniform(0, 255, (n, size, size)).astype(np.float32),
                         r.integers(1, c + 1, (n, size, size)).astype(np.uint8), c)


class TestBinarize:
    def test_complementary_pair(self):
        out = binarize_mask(np.array([[1, 2], [2, 1]]), 2)
        np.testing.assert_array_equal(out[0], [[1, 0], [0, 1]])
        np.testing.assert_array_equal(out[1], [[0, 1], [1, 0]])

    def test_popcount_matches_histogram(self, rng):
        m = rng.integers(1, 7, (8, 8))
        out = binarize_mask(m, 6)
        hist = Counter(m.ravel().tolist())
        assert [int(out[j].sum()) for j in range(6)] == [hist.get(j + 1, 0) for j in range(6)]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_partition_and_argmax_identity(self, c, seed):
        m = np.random.default_rng(seed).integers(1, c + 1, (5, 7))
        out = binarize_mask(m, c)
        assert np.all(out.sum(0) == 1)
        np.testing.assert_array_equal(out.argmax(0) + 1, m)

    def test_stack_keeps_support_axis(self, rng):
        m = rng.integers(1, 4, (5, 6, 6))
        assert binarize_mask(m, 3).shape == (3, 5, 6, 6)

    @pytest.mark.parametrize("bad", [0, 4])
    def test_out_of_range(self, bad):
        with pytest.raises(InvalidLabelError):
            binarize_mask(np.array([[1, bad]]), 3)


class TestSampling:
    def test_mixed_class_counts_drawn(self):
        sources = [make_source("a", 6, 10), make_source("b", 7, 10, seed=1)]
        r = np.random.default_rng(0)
        counts = Counter(sample_training_episode(r, sources, 5).class_count for _ in range(1000))
        assert set(counts) == {6, 7}
        assert min(counts.values()) >= 250

    def test_pool_too_small(self):
        with pytest.raises(SamplingError):
            sample_training_episode(np.random.default_rng(0), [make_source("a", 3, 5)], 5)
        with pytest.raises(SamplingError):
            EpisodeSampler([make_source("a", 3, 5)], 5)

    def test_deterministic_stream(self):
        sources = [make_source("a", 3, 12)]
        a = EpisodeSampler(sources, 2, seed=4).batch(5)
        b = EpisodeSampler(sources, 2, seed=4).batch(5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.support_images, y.support_images)
            np.testing.assert_array_equal(x.query_mask, y.query_mask)

    def test_workers_get_distinct_streams(self):
        sources = [make_source("a", 3, 30)]
        a = EpisodeSampler(sources, 2, seed=4, worker_id=0).batch(3)
        b = EpisodeSampler(sources, 2, seed=4, worker_id=1).batch(3)
        assert any(not np.array_equal(x.query_image, y.query_image) for x, y in zip(a, b))

    def test_support_and_query_disjoint(self):
        ds = make_source("a", 3, 6)
        ep = sample_training_episode(np.random.default_rng(2), [ds], 5)
        rows = {tuple(img.ravel()[:4]) for img in ep.support_images}
        assert len(rows) == 5 and tuple(ep.query_image.ravel()[:4]) not in rows

    def test_source_from_volume_partition(self):
        v = synthesize_layered_volume(0, (12, 12, 16), 4)
        split = SplitSpec.from_dict({"train": {"inline": [[0, 6]]}, "test": {"inline": [[6, 12]]}})
        ds = source_from_volume(v, split, "train", 8, 8, "v")
        # 16x12 slices, 8-px patches at stride 8 -> 2 x 2 anchors per slice
        assert len(ds) == 6 * 4 and ds.class_count == 4
        assert {s[1] for s in ds.slice_ids} == set(range(6))


class TestBinaryEpisodes:
    def test_count_and_indicator(self, rng):
        ep = Episode(rng.uniform(size=(2, 4, 4)), rng.integers(1, 7, (2, 4, 4)), rng.uniform(size=(4, 4)),
                     rng.integers(1, 7, (4, 4)), 6)
        parts = episode_to_binary(ep)
        assert len(parts) == 6
        for j, b in enumerate(parts, start=1):
            np.testing.assert_array_equal(b.query_binary_mask, ep.query_mask == j)
            assert b.class_id == j
            assert b.support_images is ep.support_images


class TestSupportSelection:
    def test_spanning_published_indices(self):
        assert spanning_indices(0, 686, 5) == [0, 171, 343, 514, 686]
        assert build_support_set(range(687), 5, "spanning") == [0, 171, 343, 514, 686]

    def test_nearest_published_index(self):
        sup = [105, 210, 315, 420, 525]
        assert nearest_index(sup, 700) == 525
        assert build_support_set(range(105, 526), 5, "nearest", query_index=700) == [525]

    def test_nearest_tie_goes_low(self):
        assert nearest_index([10, 20], 15) == 10

    def test_single_shot(self):
        assert spanning_indices(3, 9, 1) == [3]

    def test_too_many_shots(self):
        with pytest.raises(ValueError):
            build_support_set(range(3), 5)

    def test_nearest_needs_query(self):
        with pytest.raises(ValueError):
            build_support_set(range(30), 5, "nearest")

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 500), st.integers(0, 800), st.integers(1, 8))
    def test_spanning_properties(self, start, length, k):
        stop = start + length
        if k > length + 1:
            return
        idx = spanning_indices(start, stop, k)
        assert len(idx) == k and idx == sorted(set(idx))
        assert idx[0] == start and (k == 1 or idx[-1] == stop)


def test_dump_episode(tmp_path, rng):
    ep = Episode(rng.uniform(0, 255, (2, 8, 8)).astype(np.float32), rng.integers(1, 4, (2, 8, 8)),
                 rng.uniform(0, 255, (8, 8)).astype(np.float32), rng.integers(1, 4, (8, 8)), 3, "syn")
    dump_episode(ep, tmp_path, slice_ids=[("inline", 1), ("inline", 5), ("inline", 9)], mode="spanning")
    v = load_volume(tmp_path / "episode")
    assert v.shape == (3, 8, 8)
    manifest = json.loads((tmp_path / "episode_manifest.json").read_text())
    assert manifest["K"] == 2 and manifest["C"] == 3 and manifest["mode"] == "spanning"
