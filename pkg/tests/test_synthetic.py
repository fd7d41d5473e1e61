"""Tests for synthetic module."""

import numpy as np
import pytest

from fgreid.exceptions import ConfigurationError
from fgreid.synthetic import identity_appearance, render_identity, split_dataset, synth_dataset


class TestSynthDataset:
    def test_layout(self):
        tracklets = synth_dataset(4, 3, 5, 16, np.random.default_rng(0))
        assert len(tracklets) == 12
        assert tracklets[0].frames.shape == (5, 16, 16, 3)
        assert tracklets[0].frames.dtype == np.float32
        assert {tr.identity_id for tr in tracklets} == {0, 1, 2, 3}
        assert [tr.camera_id for tr in tracklets[:3]] == [0, 1, 0]
        assert all(0.0 <= tr.frames.min() and tr.frames.max() <= 1.0 for tr in tracklets)

    def test_rectangular_frames(self):
        tracklets = synth_dataset(2, 1, 2, (32, 16), np.random.default_rng(0), num_cameras=1)
        assert tracklets[0].frames.shape == (2, 32, 16, 3)
        assert {tr.camera_id for tr in tracklets} == {0}

    def test_deterministic(self):
        first = synth_dataset(3, 2, 4, 16, np.random.default_rng(5))
        second = synth_dataset(3, 2, 4, 16, np.random.default_rng(5))
        for a, b in zip(first, second):
            assert a.tracklet_id == b.tracklet_id
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_single_identity(self):
        tracklets = synth_dataset(1, 2, 3, 16, np.random.default_rng(0))
        assert {tr.identity_id for tr in tracklets} == {0}

    def test_invalid_counts(self):
        with pytest.raises(ConfigurationError):
            synth_dataset(0, 2, 3, 16, np.random.default_rng(0))

    @pytest.mark.parametrize('image_size', [[32], (32, 32, 3), (0, 16), (16.5, 16), 'ab', None])
    def test_invalid_image_size(self, image_size):
        with pytest.raises(ConfigurationError):
            synth_dataset(2, 1, 1, image_size, np.random.default_rng(0))

    def test_rectangular_frames(self):
        tracklets = synth_dataset(2, 1, 2, (24, 16), np.random.default_rng(0))
        assert tracklets[0].frames.shape == (2, 24, 16, 3)



class TestPairedIdentities:
    def test_pair_differs_only_in_accessory_side(self):
        colors = [(np.array([0.8, 0.2, 0.2], dtype=np.float32), np.array([0.1, 0.9, 0.3], dtype=np.float32))]
        frames = [render_identity(32, 16, *identity_appearance(i, colors)) for i in (0, 1)]
        assert not np.array_equal(frames[0], frames[1])
        np.testing.assert_allclose(frames[0].mean(axis=(0, 1)), frames[1].mean(axis=(0, 1)), atol=1e-6)

    def test_mean_color_cannot_separate_a_pair(self):
        tracklets = synth_dataset(2, 200, 1, 16, np.random.default_rng(3))
        colors = np.stack([tr.frames.mean(axis=(0, 1, 2)) for tr in tracklets])
        ids = np.array([tr.identity_id for tr in tracklets])
        means = np.stack([colors[ids == i].mean(axis=0) for i in (0, 1)])
        predicted = np.argmin(np.linalg.norm(colors[:, None] - means[None], axis=-1), axis=1)
        assert np.mean(predicted == ids) <= 0.6


class TestSplitDataset:
    def test_holds_out_last_tracklets(self):
        tracklets = synth_dataset(3, 4, 2, 16, np.random.default_rng(0))
        train, query, gallery = split_dataset(tracklets, held_out=1)
        assert len(train) == 9 and len(query) == 3
        assert [tr.tracklet_id for tr in query] == ['id000_t03', 'id001_t03', 'id002_t03']
        assert [tr.tracklet_id for tr in gallery] == [tr.tracklet_id for tr in train]
