import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structsr.degrade import (
    DegradationConfig,
    Recipe,
    degrade,
    degrade_from_seed,
    replay,
)
from structsr.errors import ParameterError

IDENTITY = DegradationConfig(
    scale=1,
    blur_sigma=(0.0, 0.0),
    filters=("area",),
    noise_std=(0.0, 0.0),
    jpeg_quality=(100, 100),
)


class TestDegrade:
    def test_identity_chain(self, rng):
        hq = rng.random((32, 32, 3))
        pair = degrade_from_seed(hq, 1, IDENTITY, 7)
        assert np.array_equal(pair.lq, hq)

    def test_dimension_contract(self, rng):
        hq = rng.random((128, 128, 3))
        pair = degrade_from_seed(hq, 4, DegradationConfig(), 7)
        assert pair.lq.shape == (32, 32, 3)

    def test_indivisible_dimensions(self, rng):
        with pytest.raises(ParameterError):
            degrade_from_seed(rng.random((30, 30, 3)), 4, DegradationConfig(), 7)

    def test_same_seed_same_output(self, rng):
        hq = rng.random((64, 64, 3))
        p1 = degrade_from_seed(hq, 4, DegradationConfig(), 99)
        p2 = degrade_from_seed(hq, 4, DegradationConfig(), 99)
        assert np.array_equal(p1.lq, p2.lq)
        assert p1.recipe == p2.recipe

    def test_different_seeds_differ(self, rng):
        hq = rng.random((64, 64, 3))
        p1 = degrade_from_seed(hq, 4, DegradationConfig(), 1)
        p2 = degrade_from_seed(hq, 4, DegradationConfig(), 2)
        assert not np.array_equal(p1.lq, p2.lq)

    def test_values_clamped(self, rng):
        hq = rng.random((64, 64, 3))
        pair = degrade_from_seed(hq, 4, DegradationConfig(), 3)
        assert pair.lq.min() >= 0.0 and pair.lq.max() <= 1.0

    @given(seed=st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_determinism_property(self, seed):
        hq = np.random.default_rng(0).random((16, 16, 3))
        a = degrade_from_seed(hq, 2, DegradationConfig(scale=2), seed)
        b = degrade_from_seed(hq, 2, DegradationConfig(scale=2), seed)
        assert np.array_equal(a.lq, b.lq) and a.recipe == b.recipe


class TestReplay:
    def test_replay_reproduces_pair(self, rng):
        hq = rng.random((64, 64, 3))
        pair = degrade_from_seed(hq, 4, DegradationConfig(), 11)
        assert np.array_equal(replay(hq, pair.recipe), pair.lq)

    def test_zeroed_noise_changes_output(self, rng):
        hq = rng.random((64, 64, 3))
        cfg = DegradationConfig(noise_std=(0.05, 0.1))
        pair = degrade_from_seed(hq, 4, cfg, 11)
        quiet = dataclasses.replace(pair.recipe, noise_std=0.0)
        assert not np.array_equal(replay(hq, quiet), pair.lq)

    def test_recipe_serialization_round_trip(self, rng):
        pair = degrade_from_seed(rng.random((32, 32, 3)), 4, DegradationConfig(), 5)
        restored = Recipe.from_dict(json.loads(pair.recipe.to_json()))
        assert restored == pair.recipe
        assert np.array_equal(replay(pair.hq, restored), pair.lq)

    def test_replay_shape_mismatch(self, rng):
        pair = degrade_from_seed(rng.random((32, 32, 3)), 4, DegradationConfig(), 5)
        with pytest.raises(ParameterError):
            replay(rng.random((30, 30, 3)), pair.recipe)

    def test_second_pass_recorded_and_replayable(self, rng):
        hq = rng.random((32, 32, 3))
        cfg = DegradationConfig(second_pass=True)
        pair = degrade_from_seed(hq, 4, cfg, 17)
        assert pair.recipe.jpeg_quality2 <= 95
        assert np.array_equal(replay(hq, pair.recipe), pair.lq)


class TestStages:
    def test_blur_only(self, rng):
        hq = rng.random((32, 32, 3))
        r = Recipe(scale=1, blur_sigma=1.0, filter="area", noise_std=0.0,
                   noise_seed=0, jpeg_quality=100)
        out = replay(hq, r)
        assert out.std() < hq.std()

    def test_noise_only_magnitude(self, rng):
        hq = np.full((64, 64, 3), 0.5)
        r = Recipe(scale=1, blur_sigma=0.0, filter="area", noise_std=0.05,
                   noise_seed=123, jpeg_quality=100)
        out = replay(hq, r)
        assert 0.03 < (out - hq).std() < 0.07

    def test_compression_introduces_block_error(self, rng):
        hq = rng.random((64, 64, 3))
        r = Recipe(scale=1, blur_sigma=0.0, filter="area", noise_std=0.0,
                   noise_seed=0, jpeg_quality=30)
        out = replay(hq, r)
        err = np.abs(out - hq).mean()
        assert err > 1e-3

    def test_downsample_filters_differ(self, rng):
        hq = rng.random((32, 32, 3))
        outs = []
        for f in ("nearest", "bilinear", "area"):
            r = Recipe(scale=4, blur_sigma=0.0, filter=f, noise_std=0.0,
                       noise_seed=0, jpeg_quality=100)
            outs.append(replay(hq, r))
        assert not np.array_equal(outs[0], outs[1])
        assert not np.array_equal(outs[1], outs[2])

    def test_area_filter_is_block_mean(self, rng):
        hq = rng.random((8, 8, 3))
        r = Recipe(scale=4, blur_sigma=0.0, filter="area", noise_std=0.0,
                   noise_seed=0, jpeg_quality=100)
        out = replay(hq, r)
        assert np.allclose(out[0, 0], hq[:4, :4].mean(axis=(0, 1)))
