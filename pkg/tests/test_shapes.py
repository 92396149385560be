"""Tests for the synthetic scene generator."""

import numpy as np
import pytest

from deskdiff.errors import ParameterError
from deskdiff.shapes import (
    SIDE,
    TOKEN_HBAR,
    TOKEN_SCENE,
    TOKEN_SQUARE,
    TOKEN_VBAR,
    VOCAB_SIZE,
    make_scene,
    scene_batch_sampler,
)


def bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1


class TestMakeScene:
    def test_deterministic_per_seed_and_index(self):
        a = make_scene(5, 0)
        b = make_scene(5, 0)
        c = make_scene(5, 1)
        d = make_scene(6, 0)
        assert a.field.tobytes() == b.field.tobytes()
        assert a.tokens == b.tokens
        assert a.masks.tobytes() == b.masks.tobytes()
        assert a.field.tobytes() != c.field.tobytes() or a.tokens != c.tokens
        assert a.field.tobytes() != d.field.tobytes() or a.tokens != d.tokens

    def test_caption_names_each_object(self):
        for index in range(30):
            scene = make_scene(11, index)
            assert scene.tokens[0] == TOKEN_SCENE
            assert len(scene.tokens) == scene.n_objects + 1
            assert 1 <= scene.n_objects <= 3
            for tok in scene.tokens[1:]:
                assert tok in (TOKEN_SQUARE, TOKEN_HBAR, TOKEN_VBAR)

    def test_masks_are_disjoint_and_cover_the_field_support(self):
        for index in range(30):
            scene = make_scene(17, index)
            union = scene.masks.sum(axis=0)
            assert union.max() <= 1.0, "objects overlap"
            np.testing.assert_array_equal(union > 0, scene.field[0] != 0)

    def test_mask_is_a_filled_rectangle(self):
        for index in range(20):
            scene = make_scene(23, index)
            for mask in scene.masks:
                h, w = bbox(mask)
                assert mask.sum() == h * w

    def test_kind_geometry(self):
        seen = set()
        for index in range(60):
            scene = make_scene(29, index)
            for tok, mask in zip(scene.tokens[1:], scene.masks):
                h, w = bbox(mask)
                seen.add(tok)
                if tok == TOKEN_SQUARE:
                    assert 8 <= h <= 12 and 8 <= w <= 12
                elif tok == TOKEN_HBAR:
                    assert w > h
                else:
                    assert h > w
        assert seen == {TOKEN_SQUARE, TOKEN_HBAR, TOKEN_VBAR}

    def test_kind_intensity_signs(self):
        for index in range(30):
            scene = make_scene(31, index)
            for tok, mask in zip(scene.tokens[1:], scene.masks):
                values = scene.field[0][mask > 0]
                assert np.all(values == values[0]), "one object, one intensity"
                if tok == TOKEN_HBAR:
                    assert values[0] < 0
                else:
                    assert values[0] > 0

    def test_negative_index_rejected(self):
        with pytest.raises(ParameterError, match="non-negative"):
            make_scene(1, -1)


class TestBatchSampler:
    def test_shapes_and_padding(self):
        sample = scene_batch_sampler(pad_tokens=4)
        gen = np.random.default_rng(0)
        fields, tokens = sample(gen, 6)
        assert fields.shape == (6, 1, SIDE, SIDE)
        assert fields.dtype == np.float32
        assert tokens.shape == (6, 4)
        assert tokens.dtype == np.int64
        assert np.all(tokens[:, 0] == TOKEN_SCENE)
        assert tokens.min() >= 0 and tokens.max() < VOCAB_SIZE

    def test_batches_differ_across_draws(self):
        sample = scene_batch_sampler()
        gen = np.random.default_rng(1)
        f1, _ = sample(gen, 4)
        f2, _ = sample(gen, 4)
        assert f1.tobytes() != f2.tobytes()
