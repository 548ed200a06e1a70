import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aptad import diffcore as dc
from aptad.encoders import (PAD_ID, TextEncoder, VisualEncoder, _block_params, bind, build_locality_mask,
                            encode_image, encode_text, lat_block_forward, patchify, text_forward,
                            tokenize_template)
from aptad.pretrain import PHRASINGS
from aptad.prompts import (ABNORMAL_TEMPLATE, NORMAL_TEMPLATE, OBJECT_TEMPLATE, SIMPLE_ABNORMAL_TEMPLATE,
                           SIMPLE_NORMAL_TEMPLATE)
from oracles import neighbours


def _vocabulary():
    texts = [NORMAL_TEMPLATE, ABNORMAL_TEMPLATE, SIMPLE_NORMAL_TEMPLATE, SIMPLE_ABNORMAL_TEMPLATE]
    texts += [OBJECT_TEMPLATE.format(object=k) for k in ("disk", "square")]
    for group in PHRASINGS.values():
        texts += [p.format(kind=k) for p in group for k in ("disk", "square")]
    words = set()
    for t in texts:
        words.update(w.strip(".,;:!?\"'()") for w in t.lower().split())
    return sorted(words)


class TestTokenizer:
    def test_deterministic(self):
        assert tokenize_template("a photo of a blob") == tokenize_template("a photo of a blob")

    def test_length(self):
        assert len(tokenize_template("one two three four five")) == 5

    def test_shipped_vocabulary_has_no_collisions(self):
        words = _vocabulary()
        ids = [tokenize_template(w)[0] for w in words]
        assert len(set(ids)) == len(words)
        assert PAD_ID not in ids

    def test_case_and_punctuation(self):
        assert tokenize_template("This is a photo of disk.") == tokenize_template("this is a photo of disk")

    def test_empty(self):
        with pytest.raises(ValueError):
            tokenize_template("  ... ")


class TestLocalityMask:
    def test_centre_four_neighbourhood(self):
        m = build_locality_mask(3, 1.0)
        assert m.admissible()[1 + 4, 1:].sum() == 5

    def test_centre_eight_neighbourhood(self):
        m = build_locality_mask(3, 1.5)
        assert m.admissible()[1 + 4, 1:].sum() == 9

    @pytest.mark.parametrize("g", range(2, 9))
    def test_large_radius_admits_everything(self, g):
        m = build_locality_mask(g, math.sqrt(2) * (g - 1))
        assert m.admissible().all()

    @pytest.mark.parametrize("g,k", [(g, k) for g in range(2, 7) for k in (0.0, 1.0, 1.5, 2.0, 2.9)])
    def test_matches_enumeration(self, g, k):
        m = build_locality_mask(g, k).admissible()
        pairs = neighbours(g, k)
        expected = np.array([[(a, b) in pairs for b in range(g * g)] for a in range(g * g)])
        np.testing.assert_array_equal(m[1:, 1:], expected)

    def test_cls_row_and_column_open(self):
        m = build_locality_mask(5, 1.0)
        assert np.all(m.mask[0] == 0) and np.all(m.mask[:, 0] == 0)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            build_locality_mask(0, 1.0)
        with pytest.raises(ValueError):
            build_locality_mask(3, -1.0)


def _block(width, seed):
    return _block_params(np.random.default_rng(seed), "b", width)


class TestLatBlock:
    def test_corner_row_under_four_neighbourhood(self):
        rng = np.random.default_rng(0)
        params = _block(8, 0)
        _, _, _, al = lat_block_forward(rng.normal(size=(10, 8)).astype(np.float32), params, "b",
                                        build_locality_mask(3, 1.0))
        row = al[1]  # patch (0, 0)
        assert row[0] > 0
        assert set(np.flatnonzero(row[1:] > 1e-9)) == {0, 1, 3}

    def test_large_radius_equals_global(self):
        g = 4
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(g * g + 1, 8)).astype(np.float32)
        _, _, ag, al = lat_block_forward(tokens, _block(8, 1), "b", build_locality_mask(g, math.sqrt(2) * (g - 1)))
        np.testing.assert_allclose(al, ag, atol=1e-6)

    def test_local_tokens_are_residual_plus_delta(self):
        rng = np.random.default_rng(2)
        tokens = rng.normal(size=(10, 8)).astype(np.float32)
        params = _block(8, 2)
        xg, xl, _, _ = lat_block_forward(tokens, params, "b", build_locality_mask(3, 1.0))
        assert xg.shape == xl.shape == tokens.shape
        assert not np.allclose(xg, xl)

    @given(st.integers(2, 6), st.sampled_from([1.0, 1.5, 2.0]), st.integers(0, 10_000))
    def test_attention_outside_neighbourhood_vanishes(self, g, k, seed):
        rng = np.random.default_rng(seed)
        tokens = (rng.normal(size=(g * g + 1, 8)) * rng.uniform(0.1, 10)).astype(np.float32)
        m = build_locality_mask(g, k)
        _, _, ag, al = lat_block_forward(tokens, _block(8, seed), "b", m)
        patch = al[1:, 1:]
        assert np.all(patch[~m.admissible()[1:, 1:]] <= 1e-9)
        np.testing.assert_allclose(al.sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(ag.sum(-1), 1.0, atol=1e-6)


class TestEncoders:
    def test_text_unit_norm_and_deterministic(self, tiny_text):
        ids = tokenize_template("a photo of a disk")
        z1, z2 = encode_text(ids, tiny_text, 8), encode_text(ids, tiny_text, 8)
        np.testing.assert_array_equal(z1, z2)
        assert abs(np.linalg.norm(z1) - 1) < 1e-6
        z3 = encode_text(np.random.default_rng(0).normal(size=(5, 16)), tiny_text)
        assert abs(np.linalg.norm(z3) - 1) < 1e-6

    def test_text_gradient_of_projection(self, tiny_text):
        rng = np.random.default_rng(5)
        c = rng.normal(size=(16, 1))
        g = dc.Graph(dtype=np.float64)
        prompt = g.param(rng.normal(size=(3, 16)), "prompt")
        z = text_forward(g, bind(g, tiny_text.params), prompt)
        g.mark_output("L", dc.sum(z @ g.constant(c)))
        assert dc.finite_diff_check(g, "L", 1e-4).passed

    def test_text_rejects_bad_shapes(self, tiny_text):
        with pytest.raises(dc.ShapeError):
            encode_text(np.zeros((4, 7)), tiny_text)
        with pytest.raises(ValueError):
            encode_text(np.zeros((17, 16)), tiny_text)

    def test_image_shapes_and_norms(self):
        enc = VisualEncoder(image_size=64, patch_size=8, depth=2, width=16, dim=16).init_params(0)
        img = np.random.default_rng(0).random((64, 64))
        F, taps, cls = encode_image(img, enc)
        assert F.shape == (64, 16) and cls.shape == (16,)
        assert len(taps) == 2 and taps[0].shape == (64, 16)
        np.testing.assert_allclose(np.linalg.norm(F, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(cls), 1.0, atol=1e-6)

    def test_patchify_order(self):
        img = np.arange(16, dtype=np.float32).reshape(4, 4)
        p = patchify(img, 2)
        np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])

    def test_translation_permutes_rows(self):
        # learned absolute positions break translation equivariance by
        # construction, so they are zeroed for this check
        enc = VisualEncoder(image_size=48, patch_size=8, depth=3, width=16, dim=16, k_radius=1.5).init_params(2)
        enc.params["vis.pos"] = np.zeros_like(enc.params["vis.pos"])
        a, b = np.full((48, 48), 0.2, np.float32), np.full((48, 48), 0.2, np.float32)
        a[16:24, 16:24] = 0.9  # patch (2, 2)
        b[16:24, 24:32] = 0.9  # patch (2, 3)
        Fa, _, _ = encode_image(a, enc)
        Fb, _, _ = encode_image(b, enc)
        g = 6
        # CLS is visible from every patch, so only patches with equally many
        # neighbours can carry identical rows
        size = enc.mask().admissible()[1:, 1:].sum(axis=1)
        checked = 0
        for r in range(g):
            for c in range(g - 1):
                i, j = r * g + c, r * g + c + 1
                if size[i] == size[j]:
                    np.testing.assert_allclose(Fb[j], Fa[i], atol=1e-5)
                    checked += 1
        assert checked == 18
        assert not np.allclose(Fa[2 * g + 2], Fa[0])

    def test_prompt_graph_trains_only_prompts(self):
        from aptad.gradcheck import random_case_graph
        g = random_case_graph(np.random.default_rng(0), 8, 2, 3, 0.5)
        assert sorted(g.leaf_names(trainable_only=True)) == ["lap", "lnp"]

    def test_tap_layer_validation(self):
        with pytest.raises(ValueError):
            VisualEncoder(depth=2, tap_layers=(1, 1))
        with pytest.raises(ValueError):
            VisualEncoder(image_size=30, patch_size=8)

    def test_init_is_seeded(self):
        a = TextEncoder(dim=8).init_params(1).params
        b = TextEncoder(dim=8).init_params(1).params
        assert all(np.array_equal(a[k], b[k]) for k in a)
