import math

import numpy as np
import pytest

from aptad import diffcore as dc
from aptad.config import RunConfig
from aptad.data import SyntheticSpec, gen_pretrain_set
from aptad.encoders import TextEncoder, VisualEncoder
from aptad.pipeline import build_backbone
from aptad.pretrain import (PretrainConfig, alignment_gap, caption_ids, class_phrasings, info_nce, patch_labels,
                            pretrain_contrastive)


class TestInfoNCE:
    def test_uniform_logits_give_log_batch(self):
        g = dc.Graph(dtype=np.float64)
        zeros = g.constant(np.zeros((16, 4)))
        loss = info_nce(g, zeros, zeros, g.constant(np.zeros(1)), list(range(16)))
        np.testing.assert_allclose(loss.data[0], math.log(16), rtol=1e-12)

    def test_shared_keys_lower_the_uniform_loss(self):
        g = dc.Graph(dtype=np.float64)
        zeros = g.constant(np.zeros((4, 4)))
        loss = info_nce(g, zeros, zeros, g.constant(np.zeros(1)), ["a", "a", "b", "b"])
        np.testing.assert_allclose(loss.data[0], math.log(4), rtol=1e-12)

    def test_perfect_alignment_beats_uniform(self):
        g = dc.Graph(dtype=np.float64)
        e = g.constant(np.eye(4))
        loss = info_nce(g, e, e, g.constant(np.array([math.log(100.0)])), list(range(4)))
        assert loss.data[0] < 1e-3

    def test_gradient(self):
        rng = np.random.default_rng(0)
        g = dc.Graph(dtype=np.float64)
        a = g.param(rng.normal(size=(5, 3)), "a")
        b = g.param(rng.normal(size=(5, 3)), "b")
        g.mark_output("L", info_nce(g, a, b, g.constant(np.array([0.5])), [0, 1, 1, 2, 3]))
        assert dc.finite_diff_check(g, "L", 1e-4).passed


class TestCaptions:
    def test_too_long(self):
        with pytest.raises(ValueError):
            caption_ids(["a photo of a disk with a defect"], 4, TextEncoder(8))

    def test_padding(self):
        ids = caption_ids(["a disk"], 5, TextEncoder(8))
        assert ids.shape == (1, 5) and ids[0, 2:].tolist() == [0, 0, 0]

    def test_phrasings(self):
        assert "a photo of a disk" in class_phrasings("disk", False)
        assert all("defect" in p for p in class_phrasings("square", True))
        assert class_phrasings("none", True) == class_phrasings("none", False)

    def test_patch_labels(self):
        samples = gen_pretrain_set(12, 1, SyntheticSpec(image_size=32))
        labels, texts, member = patch_labels(samples, 8)
        assert labels.shape == (12, 16)
        assert member.shape[0] == len(texts)
        np.testing.assert_array_equal(member.sum(axis=1) >= 1, True)
        for s, row in zip(samples, labels):
            if s.object_kind == "none":
                assert not row.any()


def _tiny_encoders(seed):
    vis = VisualEncoder(image_size=32, patch_size=8, depth=2, width=8, dim=8).init_params(seed)
    txt = TextEncoder(8, depth=1).init_params(seed + 1)
    return vis, txt


class TestPretrain:
    def test_seeded_and_deterministic(self):
        pairs = gen_pretrain_set(32, 0, SyntheticSpec(image_size=32))
        runs = []
        for _ in range(2):
            vis, txt = _tiny_encoders(5)
            res = pretrain_contrastive(pairs, vis, txt, PretrainConfig(steps=3, batch=8, seed=2))
            runs.append((res, vis))
        assert runs[0][0].losses == runs[1][0].losses
        for k in runs[0][1].params:
            np.testing.assert_array_equal(runs[0][1].params[k], runs[1][1].params[k])
        assert len(runs[0][0].losses) == 3 and runs[0][0].tau > 0

    def test_embeddings_frozen_by_default(self):
        pairs = gen_pretrain_set(16, 0, SyntheticSpec(image_size=32))
        vis, txt = _tiny_encoders(6)
        before = txt.params["txt.embed"].copy()
        pretrain_contrastive(pairs, vis, txt, PretrainConfig(steps=2, batch=8))
        np.testing.assert_array_equal(txt.params["txt.embed"], before)

    def test_default_backbone_aligns_held_out_pairs(self):
        bb = build_backbone(RunConfig())
        held = gen_pretrain_set(96, 777, SyntheticSpec(image_size=64))
        gap = alignment_gap(np.stack([s.image for s in held]), [s.caption for s in held], bb.vis, bb.txt)
        assert gap > 0.1
        assert np.mean(bb.losses[-20:]) < np.mean(bb.losses[:20])
