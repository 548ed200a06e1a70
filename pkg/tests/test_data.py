import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aptad.data import (MAX_DEFECT_FRAC, MIN_DEFECT_FRAC, PGMError, PlacementError, SyntheticSpec, caption_for,
                        gen_dataset, gen_pretrain_set, read_dataset, read_pgm, render_sample, to_u8,
                        write_dataset, write_pgm)


class TestGenDataset:
    def test_sizes_and_balance(self):
        split = gen_dataset(SyntheticSpec(), 1, 50, seed=0)
        assert len(split.train) == 1 and len(split.test) == 50
        assert sum(s.label for s in split.test) == 25
        assert all(s.label == 0 for s in split.train)
        assert split.train[0].image.shape == (64, 64)

    def test_deterministic(self):
        a = gen_dataset(SyntheticSpec(), 2, 10, seed=3)
        b = gen_dataset(SyntheticSpec(), 2, 10, seed=3)
        for x, y in zip(a.train + a.test, b.train + b.test):
            np.testing.assert_array_equal(x.image, y.image)
            np.testing.assert_array_equal(x.mask, y.mask)

    def test_seeds_differ(self):
        a = gen_dataset(SyntheticSpec(), 1, 2, seed=0)
        b = gen_dataset(SyntheticSpec(), 1, 2, seed=1)
        assert not np.array_equal(a.train[0].image, b.train[0].image)

    @given(st.integers(0, 10_000), st.sampled_from(["disk", "square"]))
    def test_masks_inside_object_with_bounded_area(self, seed, kind):
        spec = SyntheticSpec(object_kind=kind)
        split = gen_dataset(spec, 1, 4, seed=seed)
        for s in split.test:
            if s.label:
                frac = s.mask.sum() / s.mask.size
                assert MIN_DEFECT_FRAC <= frac <= MAX_DEFECT_FRAC
                assert not np.any(s.mask & (1 - s.object_mask))
            else:
                assert not s.mask.any()
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_captions(self):
        assert caption_for("disk", False) == "a photo of a disk"
        assert caption_for("square", True) == "a photo of a square with a defect"
        assert caption_for("none", False) == "a photo of the background"

    def test_defect_changes_pixels(self):
        rng = np.random.default_rng(0)
        s = render_sample(SyntheticSpec(defect_kinds=("bright-spot",), pixel_noise=0), rng, True)
        assert s.defect_kind == "bright-spot"
        assert s.image[s.mask.astype(bool)].mean() > s.image[(s.object_mask & ~s.mask.astype(bool)).astype(bool)].mean()

    def test_placement_cap(self):
        spec = SyntheticSpec(object_size=(3.0, 3.5), spot_radius=(5.0, 6.0), defect_kinds=("bright-spot",))
        with pytest.raises(PlacementError):
            render_sample(spec, np.random.default_rng(0), True)

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(object_kind="triangle")
        with pytest.raises(ValueError):
            SyntheticSpec(defect_kinds=("crack",))
        with pytest.raises(ValueError):
            gen_dataset(SyntheticSpec(), 1, 3)
        with pytest.raises(ValueError):
            gen_dataset(SyntheticSpec(), 0, 2)

    def test_pretrain_set(self):
        pairs = gen_pretrain_set(60, 0)
        kinds = {s.object_kind for s in pairs}
        assert kinds == {"disk", "square", "none"}
        assert not any(s.label for s in pairs if s.object_kind == "none")
        assert any(s.label for s in pairs)


class TestPGM:
    def test_round_trip(self, tmp_path):
        a = np.random.default_rng(0).integers(0, 256, (5, 7), dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", a)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), a)
        assert (tmp_path / "a.pgm").read_bytes()[:11] == b"P5\n7 5\n255\n"

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[1, 2]])

    @pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n2 2", b"P5\n2 2\n65535\n",
                                      b"P5\nx 2\n255\n\x00"])
    def test_malformed(self, tmp_path, data):
        (tmp_path / "bad.pgm").write_bytes(data)
        with pytest.raises(PGMError):
            read_pgm(tmp_path / "bad.pgm")

    def test_to_u8(self):
        np.testing.assert_array_equal(to_u8(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])), [0, 0, 128, 255, 255])


class TestDatasetDirectory:
    def test_layout_and_round_trip(self, tmp_path):
        split = gen_dataset(SyntheticSpec(image_size=32), 2, 6, seed=1)
        write_dataset(split, tmp_path / "d")
        names = sorted(p.name for p in (tmp_path / "d" / "images").iterdir())
        assert len(names) == 8
        assert len(list((tmp_path / "d" / "masks").iterdir())) == 3
        lines = (tmp_path / "d" / "split.txt").read_text().splitlines()
        assert lines[0] == "train train_000.pgm 0"
        back = read_dataset(tmp_path / "d")
        assert [s.label for s in back.test] == [s.label for s in split.test]
        for a, b in zip(back.test, split.test):
            np.testing.assert_array_equal(a.mask, b.mask)
            np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-7)
        assert back.captions == split.captions

    def test_missing_parent(self, tmp_path):
        split = gen_dataset(SyntheticSpec(image_size=32), 1, 2, seed=1)
        with pytest.raises(FileNotFoundError):
            write_dataset(split, tmp_path / "nope" / "d")

    def test_bad_split_file(self, tmp_path):
        split = gen_dataset(SyntheticSpec(image_size=32), 1, 2, seed=1)
        write_dataset(split, tmp_path / "d")
        (tmp_path / "d" / "split.txt").write_text("train a.pgm 0\nvalid b.pgm 1\ntest c.pgm 0\n")
        with pytest.raises(OSError):
            read_dataset(tmp_path / "d")
