import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from noisyseg import evaluation
from noisyseg.data.imageio import (
    load_image,
    load_map_raw,
    load_mask,
    read_pixels,
    save_image,
    save_map_raw,
    save_mask,
    validate_png,
    write_pixels,
)
from noisyseg.data.manifest import (
    ATTENTION_TRAIN,
    EVAL,
    FINETUNE_POOL,
    Manifest,
    Record,
    read_pairs,
    write_pairs,
)
from noisyseg.data.synth import SynthSpec, synth_generate
from noisyseg.errors import ImageParseError
from noisyseg.seeding import subseed
from noisyseg.tensor import IGNORE


class TestRasterFiles:
    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_rgb_round_trip(self, tmp_path, suffix):
        px = np.random.default_rng(0).integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
        write_pixels(tmp_path / f"a{suffix}", px)
        np.testing.assert_array_equal(read_pixels(tmp_path / f"a{suffix}"), px)

    def test_single_white_pixel(self, tmp_path):
        save_image(tmp_path / "w.png", np.ones((3, 1, 1)))
        np.testing.assert_array_equal(load_image(tmp_path / "w.png"), np.ones((3, 1, 1)))

    def test_pgm_literal(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pixels(tmp_path / "g.pgm"), [[[0, 255]]])

    def test_save_rounds_to_nearest(self, tmp_path):
        save_image(tmp_path / "r.png", np.array([[[0.0, 0.5 / 255, 1.6 / 255, 2.0]]]))
        np.testing.assert_array_equal(read_pixels(tmp_path / "r.png"), [[[0, 0, 2, 255]]])

    @given(hnp.arrays(np.int64, (4, 5), elements=st.sampled_from([0, 1, 2, 7, IGNORE])))
    def test_mask_round_trip_keeps_ignore(self, tmp_path_factory, mask):
        path = tmp_path_factory.mktemp("m") / "m.png"
        save_mask(path, mask)
        np.testing.assert_array_equal(load_mask(path), mask)

    def test_ignore_stored_as_255(self, tmp_path):
        save_mask(tmp_path / "m.png", np.array([[IGNORE, 3]]))
        np.testing.assert_array_equal(read_pixels(tmp_path / "m.png"), [[[255, 3]]])

    def test_palette_mask_keeps_codes(self, tmp_path):
        mask = np.array([[0, 1], [IGNORE, 4]])
        save_mask(tmp_path / "p.png", mask, palette=True)
        np.testing.assert_array_equal(load_mask(tmp_path / "p.png"), mask)

    def test_bad_mask_codes(self, tmp_path):
        with pytest.raises(ValueError):
            save_mask(tmp_path / "b.png", np.array([[-3]]))

    def test_raw_maps_are_lossless(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(4, 4))
        save_map_raw(tmp_path / "a.npy", a)
        np.testing.assert_array_equal(load_map_raw(tmp_path / "a.npy"), a)


class TestParseErrors:
    def _png(self, tmp_path):
        write_pixels(tmp_path / "x.png", np.zeros((3, 4, 4), dtype=np.uint8))
        return (tmp_path / "x.png").read_bytes()

    def test_truncated_png_reports_offset(self, tmp_path):
        data = self._png(tmp_path)
        with pytest.raises(ImageParseError) as exc:
            validate_png(data[:40])
        assert 8 <= exc.value.offset < 40
        assert "byte" in str(exc.value)

    def test_crc_mismatch(self, tmp_path):
        data = bytearray(self._png(tmp_path))
        data[20] ^= 0xFF  # inside IHDR
        with pytest.raises(ImageParseError) as exc:
            validate_png(bytes(data))
        assert exc.value.offset == 8

    def test_bad_signature(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"hello world")
        with pytest.raises(ImageParseError) as exc:
            read_pixels(tmp_path / "bad.png")
        assert exc.value.offset == 0

    def test_truncated_pnm(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
        with pytest.raises(ImageParseError) as exc:
            read_pixels(tmp_path / "t.ppm")
        assert exc.value.offset == len(b"P6\n2 2\n255\n\x00\x00\x00")

    def test_sixteen_bit_pnm_rejected(self, tmp_path):
        (tmp_path / "d.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ImageParseError):
            read_pixels(tmp_path / "d.pgm")


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    spec = SynthSpec(class_count=4, image_size=64, noise_rate=0.25,
                     counts={ATTENTION_TRAIN: 40, FINETUNE_POOL: 8, EVAL: 8}, seed=11)
    root = tmp_path_factory.mktemp("synth")
    return spec, root, synth_generate(spec, root)


class TestSynth:
    def test_counts_and_splits(self, small_set):
        _, _, m = small_set
        assert len(m.split(ATTENTION_TRAIN)) == 40 and len(m.split(EVAL)) == 8

    def test_exact_noise_rate(self, small_set):
        _, _, m = small_set
        correct = evaluation.tag_correct(m.split(ATTENTION_TRAIN))
        assert correct.sum() == 30
        assert evaluation.tag_purity(m.split(ATTENTION_TRAIN)) == 0.75

    def test_wrong_tags_name_absent_classes(self, small_set):
        _, _, m = small_set
        for r, ok in zip(m.records, evaluation.tag_correct(m)):
            truth = load_mask(m.root / m._truth[r.image])
            assert ok == (r.tag in set(np.unique(truth)))

    def test_images_in_unit_range(self, small_set):
        _, _, m = small_set
        x = m.split(EVAL).load_images()
        assert x.shape == (8, 3, 64, 64) and 0 <= x.min() and x.max() <= 1

    def test_deterministic(self, small_set, tmp_path):
        spec, root, _ = small_set
        synth_generate(spec, tmp_path)
        for name in ("manifest.tsv", "images/eval_00003.png", "truth/attention-train_00010.png"):
            assert (tmp_path / name).read_bytes() == (root / name).read_bytes()


class TestManifest:
    def test_round_trip_and_rebase(self, small_set, tmp_path):
        _, _, m = small_set
        m.write(tmp_path / "sub" / "copy.tsv")
        back = Manifest.read(tmp_path / "sub" / "copy.tsv")
        assert back.records != m.records  # paths now relative to the new directory
        for a, b in zip(m.records, back.records):
            assert (m.root / a.image).resolve() == (back.root / b.image).resolve()
            assert a.tag == b.tag and a.split == b.split
        assert evaluation.tag_purity(back) == evaluation.tag_purity(m)

    def test_without_truth_hides_truth(self, small_set):
        _, _, m = small_set
        bare = m.without_truth()
        assert not bare.has_truth
        assert evaluation.tag_purity(bare) is None

    def test_header_required(self, tmp_path):
        (tmp_path / "m.tsv").write_text("images/a.png\t1\teval\t-\n")
        with pytest.raises(ValueError):
            Manifest.read(tmp_path / "m.tsv")

    def test_duplicates_rejected(self, tmp_path):
        (tmp_path / "m.tsv").write_text("noisyseg-manifest\t1\na.png\t1\teval\t-\na.png\t2\teval\t-\n")
        with pytest.raises(ValueError):
            Manifest.read(tmp_path / "m.tsv")

    def test_bad_tag_and_split(self):
        with pytest.raises(ValueError):
            Manifest(".", [Record("a", 0, EVAL)])
        with pytest.raises(ValueError):
            Manifest(".", [Record("a", 1, "train")])

    def test_pairs_round_trip(self, tmp_path):
        (tmp_path / "i.png").write_bytes(b"")
        pairs = [(tmp_path / "i.png", tmp_path / "masks" / "i.png")]
        write_pairs(tmp_path / "pairs.tsv", pairs)
        back = read_pairs(tmp_path / "pairs.tsv")
        assert [(a.resolve(), b.resolve()) for a, b in back] == [(a.resolve(), b.resolve()) for a, b in pairs]


class TestSeeding:
    def test_names_separate_streams(self):
        assert subseed(0, "a") != subseed(0, "b")
        assert subseed(0, "a") != subseed(1, "a")
        assert subseed(3, "x", 2) == subseed(3, "x", 2)
