import json

import numpy as np
import pytest

from linequant import dataset
from linequant.dataset import (
    Alphabet,
    AugmentationConfig,
    BOS_ID,
    CorpusSpec,
    EOS_ID,
    GlyphAtlas,
    PAD_ID,
    RenderJitter,
    augment,
    batch,
    make_corpus,
    normalize_height,
    read_pgm,
    render_line,
    write_pgm,
)
from linequant.errors import DataError, LabelError, RenderingError


@pytest.fixture(scope="module")
def atlas():
    return GlyphAtlas.synthetic("abcdef", seed=11)


class TestAlphabet:
    def test_round_trip_random_strings(self):
        alpha = Alphabet("abcdefghij")
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 20))
            text = "".join(alpha.chars[int(rng.integers(0, 10))] for _ in range(n))
            assert alpha.decode(alpha.encode(text)) == text

    def test_specials_never_decoded(self):
        alpha = Alphabet("xy")
        assert alpha.decode([PAD_ID, BOS_ID, EOS_ID, 3, 4]) == "xy"

    def test_reserved_ids(self):
        alpha = Alphabet("ab")
        assert alpha.encode("ab") == [3, 4]
        assert alpha.vocab_size == 5

    def test_unknown_char(self):
        with pytest.raises(LabelError) as err:
            Alphabet("ab").encode("az")
        assert "'z'" in str(err.value)

    def test_duplicate_chars_rejected(self):
        with pytest.raises(DataError):
            Alphabet("aa")


class TestRenderLine:
    def test_deterministic_per_seed(self, atlas):
        a = render_line("abc", atlas, rng=np.random.default_rng(5))
        b = render_line("abc", atlas, rng=np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_monospace_width_arithmetic(self, atlas):
        img = render_line("ab", atlas)
        assert img.shape == (48, 48)  # 2 glyphs x 24 px -> 6 patches at stride 8
        assert img.shape[1] // 8 == 6

    def test_empty_text_rejected(self, atlas):
        with pytest.raises(RenderingError):
            render_line("", atlas)

    def test_unknown_glyph_names_character(self, atlas):
        with pytest.raises(RenderingError) as err:
            render_line("aZ", atlas)
        assert "'Z'" in str(err.value)

    def test_values_in_unit_interval(self, atlas):
        img = render_line("fedcba", atlas)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_jitter_changes_pixels_but_stays_deterministic(self):
        jatlas = GlyphAtlas.synthetic("ab", seed=3,
                                      jitter=RenderJitter(slant=0.1, spacing=2,
                                                          thickness=0.5))
        a = render_line("ab", jatlas, rng=np.random.default_rng(1))
        b = render_line("ab", jatlas, rng=np.random.default_rng(1))
        c = render_line("ab", jatlas, rng=np.random.default_rng(2))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestNormalizeHeight:
    def test_identity_at_target(self):
        img = np.random.default_rng(1).uniform(size=(48, 64)).astype(np.float32)
        assert normalize_height(img) is img

    def test_aspect_ratio_arithmetic(self):
        img = np.zeros((96, 200), dtype=np.float32)
        out = normalize_height(img)
        assert out.shape == (48, 100)

    def test_minimum_width_clamp(self):
        img = np.zeros((24, 4), dtype=np.float32)
        out = normalize_height(img)
        assert out.shape == (48, 8)

    def test_bilinear_constant_preserved(self):
        img = np.full((96, 80), 0.75, dtype=np.float32)
        out = normalize_height(img)
        np.testing.assert_allclose(out, 0.75, atol=1e-6)


class TestAugment:
    def test_identity_config_is_byte_identical(self, atlas):
        img = render_line("abc", atlas)
        out = augment(img, AugmentationConfig.identity(), np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_same_seed_deterministic(self, atlas):
        img = render_line("abc", atlas)
        cfg = AugmentationConfig.default()
        a = augment(img, cfg, np.random.default_rng(7))
        b = augment(img, cfg, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_noise_bound(self, atlas):
        img = render_line("abc", atlas)
        sigma = 0.1
        cfg = AugmentationConfig(noise_sigma=sigma)
        out = augment(img, cfg, np.random.default_rng(3))
        assert np.abs(out - np.clip(img, 0, 1)).max() <= 5 * sigma

    def test_output_clamped(self, atlas):
        img = render_line("abc", atlas)
        out = augment(img, AugmentationConfig(noise_sigma=0.5, brightness=0.5),
                      np.random.default_rng(4))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_negative_magnitude_rejected(self):
        with pytest.raises(DataError):
            AugmentationConfig(noise_sigma=-0.1)


class TestPgm:
    def test_round_trip(self, tmp_path, atlas):
        img = render_line("ab", atlas)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        # storage quantizes to 8 bits
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
        write_pgm(tmp_path / "y.pgm", back)
        assert (tmp_path / "x.pgm").read_bytes() == (tmp_path / "y.pgm").read_bytes()

    def test_header_format(self, tmp_path):
        path = tmp_path / "h.pgm"
        write_pgm(path, np.zeros((48, 16), dtype=np.float32))
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n16 48\n255\n")
        assert len(raw) == len(b"P5\n16 48\n255\n") + 48 * 16


class TestMakeCorpus:
    def test_empty_spec(self, tmp_path):
        spec = CorpusSpec(alphabet="ab", train=0, val=0, test=0)
        manifest = make_corpus(spec, tmp_path / "c")
        assert manifest.read_text() == ""
        assert list((tmp_path / "c" / "images").iterdir()) == []

    def test_regeneration_is_bit_identical(self, tmp_path):
        spec = CorpusSpec(alphabet="abcd", train=20, val=5, seed=7)
        m1 = make_corpus(spec, tmp_path / "c1")
        m2 = make_corpus(spec, tmp_path / "c2")
        assert dataset.manifest_hash(m1) == dataset.manifest_hash(m2)
        assert m1.read_bytes() == m2.read_bytes()
        for rec in (json.loads(line) for line in m1.read_text().splitlines()):
            b1 = (tmp_path / "c1" / rec["image"]).read_bytes()
            b2 = (tmp_path / "c2" / rec["image"]).read_bytes()
            assert b1 == b2

    def test_split_counts_and_unique_ids(self, tmp_path):
        spec = CorpusSpec(alphabet="ab", train=50, val=10, test=5, seed=1)
        manifest = make_corpus(spec, tmp_path / "c")
        records = [json.loads(line) for line in manifest.read_text().splitlines()]
        assert len(records) == 65
        assert len({r["id"] for r in records}) == 65
        by_split = {s: sum(1 for r in records if r["split"] == s)
                    for s in ("train", "val", "test")}
        assert by_split == {"train": 50, "val": 10, "test": 5}

    def test_every_image_well_formed(self, tmp_path):
        spec = CorpusSpec(alphabet="abc", train=15, seed=2,
                          jitter=RenderJitter(slant=0.08, spacing=2, thickness=0.4))
        manifest = make_corpus(spec, tmp_path / "c")
        samples = dataset.load_manifest(manifest)
        for s in samples:
            assert s.image.shape[0] == 48
            assert s.image.shape[1] >= 8
            assert s.text

    def test_manifest_is_jsonl_with_expected_keys(self, tmp_path):
        spec = CorpusSpec(alphabet="ab", train=3)
        manifest = make_corpus(spec, tmp_path / "c")
        for line in manifest.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            assert set(rec) == {"id", "image", "text", "split"}


class TestBatch:
    def test_single_sample_all_real(self, atlas):
        img = render_line("abc", atlas)  # width 72 -> hmm, 3 glyphs x 24 = 72
        sample = dataset.LineSample("s", img[:, :80] if img.shape[1] >= 80 else img,
                                    "abc", "train")
        alpha = Alphabet("abcdef")
        out = batch([sample], alpha)
        assert out.images.shape[3] == sample.image.shape[1]
        assert out.patch_mask.all()

    def test_mixed_widths_padding_arithmetic(self, atlas):
        alpha = Alphabet("abcdef")
        rng = np.random.default_rng(0)
        narrow = dataset.LineSample("n", np.zeros((48, 80), dtype=np.float32), "a", "train")
        wide = dataset.LineSample("w", np.zeros((48, 160), dtype=np.float32), "ab", "train")
        out = batch([narrow, wide], alpha, rng=rng)
        assert out.images.shape == (2, 1, 48, 160)
        assert out.patch_mask.shape == (2, 20)
        assert out.patch_mask[0].sum() == 10 and out.patch_mask[1].sum() == 20
        assert (out.images[0, 0, :, 80:] == 0).all()

    def test_target_framing(self, atlas):
        alpha = Alphabet("abcdef")
        sample = dataset.LineSample("s", render_line("a", atlas), "a", "train")
        out = batch([sample], alpha)
        assert out.target_ids.tolist() == [[BOS_ID, alpha.encode("a")[0], EOS_ID]]
        assert out.target_mask.all()

    def test_out_of_alphabet_transcription(self, atlas):
        sample = dataset.LineSample("s", render_line("a", atlas), "a", "train")
        with pytest.raises(LabelError):
            batch([sample], Alphabet("xy"))

    def test_empty_batch_rejected(self):
        with pytest.raises(DataError):
            batch([], Alphabet("ab"))
